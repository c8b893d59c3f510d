"""Experience replay memory: FIFO eviction, uniform resampling, NDJSON spill.

Interactions collected under older policy parameters stay valid reconstruction
targets, so the encoder-decoder trains on draws from everything the buffer
still holds. Storage is a ring buffer; eviction is strictly oldest-first.
Sampling is uniform with replacement from the live contents and consumes
only the generator passed in, never global state.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ContractViolation
from .mdp import InteractionRecord

DEFAULT_CAPACITY = 1_000_000


class ReplayMemory:
    """Fixed-capacity interaction store."""

    def __init__(self, capacity: int = DEFAULT_CAPACITY):
        if capacity < 1:
            raise ContractViolation(f"capacity must be >= 1, got {capacity}")
        self.capacity = int(capacity)
        self._items: list[InteractionRecord] = []
        self._next = 0
        self.total_pushed = 0

    def __len__(self) -> int:
        return len(self._items)

    def push(self, record: InteractionRecord) -> None:
        if not isinstance(record, InteractionRecord):
            raise ContractViolation("replay memory stores InteractionRecord objects")
        if len(self._items) < self.capacity:
            self._items.append(record)
        else:
            self._items[self._next] = record
            self._next = (self._next + 1) % self.capacity
        self.total_pushed += 1

    def extend(self, records) -> None:
        for r in records:
            self.push(r)

    def sample(self, batch: int, rng: np.random.Generator) -> list[InteractionRecord]:
        """Draw ``batch`` records uniformly with replacement."""
        if batch < 1:
            raise ContractViolation(f"batch must be >= 1, got {batch}")
        if not self._items:
            raise ContractViolation("cannot sample from an empty replay memory")
        idx = rng.integers(0, len(self._items), size=batch)
        return [self._items[i] for i in idx]

    def records_in_order(self) -> list[InteractionRecord]:
        """Live contents, oldest first."""
        return self._items[self._next :] + self._items[: self._next]

    def save_ndjson(self, path) -> None:
        """One JSON object per line, oldest record first."""
        with Path(path).open("w", encoding="utf-8") as fh:
            for record in self.records_in_order():
                fh.write(json.dumps(record.to_json_dict()) + "\n")

    @classmethod
    def load_ndjson(cls, path, capacity: int = DEFAULT_CAPACITY) -> "ReplayMemory":
        memory = cls(capacity=capacity)
        with Path(path).open("r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    memory.push(InteractionRecord.from_json_dict(json.loads(line)))
        return memory
