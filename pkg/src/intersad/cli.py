"""Command-line front end: train, eval, reproduce, sweep.

Configuration comes from an optional TOML file with sections [fleet],
[train], [eval], [sweep]; command-line flags override file values, and
every run echoes the fully resolved settings next to its outputs so a
result can always be traced back to its exact inputs.

Exit codes: 0 on success, 1 when a reproduce check fails or training
diverges, 2 on usage errors (bad flags, bad config, refused evaluation).
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import asdict, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # 3.10 fallback, same API
    import tomli as tomllib

from .errors import CheckpointError, ConfigError, ContractViolation, NumericError
from .experiments import (
    EXPERIMENTS,
    RunCache,
    SWEEP_PARAMS,
    noise_study_config,
    run_experiment,
    run_sweep,
)
from .fleet import RewardFleetConfig, TransitionFleetConfig
from .trainer import (
    SCORER_NAMES,
    SPACES,
    TrainConfig,
    default_reward_config,
    default_transition_config,
    evaluate,
    load_checkpoint,
    make_fleet,
    save_checkpoint,
    train,
)

_SECTIONS = ("fleet", "train", "eval", "sweep")
_EVAL_KEYS = (
    "scorer",
    "space",
    "observation_noise",
    "negative_control",
    "eval_seed",
    "detector_seed",
)
_SWEEP_KEYS = ("param", "values")
_TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig) if f.name != "fleet")


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        with open(p, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {p}: {exc}") from exc
    unknown = sorted(set(data) - set(_SECTIONS))
    if unknown:
        raise ConfigError(
            f"unknown config sections {unknown}; expected {list(_SECTIONS)}"
        )
    return data


def _check_keys(section: str, given: dict, allowed) -> None:
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {unknown}")


def _resolve_train_config(file_cfg: dict, seed_flag: int | None) -> TrainConfig:
    """Merge desk defaults, the [fleet]/[train] sections, and the seed flag."""
    train_kv = dict(file_cfg.get("train", {}))
    _check_keys("train", train_kv, _TRAIN_KEYS)
    mode = train_kv.pop("mode", "transition")
    if mode not in ("transition", "reward"):
        raise ConfigError(f"mode must be 'transition' or 'reward', got {mode!r}")
    seed = int(train_kv.pop("seed", 0)) if seed_flag is None else int(seed_flag)
    train_kv.pop("seed", None)

    fleet_cls = TransitionFleetConfig if mode == "transition" else RewardFleetConfig
    fleet_kv = dict(file_cfg.get("fleet", {}))
    _check_keys("fleet", fleet_kv, (f.name for f in fields(fleet_cls)))
    fleet_kv.setdefault("shared_seed", seed)
    fleet_kv.setdefault("member_seed", seed)
    fleet = fleet_cls(**fleet_kv)

    for key in ("trace_spaces", "trace_scorers"):
        if key in train_kv:
            train_kv[key] = tuple(train_kv[key])
    factory = default_transition_config if mode == "transition" else default_reward_config
    return factory(seed, fleet=fleet, **train_kv)


def _resolve_eval_settings(file_cfg: dict, args) -> dict:
    eval_kv = dict(file_cfg.get("eval", {}))
    _check_keys("eval", eval_kv, _EVAL_KEYS)
    settings = {
        "scorer": "iforest",
        "space": "trajectory",
        "observation_noise": 0.0,
        "negative_control": False,
        "eval_seed": 0 if args.seed is None else int(args.seed),
        "detector_seed": 0,
    }
    settings.update(eval_kv)
    if getattr(args, "scorer", None) is not None:
        settings["scorer"] = args.scorer
    if getattr(args, "space", None) is not None:
        settings["space"] = args.space
    if getattr(args, "negative_control", False):
        settings["negative_control"] = True
    return settings


# ---------------------------------------------------------------------------
# resolved-config echo


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise ConfigError(f"cannot echo config value of type {type(v).__name__}")


def _write_resolved_config(path: Path, sections: dict) -> None:
    lines = []
    for name in _SECTIONS:
        if name not in sections:
            continue
        lines.append(f"[{name}]")
        for key, value in sections[name].items():
            lines.append(f"{key} = {_toml_value(value)}")
        lines.append("")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _train_sections(cfg: TrainConfig) -> dict:
    train_kv = {f.name: getattr(cfg, f.name) for f in fields(cfg) if f.name != "fleet"}
    return {"fleet": asdict(cfg.fleet), "train": train_kv}


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    file_cfg = _load_config_file(args.config)
    cfg = _resolve_train_config(file_cfg, args.seed)
    out = _out_dir(args)
    result = train(cfg)
    result.trace.to_csv(out / "trace.csv")
    save_checkpoint(result.policy, result.embedder, out)
    sections = _train_sections(cfg)
    sections["eval"] = _resolve_eval_settings(file_cfg, args)
    _write_resolved_config(out / "resolved_config.toml", sections)
    final = result.trace.rows[-1]
    print(f"trained {cfg.iterations} iterations, final L_f={final.l_f!r}")
    print(f"wrote trace.csv, policy.json, embedder.json, resolved_config.toml to {out}")
    return 0


def cmd_eval(args) -> int:
    file_cfg = _load_config_file(args.config)
    policy, embedder = load_checkpoint(Path(args.checkpoint))
    settings = _resolve_eval_settings(file_cfg, args)

    seed = 0 if args.seed is None else int(args.seed)
    fleet_cls = TransitionFleetConfig if embedder.mode == "transition" else RewardFleetConfig
    fleet_kv = dict(file_cfg.get("fleet", {}))
    _check_keys("fleet", fleet_kv, (f.name for f in fields(fleet_cls)))
    fleet_kv.setdefault("shared_seed", seed)
    fleet_kv.setdefault("member_seed", seed)
    if embedder.mode == "reward":
        fleet_kv.setdefault("horizon", embedder.horizon)
    fleet_cfg = fleet_cls(**fleet_kv)

    report = evaluate(
        policy,
        embedder,
        make_fleet(fleet_cfg),
        scorer=settings["scorer"],
        space=settings["space"],
        observation_noise=float(settings["observation_noise"]),
        eval_seed=int(settings["eval_seed"]),
        detector_seed=int(settings["detector_seed"]),
        negative_control=bool(settings["negative_control"]),
    )
    out = _out_dir(args)
    lines = ["system_id,label,score"]
    for i, (label, score) in enumerate(zip(report.labels, report.scores)):
        lines.append(f"{i},{int(label)},{float(score)!r}")
    (out / "scores.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _write_resolved_config(
        out / "resolved_config.toml", {"fleet": asdict(fleet_cfg), "eval": settings}
    )
    if report.negative_control:
        print("negative control: embedding space on a reward-mode model")
    print(f"auc={report.auc!r}")
    return 0


def cmd_reproduce(args) -> int:
    out = _out_dir(args)
    base_seed = 0 if args.seed is None else int(args.seed)
    result = run_experiment(args.figure, cache=RunCache(), base_seed=base_seed)
    result.to_csv(out / f"{args.figure}.csv")
    for line in result.summary_lines():
        print(line)
    print(f"wrote {out / (args.figure + '.csv')}")
    return 0 if result.passed else 1


def _parse_values(raw, param: str) -> tuple:
    if isinstance(raw, str):
        raw = [v for v in (part.strip() for part in raw.split(",")) if v]
    if not raw:
        raise ConfigError("sweep needs a non-empty values list")
    cast = float if param == "sigma" else int
    try:
        return tuple(cast(v) for v in raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad sweep value in {raw!r}: {exc}") from exc


def cmd_sweep(args) -> int:
    file_cfg = _load_config_file(args.config)
    sweep_kv = dict(file_cfg.get("sweep", {}))
    _check_keys("sweep", sweep_kv, _SWEEP_KEYS)
    param = args.param if args.param is not None else sweep_kv.get("param")
    if param is None:
        raise ConfigError(f"sweep needs a parameter, one of {list(SWEEP_PARAMS)}")
    raw_values = args.values if args.values is not None else sweep_kv.get("values", [])
    values = _parse_values(raw_values, param)

    base_seed = 0 if args.seed is None else int(args.seed)
    if "train" in file_cfg or "fleet" in file_cfg:
        base_cfg = _resolve_train_config(file_cfg, args.seed)
    elif param == "sigma":
        base_cfg = noise_study_config(base_seed)
    else:
        base_cfg = default_transition_config(base_seed)

    result = run_sweep(param, values, base_seed=base_seed, base_config=base_cfg)
    out = _out_dir(args)
    result.to_csv(out / "sweep.csv")
    sections = _train_sections(base_cfg)
    sections["sweep"] = {"param": param, "values": list(values)}
    _write_resolved_config(out / "resolved_config.toml", sections)
    print(f"wrote {out / 'sweep.csv'} ({len(result.rows)} rows)")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="intersad",
        description="Train, evaluate, and reproduce interactive system-wise"
        " anomaly detection experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a policy and embedder on a synthetic fleet")
    p.add_argument("--config", help="TOML config with [fleet] and [train] sections")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="run seed (overrides the config file)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a fleet with a trained checkpoint")
    p.add_argument("checkpoint", help="directory holding policy.json and embedder.json")
    p.add_argument("--config", help="TOML config with [fleet] and [eval] sections")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="fleet seed (overrides the config file)")
    p.add_argument("--scorer", choices=SCORER_NAMES + ("meanreward",))
    p.add_argument("--space", choices=SPACES)
    p.add_argument(
        "--negative-control",
        action="store_true",
        dest="negative_control",
        help="run a normally refused space/mode combination as a labeled control",
    )
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("reproduce", help="run one named experiment analog")
    p.add_argument("figure", choices=sorted(EXPERIMENTS))
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="base seed for the experiment cells")
    p.set_defaults(func=cmd_reproduce)

    p = sub.add_parser("sweep", help="train and evaluate across one hyperparameter")
    p.add_argument("--param", choices=SWEEP_PARAMS)
    p.add_argument("--values", help="comma-separated list, e.g. 2,4,6,8,10")
    p.add_argument("--config", help="TOML config; [sweep] may hold param and values")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="base seed shared by all sweep points")
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, ContractViolation) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
