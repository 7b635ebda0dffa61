"""Command-line entry point.

One JSON config document drives everything; precedence is CLI flag >
config file > built-in default. Unknown config keys are rejected by
name. Every run directory receives the effective config echo
(config.json) and a status marker that survives Ctrl-C, and re-running
from the echoed config reproduces the run bit-exactly.

Exit codes: 0 success, 2 config error, 3 data error, 4 runtime error.

The built-in defaults are the desk-scale profile (32x32 images, small
backbone, 10 epochs); they train in CPU-minutes. The dataclass defaults
in network/harness keep the full-scale values for reference.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from contextlib import contextmanager
from pathlib import Path

from .datagen import ATTACK_TYPES, BONAFIDE, GeneratorSpec, generate, oracle_separability
from .datasets import load_dataset, make_grandtest, make_loo, save_dataset, validate_split
from .errors import CmpadError, ConfigError, DataError
from .harness import (
    TrainConfig,
    by_id,
    dump_score_distributions,
    emit_loss_curves,
    evaluate,
    run_cross_dataset,
    run_gamma_sweep,
    run_loo,
    run_single_channel_study,
    train,
)
from .losses import LossParams
from .network import NetworkConfig, OptimizerConfig, load_checkpoint, save_checkpoint

DEFAULT_CONFIG: dict = {
    "out_root": "runs",
    "generator": {
        "image_size": 32,
        "n_identities": 12,
        "samples_per_identity": 12,
        "attack_types": list(ATTACK_TYPES),
        "attack_strength": 0.5,
        "noise_sigma": 0.05,
        "channels_a": 3,
        "channels_b": 1,
        "seed": 7,
    },
    "network": {
        "input_height": 32,
        "input_width": 32,
        "channels_a": 3,
        "channels_b": 1,
        "blocks_per_branch": 3,
        "base_filters": 8,
        "embedding_dim": 16,
        "seed": 0,
    },
    "optimizer": {
        "learning_rate": 3e-3,
        "weight_decay": 1e-5,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
    },
    "loss": {
        "alpha_bonafide": 1.0,
        "alpha_attack": 1.0,
        "gamma": 3.0,
        "mix_lambda": 0.5,
        "detach_weight": False,
    },
    "train": {"epochs": 10, "batch_size": 32, "hflip_prob": 0.5, "seed": 0},
    "protocol": {"ratios": [0.5, 0.25, 0.25], "seed": 0, "bpcer_target": 0.01},
}


def _merge_config(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        dotted = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key: {dotted}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {dotted} must be a mapping")
            out[key] = _merge_config(base[key], value, f"{dotted}.")
        else:
            out[key] = value
    return out


def load_effective_config(config_path: str | None, overrides: dict) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            file_cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        cfg = _merge_config(cfg, file_cfg)
    cfg = _merge_config(cfg, overrides)
    return cfg


def build_generator_spec(cfg: dict) -> GeneratorSpec:
    g = cfg["generator"]
    try:
        return GeneratorSpec(
            image_size=g["image_size"],
            n_identities=g["n_identities"],
            samples_per_identity=g["samples_per_identity"],
            attack_types=tuple(g["attack_types"]),
            attack_strength=g["attack_strength"],
            noise_sigma=g["noise_sigma"],
            channels_a=g["channels_a"],
            channels_b=g["channels_b"],
            seed=g["seed"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def build_train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig(
            network=NetworkConfig(**cfg["network"]),
            optimizer=OptimizerConfig(**cfg["optimizer"]),
            loss=LossParams(**cfg["loss"]),
            **cfg["train"],
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


@contextmanager
def run_directory(path: Path, effective_cfg: dict, force: bool):
    if path.exists() and any(path.iterdir()) and not force:
        raise DataError(f"run directory {path} is not empty (use --force)")
    path.mkdir(parents=True, exist_ok=True)
    (path / "config.json").write_text(
        json.dumps(effective_cfg, indent=2, sort_keys=True) + "\n"
    )
    status = path / "status"
    status.write_text("running\n")
    try:
        yield path
    except KeyboardInterrupt:
        status.write_text("interrupted\n")
        raise
    except BaseException as exc:
        status.write_text(f"failed: {type(exc).__name__}\n")
        raise
    else:
        status.write_text("done\n")


def _print_table(rows: list[list[str]], header: list[str]) -> None:
    widths = [
        max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))
    ]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    print(fmt.format(*header))
    for row in rows:
        print(fmt.format(*row))


def _pct(x: float) -> str:
    return f"{100.0 * x:.2f}"


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args, cfg: dict) -> int:
    spec = build_generator_spec(cfg)
    out = Path(args.out_dir)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise DataError(f"output directory {out} is not empty (use --force)")
    samples = generate(spec)
    save_dataset(samples, out, force=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")

    counts: dict[str, int] = {}
    for s in samples:
        counts[s.attack_type] = counts.get(s.attack_type, 0) + 1
    print(f"wrote {len(samples)} samples to {out}")
    _print_table(
        [[k, str(v)] for k, v in sorted(counts.items())], ["class", "count"]
    )
    bona = [s for s in samples if s.attack_type == BONAFIDE]
    rows = []
    for attack in spec.attack_types:
        group = bona + [s for s in samples if s.attack_type == attack]
        accs = {}
        for channel in ("a", "b"):
            try:
                accs[channel] = f"{oracle_separability(group, channel):.3f}"
            except ValueError:
                accs[channel] = "n/a"
        rows.append([attack, accs["a"], accs["b"]])
    print("\nnearest-centroid separability vs bonafide (held-out folds):")
    _print_table(rows, ["attack", "channel A acc", "channel B acc"])
    return 0


def _load_for_run(args, channels=("a", "b")):
    if args.data is None:
        raise ConfigError("--data is required for this command")
    return load_dataset(args.data, channels=channels)


def cmd_train(args, cfg: dict) -> int:
    samples, records = _load_for_run(args)
    tc = build_train_config(cfg)
    proto = cfg["protocol"]
    split = make_grandtest(records, ratios=tuple(proto["ratios"]), seed=proto["seed"])
    validate_split(records, split)
    out = Path(cfg["out_root"]) / args.name
    with run_directory(out, cfg, args.force):
        params, losses = train(split, by_id(samples), tc)
        save_checkpoint(params, out / "checkpoint.bin")
        (out / "losslog.json").write_text(json.dumps(losses) + "\n")
    print(f"trained {tc.epochs} epochs on {split.name}; checkpoint at {out/'checkpoint.bin'}")
    _print_table(
        [[str(i), f"{l:.6f}"] for i, l in enumerate(losses)], ["epoch", "mean loss"]
    )
    return 0


def _split_for_eval(args, cfg, records):
    proto = cfg["protocol"]
    if getattr(args, "attack", None):
        split = make_loo(
            records, args.attack, ratios=tuple(proto["ratios"]), seed=proto["seed"]
        )
    else:
        split = make_grandtest(records, ratios=tuple(proto["ratios"]), seed=proto["seed"])
    validate_split(records, split)
    return split


def cmd_eval(args, cfg: dict) -> int:
    channels = ("a", "b")
    if args.head == "a":
        channels = ("a",)
    elif args.head == "b":
        channels = ("b",)
    samples, records = _load_for_run(args, channels=channels)
    params = load_checkpoint(args.checkpoint)
    split = _split_for_eval(args, cfg, records)
    out = Path(cfg["out_root"]) / args.name
    with run_directory(out, cfg, args.force):
        report, _, _ = evaluate(
            params, split, by_id(samples), head=args.head,
            threshold_rule=args.rule, bpcer_target=cfg["protocol"]["bpcer_target"],
            out_dir=out,
        )
    _print_table(
        [[split.name, _pct(report.apcer), _pct(report.bpcer), _pct(report.acer),
          f"{report.threshold:.6g}"]],
        ["protocol", "APCER%", "BPCER%", "ACER%", "threshold"],
    )
    return 0


def cmd_loo(args, cfg: dict) -> int:
    samples, records = _load_for_run(args)
    tc = build_train_config(cfg)
    proto = cfg["protocol"]
    out = Path(cfg["out_root"]) / args.name
    with run_directory(out, cfg, args.force):
        result = run_loo(
            samples, records, tc, out_dir=out,
            ratios=tuple(proto["ratios"]), protocol_seed=proto["seed"],
            bpcer_target=proto["bpcer_target"],
        )
    rows = [
        [r.attack, _pct(r.report.apcer), _pct(r.report.bpcer), _pct(r.report.acer)]
        for r in result.rows
    ]
    rows.append(
        ["Mean±Std", "", "", f"{_pct(result.acer_mean)}±{_pct(result.acer_std)}"]
    )
    _print_table(rows, ["unseen attack", "APCER%", "BPCER%", "ACER%"])
    return 0


def cmd_sweep_gamma(args, cfg: dict) -> int:
    samples, records = _load_for_run(args)
    tc = build_train_config(cfg)
    gammas = args.gammas
    out = Path(cfg["out_root"]) / args.name
    with run_directory(out, cfg, args.force):
        results = run_gamma_sweep(samples, records, tc, gammas=gammas, out_dir=out)
    rows = [
        [f"{g:g}", f"{_pct(r.acer_mean)}±{_pct(r.acer_std)}"]
        for g, r in sorted(results.items())
    ]
    _print_table(rows, ["gamma", "Mean ACER% ± Std"])
    return 0


def cmd_single_channel(args, cfg: dict) -> int:
    samples, records = _load_for_run(args)
    tc = build_train_config(cfg)
    proto = cfg["protocol"]
    out = Path(cfg["out_root"]) / args.name
    with run_directory(out, cfg, args.force):
        study = run_single_channel_study(
            samples, records, tc, seeds=args.seeds, out_dir=out,
            ratios=tuple(proto["ratios"]), protocol_seed=proto["seed"],
        )
    rows = []
    for variant in ("bce", "cmfl"):
        for head in ("a", "b"):
            cell = f"{variant}_head_{head}"
            per_seed = ", ".join(_pct(x) for x in study["per_seed"][cell])
            rows.append([variant, head, _pct(study["median"][cell]), per_seed])
    _print_table(rows, ["loss", "head", "median ACER%", "per-seed ACER%"])
    return 0


def cmd_xdb(args, cfg: dict) -> int:
    if args.data2 is None:
        raise ConfigError("--data2 (target dataset) is required for xdb")
    source = _load_for_run(args)
    target = load_dataset(args.data2)
    tc = build_train_config(cfg)
    proto = cfg["protocol"]
    out = Path(cfg["out_root"]) / args.name
    with run_directory(out, cfg, args.force):
        result = run_cross_dataset(
            source, target, tc, out_dir=out,
            ratios=tuple(proto["ratios"]), protocol_seed=proto["seed"],
        )
    _print_table(
        [
            ["intra", _pct(result["intra_hter"])],
            ["cross", _pct(result["cross_hter"])],
        ],
        ["evaluation", "HTER%"],
    )
    print(f"threshold rule: {result['threshold_rule']} (dev EER {_pct(result['dev_eer'])}%)")
    return 0


def cmd_report(args, cfg: dict) -> int:
    samples, records = _load_for_run(args)
    params = load_checkpoint(args.checkpoint)
    split = _split_for_eval(args, cfg, records)
    out = Path(cfg["out_root"]) / args.name
    with run_directory(out, cfg, args.force):
        result = dump_score_distributions(params, split, by_id(samples), out_dir=out)
        emit_loss_curves(
            gammas=(cfg["loss"]["gamma"],),
            q_values=(0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0),
            out_path=out / "losscurve.tsv",
        )
    rows = [
        [head, f"{result['overlap'][head]:.4f}"] for head in ("a", "b", "joint")
    ]
    _print_table(rows, ["head", "bonafide/attack overlap"])
    print(f"histograms and loss curves written to {out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(p: argparse.ArgumentParser, needs_data: bool = True) -> None:
    p.add_argument("--config", help="JSON config file (overrides built-in defaults)")
    p.add_argument("--out", help="output root for run directories")
    p.add_argument("--name", help="run directory name (default: subcommand)")
    p.add_argument("--force", action="store_true", help="overwrite non-empty output")
    p.add_argument("--seed", type=int, help="master seed override")
    if needs_data:
        p.add_argument("--data", help="dataset directory (from gen-data)")


def _comma_floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x != ""]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad float list: {text!r}") from exc


def _comma_ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x != ""]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad int list: {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cmpad",
        description="Two-channel presentation-attack detection experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset directory")
    _add_common(p, needs_data=False)
    p.add_argument("out_dir", help="dataset directory to create")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train on the grandtest protocol")
    _add_common(p)
    p.add_argument("--epochs", type=int, help="training epochs override")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--head", choices=("a", "b", "joint"), default="joint")
    p.add_argument("--rule", choices=("bpcer", "eer"), default="bpcer")
    p.add_argument("--attack", help="evaluate the leave-one-out split for this attack")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("loo", help="leave-one-out unseen-attack table")
    _add_common(p)
    p.add_argument("--epochs", type=int, help="training epochs override")
    p.set_defaults(func=cmd_loo)

    p = sub.add_parser("sweep-gamma", help="focusing-exponent ablation")
    _add_common(p)
    p.add_argument("--epochs", type=int, help="training epochs override")
    p.add_argument(
        "--gammas", type=_comma_floats, default=[0.0, 1.0, 2.0, 3.0, 4.0],
        help="comma-separated gamma grid (default 0,1,2,3,4)",
    )
    p.set_defaults(func=cmd_sweep_gamma)

    p = sub.add_parser("single-channel", help="single-channel deployment study")
    _add_common(p)
    p.add_argument("--epochs", type=int, help="training epochs override")
    p.add_argument(
        "--seeds", type=_comma_ints, default=[0, 1, 2, 3, 4],
        help="comma-separated training seeds (default 0,1,2,3,4)",
    )
    p.set_defaults(func=cmd_single_channel)

    p = sub.add_parser("xdb", help="cross-dataset evaluation")
    _add_common(p)
    p.add_argument("--data2", help="target dataset directory")
    p.add_argument("--epochs", type=int, help="training epochs override")
    p.set_defaults(func=cmd_xdb)

    p = sub.add_parser("report", help="score distributions and loss curves")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--attack", help="report on the leave-one-out split for this attack")
    p.set_defaults(func=cmd_report)

    return parser


def _overrides_from_args(args) -> dict:
    """Map explicit CLI flags onto config keys (flag > file > default)."""
    overrides: dict = {}
    if getattr(args, "out", None) is not None:
        overrides["out_root"] = args.out
    if getattr(args, "seed", None) is not None:
        if args.command == "gen-data":
            overrides.setdefault("generator", {})["seed"] = args.seed
        else:
            overrides.setdefault("train", {})["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        overrides.setdefault("train", {})["epochs"] = args.epochs
    return overrides


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "name", None) is None:
        args.name = args.command
    try:
        cfg = load_effective_config(args.config, _overrides_from_args(args))
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 130
    except CmpadError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except Exception as exc:  # pragma: no cover - defensive
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    raise SystemExit(main())
