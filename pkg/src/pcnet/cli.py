"""Command-line front end: ``pcnet gen-data | train | eval | analyze | baseline``.

Every command that produces an experiment directory writes the exact resolved
config it ran with (``config.json``) and its SHA-256 digest
(``config.sha256``), so ``pcnet train <dir>/config.json`` reproduces a run.

Exit codes: 0 success, 1 unexpected pcnet error, 2 usage or config error,
3 dimension mismatch, 4 validation failure, 5 contract violation,
6 numerical failure, 7 file format error, 8 data written but labels are
unbalanced.

Set ``PCNET_NUM_THREADS`` to cap the BLAS thread pool.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from threadpoolctl import threadpool_limits

from pcnet.benchmark import PRESETS, preset_spec
from pcnet.errors import PcnetError, UsageError, ValidationError
from pcnet.lds import (
    BALANCE_RANGE,
    Dataset,
    LdsSpec,
    correlation_stats,
    generate_dataset,
    label_balance,
    read_dataset,
    write_dataset,
)
from pcnet.model import DynamicSchedule, load_checkpoint, save_checkpoint, top_block
from pcnet.train import TrainConfig, evaluate, train, with_top_reinit

log = logging.getLogger("pcnet")

THREADS_ENV = "PCNET_NUM_THREADS"
EXIT_UNBALANCED = 8


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _load_json(path: Path) -> dict:
    try:
        obj = json.loads(path.read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: malformed JSON ({exc})") from None
    if not isinstance(obj, dict):
        raise UsageError(f"{path}: top level must be a JSON object")
    return obj


# --- experiment config ------------------------------------------------------------


def _resolve_source(src, base: Path, what: str) -> dict | str:
    """A dataset source is a PCDS path or an inline generator description."""
    if isinstance(src, str):
        path = (base / src).resolve()
        if not path.is_file():
            raise UsageError(f"{what}: file not found: {path}")
        return str(path)
    if not isinstance(src, dict):
        raise UsageError(f"{what} must be a file path or an object")
    allowed = {"spec", "preset", "spec_seed", "T", "num_sequences", "seed"}
    unknown = set(src) - allowed
    if unknown:
        raise UsageError(f"{what}: unknown keys {sorted(unknown)}")
    if ("spec" in src) == ("preset" in src):
        raise UsageError(f"{what}: give exactly one of 'spec' or 'preset'")
    for key in ("T", "num_sequences", "seed"):
        if not isinstance(src.get(key), int):
            raise UsageError(f"{what}: '{key}' must be an integer")
    try:
        if "preset" in src:
            spec = preset_spec(src["preset"], int(src.get("spec_seed", 0)))
        elif isinstance(src["spec"], str):
            spec = LdsSpec.from_dict(_load_json((base / src["spec"]).resolve()))
        else:
            spec = LdsSpec.from_dict(src["spec"])
    except ValidationError as exc:
        raise UsageError(f"{what}: {exc}") from None
    return {"spec": spec.to_dict(), "T": src["T"], "num_sequences": src["num_sequences"], "seed": src["seed"]}


def _materialize(src: dict | str) -> Dataset:
    if isinstance(src, str):
        return read_dataset(src)
    return generate_dataset(LdsSpec.from_dict(src["spec"]), src["T"], src["num_sequences"], src["seed"])


@dataclass
class ExperimentConfig:
    dataset: dict | str
    train: TrainConfig
    test_dataset: dict | str | None = None
    schedule: DynamicSchedule | None = None
    output_dir: str | None = None

    @classmethod
    def from_dict(cls, d: dict, base: Path = Path(".")) -> "ExperimentConfig":
        unknown = set(d) - {"dataset", "test_dataset", "train", "schedule", "output_dir"}
        if unknown:
            raise UsageError(f"unknown config keys {sorted(unknown)}")
        if "dataset" not in d:
            raise UsageError("config needs a 'dataset' entry")
        try:
            tc = TrainConfig.from_dict(dict(d.get("train", {})))
            schedule = DynamicSchedule.from_dict(d["schedule"]) if d.get("schedule") else None
        except (ValueError, TypeError) as exc:
            raise UsageError(f"bad config: {exc}") from None
        test = _resolve_source(d["test_dataset"], base, "test_dataset") if d.get("test_dataset") else None
        out = d.get("output_dir")
        return cls(
            _resolve_source(d["dataset"], base, "dataset"),
            tc,
            test,
            schedule,
            str((base / out).resolve()) if out else None,
        )

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "test_dataset": self.test_dataset,
            "train": self.train.to_dict(),
            "schedule": self.schedule.to_dict() if self.schedule else None,
            "output_dir": self.output_dir,
        }

    def digest(self) -> str:
        """Hash of everything that affects results (the output location does not)."""
        d = self.to_dict()
        d.pop("output_dir")
        return _digest(d)


def load_experiment(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    return ExperimentConfig.from_dict(_load_json(path), path.resolve().parent)


def _prepare_outdir(cfg: ExperimentConfig, out: str | None) -> Path:
    target = out or cfg.output_dir
    if not target:
        raise UsageError("no output directory: pass --out or set 'output_dir' in the config")
    outdir = Path(target).resolve()
    outdir.mkdir(parents=True, exist_ok=True)
    cfg.output_dir = str(outdir)
    (outdir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    (outdir / "config.sha256").write_text(cfg.digest() + "\n")
    return outdir


# --- commands ---------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    if args.spec:
        try:
            spec = LdsSpec.from_dict(_load_json(Path(args.spec)))
        except ValidationError as exc:
            raise UsageError(f"{args.spec}: {exc}") from None
    else:
        spec = preset_spec(args.preset, args.spec_seed)
    dataset = generate_dataset(spec, args.length, args.num_sequences, args.seed)
    write_dataset(args.out, dataset)
    rates = label_balance(spec, T=max(args.length, 2), seed=args.seed)
    lo, hi = BALANCE_RANGE
    print(f"wrote {args.out}: {args.num_sequences} sequences x {args.length} frames, spec {spec.digest()[:12]}")
    for j, rate in enumerate(rates):
        print(f"action {j}: positive rate {rate:.4f}")
    bad = [j for j, rate in enumerate(rates) if not lo <= rate <= hi]
    if bad:
        print(f"warning: actions {bad} have positive rates outside [{lo:.0%}, {hi:.0%}]", file=sys.stderr)
        return EXIT_UNBALANCED
    return 0


def _run_training(cfg: ExperimentConfig, out: str | None, model: str | None = None) -> tuple[Path, object]:
    if model is not None:
        cfg.train.model = model
    outdir = _prepare_outdir(cfg, out)
    result = train(cfg.train, _materialize(cfg.dataset), progress=True)
    meta = {
        "model": cfg.train.model,
        "fusion_window": cfg.train.fusion_window,
        "config_digest": cfg.digest(),
        "train": cfg.train.to_dict(),
    }
    save_checkpoint(outdir / "checkpoint.pcck", result.params, result.placement, meta)
    result.write_loss_csv(outdir / "loss.csv")
    print(f"wrote {outdir / 'checkpoint.pcck'} ({len(result.losses)} steps, final loss {result.losses[-1]:.6f})"
          if result.losses else f"wrote {outdir / 'checkpoint.pcck'} (no training steps)")
    return outdir, result


def cmd_train(args) -> int:
    cfg = load_experiment(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    _run_training(cfg, args.out)
    return 0


def cmd_baseline(args) -> int:
    cfg = load_experiment(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    outdir, result = _run_training(cfg, args.out, model=args.kind)
    if cfg.test_dataset is None:
        print("note: no test_dataset in config; metrics are computed on the training data")
    data = _materialize(cfg.test_dataset or cfg.dataset)
    report = evaluate(result.params, data, args.kind, fusion_window=cfg.train.fusion_window)
    report.write_csv(outdir / "metrics.csv")
    sys.stdout.write(report.to_text())
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    data = read_dataset(args.dataset)
    kind = ckpt.meta.get("model", "predictive-corrective")
    fusion = int(ckpt.meta.get("fusion_window", 4))
    placement = ckpt.placement or top_block(ckpt.params.net, 1)
    schedule = None
    if args.test_reinit is not None:
        kind = "predictive-corrective"
        placement = with_top_reinit(placement, args.test_reinit)
    elif args.dynamic is not None:
        kind = "predictive-corrective"
        tau_skip, tau_reinit = args.dynamic
        schedule = DynamicSchedule.dynamic(tau_skip, tau_reinit, args.max_frames, args.norm)
    report = evaluate(ckpt.params, data, kind, placement, schedule, fusion, with_curves=args.pr_curves is not None)
    run = {
        "checkpoint": str(Path(args.checkpoint).resolve()),
        "dataset": str(Path(args.dataset).resolve()),
        "model": kind,
        "placement": placement.to_dict() if kind == "predictive-corrective" else None,
        "schedule": schedule.to_dict() if schedule else None,
    }
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        report.write_csv(args.out)
        Path(str(args.out) + ".config.json").write_text(json.dumps(run, indent=2, sort_keys=True) + "\n")
    if args.pr_curves is not None:
        report.write_pr_curves(args.pr_curves)
    sys.stdout.write(report.to_text())
    return 0


def cmd_analyze(args) -> int:
    data = read_dataset(args.dataset)
    corr_raw, corr_diff = correlation_stats(data.sequences)
    text = f"corr_raw = {corr_raw!r}\ncorr_diff = {corr_diff!r}\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


# --- parser -----------------------------------------------------------------------


def _float_arg(s: str) -> float:
    try:
        return math.inf if s.lower() in ("inf", "+inf") else float(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {s!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pcnet", description="Predictive-corrective networks on synthetic sequences.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a PCDS dataset file")
    src = g.add_mutually_exclusive_group(required=True)
    src.add_argument("--spec", help="LDS spec JSON file")
    src.add_argument("--preset", choices=sorted(PRESETS), help="built-in benchmark system")
    g.add_argument("--spec-seed", type=int, default=0, help="seed of the preset's random loadings")
    g.add_argument("-T", "--length", type=int, required=True)
    g.add_argument("-n", "--num-sequences", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model from an experiment config")
    t.add_argument("config")
    t.add_argument("--out", help="output directory (overrides output_dir)")
    t.add_argument("--seed", type=int, help="override the training seed")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    mode = e.add_mutually_exclusive_group()
    mode.add_argument("--test-reinit", type=int, metavar="N", help="static schedule, top block reinit every N frames")
    mode.add_argument("--dynamic", nargs=2, type=_float_arg, metavar=("TAU_SKIP", "TAU_REINIT"))
    e.add_argument("--max-frames", type=int, default=4, help="forced reinit interval for --dynamic")
    e.add_argument("--norm", default="rms", choices=("rms", "l2", "linf"))
    e.add_argument("--out", help="metrics CSV path")
    e.add_argument("--pr-curves", metavar="DIR", help="write per-class PR curves here")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="lag-one correlation of frames and of frame differences")
    a.add_argument("--dataset", required=True)
    a.add_argument("--out")
    a.set_defaults(func=cmd_analyze)

    b = sub.add_parser("baseline", help="train and evaluate a baseline model")
    b.add_argument("kind", choices=("single-frame", "late-fusion"))
    b.add_argument("config")
    b.add_argument("--out")
    b.add_argument("--seed", type=int)
    b.set_defaults(func=cmd_baseline)
    return p


def _thread_limit() -> int | None:
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with threadpool_limits(limits=_thread_limit()):
            return args.func(args)
    except PcnetError as exc:
        print(f"pcnet: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"pcnet: UsageError: file not found: {exc.filename}", file=sys.stderr)
        return UsageError.exit_code


if __name__ == "__main__":
    sys.exit(main())
