"""``mcalab`` command-line entry point.

Configuration layers, lowest to highest precedence: built-in defaults, the
``--config`` JSON file, ``--set key=value`` overrides, then ``--seed``.
Exit codes: 0 success, 1 runtime failure, 2 invalid config or arguments.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import datagen, gradcheck
from .config import apply_overrides, dump_json, from_dict, load_json, to_dict
from .errors import FormatError, IncompatibleCheckpointError, InvalidConfigError, MCALabError
from .evaluation import evaluate, export_embeddings
from .experiment import ExperimentGrid, format_table, run_grid
from .model import load_checkpoint
from .train import TrainConfig, _sha256, run_training, write_manifest

log = logging.getLogger("mcalab")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad arguments or configuration: exit code 2."""


@dataclass(frozen=True)
class EvalConfig:
    n_resample: int = 8
    seed: int = 0
    splits: list[str] = field(default_factory=lambda: ["ind", "ood"])


@dataclass(frozen=True)
class ExportConfig:
    split: str = "ood"
    max_queries: int | None = 256


@dataclass(frozen=True)
class GradCheckConfig:
    n_seeds: int = 10
    tolerance: float = 1e-4


def _resolve(cls, args, seed_key: str | None = "seed"):
    data = load_json(args.config) if args.config else {}
    data = apply_overrides(cls, data, args.set)
    if args.seed is not None and seed_key is not None:
        data[seed_key] = args.seed
    return from_dict(cls, data)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def _load_bundle(path) -> datagen.DatasetBundle:
    return datagen.deserialize(_require(path, "--data"))


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    cfg = _resolve(datagen.GeneratorConfig, args)
    out = _out_dir(args)
    bundle = datagen.generate(cfg)
    blob = datagen.serialize(bundle, out / "dataset.mcalab")
    calibration = {
        "image_only": datagen.oracle_image_only(bundle),
        "latent": datagen.oracle_latent(bundle),
    }
    dump_json(calibration, out / "calibration.json")
    write_manifest(out / "manifest.json", "gen-data", to_dict(cfg), cfg.seed, inputs={},
                   artifacts={"dataset.mcalab": _sha256(blob), "calibration.json": _sha256((out / "calibration.json").read_bytes())})
    _emit(calibration)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve(TrainConfig, args)
    bundle = _load_bundle(args.data)
    res = run_training(bundle, cfg, out_dir=_out_dir(args), progress_every=args.progress)
    last = res.records[-1]
    _emit({"steps": len(res.records), "loss_total": last.loss_total, "loss_cl": last.loss_cl,
           "loss_mcp": last.loss_mcp, "loss_mcr": last.loss_mcr, "smoothed_cl": res.smoothed_cl()})
    return EXIT_OK


def _load_params(args, bundle):
    ckpt = load_checkpoint(_require(args.checkpoint, "--checkpoint"))
    cfg = ckpt.params.config
    if (cfg.image_dim, cfg.text_vocab) != (bundle.config.image_dim, bundle.config.vocab_size):
        raise IncompatibleCheckpointError(
            f"checkpoint expects image_dim={cfg.image_dim}, vocab={cfg.text_vocab}; dataset has "
            f"{bundle.config.image_dim}, {bundle.config.vocab_size}"
        )
    return ckpt


def cmd_eval(args) -> int:
    cfg = _resolve(EvalConfig, args)
    bundle = _load_bundle(args.data)
    ckpt = _load_params(args, bundle)
    splits = bundle.splits
    unknown = [s for s in cfg.splits if s not in splits]
    if unknown:
        raise InvalidConfigError(f"unknown split {unknown[0]!r}; valid: {', '.join(splits)}")
    reports = {s: asdict(evaluate(ckpt.params, splits[s], cfg.n_resample, cfg.seed)) for s in cfg.splits}
    out = _out_dir(args)
    dump_json(reports, out / "report.json")
    write_manifest(out / "manifest.json", "eval", to_dict(cfg), cfg.seed,
                   inputs={"dataset_sha256": _sha256(Path(args.data).read_bytes()),
                           "checkpoint_sha256": _sha256(Path(args.checkpoint).read_bytes())},
                   artifacts={"report.json": _sha256((out / "report.json").read_bytes())})
    _emit(reports)
    return EXIT_OK


def cmd_export_emb(args) -> int:
    cfg = _resolve(ExportConfig, args, seed_key=None)
    bundle = _load_bundle(args.data)
    ckpt = _load_params(args, bundle)
    if cfg.split not in bundle.splits:
        raise InvalidConfigError(f"unknown split {cfg.split!r}; valid: {', '.join(bundle.splits)}")
    out = _out_dir(args)
    path = out / f"embeddings-{cfg.split}.mcalab"
    meta = export_embeddings(ckpt.params, bundle.splits[cfg.split], path, cfg.max_queries)
    write_manifest(out / "manifest.json", "export-emb", to_dict(cfg), 0,
                   inputs={"dataset_sha256": _sha256(Path(args.data).read_bytes()),
                           "checkpoint_sha256": _sha256(Path(args.checkpoint).read_bytes())},
                   artifacts={path.name: _sha256(path.read_bytes())})
    _emit({"path": str(path), **meta})
    return EXIT_OK


def cmd_grad_check(args) -> int:
    cfg = _resolve(GradCheckConfig, args, seed_key=None)
    results = gradcheck.run_suite(range(cfg.n_seeds))
    failed = 0
    for r in results:
        ok = r.passed(cfg.tolerance)
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'}  {r.name:<24} max rel err {r.max_rel:.2e}  ({r.seconds:.2f}s)")
    if args.out:
        out = _out_dir(args)
        dump_json({r.name: {"max_rel": r.max_rel, "passed": r.passed(cfg.tolerance),
                            "per_seed": [rep.max_rel for rep in r.reports]} for r in results},
                  out / "gradcheck.json")
        write_manifest(out / "manifest.json", "grad-check", to_dict(cfg), 0, inputs={},
                       artifacts={"gradcheck.json": _sha256((out / "gradcheck.json").read_bytes())})
    if failed:
        print(f"mcalab: {failed} gradient check(s) above tolerance {cfg.tolerance:g}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_experiment(args) -> int:
    data = load_json(args.config) if args.config else {}
    if "variants" not in data:
        raise InvalidConfigError("experiment config needs a 'variants' list")
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seeds=[{args.seed}]")
    grid = from_dict(ExperimentGrid, apply_overrides(ExperimentGrid, data, overrides))
    result = run_grid(grid, out_dir=_out_dir(args), workers=args.workers, keep_runs=args.keep_runs)
    sys.stdout.write(format_table(result.rows))
    failed = [c for c in result.cells if not c.ok]
    for c in failed:
        print(f"mcalab: cell {c.variant} sigma={c.noise_level:g} seed={c.seed} failed: {c.error}", file=sys.stderr)
    return EXIT_RUNTIME if failed else EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcalab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-path override, value parsed as JSON when possible (repeatable)")
        p.add_argument("--seed", type=int)
        return p

    common(sub.add_parser("gen-data", help="generate a dataset and print oracle calibration")).set_defaults(func=cmd_gen_data)

    p = common(sub.add_parser("train", help="train an encoder"))
    p.add_argument("--data", help="dataset file from gen-data")
    p.add_argument("--progress", type=int, default=100, help="log every N steps with -v (0 disables)")
    p.set_defaults(func=cmd_train)

    for name, func, help_ in (("eval", cmd_eval, "evaluate a checkpoint"),
                              ("export-emb", cmd_export_emb, "export embeddings with PCA coordinates")):
        p = common(sub.add_parser(name, help=help_))
        p.add_argument("--data", help="dataset file")
        p.add_argument("--checkpoint", help="checkpoint file")
        p.set_defaults(func=func)

    common(sub.add_parser("grad-check", help="finite-difference gradient suite"), out_required=False).set_defaults(
        func=cmd_grad_check)

    p = common(sub.add_parser("experiment", help="run a seed-paired comparison grid"))
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--keep-runs", action="store_true", help="also keep per-run logs and checkpoints")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, InvalidConfigError) as exc:
        print(f"mcalab {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MCALabError, OSError) as exc:
        kind = "format error" if isinstance(exc, FormatError) else "error"
        print(f"mcalab {args.command}: {kind}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
