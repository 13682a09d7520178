"""Seed-paired comparison grids: variants x noise levels x seeds.

Every variant at a given (noise, seed) trains on the same dataset bytes from
the same initialization; only the MCA settings differ.  Deltas are taken
against the alpha = beta = 0 variant of the same cell.
"""

from __future__ import annotations

import json
import logging
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import from_dict, to_dict
from .datagen import GeneratorConfig, generate, to_bytes
from .errors import InvalidConfigError, MCALabError
from .evaluation import evaluate
from .objectives import MCAConfig
from .train import TrainConfig, run_training, write_manifest, _sha256

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Variant:
    name: str
    mca: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ExperimentGrid:
    variants: list[Variant]
    noise_levels: list[float] = field(default_factory=lambda: [0.2])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    train: TrainConfig = field(default_factory=lambda: TrainConfig(eval_every=0))
    data: GeneratorConfig = field(default_factory=GeneratorConfig)

    def __post_init__(self):
        if not self.variants or not self.seeds or not self.noise_levels:
            raise InvalidConfigError("a grid needs at least one variant, one seed and one noise level")
        names = [v.name for v in self.variants]
        if len(set(names)) != len(names):
            raise InvalidConfigError(f"duplicate variant names in {names}")
        for v in self.variants:
            self.mca_for(v)

    def mca_for(self, variant: Variant) -> MCAConfig:
        merged = {**to_dict(self.train.mca), **variant.mca}
        return from_dict(MCAConfig, merged, prefix=f"variants.{variant.name}.mca.")

    @property
    def baseline(self) -> str:
        """First variant with alpha = beta = 0."""
        for v in self.variants:
            cfg = self.mca_for(v)
            if cfg.alpha == 0 and cfg.beta == 0:
                return v.name
        raise InvalidConfigError("grid has no alpha = beta = 0 baseline variant")


def load_grid(data: dict) -> ExperimentGrid:
    return from_dict(ExperimentGrid, data)


# ---------------------------------------------------------------------------
# one cell


@dataclass
class CellResult:
    variant: str
    noise_level: float
    seed: int
    ind_acc: float | None = None
    ind_acc5: float | None = None
    ood_acc: float | None = None
    ood_acc5: float | None = None
    shortcut_index_ind: float | None = None
    shortcut_index_ood: float | None = None
    margin_rate_ind: float | None = None
    margin_rate_ood: float | None = None
    smoothed_cl: float | None = None
    final_mcp: float | None = None
    final_mcr: float | None = None
    error: str | None = None
    wall_s: float = 0.0

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_json(self) -> dict:
        d = asdict(self)
        d.pop("wall_s")
        return d


def _run_group(grid: ExperimentGrid, noise: float, seed: int, out_root: str | None) -> list[CellResult]:
    """All variants for one (noise, seed): the dataset is generated once."""
    data_cfg = replace(grid.data, seed=seed, image_noise_std=noise)
    try:
        bundle = generate(data_cfg)
    except MCALabError as exc:
        return [CellResult(v.name, noise, seed, error=f"data: {exc}") for v in grid.variants]
    results = []
    for v in grid.variants:
        t0 = time.perf_counter()
        cell = CellResult(v.name, noise, seed)
        try:
            cfg = replace(grid.train, seed=seed, mca=grid.mca_for(v))
            out = None if out_root is None else Path(out_root) / "runs" / f"{v.name}-sigma{noise:g}-seed{seed}"
            res = run_training(bundle, cfg, out_dir=out)
            ind = evaluate(res.params, bundle.ind_test, seed=seed)
            ood = evaluate(res.params, bundle.ood_test, seed=seed)
            cell.ind_acc, cell.ind_acc5 = ind.accuracy_at_1, ind.accuracy_at_5
            cell.ood_acc, cell.ood_acc5 = ood.accuracy_at_1, ood.accuracy_at_5
            cell.shortcut_index_ind, cell.shortcut_index_ood = ind.shortcut_index, ood.shortcut_index
            cell.margin_rate_ind, cell.margin_rate_ood = ind.composition_margin_rate, ood.composition_margin_rate
            cell.smoothed_cl = res.smoothed_cl()
            cell.final_mcp, cell.final_mcr = res.records[-1].loss_mcp, res.records[-1].loss_mcr
        except Exception as exc:  # a failed cell is recorded; the grid goes on
            cell.error = f"{type(exc).__name__}: {exc}"
            log.debug("cell %s sigma=%g seed=%d failed\n%s", v.name, noise, seed, traceback.format_exc())
        cell.wall_s = time.perf_counter() - t0
        log.info("%-12s sigma=%-5g seed=%d ind=%s ood=%s %.1fs", v.name, noise, seed,
                 _fmt(cell.ind_acc), _fmt(cell.ood_acc), cell.wall_s)
        results.append(cell)
    return results


# ---------------------------------------------------------------------------
# aggregation


@dataclass
class SummaryRow:
    variant: str
    noise_level: float
    n_seeds: int
    n_failed: int
    ind_acc_mean: float | None
    ind_acc_std: float | None
    ood_acc_mean: float | None
    ood_acc_std: float | None
    shortcut_index_ind: float | None
    shortcut_index_ood: float | None
    margin_rate_ind: float | None
    margin_rate_ood: float | None
    smoothed_cl_mean: float | None
    # seed-paired means against the baseline variant at the same (noise, seed)
    paired_delta_ood: float | None
    paired_delta_ind: float | None
    n_positive_ood: int


def _mean(xs):
    return float(np.mean(xs)) if xs else None


def _std(xs):
    return float(np.std(xs, ddof=1)) if len(xs) >= 2 else None


def summarize(cells: list[CellResult], baseline: str) -> list[SummaryRow]:
    index = {(c.variant, c.noise_level, c.seed): c for c in cells}
    keys = []
    for c in cells:
        if (c.variant, c.noise_level) not in keys:
            keys.append((c.variant, c.noise_level))
    rows = []
    for variant, noise in keys:
        group = [c for c in cells if c.variant == variant and c.noise_level == noise]
        good = [c for c in group if c.ok]
        pairs = [(c, index.get((baseline, noise, c.seed))) for c in good]
        pairs = [(c, b) for c, b in pairs if b is not None and b.ok]
        d_ood = [c.ood_acc - b.ood_acc for c, b in pairs]
        d_ind = [c.ind_acc - b.ind_acc for c, b in pairs]
        rows.append(SummaryRow(
            variant=variant,
            noise_level=noise,
            n_seeds=len(group),
            n_failed=len(group) - len(good),
            ind_acc_mean=_mean([c.ind_acc for c in good]),
            ind_acc_std=_std([c.ind_acc for c in good]),
            ood_acc_mean=_mean([c.ood_acc for c in good]),
            ood_acc_std=_std([c.ood_acc for c in good]),
            shortcut_index_ind=_mean([c.shortcut_index_ind for c in good]),
            shortcut_index_ood=_mean([c.shortcut_index_ood for c in good]),
            margin_rate_ind=_mean([c.margin_rate_ind for c in good]),
            margin_rate_ood=_mean([c.margin_rate_ood for c in good]),
            smoothed_cl_mean=_mean([c.smoothed_cl for c in good]),
            paired_delta_ood=_mean(d_ood),
            paired_delta_ind=_mean(d_ind),
            n_positive_ood=int(sum(d > 0 for d in d_ood)),
        ))
    return rows


def _fmt(x, spec=".3f"):
    return "-" if x is None else format(x, spec)


def format_table(rows: list[SummaryRow]) -> str:
    head = ["variant", "sigma", "seeds", "fail", "ind@1", "±", "ood@1", "±", "SI ind", "SI ood",
            "MR ind", "MR ood", "CL", "Δood", "Δind", "Δ>0"]
    body = [[r.variant, f"{r.noise_level:g}", str(r.n_seeds), str(r.n_failed),
             _fmt(r.ind_acc_mean), _fmt(r.ind_acc_std), _fmt(r.ood_acc_mean), _fmt(r.ood_acc_std),
             _fmt(r.shortcut_index_ind), _fmt(r.shortcut_index_ood), _fmt(r.margin_rate_ind),
             _fmt(r.margin_rate_ood), _fmt(r.smoothed_cl_mean), _fmt(r.paired_delta_ood, "+.4f"),
             _fmt(r.paired_delta_ind, "+.4f"), str(r.n_positive_ood)] for r in rows]
    widths = [max(len(x) for x in col) for col in zip(head, *body)]
    line = lambda cells: "  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(cells, widths)))  # noqa: E731
    return "\n".join([line(head), line(["-" * w for w in widths])] + [line(b) for b in body]) + "\n"


@dataclass
class GridResult:
    grid: ExperimentGrid
    cells: list[CellResult]
    rows: list[SummaryRow]

    def cell(self, variant: str, noise: float, seed: int) -> CellResult:
        for c in self.cells:
            if (c.variant, c.noise_level, c.seed) == (variant, noise, seed):
                return c
        raise KeyError((variant, noise, seed))

    def row(self, variant: str, noise: float) -> SummaryRow:
        for r in self.rows:
            if (r.variant, r.noise_level) == (variant, noise):
                return r
        raise KeyError((variant, noise))

    def summary_json(self) -> str:
        doc = {
            "grid": to_dict(self.grid),
            "baseline": self.grid.baseline,
            "cells": [c.to_json() for c in self.cells],
            "rows": [asdict(r) for r in self.rows],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def run_grid(grid: ExperimentGrid, out_dir=None, workers: int = 1, keep_runs: bool = False) -> GridResult:
    """Train and evaluate every cell, then aggregate.

    With ``out_dir``, writes summary.json, table.txt, timing.json and manifest.json
    (plus per-run logs and checkpoints when ``keep_runs``).
    """
    baseline = grid.baseline
    groups = [(noise, seed) for noise in grid.noise_levels for seed in grid.seeds]
    run_root = str(out_dir) if (out_dir is not None and keep_runs) else None
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_group, grid, n, s, run_root) for n, s in groups]
            nested = [f.result() for f in futures]
    else:
        nested = [_run_group(grid, n, s, run_root) for n, s in groups]
    # deterministic order regardless of completion order
    order = {v.name: i for i, v in enumerate(grid.variants)}
    cells = sorted((c for group in nested for c in group),
                   key=lambda c: (grid.noise_levels.index(c.noise_level), order[c.variant], grid.seeds.index(c.seed)))
    result = GridResult(grid, cells, summarize(cells, baseline))
    if out_dir is not None:
        _write_outputs(Path(out_dir), result)
    return result


def _write_outputs(out: Path, result: GridResult) -> None:
    out.mkdir(parents=True, exist_ok=True)
    summary = result.summary_json()
    (out / "summary.json").write_text(summary)
    (out / "table.txt").write_text(format_table(result.rows))
    (out / "timing.json").write_text(json.dumps(
        [{"variant": c.variant, "noise_level": c.noise_level, "seed": c.seed, "wall_s": round(c.wall_s, 3)}
         for c in result.cells], indent=2) + "\n")
    grid = result.grid
    datasets = {}
    for noise in grid.noise_levels:
        for seed in grid.seeds:
            blob = to_bytes(generate(replace(grid.data, seed=seed, image_noise_std=noise)))
            datasets[f"sigma{noise:g}-seed{seed}"] = _sha256(blob)
    write_manifest(
        out / "manifest.json",
        command="experiment",
        config=to_dict(grid),
        seed=grid.seeds[0],
        inputs={"dataset_sha256": datasets},
        artifacts={"summary.json": _sha256(summary.encode()), "table.txt": _sha256((out / "table.txt").read_bytes())},
    )
