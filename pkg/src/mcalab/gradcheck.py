"""Finite-difference gradient suite over every loss term and the full objective.

Each builder makes a small problem (a handful of rows, moderate temperature)
so that central differences are well conditioned and the suite runs in seconds.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import GradCheckReport, Tensor, grad_check
from .model import EncoderConfig, ItemBatch, init_params
from .objectives import MIXERS, MCAConfig, TrainBatch, cl_loss, init_mixer, mcp_loss, mcr_loss, mix, total_loss
from .rng import Rng

TAU = 0.5
N_ROWS = 4
DIM = 6


def _perturb_mixer(phi: dict[str, Tensor], rng: Rng) -> None:
    # move the gate off its zero init so both branches carry gradient
    for k, v in phi.items():
        v.data = v.data + rng.child(k).normal(v.data.size).reshape(v.shape) * 0.3


def _free(rng: Rng, name: str, rows: int = N_ROWS, dim: int = DIM) -> Tensor:
    return Tensor(rng.child(name).normal(rows * dim).reshape(rows, dim), requires_grad=True)


def _cl(seed):
    rng = Rng(seed, "gradcheck.cl")
    p = {"queries": _free(rng, "q"), "docs": _free(rng, "d")}
    perm = rng.child("perm").permutation(N_ROWS)

    def loss():
        return cl_loss(ad.l2_normalize_rows(p["queries"]), ad.l2_normalize_rows(p["docs"]), perm, TAU)

    return p, loss


def _mcp(seed):
    rng = Rng(seed, "gradcheck.mcp")
    p = {k: _free(rng, k) for k in ("composed", "image", "text", "target")}

    def loss():
        n = {k: ad.l2_normalize_rows(v) for k, v in p.items()}
        return mcp_loss(n["composed"], [n["image"], n["text"]], n["target"], TAU)

    return p, loss


def _mcr(mixer):
    def build(seed):
        rng = Rng(seed, f"gradcheck.mcr.{mixer}")
        p = {k: _free(rng, k) for k in ("composed", "image", "text")}
        phi = init_mixer(mixer, DIM, seed, factor=2)
        _perturb_mixer(phi, rng)
        p.update({f"mixer.{k}": v for k, v in phi.items()})

        def loss():
            n = {k: ad.l2_normalize_rows(p[k]) for k in ("composed", "image", "text")}
            protos = mix(mixer, phi, [n["text"], n["image"]], factor=2)
            return mcr_loss(n["composed"], protos, TAU)

        return p, loss

    return build


def _total(mixer):
    def build(seed):
        rng = Rng(seed, f"gradcheck.total.{mixer}")
        enc = EncoderConfig(d_model=5, d_out=DIM, n_hidden_layers=1, image_dim=4, text_vocab=4)
        params = init_params(enc, seed)
        phi = init_mixer(mixer, DIM, seed, factor=2)
        _perturb_mixer(phi, rng)
        # two composed queries, one image-only query, one text-only query; one composed doc
        q = ItemBatch(rng.child("qi").normal(16).reshape(4, 4), np.array([True, True, True, False]),
                      np.array([0, 3, -1, 2]))
        d = ItemBatch(rng.child("di").normal(16).reshape(4, 4), np.ones(4, dtype=bool), np.array([-1, -1, -1, 1]))
        cfg = MCAConfig(tau=TAU, alpha=0.5, beta=0.5, mixer=mixer, mfb_factor=2)
        p = dict(params.items())
        p.update({f"mixer.{k}": v for k, v in phi.items()})

        def loss():
            return total_loss(TrainBatch(q, d), params, cfg, phi)[0]

        return p, loss

    return build


# sqrt|z| in the MFB power normalization has large third derivatives near 0,
# so its truncation error at the default step is ~1e-4; a finer step fixes that
STEPS = {"mcr.mfb": 1e-6, "total_loss.mfb": 1e-6}
DEFAULT_STEP = 1e-5

BUILDERS = {"cl": _cl, "mcp": _mcp}
BUILDERS.update({f"mcr.{m}": _mcr(m) for m in MIXERS})
BUILDERS.update({f"total_loss.{m}": _total(m) for m in MIXERS})


@dataclass
class SuiteResult:
    name: str
    reports: list[GradCheckReport]
    seconds: float

    @property
    def max_rel(self) -> float:
        return max(r.max_rel for r in self.reports)

    def passed(self, tol: float = 1e-4) -> bool:
        return all(r.passed(tol) for r in self.reports)


def run_suite(seeds=range(10), names=None) -> list[SuiteResult]:
    out = []
    for name in names or BUILDERS:
        t0 = time.perf_counter()
        reports = [grad_check(BUILDERS[name], s, STEPS.get(name, DEFAULT_STEP)) for s in seeds]
        out.append(SuiteResult(name, reports, time.perf_counter() - t0))
    return out
