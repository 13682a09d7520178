"""Contrastive, composition-preference and composition-regularization losses.

All losses take L2-normalized embedding tensors; similarities are cosines
divided by the temperature.  Per-term reduction is the arithmetic mean.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DegenerateInputError, DegeneratePrototypeError, InvalidConfigError
from .model import EncoderParams, ItemBatch, encode
from .rng import Rng

MIXERS = ("mean_pool", "gated_fusion", "mfb")


@dataclass(frozen=True)
class MCAConfig:
    tau: float = 0.02
    alpha: float = 0.01
    beta: float = 0.01
    mixer: str = "gated_fusion"
    mfb_factor: int = 4
    mcp_bidirectional: bool = True
    prototype_stop_gradient: bool = False
    cl_symmetric: bool = False
    # hinge variant max(0, diff + margin); None keeps the plain linear preference
    mcp_margin: float | None = None

    def __post_init__(self):
        if not self.tau > 0:
            raise InvalidConfigError(f"mca.tau must be > 0, got {self.tau}")
        if self.alpha < 0 or self.beta < 0:
            raise InvalidConfigError("mca.alpha and mca.beta must be >= 0")
        if self.mixer not in MIXERS:
            raise InvalidConfigError(f"mca.mixer must be one of {MIXERS}, got {self.mixer!r}")
        if self.mfb_factor < 1:
            raise InvalidConfigError("mca.mfb_factor must be >= 1")


def similarity(h_a, h_b, tau: float) -> float:
    """Temperature-scaled cosine of two unit vectors."""
    a = np.asarray(h_a, dtype=np.float64)
    b = np.asarray(h_b, dtype=np.float64)
    for name, v in (("h_a", a), ("h_b", b)):
        if abs(np.linalg.norm(v) - 1.0) > 1e-6:
            raise ContractError(f"{name} is not unit-norm (norm {np.linalg.norm(v):.9f})")
    return float(a @ b) / tau


def similarity_matrix(a: Tensor, b: Tensor, tau: float) -> Tensor:
    return ad.scale(ad.matmul(a, ad.transpose(b)), 1.0 / tau)


def row_dot(a: Tensor, b: Tensor) -> Tensor:
    return ad.sum_cols(ad.mul_elementwise(a, b))


def _zero() -> Tensor:
    return Tensor(0.0)


# ---------------------------------------------------------------------------
# contrastive loss


def cl_loss(query_embs: Tensor, doc_embs: Tensor, positive_index, tau: float, symmetric: bool = False) -> Tensor:
    """InfoNCE over in-batch documents; ``positive_index[i]`` is query i's document."""
    pos = np.asarray(positive_index, dtype=np.int64)
    nq, nd = query_embs.shape[0], doc_embs.shape[0]
    if pos.shape != (nq,):
        raise ContractError(f"need one positive per query ({nq}), got {pos.shape}")
    if nd < 2:
        raise ContractError("contrastive loss needs at least 2 documents")
    if len(np.unique(pos)) != len(pos):
        raise ContractError("duplicate positive index")
    if pos.min() < 0 or pos.max() >= nd:
        raise ContractError("positive index out of range")
    logits = similarity_matrix(query_embs, doc_embs, tau)
    forward = ad.scale(ad.mean_all(ad.pick(ad.log_softmax_rows(logits), pos)), -1.0)
    if not symmetric:
        return forward
    back_lp = ad.gather_rows(ad.log_softmax_rows(ad.transpose(logits)), pos)
    backward_term = ad.scale(ad.mean_all(ad.pick(back_lp, np.arange(nq))), -1.0)
    return ad.scale(ad.add(forward, backward_term), 0.5)


# ---------------------------------------------------------------------------
# composition preference


def mcp_terms(composed: Tensor, parts: Sequence[Tensor], target: Tensor, tau: float,
              margin: float | None = None) -> Tensor:
    """Per-row sum over parts of ``(sim(part, target) - sim(composed, target)) / tau``.

    This is the log-ratio preference with the exponentials cancelled, so it is
    negative whenever the composed row already beats its parts.
    """
    if not parts:
        raise ContractError("composition preference needs at least one unimodal part")
    comp_sim = row_dot(composed, target)
    total = None
    for part in parts:
        diff = ad.scale(ad.sub(row_dot(part, target), comp_sim), 1.0 / tau)
        if margin is not None:
            diff = ad.relu(ad.add(diff, Tensor(np.full(diff.shape, float(margin)))))
        total = diff if total is None else ad.add(total, diff)
    return total


def mcp_loss(composed: Tensor, parts: Sequence[Tensor], target: Tensor, tau: float,
             margin: float | None = None) -> Tensor:
    """Mean of :func:`mcp_terms`; 1-D inputs are treated as a single row."""
    composed, target, *parts = [ad.reshape(t, (1, -1)) if t.data.ndim == 1 else t for t in (composed, target, *parts)]
    return ad.mean_all(mcp_terms(composed, parts, target, tau, margin))


# ---------------------------------------------------------------------------
# mixers


def init_mixer(mixer: str, d: int, seed: int, factor: int = 4) -> dict[str, Tensor]:
    """Learnable mixer parameters; the gated fusion starts as mean pooling."""
    rng = Rng(seed, "mixer")
    if mixer == "mean_pool":
        return {}
    if mixer == "gated_fusion":
        return {
            "gate.weight": Tensor(np.zeros((2 * d, d)), requires_grad=True),
            "gate.bias": Tensor(np.zeros(d), requires_grad=True),
        }
    if mixer == "mfb":
        std = 1.0 / np.sqrt(d)
        return {
            "mfb.text": Tensor(rng.child("text").normal(d * factor * d, 0.0, std).reshape(d, factor * d), requires_grad=True),
            "mfb.image": Tensor(rng.child("image").normal(d * factor * d, 0.0, std).reshape(d, factor * d), requires_grad=True),
        }
    raise InvalidConfigError(f"unknown mixer {mixer!r}")


def mix(mixer: str, phi: dict[str, Tensor], parts: Sequence[Tensor], factor: int = 4) -> Tensor:
    """Aggregate ``[text_embs, image_embs]`` rows into unit-norm prototypes."""
    if len(parts) != 2:
        raise ContractError(f"mixer takes exactly two parts [text, image], got {len(parts)}")
    h_t, h_v = parts
    if mixer == "mean_pool":
        pre = ad.scale(ad.add(h_t, h_v), 0.5)
    elif mixer == "gated_fusion":
        g = ad.sigmoid(ad.add(ad.matmul(ad.concat_cols(h_t, h_v), phi["gate.weight"]), phi["gate.bias"]))
        pre = ad.add(h_v, ad.mul_elementwise(g, ad.sub(h_t, h_v)))
    elif mixer == "mfb":
        z = ad.mul_elementwise(ad.matmul(h_t, phi["mfb.text"]), ad.matmul(h_v, phi["mfb.image"]))
        pre = ad.signed_sqrt(ad.sum_pool_cols(z, factor))
    else:
        raise InvalidConfigError(f"unknown mixer {mixer!r}")
    try:
        return ad.l2_normalize_rows(pre)
    except DegenerateInputError as exc:
        raise DegeneratePrototypeError(f"{mixer} prototype collapsed: {exc}") from None


# ---------------------------------------------------------------------------
# composition regularization


def mcr_loss(composed: Tensor, prototypes: Tensor, tau: float) -> Tensor:
    """InfoNCE of each composed row against its own prototype vs the others'.

    Fewer than two composed rows leaves no negative prototype; the term is 0.
    """
    if composed.shape != prototypes.shape:
        raise ContractError(f"{composed.shape[0]} composed rows but {prototypes.shape[0]} prototypes")
    n = composed.shape[0]
    if n < 2:
        return _zero()
    logits = similarity_matrix(composed, prototypes, tau)
    return ad.scale(ad.mean_all(ad.pick(ad.log_softmax_rows(logits), np.arange(n))), -1.0)


# ---------------------------------------------------------------------------
# combined objective


@dataclass
class TrainBatch:
    """Aligned query/document batches: document i is the positive of query i."""

    queries: ItemBatch
    docs: ItemBatch

    def __len__(self) -> int:
        return len(self.queries)


@dataclass
class LossBreakdown:
    total: float
    cl: float
    mcp: float
    mcr: float
    n_composed_pairs: int


def total_loss(batch: TrainBatch, params: EncoderParams, config: MCAConfig,
               mixer_params: dict[str, Tensor] | None = None) -> tuple[Tensor, LossBreakdown]:
    """``CL + alpha * MCP + beta * MCR``; the auxiliary terms only see composed pairs.

    All embeddings (pairs plus unimodal parts of every composed side) come from
    one encoder pass.  Raw MCP/MCR values are reported even when their weight is 0.
    """
    n = len(batch)
    if n == 0:
        raise ContractError("empty batch")
    mixer_params = mixer_params or {}
    q_comp = np.flatnonzero(batch.queries.is_composed)
    d_comp = np.flatnonzero(batch.docs.is_composed)
    q_parts, d_parts = batch.queries.take(q_comp), batch.docs.take(d_comp)
    pieces = [batch.queries, batch.docs, q_parts.image_parts(), q_parts.text_parts(),
              d_parts.image_parts(), d_parts.text_parts()]
    offsets = np.cumsum([0] + [len(p) for p in pieces])
    emb = encode(params, ItemBatch.concat(pieces))

    def rows(k, sub=None):
        idx = np.arange(offsets[k], offsets[k + 1])
        return ad.gather_rows(emb, idx if sub is None else idx[sub])

    q_emb, d_emb = rows(0), rows(1)
    cl = cl_loss(q_emb, d_emb, np.arange(n), config.tau, symmetric=config.cl_symmetric)

    n_applicable = int(np.count_nonzero(batch.queries.is_composed | batch.docs.is_composed))
    mcp = mcr = _zero()
    if n_applicable:
        # (composed side, image part, text part, opposite side as target)
        query_side = doc_side = None
        if q_comp.size:
            query_side = (ad.gather_rows(q_emb, q_comp), rows(2), rows(3), ad.gather_rows(d_emb, q_comp))
        if d_comp.size:
            doc_side = (ad.gather_rows(d_emb, d_comp), rows(4), rows(5), ad.gather_rows(q_emb, d_comp))
        sides = [s for s in (query_side, doc_side) if s is not None]
        mcp_sides = sides if config.mcp_bidirectional else [s for s in (query_side,) if s is not None]
        acc = None
        for comp, img_part, txt_part, target in mcp_sides:
            term = ad.sum_all(mcp_terms(comp, [img_part, txt_part], target, config.tau, config.mcp_margin))
            acc = term if acc is None else ad.add(acc, term)
        if acc is not None:
            mcp = ad.scale(acc, 1.0 / n_applicable)

        comp_all = img_all = txt_all = None
        for comp, img_part, txt_part, _ in sides:
            comp_all = comp if comp_all is None else ad.concat_rows(comp_all, comp)
            img_all = img_part if img_all is None else ad.concat_rows(img_all, img_part)
            txt_all = txt_part if txt_all is None else ad.concat_rows(txt_all, txt_part)
        if config.prototype_stop_gradient:
            img_all, txt_all = ad.stop_gradient(img_all), ad.stop_gradient(txt_all)
        protos = mix(config.mixer, mixer_params, [txt_all, img_all], config.mfb_factor)
        mcr = mcr_loss(comp_all, protos, config.tau)

    total = cl
    if config.alpha:
        total = ad.add(total, ad.scale(mcp, config.alpha))
    if config.beta:
        total = ad.add(total, ad.scale(mcr, config.beta))
    breakdown = LossBreakdown(total.item(), cl.item(), mcp.item(), mcr.item(), n_applicable)
    return total, breakdown
