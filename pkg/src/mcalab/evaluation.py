"""Retrieval scoring and modality-shortcut diagnostics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import binfmt
from .datagen import DATASET_MAGIC, EvalSplit
from .errors import ContractError, DegenerateProjectionError, InvalidInputError
from .model import EncoderParams, ItemBatch, encode_array
from .rng import Rng

COMPOSED_QUERY, TEXT_ONLY, IMAGE_ONLY, TARGET = 0, 1, 2, 3


@dataclass
class RetrievalReport:
    split: str
    accuracy_at_1: float
    accuracy_at_5: float
    n_queries: int
    shortcut_index: float
    composition_margin_rate: float


def gold_ranks(scores: np.ndarray, gold: np.ndarray) -> np.ndarray:
    """0-based rank of the gold candidate; ties go to the lower index."""
    n, P = scores.shape
    g = scores[np.arange(n), gold][:, None]
    idx = np.arange(P)[None, :]
    return np.sum(scores > g, axis=1) + np.sum((scores == g) & (idx < gold[:, None]), axis=1)


def _query_batch(split: EvalSplit, tokens=None) -> ItemBatch:
    n = len(split)
    tok = split.query_token if tokens is None else tokens
    return ItemBatch(split.query_image.astype(np.float64), np.ones(n, dtype=bool), np.asarray(tok, dtype=np.int64))


def _image_batch(images: np.ndarray) -> ItemBatch:
    n = len(images)
    return ItemBatch(images.astype(np.float64), np.ones(n, dtype=bool), np.full(n, -1, dtype=np.int64))


def _text_batch(tokens: np.ndarray, image_dim: int) -> ItemBatch:
    n = len(tokens)
    return ItemBatch(np.zeros((n, image_dim)), np.zeros(n, dtype=bool), np.asarray(tokens, dtype=np.int64))


def pool_scores(params: EncoderParams, split: EvalSplit, query_embs: np.ndarray | None = None):
    """Cosine scores (n, pool) plus the query and candidate embeddings."""
    n, P, D = split.pool_image.shape
    q = encode_array(params, _query_batch(split)) if query_embs is None else query_embs
    c = encode_array(params, _image_batch(split.pool_image.reshape(n * P, D))).reshape(n, P, -1)
    return np.einsum("nd,npd->np", q, c), q, c


def accuracy_at_k(scores: np.ndarray, gold: np.ndarray, ks=(1, 5)) -> dict[int, float]:
    ranks = gold_ranks(scores, np.asarray(gold, dtype=np.int64))
    return {k: float(np.mean(ranks < k)) for k in ks}


def shortcut_index(params: EncoderParams, split: EvalSplit, n_resample: int = 8, seed: int = 0,
                   query_embs: np.ndarray | None = None) -> float:
    """Mean cosine between (image, token) and (image, other token) embeddings.

    Values near 1 mean the encoder ignores which token accompanies the image.
    """
    V = params.config.text_vocab
    if V < 2:
        raise InvalidInputError("shortcut index needs a vocabulary of at least 2 tokens")
    if n_resample < 1:
        raise InvalidInputError("n_resample must be >= 1")
    if len(split) == 0:
        raise ContractError("split has no composed queries")
    base = encode_array(params, _query_batch(split)) if query_embs is None else query_embs
    rng = Rng(seed, "shortcut_index")
    tok = split.query_token.astype(np.int64)
    total = 0.0
    for _ in range(n_resample):
        # uniform over the V - 1 other tokens
        other = (tok + 1 + rng.integers(len(tok), V - 1)) % V
        alt = encode_array(params, _query_batch(split, other))
        total += float(np.sum(base * alt))
    return total / (n_resample * len(split))


def composition_margin_rate(params: EncoderParams, split: EvalSplit,
                            query_embs: np.ndarray | None = None,
                            gold_embs: np.ndarray | None = None) -> float:
    """Fraction of composed queries closer to the gold target than both unimodal parts."""
    n = len(split)
    if n == 0:
        raise ContractError("composition margin needs composed queries")
    q = encode_array(params, _query_batch(split)) if query_embs is None else query_embs
    if gold_embs is None:
        gold_embs = encode_array(params, _image_batch(split.pool_image[np.arange(n), split.gold]))
    img = encode_array(params, _image_batch(split.query_image))
    txt = encode_array(params, _text_batch(split.query_token, params.config.image_dim))
    comp = np.sum(q * gold_embs, axis=1)
    best_part = np.maximum(np.sum(img * gold_embs, axis=1), np.sum(txt * gold_embs, axis=1))
    return float(np.mean(comp > best_part))


def evaluate(params: EncoderParams, split: EvalSplit, n_resample: int = 8, seed: int = 0) -> RetrievalReport:
    scores, q, c = pool_scores(params, split)
    acc = accuracy_at_k(scores, split.gold)
    gold_embs = c[np.arange(len(split)), split.gold]
    return RetrievalReport(
        split=split.name,
        accuracy_at_1=acc[1],
        accuracy_at_5=acc[5],
        n_queries=len(split),
        shortcut_index=shortcut_index(params, split, n_resample, seed, query_embs=q),
        composition_margin_rate=composition_margin_rate(params, split, q, gold_embs),
    )


# ---------------------------------------------------------------------------
# embedding export and PCA


@dataclass
class Projection:
    coords: np.ndarray
    components: np.ndarray
    variances: np.ndarray


def pca(embeddings: np.ndarray, k: int = 2) -> Projection:
    """Covariance eigendecomposition; each component's largest-|loading| entry is positive."""
    X = np.asarray(embeddings, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise InvalidInputError("PCA needs at least two embeddings")
    if not 1 <= k <= X.shape[1]:
        raise InvalidInputError(f"cannot project {X.shape[1]}-d data to {k} components")
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / (X.shape[0] - 1)
    if np.trace(cov) <= 1e-24:
        raise DegenerateProjectionError("all points coincide; nothing to project")
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(-evals, kind="stable")[:k]
    comps = evecs[:, order].T
    lead = np.argmax(np.abs(comps), axis=1)
    comps *= np.sign(comps[np.arange(k), lead])[:, None]
    return Projection(Xc @ comps.T, comps, np.maximum(evals[order], 0.0))


def pca_project(embeddings: np.ndarray, k: int = 2) -> np.ndarray:
    return pca(embeddings, k).coords


def export_embeddings(params: EncoderParams, split: EvalSplit, path, max_queries: int | None = None) -> dict:
    """Write composed-query, text-only, image-only and target embeddings with PCA coordinates."""
    n = len(split) if max_queries is None else min(max_queries, len(split))
    sub = np.arange(n)
    q = encode_array(params, _query_batch(split))[sub]
    txt = encode_array(params, _text_batch(split.query_token[sub], params.config.image_dim))
    img = encode_array(params, _image_batch(split.query_image[sub]))
    tgt = encode_array(params, _image_batch(split.pool_image[sub, split.gold[sub]]))
    emb = np.concatenate([q, txt, img, tgt])
    group = np.repeat([COMPOSED_QUERY, TEXT_ONLY, IMAGE_ONLY, TARGET], n)
    qidx = np.tile(sub, 4)
    proj = pca(emb, 2)
    meta = {
        "kind": "embeddings",
        "split": split.name,
        "groups": {"composed_query": COMPOSED_QUERY, "text_only": TEXT_ONLY, "image_only": IMAGE_ONLY, "target": TARGET},
        "pca_variances": [float(v) for v in proj.variances],
    }
    binfmt.write(path, DATASET_MAGIC, meta, {
        "embeddings": emb,
        "group": group,
        "query_index": qidx,
        "modification": np.tile(split.query_token[sub], 4),
        "pca": proj.coords,
    })
    return meta
