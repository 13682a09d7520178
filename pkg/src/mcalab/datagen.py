"""Synthetic composed-retrieval data with a controllable image shortcut.

A hidden base latent ``z`` (unit sphere, R^L) is rendered to an image view
``A z + noise``.  Modification token ``m`` owns a fixed offset ``delta_m``;
the composed target is ``normalize(z + delta_m)``.  The first half of the
vocabulary uses small offsets (in-distribution: the query image alone almost
identifies the target), the second half large ones (out-of-distribution: the
token is indispensable).  Composed training pairs only use the small half.
Text-to-image training pairs cover the whole vocabulary so that every token
has a learnable meaning (the image of its offset direction).

Every eval pool holds the gold target, hard distractors that share the base
latent but carry a modification from the other half, and unrelated targets.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import binfmt
from .config import from_dict, to_dict
from .errors import FormatError, InvalidConfigError, InvalidInputError
from .rng import Rng

DATASET_MAGIC = b"MCALAB01"

COMPOSED, IMAGE_TO_IMAGE, TEXT_TO_IMAGE = 0, 1, 2
GOLD, HARD, RANDOM = 0, 1, 2
NOISE_LEVELS = {"high-res": 0.05, "mid-res": 0.2, "low-res": 0.5}


@dataclass(frozen=True)
class GeneratorConfig:
    latent_dim: int = 16
    image_dim: int = 32
    vocab_size: int = 16
    ind_modification_norm: float = 0.15
    ood_modification_norm: float = 1.2
    image_noise_std: float = 0.2
    n_train: int = 8192
    n_ind_test: int = 1024
    n_ood_test: int = 1024
    unimodal_pair_fraction: float = 0.25
    pool_size: int = 64
    n_hard_distractors: int = 8
    render_gain: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 2:
            raise InvalidConfigError("vocab_size must be >= 2 (one in-distribution and one shifted token)")
        if min(self.latent_dim, self.image_dim, self.n_train, self.n_ind_test, self.n_ood_test) < 1:
            raise InvalidConfigError("dimensions and example counts must be >= 1")
        if not 0 <= self.ind_modification_norm < self.ood_modification_norm:
            raise InvalidConfigError("need 0 <= ind_modification_norm < ood_modification_norm")
        if not 0.0 <= self.unimodal_pair_fraction <= 1.0:
            raise InvalidConfigError("unimodal_pair_fraction must lie in [0, 1]")
        if self.image_noise_std < 0 or self.render_gain <= 0:
            raise InvalidConfigError("image_noise_std must be >= 0 and render_gain > 0")
        if self.n_hard_distractors < 2 or self.pool_size < self.n_hard_distractors + 1:
            raise InvalidConfigError("need n_hard_distractors >= 2 and pool_size > n_hard_distractors")

    @property
    def ind_tokens(self) -> np.ndarray:
        return np.arange(self.vocab_size // 2)

    @property
    def ood_tokens(self) -> np.ndarray:
        return np.arange(self.vocab_size // 2, self.vocab_size)


@dataclass
class Item:
    """One retrieval input; either modality may be absent, not both."""

    image_view: np.ndarray | None = None
    text_token: int | None = None

    def __post_init__(self):
        if self.image_view is None and self.text_token is None:
            raise InvalidInputError("an item needs at least one modality")

    @property
    def is_composed(self) -> bool:
        return self.image_view is not None and self.text_token is not None


@dataclass
class Pair:
    query: Item
    positive_doc: Item
    latent_base: np.ndarray
    modification_id: int


@dataclass
class PairSet:
    """Training pairs stored column-wise. Absent images are zero rows, absent tokens -1."""

    query_image: np.ndarray
    query_token: np.ndarray
    doc_image: np.ndarray
    doc_token: np.ndarray
    kind: np.ndarray
    latent_base: np.ndarray
    target_latent: np.ndarray
    modification: np.ndarray

    def __len__(self) -> int:
        return len(self.kind)

    @property
    def query_has_image(self) -> np.ndarray:
        return self.kind != TEXT_TO_IMAGE

    @property
    def doc_has_image(self) -> np.ndarray:
        return np.ones(len(self), dtype=bool)

    def pair(self, i: int) -> Pair:
        img = self.query_image[i] if self.query_has_image[i] else None
        tok = int(self.query_token[i]) if self.query_token[i] >= 0 else None
        doc_tok = int(self.doc_token[i]) if self.doc_token[i] >= 0 else None
        return Pair(
            query=Item(img, tok),
            positive_doc=Item(self.doc_image[i], doc_tok),
            latent_base=self.latent_base[i],
            modification_id=int(self.modification[i]),
        )

    def arrays(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}.{k}": v for k, v in vars(self).items()}


@dataclass
class EvalSplit:
    """Composed queries, each with a candidate pool of image-only items."""

    name: str
    query_image: np.ndarray
    query_token: np.ndarray
    query_latent: np.ndarray
    latent_base: np.ndarray
    modification: np.ndarray
    pool_image: np.ndarray
    pool_latent: np.ndarray
    pool_kind: np.ndarray
    gold: np.ndarray

    def __len__(self) -> int:
        return len(self.gold)

    @property
    def pool_size(self) -> int:
        return self.pool_image.shape[1]

    def query(self, i: int) -> Item:
        return Item(self.query_image[i], int(self.query_token[i]))

    def candidates(self, i: int) -> list[Item]:
        return [Item(v, None) for v in self.pool_image[i]]

    def arrays(self) -> dict[str, np.ndarray]:
        return {f"{self.name}.{k}": v for k, v in vars(self).items() if k != "name"}


@dataclass
class DatasetBundle:
    config: GeneratorConfig
    train: PairSet
    ind_test: EvalSplit
    ood_test: EvalSplit
    meta: dict = field(default_factory=dict)

    @property
    def splits(self) -> dict[str, EvalSplit]:
        return {"ind": self.ind_test, "ood": self.ood_test}


# ---------------------------------------------------------------------------
# generation


def _normalize(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


class _World:
    """The fixed rendering matrix and modification offsets for one config."""

    def __init__(self, cfg: GeneratorConfig, rng: Rng):
        self.cfg = cfg
        L, D = cfg.latent_dim, cfg.image_dim
        # entries N(0, gain^2 / L): each image coordinate of a unit latent has std = gain / sqrt(L)
        self.render_matrix = rng.child("render").normal(D * L).reshape(D, L) * (cfg.render_gain / np.sqrt(L))
        self.directions = rng.child("offsets").unit_vectors(cfg.vocab_size, L)
        norms = np.full(cfg.vocab_size, cfg.ood_modification_norm)
        norms[cfg.ind_tokens] = cfg.ind_modification_norm
        self.offsets = self.directions * norms[:, None]

    def render(self, latents: np.ndarray, rng: Rng) -> np.ndarray:
        shape = latents.shape[:-1]
        flat = latents.reshape(-1, self.cfg.latent_dim)
        clean = flat @ self.render_matrix.T
        noise = rng.normal(clean.size, 0.0, self.cfg.image_noise_std).reshape(clean.shape)
        return (clean + noise).reshape(*shape, self.cfg.image_dim)

    def target(self, base: np.ndarray, tokens: np.ndarray) -> np.ndarray:
        return _normalize(base + self.offsets[tokens])


def _f32(a):
    return np.asarray(a, dtype=np.float32)


def _i32(a):
    return np.asarray(a, dtype=np.int32)


def _make_train(world: _World, rng: Rng) -> PairSet:
    cfg = world.cfg
    n, L, D = cfg.n_train, cfg.latent_dim, cfg.image_dim
    base = rng.child("base").unit_vectors(n, L)
    u = rng.child("kind").uniform(2 * n)
    kind = np.full(n, COMPOSED, dtype=np.int64)
    uni = u[:n] < cfg.unimodal_pair_fraction
    kind[uni & (u[n:] < 0.5)] = IMAGE_TO_IMAGE
    kind[uni & (u[n:] >= 0.5)] = TEXT_TO_IMAGE
    ind = cfg.ind_tokens
    mod = np.where(
        kind == TEXT_TO_IMAGE,
        rng.child("text_tokens").integers(n, cfg.vocab_size),
        ind[rng.child("mod").integers(n, len(ind))],
    )
    mod[kind == IMAGE_TO_IMAGE] = -1

    target = base.copy()
    comp = kind == COMPOSED
    target[comp] = world.target(base[comp], mod[comp])
    t2i = kind == TEXT_TO_IMAGE
    target[t2i] = world.directions[mod[t2i]]
    base[t2i] = world.directions[mod[t2i]]

    q_img = world.render(base, rng.child("query_noise"))
    q_img[t2i] = 0.0
    d_img = world.render(target, rng.child("doc_noise"))
    q_tok = np.where(kind == IMAGE_TO_IMAGE, -1, mod)
    return PairSet(
        query_image=_f32(q_img),
        query_token=_i32(q_tok),
        doc_image=_f32(d_img),
        doc_token=_i32(np.full(n, -1)),
        kind=_i32(kind),
        latent_base=_f32(base),
        target_latent=_f32(target),
        modification=_i32(mod),
    )


def _make_eval(world: _World, rng: Rng, name: str, n: int, own: np.ndarray, other: np.ndarray) -> EvalSplit:
    cfg = world.cfg
    L, P, H = cfg.latent_dim, cfg.pool_size, cfg.n_hard_distractors
    base = rng.child("base").unit_vectors(n, L)
    mod = own[rng.child("mod").integers(n, len(own))]
    gold_latent = world.target(base, mod)

    pool_latent = np.empty((n, P, L))
    pool_kind = np.full((n, P), RANDOM, dtype=np.int64)
    gold = rng.child("gold").integers(n, P)
    hard_rng = rng.child("hard")
    rand_base = rng.child("random_base").unit_vectors(n * (P - 1 - H), L).reshape(n, P - 1 - H, L)
    rand_mod = own[rng.child("random_mod").integers(n * (P - 1 - H), len(own))].reshape(n, P - 1 - H)
    slot_rng = rng.child("slots")
    for i in range(n):
        # hard distractors cycle through a permutation of the opposite half
        perm = other[hard_rng.permutation(len(other))]
        hard_mods = perm[np.arange(H) % len(perm)]
        others = world.target(np.repeat(base[i : i + 1], H, axis=0), hard_mods)
        randoms = world.target(rand_base[i], rand_mod[i])
        slots = [s for s in slot_rng.permutation(P) if s != gold[i]]
        pool_latent[i, gold[i]] = gold_latent[i]
        pool_kind[i, gold[i]] = GOLD
        pool_latent[i, slots[:H]] = others
        pool_kind[i, slots[:H]] = HARD
        pool_latent[i, slots[H:]] = randoms

    q_img = world.render(base, rng.child("query_noise"))
    pool_img = world.render(pool_latent, rng.child("pool_noise"))
    return EvalSplit(
        name=name,
        query_image=_f32(q_img),
        query_token=_i32(mod),
        query_latent=_f32(gold_latent),
        latent_base=_f32(base),
        modification=_i32(mod),
        pool_image=_f32(pool_img),
        pool_latent=_f32(pool_latent),
        pool_kind=_i32(pool_kind),
        gold=_i32(gold),
    )


def generate(config: GeneratorConfig) -> DatasetBundle:
    """Deterministic bundle for ``config`` (a pure function of the config)."""
    rng = Rng(config.seed, "datagen")
    world = _World(config, rng)
    ind, ood = config.ind_tokens, config.ood_tokens
    return DatasetBundle(
        config=config,
        train=_make_train(world, rng.child("train")),
        ind_test=_make_eval(world, rng.child("ind"), "ind", config.n_ind_test, ind, ood),
        ood_test=_make_eval(world, rng.child("ood"), "ood", config.n_ood_test, ood, ind),
    )


# ---------------------------------------------------------------------------
# oracles


def _cosine_top1(queries: np.ndarray, pools: np.ndarray) -> np.ndarray:
    if pools.ndim != 3 or pools.shape[1] == 0:
        raise InvalidInputError("every query needs a non-empty candidate pool")
    q = np.asarray(queries, dtype=np.float64)
    p = np.asarray(pools, dtype=np.float64)
    qn = q / np.maximum(np.linalg.norm(q, axis=-1, keepdims=True), 1e-300)
    pn = p / np.maximum(np.linalg.norm(p, axis=-1, keepdims=True), 1e-300)
    scores = np.einsum("nd,npd->np", qn, pn)
    return np.argmax(scores, axis=1)  # first maximum = lowest index


def nearest_accuracy(queries: np.ndarray, pools: np.ndarray, gold: np.ndarray) -> float:
    """Accuracy@1 of cosine nearest neighbour, ties to the lowest candidate index."""
    return float(np.mean(_cosine_top1(queries, pools) == np.asarray(gold)))


def oracle_image_only(bundle: DatasetBundle) -> dict[str, float]:
    """Rank pools by raw image cosine, ignoring the modification token."""
    return {k: nearest_accuracy(s.query_image, s.pool_image, s.gold) for k, s in bundle.splits.items()}


def oracle_latent(bundle: DatasetBundle) -> dict[str, float]:
    """Rank pools by the hidden composed latent (upper bound)."""
    return {k: nearest_accuracy(s.query_latent, s.pool_latent, s.gold) for k, s in bundle.splits.items()}


# ---------------------------------------------------------------------------
# serialization


def to_bytes(bundle: DatasetBundle) -> bytes:
    arrays = {**bundle.train.arrays("train"), **bundle.ind_test.arrays(), **bundle.ood_test.arrays()}
    return binfmt.encode(DATASET_MAGIC, {"kind": "dataset", "config": to_dict(bundle.config)}, arrays)


def serialize(bundle: DatasetBundle, path) -> bytes:
    blob = to_bytes(bundle)
    binfmt.write_bytes(path, blob)
    return blob


def from_bytes(blob: bytes) -> DatasetBundle:
    meta, arrays = binfmt.decode(blob, DATASET_MAGIC)
    return _assemble(meta, arrays)


def deserialize(path) -> DatasetBundle:
    return from_bytes(Path(path).read_bytes())


def _assemble(meta: dict, arrays: dict[str, np.ndarray]) -> DatasetBundle:
    if meta.get("kind") != "dataset":
        raise FormatError(f"not a dataset file (kind={meta.get('kind')!r})", 12)
    cfg = from_dict(GeneratorConfig, meta["config"])

    def take(prefix, names):
        try:
            return {n: arrays[f"{prefix}.{n}"] for n in names}
        except KeyError as exc:
            raise FormatError(f"missing array {exc.args[0]!r}", 12) from None

    train_names = [f for f in PairSet.__dataclass_fields__]
    eval_names = [f for f in EvalSplit.__dataclass_fields__ if f != "name"]
    return DatasetBundle(
        config=cfg,
        train=PairSet(**take("train", train_names)),
        ind_test=EvalSplit(name="ind", **take("ind", eval_names)),
        ood_test=EvalSplit(name="ood", **take("ood", eval_names)),
    )
