"""Unified encoder: one parameter set for composed, image-only and text-only items.

Each item fills two slots of width ``d_model``: the projected image view (or
a learned absent-image vector) and the token embedding (or a learned
absent-text vector).  The concatenated slots go through a GELU MLP trunk and
an output projection, then rows are L2-normalized.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from . import binfmt
from .autodiff import Tensor
from .config import from_dict, to_dict
from .datagen import Item
from .errors import ContractError, FormatError, IncompatibleCheckpointError, InvalidConfigError, InvalidInputError
from .rng import Rng

CHECKPOINT_MAGIC = b"MCACKPT1"


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int = 64
    d_out: int = 64
    n_hidden_layers: int = 2
    image_dim: int | None = None
    text_vocab: int | None = None

    def __post_init__(self):
        dims = [self.d_model, self.d_out, self.n_hidden_layers]
        dims += [d for d in (self.image_dim, self.text_vocab) if d is not None]
        if min(dims) < 1:
            raise InvalidConfigError("encoder dimensions must be >= 1")

    def resolve(self, image_dim: int, text_vocab: int) -> "EncoderConfig":
        """Fill data-dependent sizes; explicit values must agree with the data."""
        for name, have, want in (("image_dim", self.image_dim, image_dim), ("text_vocab", self.text_vocab, text_vocab)):
            if have is not None and have != want:
                raise InvalidConfigError(f"encoder.{name}={have} but the dataset has {want}")
        return replace(self, image_dim=image_dim, text_vocab=text_vocab)

    @property
    def resolved(self) -> bool:
        return self.image_dim is not None and self.text_vocab is not None


def parameter_shapes(cfg: EncoderConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Stable, ordered manifest of parameter names and shapes."""
    if not cfg.resolved:
        raise InvalidConfigError("encoder config needs image_dim and text_vocab")
    d = cfg.d_model
    shapes = [
        ("image_proj.weight", (cfg.image_dim, d)),
        ("image_proj.bias", (d,)),
        ("text_embed.weight", (cfg.text_vocab, d)),
        ("absent_image", (d,)),
        ("absent_text", (d,)),
    ]
    fan_in = 2 * d
    for i in range(cfg.n_hidden_layers):
        shapes += [(f"trunk.{i}.weight", (fan_in, d)), (f"trunk.{i}.bias", (d,))]
        fan_in = d
    shapes += [("out_proj.weight", (d, cfg.d_out)), ("out_proj.bias", (cfg.d_out,))]
    return shapes


class EncoderParams:
    """Named encoder tensors in manifest order."""

    def __init__(self, config: EncoderConfig, tensors: dict[str, Tensor]):
        expected = parameter_shapes(config)
        got = [(k, tuple(v.shape)) for k, v in tensors.items()]
        if got != expected:
            raise IncompatibleCheckpointError(f"parameter manifest {got} does not match {expected}")
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def values(self):
        return self.tensors.values()

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.config, {k: Tensor(v.data, requires_grad=v.requires_grad) for k, v in self.items()})

    def n_parameters(self) -> int:
        return sum(v.size for v in self.values())


def init_params(config: EncoderConfig, seed: int) -> EncoderParams:
    """Weights ~ N(0, 1/sqrt(fan_in)), biases 0, absent vectors and embeddings ~ N(0, 0.02)."""
    rng = Rng(seed, "encoder")
    tensors = {}
    for name, shape in parameter_shapes(config):
        n = int(np.prod(shape))
        if name.endswith(".bias"):
            data = np.zeros(n)
        elif name.startswith("absent_") or name == "text_embed.weight":
            data = rng.child(name).normal(n, 0.0, 0.02)
        else:
            data = rng.child(name).normal(n, 0.0, 1.0 / np.sqrt(shape[0]))
        tensors[name] = Tensor(data.reshape(shape), requires_grad=True)
    return EncoderParams(config, tensors)


# ---------------------------------------------------------------------------
# batches of items


@dataclass
class ItemBatch:
    """Column-wise items: ``image`` rows are ignored where ``has_image`` is false;
    ``token`` is -1 where text is absent."""

    image: np.ndarray
    has_image: np.ndarray
    token: np.ndarray

    def __len__(self) -> int:
        return len(self.token)

    @property
    def has_text(self) -> np.ndarray:
        return self.token >= 0

    @property
    def is_composed(self) -> np.ndarray:
        return self.has_image & self.has_text

    @classmethod
    def from_items(cls, items: Sequence[Item], image_dim: int) -> "ItemBatch":
        n = len(items)
        image = np.zeros((n, image_dim))
        has_image = np.zeros(n, dtype=bool)
        token = np.full(n, -1, dtype=np.int64)
        for i, it in enumerate(items):
            if it.image_view is None and it.text_token is None:
                raise ContractError(f"item {i} has no modality")
            if it.image_view is not None:
                image[i] = it.image_view
                has_image[i] = True
            if it.text_token is not None:
                token[i] = it.text_token
        return cls(image, has_image, token)

    @classmethod
    def concat(cls, batches: Sequence["ItemBatch"]) -> "ItemBatch":
        return cls(
            np.concatenate([b.image for b in batches]),
            np.concatenate([b.has_image for b in batches]),
            np.concatenate([b.token for b in batches]),
        )

    def take(self, idx) -> "ItemBatch":
        return ItemBatch(self.image[idx], self.has_image[idx], self.token[idx])

    def image_parts(self) -> "ItemBatch":
        return ItemBatch(self.image, self.has_image.copy(), np.full(len(self), -1, dtype=np.int64))

    def text_parts(self) -> "ItemBatch":
        return ItemBatch(np.zeros_like(self.image), np.zeros(len(self), dtype=bool), self.token.copy())


def unimodal_parts(item: Item) -> list[Item]:
    """[image-only part, text-only part] of a composed item."""
    if not item.is_composed:
        raise ContractError("unimodal_parts needs a composed item")
    return [Item(item.image_view, None), Item(None, item.text_token)]


def encode(params: EncoderParams, batch: ItemBatch | Sequence[Item]) -> Tensor:
    """Embed a batch; rows are unit-norm, shape (n, d_out)."""
    cfg = params.config
    if not isinstance(batch, ItemBatch):
        batch = ItemBatch.from_items(batch, cfg.image_dim)
    has_text = batch.has_text
    if not np.all(batch.has_image | has_text):
        raise ContractError(f"item {int(np.flatnonzero(~(batch.has_image | has_text))[0])} has no modality")
    if np.any(batch.token >= cfg.text_vocab):
        raise InvalidInputError(f"token {int(batch.token.max())} outside vocabulary of {cfg.text_vocab}")
    if batch.image.shape[1] != cfg.image_dim:
        raise InvalidInputError(f"image views have {batch.image.shape[1]} dims, encoder expects {cfg.image_dim}")

    p = params.tensors
    img = ad.add(ad.matmul(Tensor(batch.image), p["image_proj.weight"]), p["image_proj.bias"])
    img = ad.where_rows(batch.has_image, img, p["absent_image"])
    txt = ad.gather_rows(p["text_embed.weight"], np.where(has_text, batch.token, 0))
    txt = ad.where_rows(has_text, txt, p["absent_text"])
    h = ad.concat_cols(img, txt)
    for i in range(cfg.n_hidden_layers):
        h = ad.gelu(ad.add(ad.matmul(h, p[f"trunk.{i}.weight"]), p[f"trunk.{i}.bias"]))
    out = ad.add(ad.matmul(h, p["out_proj.weight"]), p["out_proj.bias"])
    return ad.l2_normalize_rows(out)


def encode_array(params: EncoderParams, batch: ItemBatch, chunk: int = 8192) -> np.ndarray:
    """Gradient-free encoding in fixed-size chunks."""
    out = []
    with ad.no_grad():
        for start in range(0, len(batch), chunk):
            out.append(encode(params, batch.take(slice(start, start + chunk))).data)
    return np.concatenate(out) if out else np.zeros((0, params.config.d_out))


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_bytes(params: EncoderParams, step: int, mixer_name: str | None = None,
                     mixer_params: dict[str, Tensor] | None = None) -> bytes:
    mixer_params = mixer_params or {}
    meta = {
        "kind": "checkpoint",
        "encoder": to_dict(params.config),
        "step": int(step),
        "manifest": list(params.tensors),
        "mixer": mixer_name,
        "mixer_manifest": list(mixer_params),
    }
    arrays = {k: v.data for k, v in params.items()}
    arrays.update({f"mixer.{k}": v.data for k, v in mixer_params.items()})
    return binfmt.encode(CHECKPOINT_MAGIC, meta, arrays)


def save_checkpoint(params: EncoderParams, step: int, path, mixer_name: str | None = None,
                    mixer_params: dict[str, Tensor] | None = None) -> bytes:
    """Write float32 parameters; returns the file bytes."""
    blob = checkpoint_bytes(params, step, mixer_name, mixer_params)
    binfmt.write_bytes(path, blob)
    return blob


@dataclass
class Checkpoint:
    params: EncoderParams
    step: int
    mixer_name: str | None
    mixer_params: dict[str, Tensor]

    def __iter__(self):
        # unpacks as (params, step)
        return iter((self.params, self.step))


def parse_checkpoint(blob: bytes, config: EncoderConfig | None = None) -> Checkpoint:
    meta, arrays = binfmt.decode(blob, CHECKPOINT_MAGIC)
    if meta.get("kind") != "checkpoint":
        raise FormatError(f"not a checkpoint (kind={meta.get('kind')!r})", 12)
    stored = from_dict(EncoderConfig, meta["encoder"])
    if config is not None:
        want = replace(
            config,
            image_dim=config.image_dim or stored.image_dim,
            text_vocab=config.text_vocab or stored.text_vocab,
        )
        if want != stored:
            raise IncompatibleCheckpointError(f"checkpoint encoder {stored} does not match {want}")
    expected = parameter_shapes(stored)
    if meta["manifest"] != [n for n, _ in expected]:
        raise IncompatibleCheckpointError("parameter manifest does not match the encoder layout")
    tensors = {}
    for name, shape in expected:
        arr = arrays.get(name)
        if arr is None or tuple(arr.shape) != shape:
            raise IncompatibleCheckpointError(f"parameter {name!r}: expected shape {shape}")
        tensors[name] = Tensor(arr.astype(np.float64), requires_grad=True)
    mixer = {k: Tensor(arrays[f"mixer.{k}"].astype(np.float64), requires_grad=True) for k in meta.get("mixer_manifest", [])}
    return Checkpoint(EncoderParams(stored, tensors), int(meta["step"]), meta.get("mixer"), mixer)


def load_checkpoint(path, config: EncoderConfig | None = None) -> Checkpoint:
    """Load a checkpoint; ``params, step = load_checkpoint(path)`` also works."""
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read(), config)
