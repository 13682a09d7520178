"""Training loop: epoch-permuted batches, AdamW with linear warmup/decay."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor
from .config import to_dict
from .datagen import DatasetBundle, PairSet
from .errors import InvalidConfigError, TrainingDivergenceError
from .model import EncoderConfig, EncoderParams, ItemBatch, init_params, save_checkpoint
from .objectives import MCAConfig, TrainBatch, init_mixer, total_loss
from .rng import Rng

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    warmup_steps: int = 200
    peak_learning_rate: float = 1e-3
    weight_decay: float = 0.01
    batch_size: int = 256
    seed: int = 0
    eval_every: int = 100
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    mca: MCAConfig = field(default_factory=MCAConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if self.steps < 1 or not 0 <= self.warmup_steps <= self.steps:
            raise InvalidConfigError("need steps >= 1 and 0 <= warmup_steps <= steps")
        if self.batch_size < 2:
            raise InvalidConfigError("batch_size must be >= 2")
        if self.peak_learning_rate < 0 or self.weight_decay < 0 or self.eval_every < 0:
            raise InvalidConfigError("learning rate, weight decay and eval_every must be >= 0")


@dataclass
class StepRecord:
    step: int
    lr: float
    loss_total: float
    loss_cl: float
    loss_mcp: float
    loss_mcr: float
    wall_ms: float

    def to_json(self) -> str:
        # wall-clock time goes to a separate file so metric logs stay reproducible
        d = asdict(self)
        d.pop("wall_ms")
        return json.dumps(d, sort_keys=True)


# ---------------------------------------------------------------------------
# batches


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Indices for ``step``: consecutive slices of a per-epoch permutation.

    The trailing partial slice of each epoch is dropped.
    """
    if batch_size > n:
        raise InvalidConfigError(f"batch_size {batch_size} exceeds dataset size {n}")
    per_epoch = n // batch_size
    epoch, slot = divmod(step, per_epoch)
    perm = Rng(seed, "batches").child(f"epoch{epoch}").permutation(n)
    return perm[slot * batch_size : (slot + 1) * batch_size]


def make_batch(pairs: PairSet, idx: np.ndarray) -> TrainBatch:
    queries = ItemBatch(
        pairs.query_image[idx].astype(np.float64),
        pairs.query_has_image[idx],
        pairs.query_token[idx].astype(np.int64),
    )
    docs = ItemBatch(
        pairs.doc_image[idx].astype(np.float64),
        pairs.doc_has_image[idx],
        pairs.doc_token[idx].astype(np.int64),
    )
    return TrainBatch(queries, docs)


def assemble_batch(pairs: PairSet, batch_size: int, rng_state: tuple[int, int]) -> TrainBatch:
    """Batch for ``rng_state = (seed, step)``; a pure function of its inputs."""
    seed, step = rng_state
    return make_batch(pairs, batch_indices(len(pairs), batch_size, seed, step))


# ---------------------------------------------------------------------------
# optimizer


def lr_at(step: int, config: TrainConfig) -> float:
    peak, warm, total = config.peak_learning_rate, config.warmup_steps, config.steps
    if step < warm:
        return peak * step / warm
    if total == warm:
        return peak
    return peak * max(0.0, (total - step) / (total - warm))


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: dict[str, int] = field(default_factory=dict)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray | None], state: AdamState,
               lr: float, weight_decay: float, betas=(0.9, 0.999), eps: float = 1e-8) -> dict[str, np.ndarray]:
    """One decoupled-weight-decay Adam update; returns new arrays and updates ``state``.

    Parameters whose gradient is None are left untouched.
    """
    b1, b2 = betas
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        if g.shape != p.shape:
            raise InvalidConfigError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(f"non-finite gradient for parameter {name}")
        t = state.t.get(name, 0) + 1
        m = b1 * state.m.get(name, 0.0) + (1.0 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new = p * (1.0 - lr * weight_decay) - lr * m_hat / (np.sqrt(v_hat) + eps)
        state.m[name], state.v[name], state.t[name] = m, v, t
        out[name] = new
    return out


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    params: EncoderParams
    mixer_params: dict[str, Tensor]
    records: list[StepRecord]
    probes: list[dict]
    checkpoint: bytes | None = None
    config: TrainConfig | None = None

    def smoothed_cl(self, window: int = 200) -> float:
        """Mean CL term over the last ``window`` steps."""
        return float(np.mean([r.loss_cl for r in self.records[-window:]]))


def _all_params(params: EncoderParams, mixer: dict[str, Tensor]) -> dict[str, Tensor]:
    out = dict(params.items())
    out.update({f"mixer.{k}": v for k, v in mixer.items()})
    return out


def _sha256(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


def run_training(bundle: DatasetBundle, config: TrainConfig, out_dir=None,
                 progress_every: int = 0) -> TrainResult:
    """Train an encoder on ``bundle.train``; optionally write logs and checkpoints to ``out_dir``."""
    from .evaluation import evaluate

    enc_cfg = config.encoder.resolve(bundle.config.image_dim, bundle.config.vocab_size)
    params = init_params(enc_cfg, config.seed)
    mixer = init_mixer(config.mca.mixer, enc_cfg.d_out, config.seed, config.mca.mfb_factor)
    named = _all_params(params, mixer)
    state = AdamState()
    records: list[StepRecord] = []
    probes: list[dict] = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    def write_checkpoint(step: int, name: str) -> bytes:
        blob = None
        if out is not None:
            blob = save_checkpoint(params, step, out / name, config.mca.mixer, mixer)
        return blob

    for step in range(config.steps):
        t0 = time.perf_counter()
        lr = lr_at(step, config)
        batch = assemble_batch(bundle.train, config.batch_size, (config.seed, step))
        for p in named.values():
            p.zero_grad()
        loss, parts = total_loss(batch, params, config.mca, mixer)
        if not np.isfinite(parts.total):
            write_checkpoint(step, "last_good.ckpt")
            raise TrainingDivergenceError(f"non-finite loss at step {step}; last good parameters kept")
        ad.backward(loss)
        try:
            new = adamw_step(
                {k: p.data for k, p in named.items()},
                {k: p.grad for k, p in named.items()},
                state, lr, config.weight_decay, config.betas, config.eps,
            )
        except TrainingDivergenceError as exc:
            write_checkpoint(step, "last_good.ckpt")
            raise TrainingDivergenceError(f"step {step}: {exc}; last good parameters kept") from None
        for k, p in named.items():
            p.data = new[k]
        records.append(StepRecord(step, lr, parts.total, parts.cl, parts.mcp, parts.mcr,
                                  (time.perf_counter() - t0) * 1e3))
        if progress_every and (step + 1) % progress_every == 0:
            log.info("step %d lr %.2e total %.4f cl %.4f mcp %.4f mcr %.4f", step + 1, lr,
                     parts.total, parts.cl, parts.mcp, parts.mcr)
        if config.eval_every and (step + 1) % config.eval_every == 0:
            for split in (bundle.ind_test, bundle.ood_test):
                rep = evaluate(params, split, seed=config.seed)
                probes.append({"step": step + 1, **asdict(rep)})

    blob = write_checkpoint(config.steps, "final.ckpt")
    result = TrainResult(params, mixer, records, probes, blob, config)
    if out is not None:
        _write_logs(out, bundle, config, result)
    return result


def _write_logs(out: Path, bundle: DatasetBundle, config: TrainConfig, result: TrainResult) -> None:
    from .datagen import to_bytes

    (out / "metrics.jsonl").write_text("".join(r.to_json() + "\n" for r in result.records))
    (out / "probes.jsonl").write_text("".join(json.dumps(p, sort_keys=True) + "\n" for p in result.probes))
    (out / "timing.jsonl").write_text(
        "".join(json.dumps({"step": r.step, "wall_ms": round(r.wall_ms, 3)}) + "\n" for r in result.records)
    )
    artifacts = {
        name: _sha256((out / name).read_bytes()) for name in ("metrics.jsonl", "probes.jsonl", "final.ckpt")
    }
    write_manifest(
        out / "manifest.json",
        command="train",
        config=to_dict(config),
        seed=config.seed,
        inputs={"dataset_sha256": _sha256(to_bytes(bundle)), "data_config": to_dict(bundle.config)},
        artifacts=artifacts,
    )


def write_manifest(path, command: str, config: dict, seed: int, inputs: dict, artifacts: dict) -> None:
    """Everything needed to rerun bit-exactly (no timestamps, so reruns match)."""
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": inputs,
        "artifacts": artifacts,
        "kernel_backend": kernels.get_backend(),
        "numpy_version": np.__version__,
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
