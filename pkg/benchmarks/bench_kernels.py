"""Compare the compiled and numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Times each kernel on training-sized inputs, then one full training step
(forward + backward of the default objective) under each backend.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from mcalab import kernels
from mcalab.datagen import GeneratorConfig, generate
from mcalab.model import init_params
from mcalab.objectives import MCAConfig, init_mixer, total_loss
from mcalab import autodiff as ad
from mcalab.train import assemble_batch, TrainConfig


def kernel_cases(rng):
    act = rng.standard_normal((1024, 64))
    logits = rng.standard_normal((256, 256)) * 20
    emb = rng.standard_normal((1024, 64))
    ls = kernels.log_softmax_rows(logits)
    y, norms = kernels.l2_normalize_rows(emb)
    return {
        "gelu_forward (1024x64)": lambda: kernels.gelu_forward(act),
        "gelu_backward (1024x64)": lambda: kernels.gelu_backward(act, act),
        "sigmoid_forward (1024x64)": lambda: kernels.sigmoid_forward(act),
        "log_softmax_rows (256x256)": lambda: kernels.log_softmax_rows(logits),
        "log_softmax_backward (256x256)": lambda: kernels.log_softmax_rows_backward(ls, logits),
        "l2_normalize_rows (1024x64)": lambda: kernels.l2_normalize_rows(emb),
        "l2_normalize_backward (1024x64)": lambda: kernels.l2_normalize_rows_backward(y, norms, emb),
    }


def train_step_case():
    bundle = generate(GeneratorConfig(n_train=1024, n_ind_test=8, n_ood_test=8))
    cfg = TrainConfig()
    params = init_params(cfg.encoder.resolve(32, 16), 0)
    mixer = init_mixer(cfg.mca.mixer, 64, 0)
    batch = assemble_batch(bundle.train, cfg.batch_size, (0, 0))

    def step():
        loss, _ = total_loss(batch, params, MCAConfig(), mixer)
        ad.backward(loss)

    return step


def best_of(fn, repeat: int) -> float:
    fn()
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()

    backends = kernels.available_backends()
    if "compiled" not in backends:
        print("compiled kernels not built; timing the numpy fallback only")
    rng = np.random.default_rng(0)
    cases = kernel_cases(rng)
    cases["train step (batch 256)"] = train_step_case()

    results = {}
    for backend in backends:
        kernels.set_backend(backend)
        results[backend] = {name: best_of(fn, args.repeat) for name, fn in cases.items()}

    width = max(map(len, cases))
    head = f"{'kernel':<{width}}" + "".join(f"{b + ' (us)':>16}" for b in backends)
    if len(backends) == 2:
        head += f"{'speedup':>10}"
    print(head)
    print("-" * len(head))
    for name in cases:
        row = f"{name:<{width}}" + "".join(f"{results[b][name] * 1e6:>16.1f}" for b in backends)
        if len(backends) == 2:
            row += f"{results['python'][name] / results['compiled'][name]:>9.2f}x"
        print(row)
    kernels.set_backend(backends[0])


if __name__ == "__main__":
    main()
