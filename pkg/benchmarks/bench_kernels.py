"""Compare the compiled and pure-numpy kernel backends.

Runs each kernel on encoder-sized inputs and one full training step of the
network with each backend, checks the outputs agree, and prints timings.

    python benchmarks/bench_kernels.py [--repeat 5] [--widths 8 16 32]
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from scnfusion.nn import _pykernels as py

try:
    from scnfusion.nn import _ckernels as cy
except ImportError:
    cy = None


def _cases(rng, batch=4, channels=8, size=116):
    x = rng.standard_normal((batch, channels, size, size))
    x2 = rng.standard_normal((batch, channels * size * size))
    gamma = rng.uniform(0.5, 1.5, channels)
    beta = rng.standard_normal(channels)
    cols = py.im2col(x, 3, 3, 1, 1)
    out, arg = py.maxpool_forward(x, 2, 2)
    dpool = rng.standard_normal(out.shape)
    bn = py.batchnorm_forward_train(x, gamma, beta, 1e-5)
    y = np.maximum(x2, 0)
    return {
        "im2col": lambda m: m.im2col(x, 3, 3, 1, 1),
        "col2im": lambda m: m.col2im(cols, x.shape, 3, 3, 1, 1),
        "maxpool_forward": lambda m: m.maxpool_forward(x, 2, 2),
        "maxpool_backward": lambda m: m.maxpool_backward(dpool, arg, x.shape, 2, 2),
        "batchnorm_forward": lambda m: m.batchnorm_forward_train(x, gamma, beta, 1e-5),
        "batchnorm_backward": lambda m: m.batchnorm_backward_train(x, bn[1], gamma, bn[4]),
        "relu_forward": lambda m: m.relu_forward(x2),
        "relu_backward": lambda m: m.relu_backward(x2, y),
    }


def _max_diff(a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    return max(float(np.max(np.abs(np.asarray(u, dtype=np.float64) - np.asarray(v, dtype=np.float64)))) for u, v in zip(a, b))


def bench_kernels(repeat):
    rng = np.random.default_rng(0)
    print(f"{'kernel':<20s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s} {'max |diff|':>11s}")
    for name, fn in _cases(rng).items():
        t_py = min(timeit.repeat(lambda: fn(py), number=1, repeat=repeat)) * 1e3
        if cy is None:
            print(f"{name:<20s} {t_py:10.2f} {'n/a':>10s}")
            continue
        t_cy = min(timeit.repeat(lambda: fn(cy), number=1, repeat=repeat)) * 1e3
        print(f"{name:<20s} {t_py:10.2f} {t_cy:10.2f} {t_py / t_cy:8.1f} {_max_diff(fn(py), fn(cy)):11.2e}")


STEP = """
import sys, timeit, numpy as np
from scnfusion.model import DuScnFusionNet, ModelConfig
from scnfusion.nn import Adam, softmax_cross_entropy, BACKEND
widths = tuple(int(w) for w in sys.argv[1].split(","))
rng = np.random.default_rng(0)
scn = rng.standard_normal((4, 2, 116, 116)); aux = rng.standard_normal((4, 119)); y = np.array([0, 1, 0, 1])
net = DuScnFusionNet(ModelConfig(conv_channels=widths), seed=0); opt = Adam(net.parameters())
def step():
    opt.zero_grad()
    loss, g = softmax_cross_entropy(net.forward(scn, aux, np.random.default_rng(1)), y)
    net.backward(g, to_input=False); opt.step()
    return loss
step()
t = min(timeit.repeat(step, number=1, repeat=int(sys.argv[2])))
print(BACKEND, repr(t), repr(float(step())))
"""


def bench_step(widths, repeat):
    """One Adam step per backend, each in a fresh interpreter (backend is fixed at import)."""
    results = {}
    for backend in ("python", "cython"):
        env = dict(os.environ, SCNFUSION_KERNELS=backend)
        proc = subprocess.run(
            [sys.executable, "-c", STEP, ",".join(map(str, widths)), str(repeat)], env=env, capture_output=True, text=True
        )
        if proc.returncode != 0:
            print(f"training step ({backend}): unavailable")
            continue
        name, t, loss = proc.stdout.split()
        results[name] = (float(t), float(loss))
    print(f"\ntraining step, widths {widths}, batch 4")
    for name, (t, loss) in results.items():
        print(f"  {name:<8s} {t * 1e3:9.1f} ms   final loss {loss:.12f}")
    if len(results) == 2:
        print(f"  speedup {results['python'][0] / results['cython'][0]:.2f}x")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--widths", type=int, nargs=3, default=[8, 16, 32])
    args = ap.parse_args()
    bench_kernels(args.repeat)
    bench_step(tuple(args.widths), args.repeat)


if __name__ == "__main__":
    main()
