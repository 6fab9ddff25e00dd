"""Time the compiled kernels against the NumPy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--dim 16]

Prints one line per kernel with the best-of-N time for each backend and the
speedup. The last row times a full forward/backward VAE step in a subprocess
per backend, since the backend is chosen at import.
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from voxelstruct.kernels import _pykernels as py

try:
    from voxelstruct.kernels import _ckernels as cy
except ImportError:
    cy = None

STEP_SNIPPET = """
import json, timeit, numpy as np
from voxelstruct import nets, kernels
from voxelstruct.tensor import Tape, Tensor
from voxelstruct.training import vae_losses
D = {dim}
cfg = nets.NetConfig(grid_dim=D, latent_dim=16)
enc, gen, _ = nets.init_params(cfg, 0, dtype=np.float32)
rng = np.random.default_rng(0)
s = (rng.random((16, D, D, D)) < 0.2).astype(np.float32)
noise = rng.standard_normal((16, 16)).astype(np.float32)
def step():
    e = {{k: Tensor(v, requires_grad=True) for k, v in enc.items()}}
    g = {{k: Tensor(v, requires_grad=True) for k, v in gen.items()}}
    with Tape() as tape:
        rec, kl, _ = vae_losses(e, g, s, cfg, noise)
        loss = rec + kl
    tape.backward(loss)
step()
print(json.dumps([kernels.BACKEND, min(timeit.repeat(step, number=1, repeat={repeat}))]))
"""


def _best(fn, repeat):
    fn()
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def kernel_cases(dim, rng):
    x = rng.standard_normal((16, 8, dim + 2, dim + 2, dim + 2))
    k, s = 4, 2
    osz = ((dim + 2 - k) // s + 1,) * 3
    cols = py.im2col3d(x, k, s, osz)
    pool_in = rng.standard_normal((16, 8, dim, dim, dim))
    _, idx = py.maxpool3d_forward(pool_in, 2)
    g = rng.standard_normal(idx.shape)
    grid = rng.random((32, dim, dim, dim))
    centers = rng.uniform(0, dim, size=(32, 10, 3))
    sigma = max(1.0, 2 * dim / 64)
    return {
        "im2col3d": lambda m: m.im2col3d(x, k, s, osz),
        "col2im3d": lambda m: m.col2im3d(cols, x.shape, k, s, osz),
        "maxpool3d_forward": lambda m: m.maxpool3d_forward(pool_in, 2),
        "maxpool3d_backward": lambda m: m.maxpool3d_backward(g, idx, 2, pool_in.shape),
        "neighborhood_max": lambda m: m.neighborhood_max(grid, centers, sigma, 2 * sigma),
    }


def step_time(backend, dim, repeat):
    env = dict(os.environ, VOXELSTRUCT_PURE_PYTHON="1" if backend == "python" else "0")
    out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(dim=dim, repeat=repeat)],
                         env=env, capture_output=True, text=True, check=True)
    name, t = json.loads(out.stdout.strip().splitlines()[-1])
    return name, t


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--dim", type=int, default=16)
    args = ap.parse_args(argv)
    if cy is None:
        print("compiled kernels not built; run `pip install -e . --no-build-isolation` first")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':<22}{'python ms':>12}{'cython ms':>12}{'speedup':>10}")
    for name, fn in kernel_cases(args.dim, rng).items():
        tp = _best(lambda: fn(py), args.repeat)
        tc = _best(lambda: fn(cy), args.repeat)
        print(f"{name:<22}{tp * 1e3:>12.2f}{tc * 1e3:>12.2f}{tp / tc:>9.1f}x")
    times = {}
    for backend in ("python", "cython"):
        name, t = step_time(backend, args.dim, args.repeat)
        if name != backend:
            print(f"warning: requested {backend} backend but got {name}")
        times[backend] = t
    tp, tc = times["python"], times["cython"]
    print(f"{'vae step (B=16)':<22}{tp * 1e3:>12.2f}{tc * 1e3:>12.2f}{tp / tc:>9.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
