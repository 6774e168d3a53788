"""Time each hot kernel under the numba and numpy backends.

Usage: python3 benchmarks/bench_kernels.py [--repeat N] [--json out.json]

The first numba call compiles; it is run once as warm-up and excluded.
"""
from __future__ import annotations

import argparse
import json
import timeit

import numpy as np

from depthseq import kernels
from depthseq.phantom import PhantomSpec, generate_phantom


def workloads(rng: np.random.Generator) -> dict[str, tuple]:
    skull = generate_phantom(PhantomSpec(dims=(64, 64, 48)), 0).volume.voxels >= 300
    blobs = rng.random((48, 48, 48)) < 0.3
    # encoder-sized conv3d backward: B=4, C=8, 16x16x24 output, 3x3x3 kernel, stride (2,2,1)
    cols = rng.standard_normal((4, 8, 16, 16, 24, 3, 3, 3))
    x1 = rng.standard_normal((8, 32, 33))
    w1 = rng.standard_normal((32, 3))
    g1 = rng.standard_normal((8, 32, 33))
    xg = rng.standard_normal((4, 32, 16, 16, 24))
    _, tg = kernels.get("numpy").gelu_forward(xg)
    gg = rng.standard_normal(xg.shape)
    return {
        "label_components(phantom skull 64x64x48)": ("label_components", (skull, 26)),
        "label_components(random 48^3, p=0.3)": ("label_components", (blobs, 26)),
        "fill_holes_slices(phantom skull)": ("fill_holes_slices", (skull,)),
        "col2im3d(4x8x16x16x24, k=3)": ("col2im3d", (cols, (33, 33, 26), (2, 2, 1))),
        "depthwise_conv1d(8x32x33)": ("depthwise_conv1d", (x1, w1)),
        "depthwise_conv1d_backward(8x32x33)": ("depthwise_conv1d_backward", (x1, w1, g1)),
        "gelu_forward(4x32x16x16x24)": ("gelu_forward", (xg,)),
        "gelu_backward(4x32x16x16x24)": ("gelu_backward", (xg, tg, gg)),
    }


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--json", help="also write results here")
    args = p.parse_args(argv)

    rng = np.random.default_rng(0)
    cases = workloads(rng)
    backends = {"numba": kernels.get("numba"), "numpy": kernels.get("numpy")}
    results = {}
    print(f"{'kernel':44s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for label, (fn, fargs) in cases.items():
        row = {}
        for name, mod in backends.items():
            f = getattr(mod, fn)
            f(*fargs)  # warm-up / JIT compile
            row[name] = min(timeit.repeat(lambda: f(*fargs), number=1, repeat=args.repeat)) * 1e3
        results[label] = row
        print(f"{label:44s} {row['numba']:10.2f} {row['numpy']:10.2f} {row['numpy'] / row['numba']:7.1f}x")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(results, fh, indent=2)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
