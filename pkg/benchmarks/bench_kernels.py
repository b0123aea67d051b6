"""Compare the numba and numpy kernel backends on the hot shapes.

Run twice to see both paths:

    python benchmarks/bench_kernels.py
    SPHDECON_DISABLE_NUMBA=1 python benchmarks/bench_kernels.py

or pass --both to fork the numpy run automatically.
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np


def timeit(fn, repeats=20):
    fn()  # warmup / jit compile
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats * 1000


def run():
    from sphdecon import _kernels as K
    from sphdecon import autodiff as ad
    from sphdecon import esd_net as en
    from sphdecon import sphere_grid as sg

    print(f"backend: {K.backend()}")
    rng = np.random.default_rng(0)
    rows = []

    grid = sg.build_grid(8)
    lap = ad.scaled_laplacian(grid.laplacian, sg.estimate_lmax(grid))
    x = rng.standard_normal((768, 1024))
    rows.append(("csr_matmul 768x(9nnz) @ 1024 cols",
                 timeit(lambda: K.csr_matmul(lap.indptr, lap.indices, lap.data, x))))

    xp = rng.standard_normal((512, 768))
    rows.append(("maxpool4 512x768", timeit(lambda: K.maxpool4(xp))))

    dense = sg.build_grid(32)
    vals = rng.standard_normal(dense.n_vertices)
    rows.append(("local_maxima nside=32",
                 timeit(lambda: K.local_maxima(vals, dense.neighbor_table))))

    model = en.build_model(en.EsdConfig(seed=0), in_channels=1)
    xb = ad.Tensor(rng.standard_normal((32, 1, 768)))

    def step():
        tape = ad.Tape()
        out = model.forward(tape, xb, training=True)
        loss = ad.sum_sq(tape, out)
        ad.zero_grads(model.parameters())
        tape.backward(loss)

    with K.kernel_threads():
        rows.append(("network fwd+bwd, batch 32", timeit(step, repeats=5)))

    width = max(len(name) for name, _ in rows)
    for name, ms in rows:
        print(f"  {name:<{width}}  {ms:8.2f} ms")


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--both", action="store_true",
                        help="also run the numpy backend in a subprocess")
    args = parser.parse_args()
    run()
    if args.both and os.environ.get("SPHDECON_DISABLE_NUMBA", "0") in ("", "0"):
        env = dict(os.environ, SPHDECON_DISABLE_NUMBA="1")
        subprocess.run([sys.executable, __file__], env=env, check=True)


if __name__ == "__main__":
    main()
