"""Time the numba and numpy RLE kernels on the same inputs.

    python benchmarks/bench_kernels.py [--size 256] [--masks 16] [--repeat 5]

Both paths are imported directly, so the GROUNDSEG_DISABLE_NUMBA flag does not
matter here. Numba compile time is paid in a warm-up call before timing.
"""
import argparse
import timeit

import numpy as np

from groundseg import _accel


def masks(rng, count, side):
    out = []
    for _ in range(count):
        # blobby masks so run counts look like real segmentations, not noise
        yy, xx = np.mgrid[:side, :side]
        cy, cx, r = rng.uniform(0, side, 3) * (1, 1, 0.4)
        out.append(((yy - cy) ** 2 + (xx - cx) ** 2 < r**2).astype(np.uint8).reshape(-1))
    return out


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--size", type=int, default=256, help="mask side length")
    parser.add_argument("--masks", type=int, default=16, help="masks per side of the IoU matrix")
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    n = args.size * args.size
    flats = masks(rng, 2 * args.masks, args.size)
    runs = [_accel.encode_runs_numpy(f) for f in flats]
    pred, gt = runs[: args.masks], runs[args.masks :]

    cases = {
        "encode": (
            lambda: [_accel.encode_runs_numpy(f) for f in flats],
            lambda: [_accel.encode_runs_numba(f) for f in flats],
        ),
        "decode": (
            lambda: [_accel.decode_runs_numpy(r, n) for r in runs],
            lambda: [_accel.decode_runs_numba(r, n) for r in runs],
        ),
        "intersection": (
            lambda: [_accel.intersection_numpy(a, b) for a in pred for b in gt],
            lambda: [_accel.intersection_numba(a, b) for a in pred for b in gt],
        ),
        "iou_matrix": (
            lambda: _accel.iou_matrix_numpy(pred, gt, n),
            lambda: _accel.iou_matrix_numba(pred, gt, n),
        ),
    }
    print(f"{args.size}x{args.size} masks, {args.masks}x{args.masks} pairs, best of {args.repeat}")
    print(f"{'kernel':<14}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, (np_fn, nb_fn) in cases.items():
        nb_fn()  # compile
        t_np = min(timeit.repeat(np_fn, number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(nb_fn, number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<14}{t_np:>12.3f}{t_nb:>12.3f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
