"""Time the numpy and compiled kernel backends on training-sized inputs.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from ventalloc.kernels import NORMAL, backends


def ward_inputs(rng, n=60, k=38):
    status = np.where(rng.random(n) < 0.8, NORMAL, 0).astype(np.int8)
    lengths = rng.integers(1, 30, n).astype(np.int64)
    cursor = (rng.random(n) * lengths).astype(np.int64)
    return dict(status=status, cursor=cursor, vent=np.zeros(n, np.uint8), ever=np.zeros(n, np.uint8),
                lengths=lengths, dead=(rng.random(n) < 0.25).astype(np.uint8),
                action=(rng.random(n) < 0.5).astype(np.uint8), death_u=rng.random(n), death_prob=1.0)


def batch_inputs(rng, b=32, n=60, k=38, groups=4):
    patients = 1000
    lengths = rng.integers(1, 30, patients)
    offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]]).astype(np.int64)
    features = rng.random((int(lengths.sum()), k))
    status = np.where(rng.random((b, n)) < 0.8, NORMAL, 0).astype(np.int8)
    patient = rng.integers(0, patients, (b, n)).astype(np.int64)
    cursor = (rng.random((b, n)) * lengths[patient]).astype(np.int64)
    vent = (rng.random((b, n)) < 0.3).astype(np.uint8)
    fair = rng.random((b, 2 * groups))
    return features, offsets, patient, cursor, status, vent, fair


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    ward = ward_inputs(rng)
    gather = batch_inputs(rng)
    d = rng.normal(size=(32, 60))
    valid = rng.random((32, 60)) < 0.8
    locked = valid & (rng.random((32, 60)) < 0.2)
    cases = {
        "advance_beds (N=60)": lambda m: m.advance_beds(
            ward["status"].copy(), ward["cursor"].copy(), ward["vent"].copy(), ward["ever"].copy(), ward["lengths"],
            ward["dead"], ward["action"], ward["death_u"], ward["death_prob"]),
        "greedy_select (32x60)": lambda m: m.greedy_select(d, valid, locked, 30, False),
        "gather_tokens (32x60)": lambda m: m.gather_tokens(*gather),
    }
    impls = backends()
    print(f"{'kernel':<24}" + "".join(f"{name:>14}" for name in impls) + "   (microseconds per call)")
    for label, fn in cases.items():
        cells = []
        for mod in impls.values():
            t = min(timeit.repeat(lambda: fn(mod), number=args.repeat, repeat=3)) / args.repeat
            cells.append(f"{t * 1e6:>14.1f}")
        print(f"{label:<24}" + "".join(cells))


if __name__ == "__main__":
    main()
