"""Finite-difference gradient check over the whole small-configuration grid."""

import argparse
import itertools
import time

import numpy as np

from dpcvqa.calibnet import VariantMode
from dpcvqa.cli import fd_problem
from dpcvqa.training import TrainConfig, fd_check


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--heads", type=int, default=1)
    args = p.parse_args()
    started = time.perf_counter()
    worst = 0.0
    print("d\tM\tN\tN_a\tmode\tmax_rel_error")
    for d, m, n, n_a in itertools.product((4, 8, 16), (1, 2, 4), (1, 3, 5), (0, 2)):
        params, record, label = fd_problem(args.seed, d, m, args.heads, n=n, n_a=n_a)
        for mode in VariantMode:
            err = fd_check(params, record, label, TrainConfig(), mode=mode).max_rel_error
            worst = max(worst, err)
            print(f"{d}\t{m}\t{n}\t{n_a}\t{mode.value}\t{err:.3e}")
    print(f"# worst={worst:.3e} elapsed={time.perf_counter() - started:.1f}s")
    return 0 if worst <= 1e-4 else 1


if __name__ == "__main__":
    raise SystemExit(main())
