"""Shared setup for the experiment scripts: the planted container, one fold and a fresh init."""

import argparse

from dpcvqa.calibnet import init_params
from dpcvqa.datastore import SyntheticConfig, generate_synthetic, rng_for
from dpcvqa.evaluation import make_folds


def common_args(description):
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--records", type=int, default=500)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--queries", type=int, default=8)
    p.add_argument("--alpha", type=float, default=0.2)
    p.add_argument("--epochs", type=int, default=30)
    return p


def setup(args):
    container = generate_synthetic(SyntheticConfig(record_count=args.records, noise_sigma=args.noise, seed=args.seed))
    fold = make_folds(container.labeled_ids, args.seed)[args.fold]
    h = container.header
    init = init_params(args.d, h.d_m, h.d_a, args.queries, args.alpha,
                       rng=rng_for(args.seed, f"init/fold{args.fold}"))
    return container, fold, init
