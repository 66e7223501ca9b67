"""Smooth L1 transition point and step size versus what the residual model learns.

With a transition of 1.0 every error sits in the quadratic branch, so the
regression pull on a correction is the error itself (a few hundredths here),
below the constant pull of 0.05 from the |Delta| penalty: the corrections stay
near zero. A small transition turns the regression term into an absolute error
whose pull of 1 dominates the penalty.
"""

from _planted import common_args, setup

from dpcvqa.calibnet import VariantMode
from dpcvqa.evaluation import evaluate
from dpcvqa.training import TrainConfig, train


def main():
    p = common_args(__doc__)
    p.add_argument("--betas", default="1.0,0.1,0.01")
    p.add_argument("--lrs", default="1e-4,1e-3")
    p.add_argument("--lambda-res", type=float, default=0.05)
    args = p.parse_args()
    container, fold, init = setup(args)
    base = evaluate(None, container, fold.test_ids, VariantMode.BASE_ONLY)
    print(f"# base_only test_srcc={base.srcc:.4f} mse={base.mse:.6f}")
    print("smooth_l1_beta\tlr\ttest_srcc\tsrcc_gain\tmse_reduction\tmean_abs_delta")
    for beta in (float(x) for x in args.betas.split(",")):
        for lr in (float(x) for x in args.lrs.split(",")):
            cfg = TrainConfig(learning_rate=lr, smooth_l1_beta=beta, lambda_res=args.lambda_res,
                              epochs=args.epochs, seed=args.seed)
            res = train(container, fold.train_ids, fold.val_ids, init, cfg)
            rep = evaluate(res.params, container, fold.test_ids)
            print(f"{beta:g}\t{lr:g}\t{rep.srcc:.4f}\t{rep.srcc - base.srcc:+.4f}"
                  f"\t{1 - rep.mse / base.mse:.1%}\t{rep.mean_abs_delta:.3e}")


if __name__ == "__main__":
    main()
