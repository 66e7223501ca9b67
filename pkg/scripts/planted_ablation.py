"""Test-fold SRCC/PLCC/MSE for every variant mode on the planted synthetic problem."""

from _planted import common_args, setup

from dpcvqa.calibnet import VariantMode
from dpcvqa.evaluation import evaluate
from dpcvqa.training import TrainConfig, train


def main():
    p = common_args(__doc__)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--smooth-l1-beta", type=float, default=0.01)
    p.add_argument("--lambda-res", type=float, default=0.05)
    args = p.parse_args()
    container, fold, init = setup(args)
    cfg = TrainConfig(learning_rate=args.lr, smooth_l1_beta=args.smooth_l1_beta,
                      lambda_res=args.lambda_res, epochs=args.epochs, seed=args.seed)
    print("mode\tbest_epoch\tval_srcc\ttest_srcc\ttest_plcc\ttest_mse\tmean_abs_delta")
    for mode in VariantMode:
        res = train(container, fold.train_ids, fold.val_ids, init, cfg, mode)
        rep = evaluate(None if mode is VariantMode.BASE_ONLY else res.params, container, fold.test_ids, mode)
        print(f"{mode.value}\t{res.best_epoch}\t{res.val_srcc:.4f}\t{rep.srcc:.4f}\t{rep.plcc:.4f}"
              f"\t{rep.mse:.6f}\t{rep.mean_abs_delta:.4f}")


if __name__ == "__main__":
    main()
