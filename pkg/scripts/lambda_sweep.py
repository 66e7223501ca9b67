"""Effect of the correction penalty weight on accuracy and on the size of the corrections."""

from _planted import common_args, setup

from dpcvqa.calibnet import VariantMode
from dpcvqa.evaluation import evaluate
from dpcvqa.training import TrainConfig, train


def main():
    p = common_args(__doc__)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--smooth-l1-beta", type=float, default=0.01)
    p.add_argument("--lambdas", default="0,0.01,0.05,0.1,0.5,1.0")
    args = p.parse_args()
    container, fold, init = setup(args)
    base = evaluate(None, container, fold.test_ids, VariantMode.BASE_ONLY)
    print(f"# base_only test_srcc={base.srcc:.4f} mse={base.mse:.6f}")
    print("lambda_res\ttest_srcc\ttest_mse\tmean_abs_delta")
    for lam in (float(x) for x in args.lambdas.split(",")):
        cfg = TrainConfig(learning_rate=args.lr, smooth_l1_beta=args.smooth_l1_beta,
                          lambda_res=lam, epochs=args.epochs, seed=args.seed)
        res = train(container, fold.train_ids, fold.val_ids, init, cfg)
        rep = evaluate(res.params, container, fold.test_ids)
        print(f"{lam:g}\t{rep.srcc:.4f}\t{rep.mse:.6f}\t{rep.mean_abs_delta:.3e}")


if __name__ == "__main__":
    main()
