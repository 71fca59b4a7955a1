"""Command-line harness.

Subcommands: gen-data, train, eval, sample, redesign, robustness,
check-equivalence, naive-descent.  A JSON --config file overrides any flag;
the fully resolved configuration is echoed to the output directory so every
run is reproducible from its artifacts alone.
"""

import argparse
import json
import sys

from . import experiments

__all__ = ["main", "build_parser"]


def _float_list(text):
    return [float(v) for v in text.split(",") if v.strip() != ""]


def _int_list(text):
    return [int(v) for v in text.split(",") if v.strip() != ""]


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dragdiff",
        description="Drag-guided diffusion sampling experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", default=None, help="JSON file overriding flags")

    def schedule_flags(p):
        p.add_argument("--T", type=int, default=80)
        p.add_argument("--sigma-min", dest="sigma_min", type=float, default=0.0)
        p.add_argument("--sigma-max", dest="sigma_max", type=float, default=5.0)
        p.add_argument("--schedule", choices=["log_linear", "linear"], default="log_linear")

    def guidance_flags(p):
        p.add_argument("--eta0", type=float, default=400.0)
        p.add_argument("--cfg-scale", dest="cfg_scale", type=float, default=7.5)
        p.add_argument("--ge-gamma", dest="ge_gamma", type=float, default=2.0)
        p.add_argument(
            "--sampler",
            choices=["ddim", "ddim_pgd_form", "gradient_estimation"],
            default="ddim",
        )

    p = sub.add_parser("gen-data", help="write a synthetic vehicle dataset")
    common(p)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--side", type=int, default=224)
    p.set_defaults(func=experiments.cmd_gen_data)

    p = sub.add_parser("train", help="fit the ridge head on random conv features")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--lambda", dest="lam", type=float, default=10.0)
    p.add_argument("--augment", action="store_true", help="train on 10x augmented records")
    p.add_argument("--augment-seed", dest="augment_seed", type=int, default=1)
    p.add_argument("--feature-seed", dest="feature_seed", type=int, default=0)
    p.add_argument("--channels", type=int, default=160)
    p.add_argument("--no-standardize", dest="standardize", action="store_false")
    p.add_argument("--out-model", dest="out_model", default=None)
    p.set_defaults(func=experiments.cmd_train)

    p = sub.add_parser("eval", help="R^2 / MSE of a saved model on a dataset")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=experiments.cmd_eval)

    p = sub.add_parser("sample", help="paired baseline/guided generation")
    common(p)
    schedule_flags(p)
    guidance_flags(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="dataset backing the empirical denoiser")
    p.add_argument("--n-pairs", dest="n_pairs", type=int, default=10)
    p.add_argument("--size", type=int, default=64, help="sampling resolution")
    p.add_argument("--max-components", dest="max_components", type=int, default=None)
    p.set_defaults(func=experiments.cmd_sample)

    p = sub.add_parser("redesign", help="image-to-image sweeps over sigma_T")
    common(p)
    schedule_flags(p)
    guidance_flags(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--reference", required=True, help="reference PNG")
    p.add_argument("--sigma-T", dest="sigma_T", type=_float_list, required=True)
    p.add_argument("--seeds", type=_int_list, default=[0])
    p.add_argument("--max-components", dest="max_components", type=int, default=None)
    p.set_defaults(func=experiments.cmd_redesign)

    p = sub.add_parser("robustness", help="prediction MSE vs added noise")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--noise-levels", dest="noise_levels", type=_float_list, required=True)
    p.add_argument("--mixture", default=None, help="mixture JSON instead of the empirical denoiser")
    p.add_argument("--max-components", dest="max_components", type=int, default=None)
    p.set_defaults(func=experiments.cmd_robustness)

    p = sub.add_parser("check-equivalence", help="guided step vs projected-gradient form")
    common(p)
    p.add_argument("--n-configs", dest="n_configs", type=int, default=100)
    p.add_argument("--T", type=int, default=80)
    p.set_defaults(func=experiments.cmd_check_equivalence)

    p = sub.add_parser("naive-descent", help="plain gradient descent on pixels")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--save-every", dest="save_every", type=int, default=20)
    p.set_defaults(func=experiments.cmd_naive_descent)

    return parser


def resolve_config(args):
    """Merge flags with the optional --config JSON (file wins)."""
    config = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    if args.config:
        with open(args.config) as fh:
            overrides = json.load(fh)
        unknown = sorted(set(overrides) - set(config) - {"command"})
        if unknown:
            raise SystemExit(f"unknown config keys: {unknown}")
        config.update(overrides)
    return config


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    config = resolve_config(args)
    result = args.func(config)
    if result:
        print(json.dumps(result, sort_keys=True, default=str))
    if isinstance(result, dict) and result.get("ok") is False:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
