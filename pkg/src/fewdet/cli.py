"""Command line interface.

Subcommands: gradcheck, oracle, meta-train, fine-tune, eval, ablate,
export-data.  Exit codes: 0 success, 1 verification failure, 2
configuration error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

import numpy as np

from .config import ConfigurationError, RunConfig, load_config


def _build_parser():
    cfg = RunConfig()
    parser = argparse.ArgumentParser(
        prog="fewdet",
        description="Few-shot shape detection: verification, training and evaluation.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_model_flags=True):
        p.add_argument("--config", metavar="PATH", default=None, help="key=value config file")
        p.add_argument("--seed", type=int, default=cfg.seed, help="master seed")
        p.add_argument("--runs", type=int, default=cfg.num_runs, help="number of evaluation runs")
        p.add_argument("--k", type=int, default=cfg.k, help="shots per class")
        p.add_argument("--split", type=int, default=cfg.split_id, help="base/novel split id (0-2)")
        p.add_argument("--out", metavar="PATH", default="", help="output path (checkpoint / metrics / directory)")
        p.add_argument("--precision", choices=("f32", "f64"), default=cfg.precision, help="float width")
        if with_model_flags:
            p.add_argument("--no-drd", action="store_true", help="disable dense query/support attention")
            p.add_argument("--no-cfa", action="store_true", help="disable multi-resolution pooling (fixed 8x8)")
            p.add_argument("--no-cfa-attn", action="store_true", help="plain sum fusion instead of learned weights")
            p.add_argument(
                "--baseline-reweight", action="store_true", help="channel-wise support-vector baseline instead of attention"
            )
        return p

    common(sub.add_parser("gradcheck", help="finite-difference checks for every differentiable op",
                          formatter_class=argparse.ArgumentDefaultsHelpFormatter), with_model_flags=False)
    common(sub.add_parser("oracle", help="brute-force oracle comparisons for the fast code paths",
                          formatter_class=argparse.ArgumentDefaultsHelpFormatter), with_model_flags=False)
    p = common(sub.add_parser("meta-train", help="train on base classes; writes a checkpoint to --out",
                              formatter_class=argparse.ArgumentDefaultsHelpFormatter))
    p.add_argument("--debug-jsonl", metavar="PATH", default="", help="attention/fusion debug stream")
    p.add_argument("--progress", type=int, default=500, help="print a loss line every N steps (0 = quiet)")
    p = common(sub.add_parser("fine-tune", help="k-shot adaptation from a meta-trained checkpoint",
                              formatter_class=argparse.ArgumentDefaultsHelpFormatter))
    p.add_argument("--checkpoint", metavar="PATH", required=True, help="meta-trained checkpoint")
    p.add_argument("--run-index", type=int, default=0, help="shot-pool index")
    p = common(sub.add_parser("eval", help="multi-run fine-tune + evaluation from one checkpoint",
                              formatter_class=argparse.ArgumentDefaultsHelpFormatter))
    p.add_argument("--checkpoint", metavar="PATH", required=True, help="meta-trained checkpoint")
    p.add_argument("--eval-images", type=int, default=cfg.num_eval_images, help="test images per run")
    p = common(sub.add_parser("ablate", help="paired comparison: full vs no-CFA vs reweighting baseline",
                              formatter_class=argparse.ArgumentDefaultsHelpFormatter))
    p.add_argument("--workdir", metavar="DIR", default="ablation_work", help="checkpoint cache directory")
    p.add_argument("--eval-images", type=int, default=cfg.num_eval_images, help="test images per run")
    p.add_argument("--progress", type=int, default=500, help="print a loss line every N steps (0 = quiet)")
    p = common(sub.add_parser("export-data", help="write a dataset sample as PPM images + CSV annotations",
                              formatter_class=argparse.ArgumentDefaultsHelpFormatter), with_model_flags=False)
    p.add_argument("--images", type=int, default=50, help="number of images to export")
    return parser


def _config_from_args(args, mode):
    cfg = RunConfig(mode=mode)
    if getattr(args, "config", None):
        cfg = load_config(args.config, base=cfg)
        cfg = replace(cfg, mode=mode)
    cfg = replace(
        cfg,
        seed=args.seed,
        num_runs=args.runs,
        k=args.k,
        split_id=args.split,
        out=args.out or cfg.out,
        precision=args.precision,
    )
    if hasattr(args, "no_drd"):
        cfg = replace(
            cfg,
            use_drd=cfg.use_drd and not args.no_drd,
            use_cfa=cfg.use_cfa and not args.no_cfa,
            cfa_attention=cfg.cfa_attention and not args.no_cfa_attn,
            baseline_reweight=cfg.baseline_reweight or args.baseline_reweight,
        )
        if args.baseline_reweight:
            cfg = replace(cfg, use_drd=False)
    if hasattr(args, "checkpoint"):
        cfg = replace(cfg, checkpoint=args.checkpoint)
    if getattr(args, "eval_images", None):
        cfg = replace(cfg, num_eval_images=args.eval_images)
    if getattr(args, "debug_jsonl", ""):
        cfg = replace(cfg, debug_jsonl=args.debug_jsonl)
    return cfg.validate()


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except ConfigurationError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2


def _dispatch(args):
    cmd = args.command
    if cmd == "gradcheck":
        from .gradcheck import format_report, gradcheck_all

        results = gradcheck_all(seed=args.seed)
        print(format_report(results))
        return 0 if all(r.passed for r in results) else 1

    if cmd == "oracle":
        from .oracles import format_oracle_report, run_oracle_suite

        lines, ok = format_oracle_report(run_oracle_suite(seed=args.seed))
        print("\n".join(lines))
        return 0 if ok else 1

    if cmd == "meta-train":
        cfg = _config_from_args(args, "meta_train")
        if not cfg.out:
            raise ConfigurationError("meta-train requires --out for the checkpoint")
        from .detector import DetectorConfig, FewShotDetector
        from .episodes import make_split
        from .train import DebugWriter, detector_config, meta_train, save_model

        model = FewShotDetector(detector_config(cfg), seed=cfg.seed, dtype=cfg.dtype())
        writer = DebugWriter(cfg.debug_jsonl) if cfg.debug_jsonl else None
        losses = meta_train(
            model,
            make_split(cfg.split_id),
            cfg.seed,
            cfg.meta_schedule,
            cfg.momentum,
            cfg.weight_decay,
            debug_writer=writer,
            progress=args.progress or None,
        )
        save_model(cfg.out, model, extra={"phase": "meta_train",
                                          "final_loss_avg100": float(np.mean(losses[-100:]))})
        start = float(np.mean(losses[:100]))
        end = float(np.mean(losses[-100:]))
        print(f"meta-train done: start avg100 {start:.4f} -> final avg100 {end:.4f}; checkpoint {cfg.out}")
        return 0

    if cmd == "fine-tune":
        cfg = _config_from_args(args, "fine_tune")
        if not cfg.out:
            raise ConfigurationError("fine-tune requires --out for the adapted checkpoint")
        from .episodes import build_shot_pool, make_split
        from .train import fine_tune, load_model, save_model

        split = make_split(cfg.split_id)
        model = _load_for(cfg)
        budget = build_shot_pool(cfg.dataset_seed, split, cfg.k, run_index=args.run_index)
        losses = fine_tune(model, split, budget, seed=cfg.seed, schedule=cfg.finetune_schedule,
                           momentum=cfg.momentum, weight_decay=cfg.weight_decay)
        save_model(cfg.out, model, extra={"phase": "fine_tune", "k": cfg.k,
                                          "run_index": args.run_index,
                                          "final_loss_avg100": float(np.mean(losses[-100:]))})
        print(f"fine-tune done (k={cfg.k}); checkpoint {cfg.out}")
        return 0

    if cmd == "eval":
        cfg = _config_from_args(args, "eval")
        from .train import run_suite

        report = run_suite(cfg)
        agg = report["aggregate"]
        print(
            f"novel AP50 {agg['mean_novel_ap50']:.3f} +/- {agg['std_novel_ap50']:.3f}   "
            f"base AP50 {agg['mean_base_ap50']:.3f} +/- {agg['std_base_ap50']:.3f}   "
            f"({agg['num_runs']} runs)"
        )
        return 0

    if cmd == "ablate":
        cfg = _config_from_args(args, "ablate")
        from .train import ablation_suite

        report = ablation_suite(cfg, args.workdir, progress=args.progress or None)
        print(f"full model:          novel AP50 {report['full']['mean_novel_ap50']:.3f}")
        for variant in ("no_cfa", "reweight_baseline"):
            r = report[variant]
            print(
                f"{variant:<20} novel AP50 {r['mean_novel_ap50']:.3f}   paired diff vs full "
                f"{r['paired_diff_mean']:+.3f}   full >= variant: {r['full_at_least_as_good']}"
            )
        return 0

    if cmd == "export-data":
        cfg = _config_from_args(args, "export_data")
        if not cfg.out:
            raise ConfigurationError("export-data requires --out directory")
        from .episodes import export_dataset, make_split

        n = export_dataset(cfg.out, make_split(cfg.split_id), cfg.dataset_seed, args.images)
        print(f"wrote {args.images} images, {n} annotations to {cfg.out}")
        return 0

    raise ConfigurationError(f"unknown command {cmd!r}")


def _load_for(cfg):
    import os

    from .train import load_model

    if not cfg.checkpoint or not os.path.exists(cfg.checkpoint):
        raise ConfigurationError(f"checkpoint not found: {cfg.checkpoint!r}")
    return load_model(cfg.checkpoint, overrides={
        "use_drd": cfg.use_drd,
        "use_cfa": cfg.use_cfa,
        "cfa_attention": cfg.cfa_attention,
        "baseline_reweight": cfg.baseline_reweight,
    })


if __name__ == "__main__":
    sys.exit(main())
