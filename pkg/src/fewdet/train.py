"""Training loops plus the multi-run evaluation and ablation harness.

The schedule mirrors the two-phase protocol: meta-training on base classes
with abundant episodes, then meta fine-tuning on balanced k-shot data from
base and novel classes with the classifier fc re-initialized and no layers
frozen.  Evaluation fine-tunes num_runs times from one shared meta-trained
checkpoint, each run with its own randomly sampled shot pool, and reports
per-run metrics plus mean and standard deviation.
"""

from __future__ import annotations

import os
import time

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigurationError, RunConfig
from .detector import DetectorConfig, FewShotDetector
from .episodes import EpisodeSampler, build_shot_pool, make_split, support_pairs_from_pool, evaluation_stream
from .metrics import aggregate_records, append_jsonl, evaluate
from .nn import sgd_step
from .tensor import Tape


def detector_config(cfg: RunConfig):
    return DetectorConfig(
        use_drd=cfg.use_drd,
        use_cfa=cfg.use_cfa,
        cfa_attention=cfg.cfa_attention,
        baseline_reweight=cfg.baseline_reweight,
    )


class DebugWriter:
    """Optional JSON-lines stream of attention matrices and branch weights."""

    def __init__(self, path, every=50):
        self.path = path
        self.every = every
        self._count = 0
        with open(path, "w"):
            pass

    def maybe_write(self, step, loss, model, parts):
        if step % self.every:
            return
        rec = {"kind": "debug", "step": step, "loss": float(loss)}
        dbg = model.drd.last_debug
        if dbg is not None:
            rec["attention_matrices"] = dbg["attention"].tolist()
            rec["attention_row_sums_max_dev"] = dbg["attention_row_sums_max_dev"]
            rec["pre_distill_norm"] = dbg["pre_norm"]
            rec["post_distill_norm"] = dbg["post_norm"]
        bw = parts.get("branch_weights")
        if bw is not None and np.size(bw):
            rec["branch_weights"] = np.asarray(bw).tolist()
        append_jsonl(self.path, rec)


def run_schedule(model, sampler, schedule, momentum=0.9, weight_decay=1e-4, debug_writer=None, progress=None):
    """SGD over episodes following an (iterations, lr) schedule; returns losses."""
    params = model.parameters()
    losses = []
    step = 0
    want_parts = debug_writer is not None
    if want_parts:
        model.drd.debug = True
    try:
        for iterations, lr in schedule:
            for _ in range(iterations):
                episode = sampler.sample()
                with Tape() as tape:
                    if want_parts:
                        loss, parts = model.forward_train(episode, return_parts=True)
                    else:
                        loss, parts = model.forward_train(episode), {}
                tape.backward(loss)
                sgd_step(params, lr, momentum=momentum, weight_decay=weight_decay)
                losses.append(loss.item())
                if debug_writer is not None:
                    debug_writer.maybe_write(step, losses[-1], model, parts)
                if progress is not None and step % progress == 0:
                    recent = np.mean(losses[-100:])
                    print(f"  step {step:5d}  lr {lr:.4g}  loss {losses[-1]:.4f}  avg100 {recent:.4f}", flush=True)
                step += 1
    finally:
        model.drd.debug = False
    return losses


def meta_train(model, split, seed, schedule, momentum=0.9, weight_decay=1e-4, debug_writer=None, progress=None):
    sampler = EpisodeSampler(split, "meta_train", seed=[seed, split.split_id, 0x11])
    return run_schedule(model, sampler, schedule, momentum, weight_decay, debug_writer, progress)


def fine_tune(model, split, budget, seed, schedule, momentum=0.9, weight_decay=1e-4, progress=None):
    """Balanced k-shot adaptation; classifier fc re-initialized, nothing frozen."""
    model.reinit_classifier(seed=[seed, 0x5EED])
    sampler = EpisodeSampler(split, "fine_tune", seed=[seed, split.split_id, 0x22], budget=budget)
    return run_schedule(model, sampler, schedule, momentum, weight_decay, progress=progress)


def evaluate_model(model, split, budget, dataset_seed, n_images, run_index=0, seed=0):
    """Score a fine-tuned model on a fresh deterministic test stream."""
    per_class = support_pairs_from_pool(budget, split, seed=dataset_seed + run_index)
    ctx = model.build_support_context(per_class)
    stream = evaluation_stream(split, dataset_seed, n_images)
    return evaluate(
        lambda img: model.detect(img, ctx), stream, split, run_index=run_index, k=budget.k, seed=seed
    )


def save_model(path, model, extra=None):
    header = {"format": "fewdet-checkpoint", "detector": vars(model.cfg).copy(), "dtype": np.dtype(model.dtype).name}
    header["detector"]["stage_channels"] = list(model.cfg.stage_channels)
    if extra:
        header.update(extra)
    save_checkpoint(path, model.state_dict(), header)


def load_model(path, overrides=None):
    arrays, header = load_checkpoint(path)
    det = dict(header["detector"])
    det["stage_channels"] = tuple(det["stage_channels"])
    if overrides:
        det.update(overrides)
    cfg = DetectorConfig(**det)
    model = FewShotDetector(cfg, seed=0, dtype=np.dtype(header.get("dtype", "float32")).type)
    model.load_state_dict(arrays)
    return model


def run_suite(cfg: RunConfig, log=print):
    """num_runs independent (pool, fine-tune, eval) cycles from one checkpoint."""
    cfg.validate()
    if not cfg.checkpoint or not os.path.exists(cfg.checkpoint):
        raise ConfigurationError(f"run_suite needs a meta-trained checkpoint, got {cfg.checkpoint!r}")
    split = make_split(cfg.split_id)
    records = []
    metrics = []
    config_echo = cfg.as_dict()
    for run in range(cfg.num_runs):
        t0 = time.perf_counter()
        budget = build_shot_pool(cfg.dataset_seed, split, cfg.k, run_index=run)
        model = load_model(cfg.checkpoint, overrides=_toggle_overrides(cfg))
        fine_tune(model, split, budget, seed=cfg.seed + 1000 * run, schedule=cfg.finetune_schedule,
                  momentum=cfg.momentum, weight_decay=cfg.weight_decay)
        m = evaluate_model(model, split, budget, cfg.dataset_seed, cfg.num_eval_images,
                           run_index=run, seed=cfg.seed)
        m.wall_time = time.perf_counter() - t0
        metrics.append(m)
        records.append(m.to_record(config=config_echo))
        if log:
            log(f"run {run}: novel AP50 {m.mean_novel_ap50:.3f}  base AP50 {m.mean_base_ap50:.3f}  "
                f"({m.wall_time:.1f}s)")
    agg = aggregate_records(metrics, config=config_echo)
    records.append(agg)
    if cfg.out:
        from .metrics import write_jsonl

        write_jsonl(cfg.out, records)
    return {"runs": metrics, "aggregate": agg, "records": records}


def _toggle_overrides(cfg: RunConfig):
    return {
        "use_drd": cfg.use_drd,
        "use_cfa": cfg.use_cfa,
        "cfa_attention": cfg.cfa_attention,
        "baseline_reweight": cfg.baseline_reweight,
    }


ABLATION_VARIANTS = {
    "full": {"use_drd": True, "use_cfa": True, "cfa_attention": True, "baseline_reweight": False},
    "no_cfa": {"use_drd": True, "use_cfa": False, "cfa_attention": True, "baseline_reweight": False},
    "reweight_baseline": {"use_drd": False, "use_cfa": True, "cfa_attention": True, "baseline_reweight": True},
}


def ensure_meta_checkpoint(cfg: RunConfig, variant, workdir, log=print, progress=None):
    """Meta-train one ablation variant unless its checkpoint already exists."""
    os.makedirs(workdir, exist_ok=True)
    path = os.path.join(workdir, f"meta_{variant}_split{cfg.split_id}_seed{cfg.seed}.fdck")
    if os.path.exists(path):
        return path
    toggles = ABLATION_VARIANTS[variant]
    det = DetectorConfig(**toggles)
    model = FewShotDetector(det, seed=cfg.seed, dtype=cfg.dtype())
    split = make_split(cfg.split_id)
    if log:
        log(f"meta-training variant {variant!r} (split {cfg.split_id}, seed {cfg.seed})")
    losses = meta_train(model, split, cfg.seed, cfg.meta_schedule, cfg.momentum, cfg.weight_decay,
                        progress=progress)
    save_model(path, model, extra={"phase": "meta_train", "variant": variant,
                                   "loss_start_avg100": float(np.mean(losses[:100])),
                                   "loss_end_avg100": float(np.mean(losses[-100:]))})
    return path


def ablation_suite(cfg: RunConfig, workdir, log=print, progress=None):
    """Paired multi-run comparison of the three model variants.

    Every variant consumes identical shot pools and fine-tune seeds run by
    run, so differences are paired; the report carries per-run novel AP50,
    paired differences against the full model, and the ordering checks.
    """
    from dataclasses import replace

    cfg.validate()
    results = {}
    for variant, toggles in ABLATION_VARIANTS.items():
        ckpt = ensure_meta_checkpoint(replace(cfg, **toggles), variant, workdir, log=log, progress=progress)
        vcfg = replace(cfg, **toggles, mode="eval", checkpoint=ckpt, out="")
        if log:
            log(f"evaluating variant {variant!r} over {cfg.num_runs} paired runs (k={cfg.k})")
        results[variant] = run_suite(vcfg, log=log)
    full = [m.mean_novel_ap50 for m in results["full"]["runs"]]
    report = {"kind": "ablation", "k": cfg.k, "split_id": cfg.split_id, "num_runs": cfg.num_runs}
    for variant in ("no_cfa", "reweight_baseline"):
        other = [m.mean_novel_ap50 for m in results[variant]["runs"]]
        diffs = [f - o for f, o in zip(full, other)]
        report[variant] = {
            "mean_novel_ap50": float(np.mean(other)),
            "paired_diff_mean": float(np.mean(diffs)),
            "paired_diffs": diffs,
            "full_at_least_as_good": bool(np.mean(full) >= np.mean(other)),
        }
    report["full"] = {"mean_novel_ap50": float(np.mean(full))}
    if cfg.out:
        from .metrics import write_jsonl

        write_jsonl(cfg.out, [report])
    return report
