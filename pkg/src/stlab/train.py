"""Multi-task training loop: seeded data, weighted losses, scheduled task
weights, checkpointing, and JSON-lines metrics.

Every random draw derives from (seed, purpose, step), so resuming from a
checkpoint replays the exact remaining trajectory and two identical runs
produce bitwise-identical outputs. Wall-clock goes to a sidecar timings
file so the metrics stream itself stays deterministic.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import analysis, scheduler as sched
from .config import RunConfig, save_config
from .data import make_batch
from .losses import ce_loss, consistency_loss, contrastive_loss, ctc_loss, total_loss
from .model import Model, load_checkpoint, save_checkpoint
from .optim import Adam

# rng stream tags; all draws are (seed, tag, step[, index])
_STREAM_BATCH = 1
_STREAM_NOISE = 2
_STREAM_PROBE = 3
_STREAM_EVAL = 4
_STREAM_DROPOUT = 5


class NanAbort(RuntimeError):
    def __init__(self, step, last_checkpoint):
        super().__init__(
            f"non-finite loss at step {step}; last good checkpoint: {last_checkpoint}")
        self.step = step
        self.last_checkpoint = last_checkpoint


@dataclass
class TrainResult:
    out_dir: Path
    steps_run: int
    final_checkpoint: Path
    metrics_path: Path
    weight_history_path: Path
    final_accuracy: float
    copy_baseline: float


def build_model(config: RunConfig) -> Model:
    model = Model(config.model)
    model.use_l2g = config.toggles.use_l2g
    return model


def batch_for_step(config: RunConfig, step: int, size: int):
    rng = np.random.default_rng((config.training.seed, _STREAM_BATCH, step))
    seeds = rng.integers(0, 2**62, size=size)
    return make_batch(config.corpus, seeds)


def eval_batch(config: RunConfig):
    rng = np.random.default_rng((config.training.seed, _STREAM_EVAL))
    seeds = rng.integers(0, 2**62, size=config.training.eval_batch_size)
    return make_batch(config.corpus, seeds)


def token_accuracy(pred, target, pad_id) -> float:
    mask = target != pad_id
    return float((pred[mask] == target[mask]).mean())


def copy_baseline_accuracy(batch) -> float:
    """Oracle baseline: the decoder that just copies the transcription."""
    mask = batch.tgt_tokens != batch.pad_id
    return float((batch.src_tokens[mask] == batch.tgt_tokens[mask]).mean())


def greedy_st_accuracy(model, batch, use_shrink, use_lbm) -> float:
    pred = model.greedy_decode(batch, use_shrink=use_shrink, use_lbm=use_lbm)
    return token_accuracy(pred, batch.tgt_tokens, batch.pad_id)


def _ctc_batch_loss(out, batch):
    terms = []
    for b in range(batch.batch_size):
        lp = out.ctc_log_probs[b][(slice(0, int(batch.speech_lens[b])),)]
        terms.append(ctc_loss(lp, batch.src_tokens[b, : batch.src_lens[b]]))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total / len(terms)


def compute_losses(model: Model, batch, config: RunConfig, weights: sched.TaskWeights,
                   step: int, shrink_active: bool, forward_counter=None):
    """Forward every active task once and assemble the weighted bundle."""
    tg = config.toggles

    def count(task):
        if forward_counter is not None:
            forward_counter[task] = forward_counter.get(task, 0) + 1

    count("st")
    st_out = model.forward_task(batch, "st", use_shrink=shrink_active,
                                use_lbm=tg.use_lbm)
    l_st = ce_loss(st_out.logits, st_out.targets, batch.pad_id)

    cons_terms = []
    if tg.use_l2g:
        src_mask = batch.src_tokens != batch.pad_id
        cons_terms.append(consistency_loss(
            st_out.extractor_outs, st_out.attention_outs, st_out.tenc_mask))

    l_asr = None
    if tg.use_asr and weights.active("asr"):
        count("asr")
        asr_out = model.forward_task(batch, "asr", asr_variant=tg.asr_variant,
                                     use_shrink=shrink_active, use_lbm=tg.use_lbm)
        if tg.asr_variant == "ctc":
            l_asr = _ctc_batch_loss(asr_out, batch)
        elif tg.asr_variant == "ce":
            l_asr = ce_loss(asr_out.logits, asr_out.targets, batch.pad_id)
        else:
            l_asr = _ctc_batch_loss(asr_out, batch) + ce_loss(
                asr_out.logits, asr_out.targets, batch.pad_id)

    l_mt = None
    if tg.use_mt and weights.active("mt"):
        count("mt")
        noise_p = tg.mt_noise_p if tg.use_l2g else 0.0
        mt_rng = np.random.default_rng((config.training.seed, _STREAM_NOISE, step))
        mt_out = model.forward_task(batch, "mt", mt_noise_rng=mt_rng,
                                    mt_noise_p=noise_p)
        l_mt = ce_loss(mt_out.logits, mt_out.targets, batch.pad_id)
        if tg.use_l2g:
            cons_terms.append(consistency_loss(
                mt_out.extractor_outs, mt_out.attention_outs, mt_out.tenc_mask))

    l_cl = None
    if tg.use_cl and batch.batch_size >= 2:
        src_mask = batch.src_tokens != batch.pad_id
        clean_text = model.embed_src(batch.src_tokens, batch.pad_id)
        l_cl = contrastive_loss(st_out.tenc_input, st_out.tenc_mask,
                                clean_text, src_mask)

    l_cons = None
    if cons_terms:
        l_cons = cons_terms[0]
        for t in cons_terms[1:]:
            l_cons = l_cons + t
        l_cons = l_cons / len(cons_terms)

    bundle = total_loss(l_st, l_asr, l_mt, l_cl, l_cons,
                        w_asr=weights.weights.get("asr", 0.0),
                        w_mt=weights.weights.get("mt", 0.0))
    return bundle, st_out


def make_probe_fn(model: Model, config: RunConfig, weights: sched.TaskWeights,
                  step: int, shrink_active: bool):
    """Per-instance ATTEN gradient capture for the impact scheduler."""
    tg = config.toggles

    def atten_vectors(snapshot):
        out = {}
        for part in ("A-Enc", "T-Enc", "Decoder"):
            keys = sorted((k for k in snapshot.vectors
                           if k.partition == part and k.kind == "ATTEN"),
                          key=lambda k: k.layer)
            if keys:
                out[part] = np.concatenate([snapshot.vectors[k] for k in keys])
        return out

    def probe():
        instances = []
        for j in range(config.scheduler.k):
            rng = np.random.default_rng((config.training.seed, _STREAM_PROBE, step, j))
            batch = make_batch(config.corpus, rng.integers(0, 2**62, size=1))
            entry = {}
            st_snap = analysis.capture_gradients(
                model, batch, "st", use_shrink=shrink_active, use_lbm=tg.use_lbm)
            entry["st"] = atten_vectors(st_snap)
            for task in weights.active_tasks():
                kw = {}
                if task == "asr":
                    kw = {"asr_variant": "ctc", "use_shrink": shrink_active,
                          "use_lbm": tg.use_lbm}
                else:
                    kw = {"mt_noise_rng": np.random.default_rng(
                        (config.training.seed, _STREAM_PROBE, step, j, 1))}
                snap = analysis.capture_gradients(model, batch, task, **kw)
                entry[task] = atten_vectors(snap)
            instances.append(entry)
        return instances

    return probe


def _write_weight_history(weights: sched.TaskWeights, path):
    with open(path, "w") as fh:
        fh.write("step,task,m,w\n")
        for step, task, m, w in weights.as_rows():
            fh.write(f"{step},{task},{m:.17g},{w:.17g}\n")


def _weights_state(weights: sched.TaskWeights):
    return {
        "weights": weights.weights,
        "pruned": sorted(weights.pruned),
        "history": weights.as_rows(),
        "last_update_step": weights.last_update_step,
    }


def _restore_weights(state, config: RunConfig) -> sched.TaskWeights:
    tw = make_task_weights(config)
    tw.weights = dict(state["weights"])
    tw.pruned = set(state["pruned"])
    tw.history = [sched.HistoryRow(*row) for row in state["history"]]
    tw.last_update_step = state["last_update_step"]
    return tw


def make_task_weights(config: RunConfig) -> sched.TaskWeights:
    weights = {}
    if config.toggles.use_asr:
        weights["asr"] = 1.0
    if config.toggles.use_mt:
        weights["mt"] = 1.0
    return sched.TaskWeights(
        weights=weights,
        smoothing={"asr": config.scheduler.s_asr, "mt": config.scheduler.s_mt},
        update_every=config.scheduler.update_every,
        prune_threshold=config.scheduler.prune_threshold,
        exponent_mode=config.scheduler.exponent_mode,
    )


def train(config: RunConfig, out_dir, resume_from=None) -> TrainResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config(config, out_dir / "config.json")

    tr = config.training
    metrics_path = out_dir / "metrics.jsonl"
    timings_path = out_dir / "timings.jsonl"
    history_path = out_dir / "weight_history.csv"

    model = build_model(config)
    warmup = max(1, int(tr.warmup_fraction * tr.steps))
    opt = Adam(model.parameters(), lr=tr.learning_rate, beta1=tr.beta1,
               beta2=tr.beta2, warmup_steps=warmup)
    weights = make_task_weights(config)
    start_step = 0

    resumed_meta = None
    if resume_from is not None:
        ckpt_model, meta, extra = load_checkpoint(resume_from)
        model.load_state_buffers(ckpt_model.state_buffers())
        opt.load_state_buffers(extra)
        weights = _restore_weights(meta["task_weights"], config)
        start_step = meta["step"]
        resumed_meta = meta

    mode = "a" if start_step > 0 else "w"
    metrics_fh = open(metrics_path, mode)
    timings_fh = open(timings_path, mode)

    ev_batch = eval_batch(config)
    baseline = copy_baseline_accuracy(ev_batch)
    # carried-forward log fields live in the checkpoint so a resumed run
    # replays the metrics stream bitwise
    last_accuracy = resumed_meta["last_accuracy"] if resumed_meta else None
    last_ratio = resumed_meta["last_ratio"] if resumed_meta else None
    last_checkpoint = None
    shrink_start = int(config.toggles.shrink_warmup_fraction * tr.steps)

    def write_checkpoint(step):
        nonlocal last_checkpoint
        path = out_dir / f"checkpoint_{step:06d}.stlab"
        meta = {"step": step, "task_weights": _weights_state(weights),
                "last_accuracy": last_accuracy, "last_ratio": last_ratio}
        save_checkpoint(path, model, extra_meta=meta, extra_buffers=opt.state_buffers())
        last_checkpoint = path
        return path

    try:
        for step in range(start_step + 1, tr.steps + 1):
            t0 = time.perf_counter()
            if config.model.dropout > 0:
                # fresh per-step stream so resume replays identical masks
                model.dropout_rng = np.random.default_rng((tr.seed, _STREAM_DROPOUT, step))
            shrink_active = (config.toggles.shrink_warmup_fraction < 1.0
                             and step > shrink_start)
            batch = batch_for_step(config, step, tr.batch_size)
            model.zero_grad()
            bundle, st_out = compute_losses(model, batch, config, weights,
                                            step, shrink_active)
            if not np.isfinite(bundle.total.data):
                metrics_fh.close()
                timings_fh.close()
                raise NanAbort(step, last_checkpoint)
            bundle.total.backward()
            opt.step()
            model.zero_grad()

            if shrink_active:
                last_ratio = st_out.length_ratio

            if weights.active_tasks() and step % weights.update_every == 0:
                model.dropout_rng = None  # probes run without dropout
                sched.schedule_step(step, weights,
                                    make_probe_fn(model, config, weights,
                                                  step, shrink_active))

            if step % tr.eval_every == 0 or step == tr.steps:
                model.dropout_rng = None
                last_accuracy = greedy_st_accuracy(
                    model, ev_batch, shrink_active, config.toggles.use_lbm)

            if step % tr.log_every == 0 or step == tr.steps:
                row = {"step": step, "losses": bundle.scalars(),
                       "task_weights": {t: weights.weights.get(t) for t in
                                        sorted(weights.weights)},
                       "pruned": sorted(weights.pruned),
                       "length_ratio": last_ratio,
                       "st_greedy_accuracy": last_accuracy}
                metrics_fh.write(json.dumps(row, sort_keys=True) + "\n")
                timings_fh.write(json.dumps(
                    {"step": step, "wall_clock_s": time.perf_counter() - t0}) + "\n")

            if step % tr.checkpoint_every == 0 or step == tr.steps:
                write_checkpoint(step)
    finally:
        if not metrics_fh.closed:
            metrics_fh.close()
            timings_fh.close()

    _write_weight_history(weights, history_path)
    return TrainResult(out_dir, tr.steps - start_step, last_checkpoint,
                       metrics_path, history_path,
                       last_accuracy if last_accuracy is not None else float("nan"),
                       baseline)
