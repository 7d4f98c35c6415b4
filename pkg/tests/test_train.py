"""Training loop: metrics stream, determinism, resume, toggles, NaN abort."""

import importlib
import json

import numpy as np
import pytest

# the package re-exports the train() function under the same name, so fetch
# the module explicitly
train_mod = importlib.import_module("stlab.train")
from stlab.config import (RunConfig, SchedulerConfig, Toggles, TrainingConfig)
from stlab.data import CorpusConfig
from stlab.model import ModelConfig
from stlab.train import (NanAbort, batch_for_step, compute_losses,
                         copy_baseline_accuracy, eval_batch, make_task_weights,
                         token_accuracy, train)


def tiny_config(steps=8, **toggle_over):
    corpus = CorpusConfig(vocab_size=5, max_src_len=3, seed=6)
    model = ModelConfig(d_model=16, n_heads=2, ffn_dim=24,
                        frame_dim=corpus.frame_dim,
                        vocab_size_src=corpus.n_symbols,
                        vocab_size_tgt=corpus.n_symbols,
                        ctc_classes=corpus.vocab_size + 1, seed=6)
    toggles = dict(shrink_warmup_fraction=0.5)
    toggles.update(toggle_over)
    return RunConfig(corpus=corpus, model=model,
                     scheduler=SchedulerConfig(update_every=4, k=2),
                     training=TrainingConfig(steps=steps, batch_size=3,
                                             eval_every=4, eval_batch_size=3,
                                             checkpoint_every=4, seed=6),
                     toggles=Toggles(**toggles))


def read_metrics(path):
    return [json.loads(ln) for ln in path.read_text().splitlines()]


def test_token_accuracy_and_baseline():
    pred = np.array([[1, 2, 9]])
    tgt = np.array([[1, 3, 9]])
    assert token_accuracy(pred, tgt, pad_id=9) == 0.5
    cfg = tiny_config()
    b = eval_batch(cfg)
    base = copy_baseline_accuracy(b)
    assert base == 0.0  # derangement translation: copying never matches


def test_batch_for_step_deterministic():
    cfg = tiny_config()
    b1 = batch_for_step(cfg, 3, 4)
    b2 = batch_for_step(cfg, 3, 4)
    np.testing.assert_array_equal(b1.speech, b2.speech)
    b3 = batch_for_step(cfg, 4, 4)
    assert not np.array_equal(b1.sample_seeds, b3.sample_seeds)


def test_train_writes_expected_artifacts(tmp_path):
    cfg = tiny_config()
    res = train(cfg, tmp_path / "run")
    rows = read_metrics(res.metrics_path)
    assert [r["step"] for r in rows] == list(range(1, cfg.training.steps + 1))
    last = rows[-1]
    assert set(last) == {"step", "losses", "task_weights", "pruned",
                         "length_ratio", "st_greedy_accuracy"}
    assert last["losses"]["total"] > 0
    assert last["st_greedy_accuracy"] is not None
    assert last["length_ratio"] is not None  # shrinking active past warmup
    assert rows[0]["length_ratio"] is None   # and not before
    assert (tmp_path / "run" / "config.json").exists()
    assert (tmp_path / "run" / "timings.jsonl").exists()
    hist = (tmp_path / "run" / "weight_history.csv").read_text().splitlines()
    assert hist[0] == "step,task,m,w"
    assert len(hist) > 1  # scheduler fired at steps 4 and 8


def test_train_bitwise_deterministic(tmp_path):
    cfg = tiny_config()
    r1 = train(cfg, tmp_path / "a")
    r2 = train(cfg, tmp_path / "b")
    assert r1.metrics_path.read_bytes() == r2.metrics_path.read_bytes()
    assert r1.final_checkpoint.read_bytes() == r2.final_checkpoint.read_bytes()
    assert (tmp_path / "a" / "weight_history.csv").read_bytes() == \
        (tmp_path / "b" / "weight_history.csv").read_bytes()


def test_resume_replays_exactly(tmp_path):
    """Resuming from a mid-run checkpoint reproduces the remaining steps
    bitwise (metrics rows and final checkpoint)."""
    cfg = tiny_config(steps=8)
    full = train(cfg, tmp_path / "full")
    resumed = train(cfg, tmp_path / "resumed",
                    resume_from=tmp_path / "full" / "checkpoint_000004.stlab")
    full_rows = full.metrics_path.read_text().splitlines()
    resumed_rows = resumed.metrics_path.read_text().splitlines()
    assert resumed_rows == full_rows[4:]
    assert full.final_checkpoint.read_bytes() == resumed.final_checkpoint.read_bytes()


def test_losses_respect_toggles(tmp_path):
    cfg = tiny_config(steps=2)
    batch = batch_for_step(cfg, 1, 3)
    model = train_mod.build_model(cfg)
    weights = make_task_weights(cfg)
    bundle, _ = compute_losses(model, batch, cfg, weights, 1, False)
    s = bundle.scalars()
    assert all(s[k] is not None for k in ("st", "asr", "mt", "cl", "consistency"))

    off = tiny_config(steps=2, use_asr=False, use_mt=False, use_cl=False,
                      use_l2g=False)
    model2 = train_mod.build_model(off)
    bundle2, _ = compute_losses(model2, batch, off, make_task_weights(off), 1, False)
    s2 = bundle2.scalars()
    assert s2["asr"] is None and s2["mt"] is None
    assert s2["cl"] is None and s2["consistency"] is None
    assert s2["total"] == pytest.approx(s2["st"])


def test_pruned_task_not_forwarded():
    cfg = tiny_config(steps=2)
    model = train_mod.build_model(cfg)
    weights = make_task_weights(cfg)
    weights.pruned.add("asr")
    counter = {}
    batch = batch_for_step(cfg, 1, 3)
    compute_losses(model, batch, cfg, weights, 1, False, forward_counter=counter)
    assert "asr" not in counter and counter["st"] == 1 and counter["mt"] == 1


def test_asr_variant_paths():
    for variant in ("ctc", "ce", "ctc+ce"):
        cfg = tiny_config(steps=2, asr_variant=variant)
        model = train_mod.build_model(cfg)
        batch = batch_for_step(cfg, 1, 3)
        bundle, _ = compute_losses(model, batch, cfg, make_task_weights(cfg), 1, False)
        assert np.isfinite(bundle.scalars()["asr"])


def test_shrink_warmup_disable():
    cfg = tiny_config(steps=4, shrink_warmup_fraction=1.0)
    # fraction >= 1 means shrinking never activates
    shrink_start = int(cfg.toggles.shrink_warmup_fraction * cfg.training.steps)
    active = (cfg.toggles.shrink_warmup_fraction < 1.0 and
              cfg.training.steps > shrink_start)
    assert not active


def test_nan_abort(tmp_path, monkeypatch):
    cfg = tiny_config(steps=6)

    real = train_mod.compute_losses

    def poisoned(model, batch, config, weights, step, shrink_active, **kw):
        bundle, out = real(model, batch, config, weights, step, shrink_active, **kw)
        if step == 5:
            bundle.total.data = np.asarray(np.nan)
        return bundle, out

    monkeypatch.setattr(train_mod, "compute_losses", poisoned)
    with pytest.raises(NanAbort) as exc:
        train(cfg, tmp_path / "run")
    assert exc.value.step == 5
    # the checkpoint from step 4 survives for post-mortems
    assert exc.value.last_checkpoint.name == "checkpoint_000004.stlab"
    assert exc.value.last_checkpoint.exists()


def test_train_reports_accuracy_vs_baseline(tmp_path):
    cfg = tiny_config(steps=4)
    res = train(cfg, tmp_path / "run")
    assert 0.0 <= res.final_accuracy <= 1.0
    assert res.copy_baseline == 0.0
