import json
import math
import zlib
from pathlib import Path

import numpy as np
import pytest

from graphmem.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from graphmem.corpus import TokenWindowStream
from graphmem.errors import CheckpointError, ConfigurationError
from graphmem.model import (
    DENSE_FFN,
    Model,
    clone_config,
    desk_config,
    forward_batch,
    toy_config,
)
from graphmem.numerics import Matrix
from graphmem.training import (
    AdamW,
    TrainConfig,
    Trainer,
    clip_gradients,
    lr_schedule,
    perplexity,
    temperature_schedule,
    tokens_per_update,
    unigram_entropy_baseline,
    validate,
)


def _closed_form_tau(s, total, tau_max, tau_min):
    p = min(s / total, 1.0)
    rho = math.log(1.0 + (math.e - 1.0) * p)
    return tau_max * (tau_min / tau_max) ** rho


def test_temperature_endpoints_and_midpoint():
    assert temperature_schedule(0, 1000, 1.0, 0.1) == 1.0
    assert abs(temperature_schedule(1000, 1000, 1.0, 0.1) - 0.1) <= 1e-15
    mid = temperature_schedule(500, 1000, 1.0, 0.1)
    assert abs(mid - _closed_form_tau(500, 1000, 1.0, 0.1)) <= 1e-12
    assert abs(mid - 0.2398200521) <= 1e-6


def test_temperature_monotone_nonincreasing():
    values = [temperature_schedule(s, 200, 1.0, 0.1) for s in range(0, 260)]
    assert all(b <= a for a, b in zip(values, values[1:]))
    assert values[-1] == values[200]  # clamped past the horizon


def test_lr_schedule_shape():
    assert lr_schedule(0, 100, 1000, 3e-4) == 0.0
    assert lr_schedule(100, 100, 1000, 3e-4) == 3e-4
    assert lr_schedule(1000, 100, 1000, 3e-4) == 0.0
    mid = (100 + 1000) // 2
    assert abs(lr_schedule(mid, 100, 1000, 3e-4) - 1.5e-4) <= 1e-12
    # continuity at the warmup joint
    just_before = lr_schedule(99, 100, 1000, 3e-4)
    assert abs(just_before - 3e-4) <= 3e-4 / 100 + 1e-12


def test_tokens_per_update_paper_arithmetic():
    assert tokens_per_update(8, 33, 1024) == 270_336


def test_perplexity_convention():
    assert abs(perplexity(3.2903) - 26.85) <= 0.01
    assert abs(perplexity(3.5995) - 36.58) <= 0.01
    assert perplexity(0.0) == 1.0
    assert perplexity(10_000.0) == math.exp(20.0)


def test_clip_gradients():
    grads = {"a": np.array([[3.0]]), "b": np.array([[4.0]])}
    norm = clip_gradients(grads, 1.0)
    assert abs(norm - 5.0) <= 1e-12
    assert abs(grads["a"][0, 0] - 0.6) <= 1e-12
    assert abs(grads["b"][0, 0] - 0.8) <= 1e-12
    small = {"a": np.array([[0.3]])}
    clip_gradients(small, 1.0)
    assert small["a"][0, 0] == 0.3  # untouched below the threshold


def test_adamw_decay_exemptions():
    p_decay = Matrix([[1.0]], name="block0.attn.w_o")
    p_exempt = Matrix([[1.0]], name="block0.ln1.gain")
    opt = AdamW({"block0.attn.w_o": p_decay, "block0.ln1.gain": p_exempt},
                weight_decay=0.5)
    zero = {"block0.attn.w_o": np.zeros((1, 1)), "block0.ln1.gain": np.zeros((1, 1))}
    opt.step(zero, lr=0.1)
    assert p_decay.data[0, 0] == 1.0 - 0.1 * 0.5 * 1.0
    assert p_exempt.data[0, 0] == 1.0


def _byte_stream(rng, n):
    return TokenWindowStream(ids=rng.integers(0, 257, size=n).astype(np.uint16),
                             vocab_size=257, eot_id=256, tokenizer_name="byte")


def _tiny_setup(tmp_path, rng, *, steps=6, kind="graph_memory", seed=0,
                adaptive_eval=True):
    config = clone_config(desk_config(kind), context=16, p_embed=0.05, p_attn=0.05)
    model = Model(config, seed=seed)
    train = _byte_stream(rng, 2000)
    val = _byte_stream(rng, 400)
    tconf = TrainConfig(total_steps=steps, warmup_steps=2, batch_size=2,
                        grad_accum=2, eval_every=0, seed=seed,
                        adaptive_eval=adaptive_eval)
    return model, train, val, tconf


def test_trainer_runs_and_logs(tmp_path, rng):
    model, train, val, tconf = _tiny_setup(tmp_path, rng)
    out = tmp_path / "run"
    result = Trainer(model, train, val, tconf, out).run()
    assert result.steps == 6
    assert result.final_val_loss is not None
    records = [json.loads(line) for line in (out / "train_log.jsonl").read_text().splitlines()]
    step_records = [r for r in records if "lm_loss" in r]
    eval_records = [r for r in records if "val_loss" in r]
    assert len(step_records) == 6
    assert {"step", "lr", "tau", "lm_loss", "track", "ortho", "cluster",
            "edge", "contrast", "grad_norm"} <= set(step_records[0])
    assert {"step", "val_loss", "ppl", "n_eff_mean", "n_eff_min", "dead_total",
            "mean_cos_sim", "edge_entropy_mean", "max_edge_mass",
            "edge_row_sim"} <= set(eval_records[0])
    assert (out / "best.ckpt").exists() and (out / "last.ckpt").exists()


def test_training_determinism_same_seed(tmp_path, rng):
    losses = []
    for attempt in range(2):
        r = np.random.default_rng(123)
        model, train, val, tconf = _tiny_setup(tmp_path, r, steps=5, seed=9)
        result = Trainer(model, train, val, tconf, tmp_path / f"d{attempt}").run()
        losses.append(result.step_losses)
    assert losses[0] == losses[1]


def test_epoch_permutation_visits_every_window(tmp_path, rng):
    model, train, val, tconf = _tiny_setup(tmp_path, rng, steps=6)
    trainer = Trainer(model, train, val, tconf, tmp_path / "perm")
    perm = trainer._epoch_permutation(0)
    n = len(perm)
    assert sorted(perm.tolist()) == list(range(n))
    again = trainer._epoch_permutation(0)
    np.testing.assert_array_equal(perm, again)
    assert not np.array_equal(perm, trainer._epoch_permutation(1))


def test_maintenance_fires_on_schedule(tmp_path, rng):
    model, train, val, tconf = _tiny_setup(tmp_path, rng, steps=4)
    model.config.maintenance.k_maint = 2
    out = tmp_path / "maint"
    Trainer(model, train, val, tconf, out).run()
    lines = (out / "maintenance.jsonl").read_text().splitlines()
    records = [json.loads(line) for line in lines]
    assert {r["step"] for r in records} == {2, 4}
    assert {r["block"] for r in records} == {0, 1}
    assert {"step", "block", "resets", "merges", "dead_before",
            "mean_cos_sim"} <= set(records[0])


def test_validate_pure_when_frozen(tmp_path, rng):
    model, train, val, tconf = _tiny_setup(tmp_path, rng)
    fp = model.state_fingerprint()
    a = validate(model, val, tau=0.7, batch_size=2, cap=4, adaptive_eval=False)
    b = validate(model, val, tau=0.7, batch_size=2, cap=4, adaptive_eval=False)
    assert a == b
    assert model.state_fingerprint() == fp
    validate(model, val, tau=0.7, batch_size=2, cap=4, adaptive_eval=True)
    assert model.state_fingerprint() != fp  # adaptive protocol mutates memory


def test_validate_empty_stream_rejected(rng):
    model = Model(clone_config(desk_config(), context=16), seed=0)
    tiny = _byte_stream(rng, 10)
    with pytest.raises(ConfigurationError):
        validate(model, tiny, tau=0.7)


def test_unigram_baseline_uniform_stream(rng):
    train = _byte_stream(rng, 60000)
    val = _byte_stream(rng, 5000)
    baseline = unigram_entropy_baseline(train, val)
    assert abs(baseline - math.log(257)) < 0.05


def test_checkpoint_roundtrip_bit_exact(tmp_path, rng):
    model, train, val, tconf = _tiny_setup(tmp_path, rng, steps=3)
    trainer = Trainer(model, train, val, tconf, tmp_path / "ck")
    trainer.run()
    tokens = rng.integers(0, 257, size=(2, 16))
    before = forward_batch(model, tokens, tau=0.5).logits.data
    path = tmp_path / "ck" / "explicit.ckpt"
    trainer.save(path)
    loaded, meta, train_config, opt_state = load_checkpoint(path)
    after = forward_batch(loaded, tokens, tau=0.5).logits.data
    np.testing.assert_array_equal(before, after)
    assert meta["step"] == 3
    assert train_config.total_steps == tconf.total_steps
    for name, p in model.parameters().items():
        np.testing.assert_array_equal(p.data, loaded.parameters()[name].data)
    for i, block in enumerate(model.blocks):
        np.testing.assert_array_equal(block.cell.bank.usage,
                                      loaded.blocks[i].cell.bank.usage)
        np.testing.assert_array_equal(block.cell.bank.age,
                                      loaded.blocks[i].cell.bank.age)
    np.testing.assert_array_equal(opt_state["m"]["tok_emb"], trainer.optimizer.m["tok_emb"])


def test_checkpoint_detects_corruption(tmp_path, rng):
    model = Model(toy_config(), seed=0)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, step=0, tau=1.0)
    blob = bytearray(path.read_bytes())
    blob[len(MAGIC) + 50] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    path.write_bytes(bytes(blob[: len(blob) // 2]))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    bad_magic = bytearray(save_and_read(tmp_path, model))
    bad_magic[:8] = b"NOTMAGIC"
    path.write_bytes(bytes(bad_magic))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def save_and_read(tmp_path, model):
    p = tmp_path / "fresh.ckpt"
    save_checkpoint(p, model, step=0, tau=1.0)
    return p.read_bytes()


def test_checkpoint_config_mismatch(tmp_path):
    model = Model(toy_config(), seed=0)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, step=0, tau=1.0)
    other = clone_config(toy_config(), hidden=32, heads=2)
    with pytest.raises(CheckpointError):
        load_checkpoint(path, expected_config=other)


def test_resume_continues_from_step(tmp_path, rng):
    model, train, val, tconf = _tiny_setup(tmp_path, rng, steps=4)
    out = tmp_path / "resume"
    trainer = Trainer(model, train, val, tconf, out)
    trainer.run()
    trainer.save(out / "stop.ckpt")

    resumed = Trainer.resume(out / "stop.ckpt", train, val, out)
    assert resumed.global_step == 4
    assert resumed.optimizer.t == 4
    resumed.config.total_steps = 6
    result = resumed.run()
    assert result.steps == 6


def test_best_checkpoint_strict_improvement(tmp_path, rng):
    model, train, val, tconf = _tiny_setup(tmp_path, rng, steps=2)
    out = tmp_path / "best"
    trainer = Trainer(model, train, val, tconf, out)
    trainer.best_val_loss = -1.0  # nothing can beat this
    trainer._evaluate_count = 0
    trainer.run()
    assert trainer.best_val_loss == -1.0
    assert not (out / "best.ckpt").exists()


def test_abort_on_nonfinite_loss(tmp_path, rng):
    model, train, val, tconf = _tiny_setup(tmp_path, rng, steps=2)
    huge = model.tok_emb.data.copy()
    huge[:] = 1e155  # overflows inside the forward
    out = tmp_path / "abort"
    trainer = Trainer(model, train, val, tconf, out)
    from graphmem.errors import DomainError, TrainingError

    model.tok_emb.assign(huge)
    with pytest.raises((TrainingError, DomainError)):
        trainer.run()
