import math
from dataclasses import replace

import numpy as np
import pytest

from algnet import checkpoint as ckpt_io
from algnet.config import TrainConfig
from algnet.data import generate_dataset
from algnet.network import NetworkConfig
from algnet.optim import AdamState, NonFiniteGradient, adam_step, cosine_lr
from algnet.tensor import Parameter
from algnet.train import LossLog, Trainer, TrainingHalted, loss_log_path, network_from_checkpoint, sample_batch

SMALL_NET = NetworkConfig(base_channels=4, enc_blocks=(1, 1, 1, 1), middle_blocks=1, dec_blocks=(1, 1, 1, 1),
                          state_size=4)


def small_config(**kw):
    base = dict(iterations=6, batch_size=2, patch_size=16, checkpoint_every=3, network=SMALL_NET)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def pairs(tmp_path_factory):
    m = generate_dataset(tmp_path_factory.mktemp("data"), 3, "gaussian", seed=0, size=32)
    return m.load_pairs()


# --- optimizer and schedule ------------------------------------------------------

def test_adam_zero_grad_is_noop():
    p = Parameter(np.array([1.0, -2.0]))
    state = AdamState.zeros_like([p])
    adam_step([p], state, lr=1e-3)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_single_step_closed_form():
    p = Parameter(np.array([0.5, 0.5], dtype=np.float64))
    p.grad = np.array([0.2, -3.0])
    state = AdamState.zeros_like([p])
    lr = 5e-4
    adam_step([p], state, lr)
    # m_hat = g, v_hat = g^2 after one bias-corrected step
    g = np.array([0.2, -3.0])
    expected = 0.5 - lr * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p.data, expected, rtol=1e-15)
    assert state.step == 1


def test_adam_two_runs_identical():
    results = []
    for _ in range(2):
        rng = np.random.default_rng(5)
        p = Parameter(rng.standard_normal(4))
        state = AdamState.zeros_like([p])
        for _ in range(5):
            p.grad = rng.standard_normal(4)
            adam_step([p], state, 1e-2)
        results.append(p.data.tobytes())
    assert results[0] == results[1]


def test_adam_rejects_nan_without_touching_state():
    p = Parameter(np.ones(2))
    q = Parameter(np.ones(2))
    q.grad = np.array([np.nan, 1.0])
    p.grad = np.ones(2)
    state = AdamState.zeros_like([p, q])
    with pytest.raises(NonFiniteGradient, match="#1"):
        adam_step([p, q], state, 1e-3)
    np.testing.assert_array_equal(p.data, 1.0)
    assert state.step == 0


def test_cosine_schedule():
    assert cosine_lr(0, 100) == 5e-4
    assert cosine_lr(100, 100) == 1e-7
    assert cosine_lr(50, 100) == pytest.approx((5e-4 + 1e-7) / 2, rel=1e-15)
    assert cosine_lr(150, 100) == 1e-7
    lrs = [cosine_lr(s, 37) for s in range(38)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


# --- config and checkpoint ---------------------------------------------------------

def test_config_text_roundtrip_and_validation(tmp_path):
    cfg = small_config(precision="float64", seed=9)
    assert TrainConfig.from_text(cfg.to_text()) == cfg
    (tmp_path / "c.cfg").write_text("iterations = 12  # short\nnetwork.base_channels = 4\n")
    loaded = TrainConfig.load(tmp_path / "c.cfg")
    assert loaded.iterations == 12 and loaded.network.base_channels == 4
    with pytest.raises(ValueError):
        TrainConfig.from_text("learning_rate = 3\n")
    with pytest.raises(ValueError):
        TrainConfig(lr_min=1e-3, lr_init=1e-4)
    with pytest.raises(ValueError):
        TrainConfig(patch_size=60)
    full = TrainConfig.full_scale()
    assert (full.batch_size, full.patch_size, full.lr_init, full.lr_min, full.betas) == (
        32, 256, 5e-4, 1e-7, (0.9, 0.999))


def test_checkpoint_roundtrip_is_byte_exact(tmp_path, pairs):
    trainer = Trainer(small_config(), pairs)
    trainer.run(until=2)
    raw = ckpt_io.to_bytes(trainer.checkpoint())
    again = ckpt_io.to_bytes(ckpt_io.from_bytes(raw))
    assert raw == again
    ckpt_io.save(tmp_path / "a.ckpt", ckpt_io.from_bytes(raw))
    assert (tmp_path / "a.ckpt").read_bytes() == raw
    loaded = ckpt_io.load(tmp_path / "a.ckpt")
    assert loaded.step == 2 and loaded.config == trainer.config


def test_checkpoint_errors(tmp_path):
    with pytest.raises(ckpt_io.CheckpointError):
        ckpt_io.from_bytes(b"NOTACKPT" + bytes(20))
    with pytest.raises(ckpt_io.CheckpointError):
        ckpt_io.load(tmp_path / "missing.ckpt")


def test_incompatible_checkpoint_reports_diff(pairs):
    ck = Trainer(small_config(), pairs).checkpoint()
    ck.config = small_config(network=replace(SMALL_NET, base_channels=8))
    with pytest.raises(ckpt_io.CheckpointError, match="shape"):
        network_from_checkpoint(ck)


# --- training loop -----------------------------------------------------------------

def test_zero_iterations_checkpoint_equals_init(tmp_path, pairs):
    cfg = small_config(iterations=0)
    trainer = Trainer(cfg, pairs)
    init = {k: v.copy() for k, v in trainer.net.state_dict().items()}
    trainer.run(tmp_path / "z.ckpt")
    ck = ckpt_io.load(tmp_path / "z.ckpt")
    assert ck.step == 0
    for k, v in init.items():
        np.testing.assert_array_equal(ck.params[k], v)


def test_batches_depend_only_on_seed_and_step(pairs):
    cfg = small_config()
    a = sample_batch(pairs, cfg, 4)
    b = sample_batch(pairs, cfg, 4)
    c = sample_batch(pairs, cfg, 5)
    assert a[0].tobytes() == b[0].tobytes()
    assert a[0].tobytes() != c[0].tobytes()
    assert a[0].shape == (2, 3, 16, 16)


def test_training_is_bitwise_reproducible(pairs):
    logs = []
    for _ in range(2):
        t = Trainer(small_config(), pairs)
        t.run(until=3)
        logs.append((t.log.losses, t.net.parameters()[5].data.tobytes()))
    assert logs[0] == logs[1]


def test_resume_matches_unbroken_run(tmp_path, pairs):
    full = Trainer(small_config(), pairs)
    full.run()
    part = Trainer(small_config(), pairs)
    part.run(tmp_path / "r.ckpt", until=3)
    resumed = Trainer.from_checkpoint(ckpt_io.load(tmp_path / "r.ckpt"), pairs)
    resumed.run(tmp_path / "r.ckpt")
    assert part.log.losses + resumed.log.losses == full.log.losses
    logged = LossLog.from_text(loss_log_path(tmp_path / "r.ckpt").read_text())
    assert logged.steps == list(range(6))
    assert loss_log_path(tmp_path / "r.ckpt").with_suffix(".png").exists()


def test_loss_log_format(tmp_path, pairs):
    t = Trainer(small_config(iterations=2), pairs)
    t.run(tmp_path / "l.ckpt")
    lines = loss_log_path(tmp_path / "l.ckpt").read_text().splitlines()
    assert len(lines) == 2
    step, loss, lr = lines[0].split("\t")
    assert int(step) == 0 and float(loss) > 0 and float(lr) == 5e-4


def test_non_finite_loss_halts_and_keeps_last_good(tmp_path, pairs):
    t = Trainer(small_config(), pairs)
    t.run(tmp_path / "h.ckpt", until=3)
    good = (tmp_path / "h.ckpt").read_bytes()
    t.net.heads[0].conv.weight.data[...] = np.inf
    with pytest.raises(TrainingHalted, match="step 3"):
        t.run(tmp_path / "h.ckpt")
    assert t.step == 3
    assert (tmp_path / "h.ckpt").read_bytes() == good


def test_halt_with_finite_state_saves_progress(tmp_path, pairs, monkeypatch):
    t = Trainer(small_config(checkpoint_every=100), pairs)
    t.run(tmp_path / "p.ckpt", until=2)
    import algnet.train as train_mod

    real = train_mod.batch_loss
    calls = {"n": 0}

    def flaky(*args):
        calls["n"] += 1
        if calls["n"] == 2:
            raise FloatingPointError("synthetic overflow")
        return real(*args)

    monkeypatch.setattr(train_mod, "batch_loss", flaky)
    with pytest.raises(TrainingHalted):
        t.run(tmp_path / "p.ckpt")
    assert ckpt_io.load(tmp_path / "p.ckpt").step == 3


def test_float64_training_runs(pairs):
    t = Trainer(small_config(precision="float64", iterations=1), pairs)
    t.run()
    assert t.net.parameters()[0].dtype == np.float64
