import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from acrnet import csi
from acrnet import model as M
from acrnet import trainer as TR
from acrnet.errors import (ConfigurationError, DataError, FormatError, ShapeError, TrainingError,
                           TruncatedError, VersionError)
from acrnet.layers import Parameter


def small_cfg(**kw):
    return M.ModelConfig(na=8, nt=8, **kw)


@pytest.fixture(scope="module")
def data():
    env = csi.Environment.draw(seed=0, max_delay=6)
    tr = csi.generate_synthetic(24, seed=0, nc=64, nt=8, na=8, environment=env)
    va = csi.generate_synthetic(8, seed=1, nc=64, nt=8, na=8, environment=env, record=tr.normalization)
    return tr, va


def test_lr_schedule_shape():
    cfg = TR.TrainConfig(epochs=100, warmup=10, gamma_max=1e-2, gamma_min=1e-4)
    assert TR.lr_at(0, cfg) == pytest.approx(1e-3)
    assert TR.lr_at(9, cfg) == pytest.approx(1e-2)
    assert TR.lr_at(10, cfg) == pytest.approx(1e-2)
    assert TR.lr_at(55, cfg) == pytest.approx((1e-2 + 1e-4) / 2)
    assert TR.lr_at(100, cfg) == pytest.approx(1e-4)
    with pytest.raises(ConfigurationError):
        TR.lr_at(101, cfg)


@given(warmup=st.integers(0, 20), extra=st.integers(1, 200))
def test_lr_schedule_bounds_and_monotone_decay(warmup, extra):
    cfg = TR.TrainConfig(epochs=warmup + extra, warmup=warmup)
    lrs = [TR.lr_at(t, cfg) for t in range(cfg.epochs + 1)]
    assert all(cfg.gamma_min - 1e-15 <= x <= cfg.gamma_max + 1e-15 for x in lrs)
    tail = lrs[warmup:]
    assert all(a >= b for a, b in zip(tail, tail[1:]))
    head = lrs[:warmup]
    assert all(a < b for a, b in zip(head, head[1:]))


@pytest.mark.parametrize("kw", [dict(gamma_min=0), dict(gamma_max=1e-5), dict(warmup=2500),
                                dict(batch_size=0), dict(beta1=1.0), dict(epochs=0)])
def test_train_config_validation(kw):
    with pytest.raises(ConfigurationError):
        TR.TrainConfig(**kw)


def test_adam_first_step_is_sign_times_lr():
    p = Parameter(np.array([1.0, -2.0, 3.0]))
    p.grad = np.array([0.5, -4.0, 1e-3])
    TR.Adam([p]).step(0.1)
    np.testing.assert_allclose(p.data, [0.9, -1.9, 2.9], atol=1e-6)


def test_adam_matches_reference_recursion(rng):
    w = rng.standard_normal(5)
    p = Parameter(w.copy())
    opt = TR.Adam([p], 0.8, 0.99, 1e-6)
    m = v = np.zeros(5)
    for t in range(1, 6):
        g = rng.standard_normal(5)
        p.grad = g.copy()
        opt.step(0.01)
        m = 0.8 * m + 0.2 * g
        v = 0.99 * v + 0.01 * g * g
        w = w - 0.01 * (m / (1 - 0.8 ** t)) / (np.sqrt(v / (1 - 0.99 ** t)) + 1e-6)
    np.testing.assert_allclose(p.data, w, rtol=1e-12)


def test_adam_zero_lr_and_frozen_params_unchanged():
    a = Parameter(np.ones(3))
    b = Parameter(np.ones(3), requires_grad=False)
    a.grad = b.grad = np.ones(3)
    opt = TR.Adam([a, b])
    opt.step(0.0)
    np.testing.assert_array_equal(a.data, 1)
    opt.step(0.5)
    np.testing.assert_array_equal(b.data, 1)
    assert not np.all(opt.v[1])


def test_training_is_deterministic(data):
    tr, va = data
    cfg = TR.TrainConfig(epochs=3, warmup=1, batch_size=10)
    runs = []
    for _ in range(2):
        m = M.build(small_cfg(), seed=2)
        h = TR.train(m, tr, cfg, va)
        runs.append((h.train_mse, m.state_dict()))
    assert runs[0][0] == runs[1][0]
    for k in runs[0][1]:
        np.testing.assert_array_equal(runs[0][1][k], runs[1][1][k])


def test_training_reduces_loss(data):
    tr, _ = data
    m = M.build(small_cfg(), seed=0)
    h = TR.train(m, tr, TR.TrainConfig(epochs=15, warmup=1, batch_size=8, gamma_max=1e-2))
    assert h.train_mse[-1] < h.train_mse[0]


def test_resume_matches_uninterrupted_run(data, tmp_path):
    tr, va = data
    cfg = TR.TrainConfig(epochs=4, warmup=1, batch_size=10, seed=3)
    full = M.build(small_cfg(), seed=1)
    TR.Trainer(full, cfg).fit(tr)

    part = M.build(small_cfg(), seed=1)
    t1 = TR.Trainer(part, cfg)
    t1.fit(tr, epochs=2)
    path = tmp_path / "run.ackp"
    TR.checkpoint_save(t1.checkpoint(), path)
    resumed = M.build(small_cfg(), seed=99)
    t2 = TR.Trainer.resume(resumed, TR.checkpoint_load(path))
    assert t2.epoch == 2
    t2.fit(tr)
    for k, v in full.state_dict().items():
        np.testing.assert_array_equal(resumed.state_dict()[k], v, err_msg=k)


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    m = M.build(small_cfg(expansion=2, quant_bits=3, binarize_encoder_fc=True), seed=4)
    m.freeze_slopes()
    path = tmp_path / "m.ackp"
    n = TR.save_model(m, path, normalization=csi.Normalization(0.25))
    assert n == path.stat().st_size
    ck = TR.checkpoint_load(path)
    assert ck.normalization == csi.Normalization(0.25)
    back = TR.load_model(path, expect=m.config)
    for k, v in m.state_dict().items():
        assert back.state_dict()[k].tobytes() == v.tobytes()
    assert all(not p.requires_grad for n_, p in back.named_parameters() if "alphas" in n_)
    with pytest.raises(ConfigurationError):
        TR.load_model(path, expect=small_cfg())


@pytest.mark.parametrize("mutate,err", [
    (lambda b: b"NOPE" + b[4:], FormatError),
    (lambda b: b[:4] + b"\x05\x00" + b[6:], VersionError),
    (lambda b: b[:-1], TruncatedError),
    (lambda b: b + b"\0", ShapeError),
    (lambda b: b[:10] + b"\xff" + b[11:], FormatError),
])
def test_checkpoint_load_errors(tmp_path, mutate, err):
    path = tmp_path / "m.ackp"
    TR.save_model(M.build(small_cfg()), path)
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(err):
        TR.checkpoint_load(path)


def test_nonfinite_loss_aborts_with_context(data):
    tr, _ = data
    m = M.build(small_cfg(), seed=0)
    m.decoder.fc.weight.data[0, 0] = np.nan
    with pytest.raises(TrainingError, match="epoch 0, batch 0"):
        TR.train(m, tr, TR.TrainConfig(epochs=2, warmup=0))


def test_evaluate_modes(data):
    tr, va = data
    m = M.build(small_cfg(quant_bits=4), seed=0)
    rep = TR.evaluate(m, va)
    assert rep.quant_bits == 4 and rep.feedback_bits == 32 * 4
    assert TR.evaluate(m, va, quant_bits=0).feedback_bits is None
    assert TR.evaluate(lambda x: x, va).db == -math.inf
    with pytest.raises(DataError):
        TR.evaluate(m, va, record=csi.Normalization(123.0))
    with pytest.raises(ConfigurationError):
        TR.evaluate(lambda x: x, va, quant_bits=3)


def test_history_csv_roundtrip():
    h = TR.History([TR.EpochRecord(0, 1e-3, 0.5, -3.25), TR.EpochRecord(1, 2e-3, 0.25)])
    text = h.to_csv()
    assert text.splitlines()[0] == "epoch,lr,train_mse,val_nmse_db"
    back = TR.History.from_csv(text)
    assert back.train_mse == h.train_mse and back[0].val_nmse_db == -3.25
    assert math.isnan(back[1].val_nmse_db)


def test_zero_learning_rate_epoch_leaves_parameters(data):
    tr, _ = data
    m = M.build(small_cfg(), seed=4)
    before = {n: p.data.copy() for n, p in m.named_parameters()}
    trainer = TR.Trainer(m, TR.TrainConfig(epochs=1, warmup=0, batch_size=8))
    trainer.run_epoch(tr, lr=0.0)
    for n, p in m.named_parameters():
        np.testing.assert_array_equal(p.data, before[n])


def test_stub_predictor_evaluates_to_zero_db(data):
    _, va = data
    assert TR.evaluate(lambda x: np.full_like(x, 0.5), va).db == pytest.approx(0.0, abs=1e-12)


def test_quantised_toy_training_reduces_loss(data):
    tr, _ = data
    m = M.build(small_cfg(quant_bits=4), seed=1)
    trainer = TR.Trainer(m, TR.TrainConfig(epochs=1, warmup=0))
    batch = tr.samples[:8]
    losses = [trainer.train_step(batch, 3e-3) for _ in range(50)]
    assert losses[-1] < losses[0]


def test_checkpoint_size_tracks_parameter_count(tmp_path):
    m = M.build(M.ModelConfig(expansion=1), seed=0)
    size = TR.checkpoint_save(TR.Checkpoint.from_model(m), tmp_path / "m.ackp")
    params = m.param_count()
    buffers = sum(b.size for _, b in m.named_buffers())
    overhead = size - 4 * (params + buffers)
    assert buffers < 0.01 * params
    assert 0 < overhead < 8192
