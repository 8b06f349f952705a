import math

import numpy as np
import pytest

from microdet.data import SceneSpec, generate, load
from microdet.detector import ModelConfig, build
from microdet.errors import ConfigError, FormatError
from microdet.losses import LossConfig, composite_loss
from microdet.tensor import Tensor
from microdet.train import (RUNLOG_HEADER, Adam, TrainConfig, TrainingAborted, _batch_targets, clip_grad_norm, lr_at,
                            read_runlog, train)
from microdet.weights import load_weights


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    generate(SceneSpec(img_size=32, seed=1), root, 20)
    return load(root, "train")[:10], load(root, "val")


def _cfg(bits="0000"):
    return ModelConfig(img_size=32).with_toggles(bits)


def _loss_columns(rows):
    return [(r.epoch, f"{r.loss:.6f}", f"{r.box:.6f}", f"{r.obj:.6f}", f"{r.cls:.6f}", r.map50, r.precision, r.recall)
            for r in rows]


def test_smoke_one_epoch(tiny, tmp_path):
    tr, va = tiny
    res = train(_cfg(), tr, va, TrainConfig(epochs=1, batch_size=4), tmp_path)
    rows = read_runlog(tmp_path / "runlog.csv")
    assert len(rows) == 1 and rows[0].epoch == 1
    assert (tmp_path / "runlog.csv").read_text().splitlines()[0] == RUNLOG_HEADER
    for sub in ("last", "best"):
        for f in ("weights.tdw", "optim.tdw", "state.txt"):
            assert (tmp_path / "checkpoints" / sub / f).is_file()
    assert all(math.isfinite(v) for v in (rows[0].loss, rows[0].box, rows[0].obj, rows[0].cls))
    assert 0 <= rows[0].map50 <= 1 and not res.stopped_early


def test_same_seed_identical_runlog(tiny, tmp_path):
    tr, va = tiny
    tc = TrainConfig(epochs=2, batch_size=4, seed=3)
    a = train(_cfg("0101"), tr, va, tc, tmp_path / "a").log
    b = train(_cfg("0101"), tr, va, tc, tmp_path / "b").log
    assert _loss_columns(a) == _loss_columns(b)
    wa = (tmp_path / "a" / "checkpoints" / "last" / "weights.tdw").read_bytes()
    assert wa == (tmp_path / "b" / "checkpoints" / "last" / "weights.tdw").read_bytes()


def test_resume_equals_uninterrupted(tiny, tmp_path):
    tr, va = tiny
    tc = TrainConfig(epochs=4, batch_size=4, seed=5)
    full = train(_cfg("1001"), tr, va, tc, tmp_path / "full").log
    part = train(_cfg("1001"), tr, va, tc, tmp_path / "part", stop_after=2)
    assert part.stopped_early and len(part.log) == 2
    resumed = train(_cfg("1001"), tr, va, tc, tmp_path / "part", resume=True).log
    assert [r.epoch for r in resumed] == [1, 2, 3, 4]
    assert [(r.loss, r.box, r.obj, r.cls) for r in read_runlog(tmp_path / "part" / "runlog.csv")] == \
        [(float(f"{r.loss:.6f}"), float(f"{r.box:.6f}"), float(f"{r.obj:.6f}"), float(f"{r.cls:.6f}")) for r in full]
    # the in-memory rows carry full precision for the resumed epochs
    assert [r.loss for r in resumed[2:]] == [r.loss for r in full[2:]]
    assert (tmp_path / "full" / "checkpoints" / "last" / "weights.tdw").read_bytes() == \
        (tmp_path / "part" / "checkpoints" / "last" / "weights.tdw").read_bytes()


def test_resume_rejects_mismatch_and_corruption(tiny, tmp_path):
    tr, va = tiny
    tc = TrainConfig(epochs=2, batch_size=4)
    train(_cfg(), tr, va, tc, tmp_path, stop_after=1)
    with pytest.raises(ConfigError, match="img_size"):
        train(ModelConfig(img_size=64), tr, va, tc, tmp_path, resume=True)
    with pytest.raises(ConfigError, match="ghost"):
        train(_cfg("1000"), tr, va, tc, tmp_path, resume=True)
    w = tmp_path / "checkpoints" / "last" / "weights.tdw"
    w.write_bytes(w.read_bytes()[:-7])
    with pytest.raises(FormatError, match="weights.tdw"):
        train(_cfg(), tr, va, tc, tmp_path, resume=True)
    (tmp_path / "checkpoints" / "last" / "state.txt").write_text("epoch = 1\n")
    with pytest.raises(FormatError, match="state.txt"):
        train(_cfg(), tr, va, tc, tmp_path, resume=True)


def test_train_config_validation(tiny, tmp_path):
    tr, va = tiny
    for bad in (TrainConfig(epochs=0), TrainConfig(batch_size=0), TrainConfig(lr=0.0)):
        with pytest.raises(ConfigError):
            train(_cfg(), tr, va, bad, tmp_path)
    with pytest.raises(ConfigError, match="empty"):
        train(_cfg(), [], va, TrainConfig(epochs=1), tmp_path)


def test_nonfinite_loss_aborts_with_context(tiny, tmp_path):
    tr, va = tiny
    with pytest.raises(TrainingAborted, match=r"epoch 1, step 1/"):
        train(_cfg(), tr, va, TrainConfig(epochs=1, batch_size=4), tmp_path,
              loss_cfg=LossConfig(box_weight=float("nan")))


def test_lr_schedule():
    tc = TrainConfig(epochs=10, lr=1e-3, warmup_epochs=3)
    spe = 5
    assert lr_at(0, spe, tc) == pytest.approx(1e-3 / 15)
    assert lr_at(14, spe, tc) == pytest.approx(1e-3)
    assert lr_at(15, spe, tc) == pytest.approx(1e-3)
    assert lr_at(50, spe, tc) == pytest.approx(1e-5)
    mid = 15 + 35 // 2
    assert lr_at(mid, spe, tc) == pytest.approx(1e-5 + (1e-3 - 1e-5) * 0.5 * (1 + math.cos(math.pi * 17 / 35)))
    vals = [lr_at(s, spe, tc) for s in range(15, 50)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_adam_matches_closed_form():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam({"p": p})
    grads = [np.array([0.5, -1.0]), np.array([0.1, 2.0])]
    m = v = np.zeros(2)
    want = np.array([1.0, -2.0])
    for t, g in enumerate(grads, 1):
        p.grad = g.copy()
        opt.step(0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        want = want - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p.data, want, rtol=1e-12)


def test_clip_grad_norm():
    a = Tensor(np.zeros(2), requires_grad=True)
    b = Tensor(np.zeros(1), requires_grad=True)
    a.grad, b.grad = np.array([30.0, 40.0]), np.array([0.0])
    assert clip_grad_norm([a, b], 10.0) == pytest.approx(50.0)
    np.testing.assert_allclose(a.grad, [6.0, 8.0])
    a.grad = np.array([3.0, 4.0])
    clip_grad_norm([a, b], 10.0)
    np.testing.assert_array_equal(a.grad, [3.0, 4.0])


@pytest.mark.parametrize("bits", ["0000", "1111"])
def test_one_step_moves_every_parameter(tiny, bits):
    tr, _ = tiny
    cfg = _cfg(bits)
    model = build(cfg, 0)
    before = {k: p.data.copy() for k, p in model.named_parameters()}
    opt = Adam(dict(model.named_parameters()))
    batch = list(tr[:4])
    x = Tensor(np.stack([s.image for s in batch]))
    lb = composite_loss(model(x), _batch_targets(batch, 32, cfg), cfg.anchors, cfg.strides, cfg.n_classes,
                        LossConfig(nwd=cfg.nwd, nwd_c=12.8))
    lb.total.backward()
    opt.step(1e-3)
    still = [k for k, p in model.named_parameters() if np.array_equal(p.data, before[k])]
    assert still == []


def test_best_checkpoint_tracks_best_val(tiny, tmp_path):
    tr, va = tiny
    res = train(_cfg(), tr, va, TrainConfig(epochs=3, batch_size=4), tmp_path)
    best_epoch = max(res.log, key=lambda r: (r.map50, -r.epoch)).epoch
    state = (tmp_path / "checkpoints" / "best" / "state.txt").read_text()
    assert f"epoch = {best_epoch}\n" in state
    assert res.best_map == max(r.map50 for r in res.log)
    load_weights(tmp_path / "checkpoints" / "best" / "weights.tdw", _cfg())


def test_auto_nwd_constant_is_mean_box_size(tiny, tmp_path):
    tr, va = tiny
    res = train(_cfg("0001"), tr, va, TrainConfig(epochs=1, batch_size=4), tmp_path)
    gts = np.concatenate([s.gts for s in tr]) * 32
    want = float(np.mean(np.sqrt(gts[:, 3] * gts[:, 4])))
    assert res.loss_cfg.nwd_c == pytest.approx(want, rel=1e-12)
    assert f"loss.nwd_c = {res.loss_cfg.nwd_c!r}\n" in (tmp_path / "checkpoints" / "last" / "state.txt").read_text()
    fixed = train(_cfg("0001"), tr, va, TrainConfig(epochs=1, batch_size=4), tmp_path / "f",
                  loss_cfg=LossConfig(nwd=True, nwd_c=12.8))
    assert fixed.loss_cfg.nwd_c == 12.8


def test_run_config_nwd_constant():
    from microdet.config import RunConfig
    assert RunConfig.default().loss_config().nwd_c is None
    assert RunConfig.parse("loss.nwd_c = 12.8\n").loss_config().nwd_c == 12.8
    for bad in ("loss.nwd_c = 0\n", "loss.nwd_c = big\n"):
        with pytest.raises(ConfigError, match="nwd_c"):
            RunConfig.parse(bad)
