import numpy as np
import pytest

from splatsr import InconsistentStateError, InvalidParameterError
from splatsr.data import make_dataset
from splatsr.grad import ParamGrads, rasterize_backward
from splatsr.io import ply_bytes
from splatsr.render import downsample, rasterize
from splatsr.scene import make_synthetic_scene
from splatsr.train import (
    AdamState,
    TrainConfig,
    adam_step,
    coefficient_of_variation,
    make_oracles,
    mse_subpixel_loss,
    optimize,
    trace_gradients,
    train_lr,
    train_sr,
)

from conftest import random_scene, small_camera


@pytest.fixture(scope="module")
def tiny():
    return make_dataset(seed=2, n_prims=25, n_views=4, n_test=2, lr_size=8, sr_factor=2)


def fast_cfg(**kw):
    base = dict(sr_factor=2, densify_every=20, densify_from=10, iters_lr=60, iters_sr=40)
    base.update(kw)
    return TrainConfig(**base)


def test_mse_loss_values():
    lr = np.random.default_rng(0).random((4, 4, 3))
    hr = np.repeat(np.repeat(lr, 4, 0), 4, 1)
    loss, g = mse_subpixel_loss(hr, lr, 4)
    assert loss == 0.0 and not g.any()
    loss, _ = mse_subpixel_loss(np.full((8, 8, 3), 0.6), np.full((2, 2, 3), 0.5), 4)
    assert loss == pytest.approx(0.01, abs=1e-15)
    with pytest.raises(InvalidParameterError):
        mse_subpixel_loss(np.zeros((8, 8, 3)), np.zeros((3, 3, 3)), 4)


def test_mse_gradient_finite_differences():
    rng = np.random.default_rng(1)
    hr, lr = rng.random((8, 8, 3)), rng.random((4, 4, 3))
    _, g = mse_subpixel_loss(hr, lr, 2)
    h = 1e-6
    for idx in [(0, 0, 0), (3, 5, 1), (7, 7, 2), (4, 1, 0)]:
        p, m = hr.copy(), hr.copy()
        p[idx] += h
        m[idx] -= h
        num = (mse_subpixel_loss(p, lr, 2)[0] - mse_subpixel_loss(m, lr, 2)[0]) / (2 * h)
        assert abs(num - g[idx]) <= 1e-6 * max(abs(num), 1e-3)


def grads_like(scene, fill=0.0):
    n = len(scene)
    return ParamGrads(np.full((n, 3), fill), np.full((n, 3), fill), np.full((n, 4), fill),
                      np.full(n, fill), np.full((n, 3), fill), np.zeros((n, 2)), np.zeros((n, 2)),
                      np.ones(n, bool))


def test_adam_zero_gradient_and_first_step():
    s = make_synthetic_scene(0, 3, 1.0)
    lrs = TrainConfig().learning_rates(s.extent)
    out, st = adam_step(s, grads_like(s), AdamState.for_scene(s), lrs)
    assert out.fingerprint() == s.fingerprint() and st.step == 1
    lrs = {k: 0.1 for k in lrs}
    out, _ = adam_step(s, grads_like(s, 1.0), AdamState.for_scene(s), lrs)
    np.testing.assert_allclose(out.opacity_logits - s.opacity_logits, -0.1, atol=1e-12)
    with pytest.raises(InconsistentStateError):
        adam_step(s.take([0, 1]), grads_like(s), AdamState.for_scene(s), lrs)


def test_adam_remap_keeps_survivors_zeroes_new_rows():
    s = make_synthetic_scene(0, 4, 1.0)
    _, st = adam_step(s, grads_like(s, 1.0), AdamState.for_scene(s), {k: 0.1 for k in s.params()})
    r = st.remap(np.array([0, 2, 3]), 2)
    np.testing.assert_array_equal(r.m["color"][:3], st.m["color"][[0, 2, 3]])
    assert not r.m["color"][3:].any() and not r.v["position"][3:].any()
    assert r.step == st.step


@pytest.mark.parametrize("seed", range(3))
def test_single_small_step_descends(seed):
    s = random_scene(seed, n=8)
    cam = small_camera(size=16)
    target = np.random.default_rng(seed).random((8, 8, 3))
    img, aux = rasterize(s, cam, keep_aux=True)
    loss0, dl = mse_subpixel_loss(img, target, 2)
    g = rasterize_backward(s, cam, aux, dl)
    out, _ = adam_step(s, g, AdamState.for_scene(s), {k: 1e-6 for k in s.params()})
    assert mse_subpixel_loss(rasterize(out, cam)[0], target, 2)[0] <= loss0


def test_train_lr_self_distillation_and_determinism(tiny):
    cfg = fast_cfg(iters_lr=200)
    init = make_synthetic_scene(99, 10, 1.0)
    views = tiny.train_lr
    first = optimize(init, views, cfg.with_(lambda_sds=0.0), 1)[1][0].loss_mse
    a = train_lr(init, views, cfg)
    last = np.mean([mse_subpixel_loss(rasterize(a, v)[0], v.target_image, 1)[0] for v in views])
    assert last < first
    assert ply_bytes(train_lr(init, views, cfg)) == ply_bytes(a)
    with pytest.raises(InvalidParameterError):
        train_lr(init, [], cfg)
    with pytest.raises(InvalidParameterError):
        train_lr(init, views[:1], cfg)


def test_lambda_zero_matches_mse_only(tiny):
    init = make_synthetic_scene(5, 15, 1.0)
    cfg = fast_cfg(lambda_sds=0.0)
    refs = [v.target_image for v in tiny.train_hr]
    with_oracle, tel_a = train_sr(init, tiny.train_lr, make_oracles(tiny.train_lr, cfg, refs), cfg)
    plain, tel_b = train_sr(init, tiny.train_lr, None, cfg)
    assert with_oracle.fingerprint() == plain.fingerprint()
    assert [r.loss_mse for r in tel_a] == [r.loss_mse for r in tel_b]


def test_train_sr_telemetry(tiny):
    init = make_synthetic_scene(5, 15, 1.0)
    cfg = fast_cfg(prior="noisy", sigma_p=0.5, dropout=False)
    refs = [v.target_image for v in tiny.train_hr]
    scene, tel = train_sr(init, tiny.train_lr, make_oracles(tiny.train_lr, cfg, refs), cfg)
    assert len(tel) == cfg.iters_sr
    assert [r.iter for r in tel] == list(range(cfg.iters_sr))
    assert all(r.arm == "sds" and cfg.anneal_t_min <= r.lb <= r.t <= cfg.T for r in tel)
    counts = [r.n_prims for r in tel]
    changes = [i for i in range(1, len(counts)) if counts[i] != counts[i - 1]]
    assert all(i % cfg.densify_every == 0 for i in changes)
    with pytest.raises(InvalidParameterError):
        train_sr(init, tiny.train_lr, make_oracles(tiny.train_lr, cfg, refs)[:2], cfg)


def test_oracle_resolution_checked(tiny):
    cfg = fast_cfg(sr_factor=4)
    refs = [v.target_image for v in tiny.train_hr]
    with pytest.raises(InvalidParameterError):
        train_sr(make_synthetic_scene(1, 5, 1.0), tiny.train_lr, make_oracles(tiny.train_lr, cfg, refs), cfg)


def test_trace_gradients(tiny):
    cfg = fast_cfg(prior="noisy", sigma_p=0.5, anneal=False)
    refs = [v.target_image for v in tiny.train_hr]
    out = trace_gradients(make_synthetic_scene(3, 15, 1.0), tiny.train_lr,
                          make_oracles(tiny.train_lr, cfg, refs), cfg, iterations=20)
    assert set(out) == {"mse", "sds"}
    for arm, (rows, cv) in out.items():
        assert len(rows) == 20 and all(r.arm == arm for r in rows) and cv >= 0
    assert coefficient_of_variation([1.0, 1.0]) == 0.0


def test_config_validation():
    with pytest.raises(InvalidParameterError):
        TrainConfig(dropout_p=1.5)
    with pytest.raises(InvalidParameterError):
        TrainConfig(lr_color=0.0)
    with pytest.raises(InvalidParameterError):
        TrainConfig(sr_factor=0)
    assert TrainConfig().learning_rates(2.0)["position"] == pytest.approx(2 * TrainConfig().lr_position)


def test_dataset_lr_targets_are_bilinear(tiny):
    for hr, lr in zip(tiny.train_hr, tiny.train_lr):
        np.testing.assert_array_equal(lr.target_image, downsample(hr.target_image, 2))
        assert lr.scaled(2).focal[0] == hr.focal[0]
