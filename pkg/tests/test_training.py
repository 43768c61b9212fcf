import json
import math

import numpy as np
import pytest
import torch

from fundus_restore import checkpoint
from fundus_restore.data import make_fixture_pair
from fundus_restore.discriminator import DiscriminatorConfig
from fundus_restore.errors import (ChecksumError, ConfigError, ConfigMismatchError, NonFiniteError,
                                   VersionMismatchError)
from fundus_restore.generator import GeneratorConfig
from fundus_restore.losses import LossConfig, build_perception, charbonnier
from fundus_restore.training import (LOG_KEYS, TrainConfig, _adam, export_generator, fit,
                                     init_state, load_generator, load_state, lr_schedule,
                                     make_batch, save_state, train_step)


def tiny_cfg(**kw):
    base = dict(
        epochs=2, batch_size=2, patch_size=32, seed=0,
        generator=GeneratorConfig(base_channels=4, window_size=4),
        discriminator=DiscriminatorConfig(base_channels=4, window_size=4, stages=2),
    )
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def pairs():
    return [make_fixture_pair(48, s) for s in range(3)]


@pytest.fixture(scope="module")
def phi():
    return build_perception("stub-randconv")


# -- schedule ------------------------------------------------------------------


def test_lr_endpoints_exact():
    cfg = TrainConfig()
    assert lr_schedule(0, 1000, cfg) == 1e-4
    assert lr_schedule(1000, 1000, cfg) == 1e-6


def test_lr_midpoint():
    assert lr_schedule(500, 1000) == pytest.approx(5.05e-5, rel=1e-12)


def test_lr_monotone_over_samples():
    total = 10**6
    steps = np.sort(np.random.default_rng(0).integers(0, total + 1, 10**4))
    lrs = [lr_schedule(int(s), total) for s in steps]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert all(1e-6 <= v <= 1e-4 for v in lrs)


def test_lr_out_of_range():
    with pytest.raises(ValueError):
        lr_schedule(-1, 10)
    with pytest.raises(ValueError):
        lr_schedule(11, 10)


# -- config --------------------------------------------------------------------


@pytest.mark.parametrize("kw", [{"epochs": 0}, {"batch_size": 0}, {"lr_final": 1e-3},
                                {"patch_size": 0}])
def test_config_invariants(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


def test_config_dict_round_trip():
    cfg = tiny_cfg(grad_clip=1.0)
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_config_unknown_keys_named():
    with pytest.raises(ConfigError, match="learning_rate"):
        TrainConfig.from_dict({"learning_rate": 1})
    with pytest.raises(ConfigError, match="generator.*widht"):
        TrainConfig.from_dict({"generator": {"widht": 3}})


# -- optimizer -----------------------------------------------------------------


def test_adam_single_parameter_oracle():
    w = torch.tensor([1.0], dtype=torch.float64, requires_grad=True)
    opt = _adam([w], TrainConfig(lr_init=0.1, lr_final=0.1))
    (w**2).sum().backward()
    opt.step()
    g = 2.0
    m_hat = (1 - 0.9) * g / (1 - 0.9)
    v_hat = (1 - 0.999) * g * g / (1 - 0.999)
    expected = 1.0 - 0.1 * m_hat / (math.sqrt(v_hat) + 1e-8)
    assert w.item() == pytest.approx(expected, abs=1e-12)
    assert w.item() == pytest.approx(1 - 0.1 * 1 / (math.sqrt(1) + 1e-8), abs=1e-8)


# -- train_step ----------------------------------------------------------------


def _snapshot(module):
    return [p.detach().clone() for p in module.parameters()]


def _same(a, b):
    return all(torch.equal(x, y) for x, y in zip(a, b))


def test_phase_isolation(pairs, phi):
    cfg = tiny_cfg(generator=GeneratorConfig(base_channels=4, window_size=4, zero_init_output=False))
    state = init_state(cfg, 10)
    g0, d0 = _snapshot(state.generator), _snapshot(state.discriminator)
    seen = {}
    g_step, d_step = state.opt_g.step, state.opt_d.step

    def after_g(*a, **k):
        out = g_step(*a, **k)
        seen["d_after_phase1"] = _snapshot(state.discriminator)
        seen["g_after_phase1"] = _snapshot(state.generator)
        seen["d_grads_phase1"] = [p.grad for p in state.discriminator.parameters()]
        return out

    def before_d(*a, **k):
        seen["g_before_phase2"] = _snapshot(state.generator)
        return d_step(*a, **k)

    state.opt_g.step, state.opt_d.step = after_g, before_d
    train_step(make_batch(pairs, [0, 1], cfg, 0), state, phi)
    assert _same(seen["d_after_phase1"], d0)
    assert all(g is None for g in seen["d_grads_phase1"])
    assert not _same(seen["g_after_phase1"], g0)
    assert _same(_snapshot(state.generator), seen["g_after_phase1"])
    assert _same(seen["g_before_phase2"], seen["g_after_phase1"])
    assert not _same(_snapshot(state.discriminator), d0)


def test_logs_have_every_component(pairs, phi):
    state = init_state(tiny_cfg(), 4)
    logs = train_step(make_batch(pairs, [0], state.cfg, 0), state, phi)
    assert set(LOG_KEYS) | {"lr"} <= set(logs)
    assert state.step == 1


def test_descent_with_pure_charbonnier(pairs, phi):
    cfg = tiny_cfg(lr_init=1e-4, lr_final=1e-4, augment=False,
                   loss=LossConfig(lambda_fqp=0, lambda_edge=0, lambda_adv=0))
    state = init_state(cfg, 20)
    batch = make_batch(pairs, [0, 1], cfg, 0)
    values = [train_step(batch, state, phi)["charbonnier"] for _ in range(10)]
    with torch.no_grad():
        values.append(charbonnier(state.generator(batch[0]), batch[1]).item())
    assert all(a > b for a, b in zip(values, values[1:]))


def test_perception_untouched_by_training(pairs):
    phi = build_perception("stub-randconv")
    before = _snapshot(phi)
    state = init_state(tiny_cfg(), 4)
    train_step(make_batch(pairs, [0, 1], state.cfg, 0), state, phi)
    assert _same(before, _snapshot(phi))


def test_unfrozen_perception_rejected(pairs):
    phi = build_perception("stub-randconv")
    next(phi.parameters()).requires_grad_(True)
    state = init_state(tiny_cfg(), 4)
    with pytest.raises(RuntimeError, match="frozen"):
        train_step(make_batch(pairs, [0], state.cfg, 0), state, phi)


def test_non_finite_input_named(pairs, phi):
    state = init_state(tiny_cfg(), 4)
    lq, hq = make_batch(pairs, [0], state.cfg, 0)
    hq[0, 0, 0, 0] = float("nan")
    with pytest.raises(NonFiniteError, match="charbonnier"):
        train_step((lq, hq), state, phi)


# -- checkpoints ---------------------------------------------------------------


def _state_equal(a, b):
    pa, pb = a.payload(), b.payload()
    for key in ("generator", "discriminator"):
        assert pa[key].keys() == pb[key].keys()
        assert all(torch.equal(pa[key][k], pb[key][k]) for k in pa[key])
    for key in ("opt_g", "opt_d"):
        sa, sb = pa[key]["state"], pb[key]["state"]
        assert sa.keys() == sb.keys()
        for i in sa:
            for k in sa[i]:
                assert torch.equal(sa[i][k], sb[i][k])
        assert pa[key]["param_groups"] == pb[key]["param_groups"]
    for key in ("step", "epoch", "total_steps", "history", "best"):
        assert pa[key] == pb[key]
    assert torch.equal(pa["torch_rng"], pb["torch_rng"])


def _trained_state(pairs, phi, steps=2):
    state = init_state(tiny_cfg(), 10)
    for i in range(steps):
        state.history.append(train_step(make_batch(pairs, [i % 3], state.cfg, 0), state, phi))
    return state


def test_checkpoint_round_trip(tmp_path, pairs, phi):
    state = _trained_state(pairs, phi)
    save_state(state, tmp_path / "s.ckpt")
    _state_equal(state, load_state(tmp_path / "s.ckpt", state.cfg))
    _state_equal(state, load_state(tmp_path / "s.ckpt"))


def test_corrupted_byte_detected(tmp_path, pairs, phi):
    state = _trained_state(pairs, phi, 1)
    path = tmp_path / "s.ckpt"
    save_state(state, path)
    blob = bytearray(path.read_bytes())
    for offset in (20, len(blob) // 2, len(blob) - 40):
        bad = bytearray(blob)
        bad[offset] ^= 0x01
        path.write_bytes(bytes(bad))
        with pytest.raises(ChecksumError):
            load_state(path)
    path.write_bytes(bytes(blob[:-10]))
    with pytest.raises(ChecksumError):
        load_state(path)


def test_version_mismatch(tmp_path, monkeypatch):
    monkeypatch.setattr(checkpoint, "FORMAT_VERSION", 99)
    checkpoint.save_container(tmp_path / "v.ckpt", {"x": torch.zeros(1)}, "generator", {})
    monkeypatch.undo()
    with pytest.raises(VersionMismatchError):
        checkpoint.load_container(tmp_path / "v.ckpt")


def test_config_mismatch_refused(tmp_path, pairs, phi):
    state = _trained_state(pairs, phi, 1)
    save_state(state, tmp_path / "s.ckpt")
    other = tiny_cfg(generator=GeneratorConfig(base_channels=8, window_size=4))
    with pytest.raises(ConfigMismatchError):
        load_state(tmp_path / "s.ckpt", other)
    with pytest.raises(ConfigMismatchError):
        checkpoint.load_container(tmp_path / "s.ckpt", role="generator")


def test_export_and_load_generator(tmp_path, pairs, phi):
    state = _trained_state(pairs, phi, 1)
    export_generator(state.generator, tmp_path / "g.ckpt")
    for path in (tmp_path / "g.ckpt", None):
        if path is None:
            save_state(state, tmp_path / "s.ckpt")
            path = tmp_path / "s.ckpt"
        g = load_generator(path)
        assert all(torch.equal(a, b) for a, b in zip(g.parameters(), state.generator.parameters()))


# -- fit -----------------------------------------------------------------------


def test_history_length_and_files(tmp_path, pairs, phi):
    cfg = tiny_cfg(epochs=2, batch_size=2, checkpoint_every=2)
    state = fit(pairs, cfg, tmp_path, phi=phi)
    steps_per_epoch = math.ceil(len(pairs) / cfg.batch_size)
    assert len(state.history) == cfg.epochs * steps_per_epoch == state.step
    lines = (tmp_path / "logs" / "train.jsonl").read_text().splitlines()
    assert [json.loads(l)["step"] for l in lines] == list(range(1, state.step + 1))
    assert (tmp_path / "checkpoints" / "final.ckpt").exists()
    assert (tmp_path / "checkpoints" / "step0000002.ckpt").exists()


def test_resume_is_bit_exact(tmp_path, pairs, phi):
    cfg = tiny_cfg(epochs=3, batch_size=2, checkpoint_every=3)
    full = fit(pairs, cfg, tmp_path / "a", phi=phi)
    resumed = fit(pairs, cfg, tmp_path / "b", resume=tmp_path / "a" / "checkpoints" / "step0000003.ckpt",
                  phi=phi)
    assert resumed.history == full.history
    _state_equal(full, resumed)


def test_fit_empty_dataset():
    from fundus_restore.errors import DataError

    with pytest.raises(DataError):
        fit([], tiny_cfg())
