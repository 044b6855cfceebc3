import dataclasses
import math

import numpy as np
import pytest

from motionguide import diffusion as D
from motionguide.denoiser import NULL_CLASS, ConfigError, Denoiser, DenoiserConfig
from motionguide.diffusion import NoiseSchedule, SamplerConfig, add_noise, ddim_invert, ddim_step, sample
from motionguide.guidance import extract_representation
from motionguide.synthgen import gen_clip, ClipParams
from motionguide.tensor import NumericError

TINY = DenoiserConfig(frames=4, resolution=8, patch=2, width=8, levels=2, time_dim=16, seed=3)


@pytest.fixture(scope="module")
def model():
    return Denoiser(TINY)


@pytest.fixture(scope="module")
def schedule():
    return NoiseSchedule()


@pytest.fixture(scope="module")
def rep(model, schedule):
    clip, _ = gen_clip("translate", ClipParams(frames=4, size=8, square=3, velocity=(1, 0)), seed=0)
    return extract_representation(model, schedule, clip, mode="primary")


class TestSchedule:
    def test_alpha_bar_monotone(self, schedule):
        ab = schedule.alpha_bar
        assert ab[0] == 1.0
        assert (np.diff(ab) < 0).all()
        assert 0.0 < ab[-1] < 1.0

    @pytest.mark.parametrize("T,lo,hi", [(10, 1e-3, 0.2), (1000, 1e-4, 2e-2), (50, 0.01, 0.02)])
    def test_monotone_for_any_schedule(self, T, lo, hi):
        assert (np.diff(NoiseSchedule(T, lo, hi).alpha_bar) < 0).all()

    def test_grids_are_uniform_subsets(self, schedule):
        assert schedule.grid(100)[:3] == [1000, 990, 980] and schedule.grid(100)[-1] == 10
        g = schedule.grid(300)
        assert len(g) == 300 and len(set(g)) == 300 and min(g) >= 1


class TestAddNoise:
    def test_scalar_hand_value(self):
        s = NoiseSchedule(T=1)
        s.alpha_bar = np.array([1.0, 0.25])
        out = add_noise(s, np.array([2.0]), 1, np.array([2.0]))
        assert out[0] == pytest.approx(0.5 * 2 + math.sqrt(0.75) * 2, rel=1e-6)

    def test_small_t_limit(self, schedule):
        z0 = np.random.default_rng(0).standard_normal(10)
        np.testing.assert_allclose(add_noise(schedule, z0, 1, np.ones(10)), z0, atol=0.02)

    def test_zero_clip(self, schedule):
        eps = np.random.default_rng(1).standard_normal(6)
        np.testing.assert_allclose(add_noise(schedule, np.zeros(6), 400, eps), math.sqrt(1 - schedule.alpha_bar[400]) * eps, rtol=1e-6)

    def test_out_of_range(self, schedule):
        with pytest.raises(ValueError):
            add_noise(schedule, np.zeros(2), 0, np.zeros(2))
        with pytest.raises(ValueError):
            add_noise(schedule, np.zeros(2), 1001, np.zeros(2))


class TestDDIM:
    def test_true_noise_identity(self, schedule):
        rng = np.random.default_rng(2)
        z0, eps = rng.standard_normal(20), rng.standard_normal(20)
        out = ddim_step(schedule, add_noise(schedule, z0, 700, eps), eps, 700, 300)
        np.testing.assert_allclose(out, add_noise(schedule, z0, 300, eps), atol=1e-5)

    def test_t_prev_zero_returns_x0(self, schedule):
        rng = np.random.default_rng(3)
        z, e = rng.standard_normal(5), rng.standard_normal(5)
        np.testing.assert_allclose(ddim_step(schedule, z, e, 50, 0), D.predict_x0(schedule, z, e, 50), rtol=1e-6)

    def test_order_enforced(self, schedule):
        with pytest.raises(ValueError):
            ddim_step(schedule, np.zeros(2), np.zeros(2), 10, 10)

    def test_closed_loop_oracle_chain(self, schedule):
        rng = np.random.default_rng(4)
        z0, eps = rng.uniform(-1, 1, 64), rng.standard_normal(64)
        grid = schedule.grid(100)
        z = add_noise(schedule, z0, grid[0], eps)
        for i, t in enumerate(grid):
            z = ddim_step(schedule, z, eps, t, grid[i + 1] if i + 1 < len(grid) else 0)
        assert np.abs(z - z0).max() < 1e-4


class TestInversion:
    def test_length(self, model, schedule):
        clip = np.zeros((4, 1, 8, 8), np.float32)
        traj, maps = ddim_invert(model, schedule, clip, 0, 7, record="up_block.1")
        assert len(traj) == 8
        assert sorted(maps) == sorted(schedule.grid(7))

    def test_single_step_is_one_euler_step(self, model, schedule):
        clip = np.random.default_rng(5).uniform(-1, 1, (4, 1, 8, 8)).astype(np.float32)
        traj, _ = ddim_invert(model, schedule, clip, 0, 1)
        e = model.predict_noise(clip[None], 0, 1000)[0].data[0]
        ab = schedule.alpha_bar[1000]
        np.testing.assert_allclose(traj[1], math.sqrt(ab) * clip + math.sqrt(1 - ab) * e, atol=1e-6)


class TestSamplerConfig:
    def test_defaults(self):
        c = SamplerConfig()
        assert (c.steps, c.guidance_steps, c.cfg_scale, c.lam) == (100, 50, 7.5, 2000.0)

    def test_presets(self):
        assert SamplerConfig.preset("object").steps == 300
        assert SamplerConfig.preset("object").guidance_steps == 180

    @pytest.mark.parametrize("kw", [dict(guidance_steps=101), dict(cfg_scale=-1.0), dict(lam=-1.0), dict(mode="other")])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            SamplerConfig(**kw)


class TestSample:
    def cfg(self, **kw):
        base = dict(steps=6, guidance_steps=3, cfg_scale=2.0, lam=0.0, mode="off", seed=11)
        base.update(kw)
        return SamplerConfig(**base)

    def test_deterministic(self, model, schedule, rep):
        a = sample(model, schedule, self.cfg(mode="primary", lam=50.0), 1, rep)
        b = sample(model, schedule, self.cfg(mode="primary", lam=50.0), 1, rep)
        assert np.array_equal(a.data, b.data)
        assert len(a.meta["energies"]) == 3

    def test_lambda_zero_bitwise_equals_off(self, model, schedule, rep):
        off = sample(model, schedule, self.cfg(), 1)
        guided = sample(model, schedule, self.cfg(mode="primary"), 1, rep)
        assert np.array_equal(off.data, guided.data)

    def test_guidance_changes_output(self, model, schedule, rep):
        off = sample(model, schedule, self.cfg(), 1)
        guided = sample(model, schedule, self.cfg(mode="primary", lam=1e4), 1, rep)
        assert not np.array_equal(off.data, guided.data)

    def test_pure_conditional(self, model, schedule):
        out = sample(model, schedule, self.cfg(cfg_scale=0.0), 2)
        grid = schedule.grid(6)
        z = np.random.default_rng(11).standard_normal((1, 4, 1, 8, 8)).astype(np.float32)
        for i, t in enumerate(grid):
            e = model.predict_noise(z, 2, t)[0].data
            z = ddim_step(schedule, z, e, t, grid[i + 1] if i + 1 < len(grid) else 0, clip_x0=1.0)
        assert np.array_equal(out.data, z[0])

    def test_off_never_builds_tape(self, model, schedule, monkeypatch):
        class Boom:
            def __init__(self):
                raise AssertionError("tape constructed on the unguided path")

        monkeypatch.setattr(D, "Tape", Boom)
        sample(model, schedule, self.cfg(), 1)

    def test_guided_mode_needs_representation(self, model, schedule):
        with pytest.raises(ConfigError):
            sample(model, schedule, self.cfg(mode="primary"), 1, None)

    def test_mode_mismatch(self, model, schedule, rep):
        with pytest.raises(ConfigError):
            sample(model, schedule, self.cfg(mode="plain"), 1, rep)

    def test_non_finite_guidance_aborts(self, model, schedule, rep):
        bad = dataclasses.replace(rep, L=np.full_like(rep.L, np.nan))
        with pytest.raises(NumericError):
            sample(model, schedule, self.cfg(mode="primary", lam=1.0), 1, bad)

    def test_null_condition_allowed(self, model, schedule):
        out = sample(model, schedule, self.cfg(), NULL_CLASS)
        assert out.data.shape == (4, 1, 8, 8)
