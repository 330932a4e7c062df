"""Flow matching: path algebra, sway grid, guidance blending, Euler sampling."""

import numpy as np
import pytest

from foleyflow.errors import ConfigError, ContractError, DivergenceError, ShapeError
from foleyflow.flow import (
    SWAY_MAX,
    SWAY_MIN,
    SamplerConfig,
    cfm_loss,
    guided_velocity,
    make_flow_sample,
    sample,
    sway_schedule,
)
from foleyflow.model import ConditionBundle, ModelConfig
from foleyflow.rng import seeded_rng
from foleyflow.tensor import Tensor

STUB_CFG = ModelConfig(d_model=8, n_layers=1, n_heads=2, d_audio_latent=3, d_text=4, d_video_feat=4, t_audio=6)


class StubModel:
    """Callable velocity field with a call counter, no learnable state."""

    def __init__(self, fn, config=STUB_CFG):
        self.fn = fn
        self.config = config
        self.calls = 0

    def __call__(self, x_t, t, cond):
        self.calls += 1
        x = x_t.data if isinstance(x_t, Tensor) else np.asarray(x_t)
        return Tensor(self.fn(x, t, cond))


# ---------------------------------------------------------------------------
# path algebra


def test_flow_sample_interpolation_exact():
    rng = seeded_rng(0)
    x0, x1 = rng.normal((4, 3)), rng.normal((4, 3))
    s = make_flow_sample(x0, x1, 0.25)
    assert np.array_equal(s.x_t, 0.75 * x0 + 0.25 * x1)
    assert np.array_equal(s.target_v, x1 - x0)
    assert np.array_equal(make_flow_sample(x0, x1, 0.0).x_t, x0)
    assert np.array_equal(make_flow_sample(x0, x1, 1.0).x_t, x1)


def test_flow_sample_contracts():
    with pytest.raises(ShapeError):
        make_flow_sample(np.zeros((2, 2)), np.zeros((2, 3)), 0.5)
    with pytest.raises(ContractError):
        make_flow_sample(np.zeros((2, 2)), np.zeros((2, 2)), 1.5)
    with pytest.raises(ContractError):
        make_flow_sample(np.zeros((2, 2)), np.zeros((2, 2)), -0.1)


# ---------------------------------------------------------------------------
# sway grid


def test_sway_zero_is_exactly_uniform():
    for nfe in (1, 7, 64):
        grid = sway_schedule(nfe, 0.0)
        uniform = np.arange(nfe + 1) / nfe
        assert np.abs(grid - uniform).max() <= 1e-15


def test_sway_endpoints_exact_for_all_coefficients():
    for s in (SWAY_MIN, -0.5, 0.0, 0.7, SWAY_MAX):
        grid = sway_schedule(32, s)
        assert grid[0] == 0.0
        assert grid[-1] == 1.0


def test_sway_strictly_increasing_across_range():
    for s in (SWAY_MIN, -0.99, -0.3, 0.0, 1.0, SWAY_MAX):
        grid = sway_schedule(64, s)
        assert np.all(np.diff(grid) > 0.0), s


def test_negative_sway_front_loads():
    grid = sway_schedule(16, -1.0)
    uniform = np.arange(17) / 16
    # interior knots sit below the uniform grid: early steps are smaller
    assert np.all(grid[1:-1] < uniform[1:-1])
    assert np.all(np.diff(grid)[:-1] < np.diff(grid)[1:])


def test_sway_closed_form_value():
    # t(u) = u + s (cos(pi u / 2) - 1 + u); at u = 1/2, s = -1:
    # t = 1 - cos(pi/4) = 1 - sqrt(2)/2
    grid = sway_schedule(2, -1.0)
    assert abs(grid[1] - (1.0 - np.sqrt(2.0) / 2.0)) <= 1e-15


def test_sway_schedule_contracts():
    with pytest.raises(ConfigError):
        sway_schedule(0, 0.0)
    with pytest.raises(ConfigError):
        sway_schedule(8, SWAY_MIN - 0.01)
    with pytest.raises(ConfigError):
        sway_schedule(8, SWAY_MAX + 0.01)


def test_sampler_config_validation():
    with pytest.raises(ConfigError):
        SamplerConfig(nfe=0)
    with pytest.raises(ConfigError):
        SamplerConfig(sway_coef=-2.0)
    with pytest.raises(ConfigError):
        SamplerConfig(guidance_scale=-0.1)


# ---------------------------------------------------------------------------
# training objective


def test_cfm_loss_zero_model_oracle():
    # a model that always answers zero makes the loss the mean squared
    # target velocity, which we can replay with a twin rng stream
    model = StubModel(lambda x, t, cond: np.zeros_like(x))
    rng = seeded_rng(42)
    data = [seeded_rng(100 + i).normal((5, 3)) for i in range(4)]
    batch = [(x1, ConditionBundle()) for x1 in data]
    loss = cfm_loss(model, batch, rng).item()

    twin = seeded_rng(42)
    expected = 0.0
    for x1 in data:
        x0 = twin.normal(x1.shape)
        twin.uniform()  # t is drawn after x0 but unused by a zero model
        expected += np.mean((x1 - x0) ** 2)
    expected /= len(data)
    assert abs(loss - expected) <= 1e-12


def test_cfm_loss_perfect_model_is_zero():
    # a model that answers x1 - x0 exactly: replay the stream to know both
    data = seeded_rng(7).normal((4, 3))
    twin = seeded_rng(1)
    x0 = twin.normal(data.shape)
    model = StubModel(lambda x, t, cond: data - x0)
    loss = cfm_loss(model, [(data, ConditionBundle())], seeded_rng(1)).item()
    assert loss <= 1e-24


def test_cfm_loss_rng_order_x0_then_t():
    # the contract pins the stream order; a swapped implementation would
    # disagree with this replay
    model = StubModel(lambda x, t, cond: np.zeros_like(x))
    x1 = np.ones((2, 2))
    loss = cfm_loss(model, [(x1, ConditionBundle())], seeded_rng(3)).item()
    twin = seeded_rng(3)
    x0 = twin.normal((2, 2))
    assert abs(loss - np.mean((x1 - x0) ** 2)) <= 1e-12


def test_cfm_loss_accepts_tensor_targets():
    model = StubModel(lambda x, t, cond: np.zeros_like(x))
    a = cfm_loss(model, [(Tensor(np.ones((2, 2))), ConditionBundle())], seeded_rng(5)).item()
    b = cfm_loss(model, [(np.ones((2, 2)), ConditionBundle())], seeded_rng(5)).item()
    assert a == b


def test_cfm_loss_empty_batch_raises():
    model = StubModel(lambda x, t, cond: np.zeros_like(x))
    with pytest.raises(ContractError):
        cfm_loss(model, [], seeded_rng(0))


# ---------------------------------------------------------------------------
# guidance


def _branching_stub():
    # conditional branch returns x + 1, unconditional x - 1
    def fn(x, t, cond):
        return x + 1.0 if cond.text_kept else x - 1.0

    return StubModel(fn)


def _textual_cond():
    return ConditionBundle(text_emb=Tensor(np.zeros((1, STUB_CFG.d_text))), text_kept=True)


def test_guided_velocity_blend_algebra():
    model = _branching_stub()
    x = seeded_rng(8).normal((STUB_CFG.t_audio, STUB_CFG.d_audio_latent))
    cond = _textual_cond()
    v_u, v_c = x - 1.0, x + 1.0
    for w in (0.5, 2.0, 3.5):
        out = guided_velocity(model, x, 0.5, cond, w)
        assert np.array_equal(out, v_u + w * (v_c - v_u)), w
    # w = 0 and w = 1 take the single-call path, so they return the branch
    # itself, bit for bit, not the blended expression
    assert np.array_equal(guided_velocity(model, x, 0.5, cond, 0.0), v_u)
    assert np.array_equal(guided_velocity(model, x, 0.5, cond, 1.0), v_c)


def test_guided_velocity_single_call_at_trivial_weights():
    x = np.zeros((STUB_CFG.t_audio, STUB_CFG.d_audio_latent))
    cond = _textual_cond()

    model = _branching_stub()
    guided_velocity(model, x, 0.5, cond, 0.0)
    assert model.calls == 1

    model = _branching_stub()
    guided_velocity(model, x, 0.5, cond, 1.0)
    assert model.calls == 1

    model = _branching_stub()
    guided_velocity(model, x, 0.5, cond, 2.0)
    assert model.calls == 2

    model = _branching_stub()
    guided_velocity(model, x, 0.5, ConditionBundle(), 2.0)
    assert model.calls == 1


def test_guided_velocity_unconditional_bundle_ignores_weight():
    model = _branching_stub()
    x = seeded_rng(9).normal((STUB_CFG.t_audio, STUB_CFG.d_audio_latent))
    out = guided_velocity(model, x, 0.5, ConditionBundle(), 5.0)
    assert np.array_equal(out, x - 1.0)


def test_guided_velocity_rejects_negative_weight():
    with pytest.raises(ContractError):
        guided_velocity(_branching_stub(), np.zeros((6, 3)), 0.5, _textual_cond(), -1.0)


# ---------------------------------------------------------------------------
# sampling


def test_sample_constant_field_telescopes():
    # v = c integrates to x0 + c exactly on any grid: the increments
    # telescope to t=1 - t=0
    c = 3.25
    model = StubModel(lambda x, t, cond: np.full_like(x, c))
    for s in (SWAY_MIN, 0.0, SWAY_MAX):
        cfg = SamplerConfig(nfe=17, sway_coef=s, guidance_scale=1.0, seed=12)
        out = sample(model, ConditionBundle(), cfg)
        x0 = seeded_rng(12).normal((STUB_CFG.t_audio, STUB_CFG.d_audio_latent))
        assert np.abs(out - (x0 + c)).max() <= 1e-12


def test_sample_deterministic_in_seed():
    model = StubModel(lambda x, t, cond: -x)
    cfg = SamplerConfig(nfe=8, seed=4)
    a = sample(model, ConditionBundle(), cfg)
    b = sample(model, ConditionBundle(), cfg)
    assert np.array_equal(a, b)
    c = sample(model, ConditionBundle(), SamplerConfig(nfe=8, seed=5))
    assert not np.array_equal(a, c)


def test_sample_divergence_reports_step():
    model = StubModel(lambda x, t, cond: np.full_like(x, np.inf))
    with pytest.raises(DivergenceError) as err:
        sample(model, ConditionBundle(), SamplerConfig(nfe=4, seed=0))
    assert err.value.step == 0


def test_sample_uses_guidance_from_config():
    model = _branching_stub()
    cfg1 = SamplerConfig(nfe=4, guidance_scale=1.0, seed=2)
    cfg2 = SamplerConfig(nfe=4, guidance_scale=3.0, seed=2)
    out1 = sample(model, _textual_cond(), cfg1)
    out2 = sample(model, _textual_cond(), cfg2)
    assert not np.array_equal(out1, out2)
