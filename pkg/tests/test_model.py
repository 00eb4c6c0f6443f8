import numpy as np
import pytest

from otrdet import model as M
from otrdet import numkernel as nk
from otrdet.numkernel import Tensor

SMALL = M.ModelConfig(feature_dim=6, model_dim=8, state_dim=4, conv_kernel=3, num_layers=2)


def expected_count(c: M.ModelConfig) -> int:
    # summed by hand from the block layout
    D, E, N, K, R = c.model_dim, c.expand * c.model_dim, c.state_dim, c.conv_kernel, -(-c.model_dim // 16)
    per_layer = 2 * D + D * 2 * E + K * E + E + E * (R + 2 * N) + R * E + E + E * N + E + E * D
    return c.feature_dim * D + D + c.num_layers * per_layer + 2 * D + D * c.num_classes + c.num_classes


def steps(params, x, state=None):
    state = state or M.reset_state(params.config)
    out = []
    for row in x:
        logits, state = M.forward_step(params, state, row)
        out.append(logits)
    return np.array(out), state


def test_init_is_deterministic():
    a, b = M.init_model(SMALL, 3), M.init_model(SMALL, 3)
    assert all(np.array_equal(a[k].data, b[k].data) for k in a.tensors)


def test_seed_changes_params():
    a, b = M.init_model(SMALL, 3), M.init_model(SMALL, 4)
    assert any(not np.array_equal(a[k].data, b[k].data) for k in a.tensors)


def test_default_param_count():
    params = M.init_model(M.ModelConfig(), 0)
    assert M.count_params(params) == expected_count(M.ModelConfig()) == 100739


def test_param_count_grows_with_depth_and_width():
    counts = [M.count_params(M.init_model(M.ModelConfig(num_layers=L), 0)) for L in (2, 3, 4)]
    assert counts[0] < counts[1] < counts[2]
    base = M.count_params(M.init_model(M.ModelConfig(model_dim=32), 0))
    wide = M.count_params(M.init_model(M.ModelConfig(model_dim=64), 0))
    assert wide > 2 * base


def test_invalid_config():
    with pytest.raises(ValueError):
        M.ModelConfig(model_dim=0)
    with pytest.raises(ValueError):
        M.ModelConfig(num_classes=4)


def test_single_frame_sequence_equals_step():
    params = M.init_model(SMALL, 0)
    x = np.random.default_rng(0).normal(size=(1, 6)).astype(np.float32)
    seq = M.forward_sequence(params, x).data
    step, _ = steps(params, x)
    np.testing.assert_allclose(seq, step, atol=1e-6)


def test_sequence_matches_chained_steps_T200():
    params = M.init_model(M.ModelConfig(), 1)
    x = np.random.default_rng(1).normal(size=(200, 32)).astype(np.float32)
    seq = M.forward_sequence(params, x).data
    step, state = steps(params, x)
    assert np.abs(seq - step).max() < 1e-4
    assert state.frames_seen == 200


@pytest.mark.parametrize("seed", range(5))
def test_causality_by_perturbation(seed):
    rng = np.random.default_rng(seed)
    params = M.init_model(SMALL, seed)
    x = rng.normal(size=(15, 6)).astype(np.float32)
    t = int(rng.integers(14))
    x2 = x.copy()
    x2[t + 1:] = rng.normal(size=x2[t + 1:].shape)
    a = M.forward_sequence(params, x).data
    b = M.forward_sequence(params, x2).data
    np.testing.assert_array_equal(a[: t + 1], b[: t + 1])
    assert not np.allclose(a[t + 1:], b[t + 1:])


def test_zero_input_zero_head_gives_bias():
    params = M.init_model(SMALL, 0)
    params["head.weight"].data[:] = 0
    params["head.bias"].data[:] = [0.5, -1.0, 2.0]
    logits, _ = M.forward_step(params, M.reset_state(SMALL), np.zeros(6))
    np.testing.assert_allclose(logits, [0.5, -1.0, 2.0], atol=1e-7)


def test_state_bounded_over_10000_steps():
    params = M.init_model(SMALL, 2)
    rng = np.random.default_rng(2)
    state = M.reset_state(SMALL)
    norms = []
    for t in range(10_000):
        _, state = M.forward_step(params, state, rng.normal(size=6))
        if t % 500 == 0:
            norms.append(max(np.abs(h).max() for h in state.ssm))
    assert np.isfinite(norms).all()
    assert max(norms) < 100 * (max(norms[:2]) + 1)


def test_reset_state():
    s = M.reset_state(SMALL)
    assert s.frames_seen == 0
    assert all(not a.any() for a in s.ssm + s.conv)
    fresh = M.reset_state(SMALL)
    assert s.nbytes() == fresh.nbytes()
    assert all(np.array_equal(a, b) for a, b in zip(s.ssm + s.conv, fresh.ssm + fresh.conv))


def test_reset_discards_history():
    params = M.init_model(SMALL, 0)
    rng = np.random.default_rng(5)
    history, probe = rng.normal(size=(30, 6)), rng.normal(size=(10, 6))
    _, used = steps(params, history)
    after_reset, _ = steps(params, probe, M.reset_state(SMALL))
    twin, _ = steps(params, probe)
    np.testing.assert_array_equal(after_reset, twin)
    carried, _ = steps(params, probe, used)
    assert not np.allclose(carried, twin)


def test_carried_state_changes_chunk_outputs():
    params = M.init_model(M.ModelConfig(), 0)
    x = np.random.default_rng(6).normal(size=(40, 32)).astype(np.float32)
    whole = M.forward_sequence(params, x).data
    first = M.forward_sequence(params, x[:20]).data
    second_reset = M.forward_sequence(params, x[20:]).data
    _, state = M.forward(params, x[:20])
    second_carried, _ = M.forward(params, x[20:], state)
    np.testing.assert_allclose(second_carried.data, whole[20:], atol=1e-5)
    np.testing.assert_allclose(first, whole[:20], atol=1e-6)
    assert np.abs(second_reset - whole[20:]).max() > 1e-3


def test_state_config_mismatch():
    params = M.init_model(SMALL, 0)
    other = M.reset_state(M.ModelConfig())
    with pytest.raises(nk.ContractError):
        M.forward_step(params, other, np.zeros(6))


def test_feature_dim_mismatch():
    params = M.init_model(SMALL, 0)
    with pytest.raises(nk.DimensionError):
        M.forward_sequence(params, np.zeros((4, 7)))
    with pytest.raises(nk.DimensionError):
        M.forward_step(params, M.reset_state(SMALL), np.zeros(5))


def test_initial_transition_factors_in_range():
    params = M.init_model(M.ModelConfig(), 0)
    for i in range(3):
        delta = np.logaddexp(0, params[f"layers.{i}.dt_proj.bias"].data.astype(np.float64))
        A = -np.exp(params[f"layers.{i}.A_log"].data.astype(np.float64))
        f = np.exp(delta[:, None] * A)
        assert f.min() >= 0.9 and f.max() <= 0.999


def test_transition_factors_inside_unit_interval():
    params = M.init_model(SMALL, 0)
    x = np.random.default_rng(0).normal(size=(50, 6)) * 5
    for f in M.transition_factors(params, x):
        assert (f > 0).all() and (f < 1).all()


def test_batched_forward_matches_per_sequence():
    params = M.init_model(SMALL, 0)
    x = np.random.default_rng(8).normal(size=(3, 9, 6)).astype(np.float32)
    batched, _ = M.forward(params, x)
    for b in range(3):
        np.testing.assert_array_equal(batched.data[b], M.forward_sequence(params, x[b]).data)


def test_tensor_input_keeps_graph():
    params = M.init_model(SMALL, 0)
    x = Tensor(np.random.default_rng(0).normal(size=(5, 6)), requires_grad=True)
    with nk.Tape() as tape:
        loss = nk.total(M.forward_sequence(params, x))
    tape.backward(loss)
    assert x.grad is not None and params["embed.weight"].grad is not None
