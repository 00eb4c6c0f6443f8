import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from otrdet import losses as L
from otrdet import numkernel as nk
from otrdet.numkernel import Tensor
from otrdet.records import GroundTruthAction


def window_sum_oracle(p, centres, w):
    half = w // 2
    total = 0.0
    for f in centres:
        for i in range(f - half, f + half + 1):
            if 0 <= i < len(p):
                total += p[i]
    return total


def random_probs(rng, T, C=3):
    x = rng.normal(size=(T, C)) * 2
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------- focal


def test_focal_gamma0_is_cross_entropy():
    probs = Tensor([[0.5, 0.25, 0.25]])
    loss = L.focal_loss(probs, np.array([0]), gamma=0.0, alpha=(1, 1, 1))
    assert loss.item() == pytest.approx(math.log(2), abs=1e-6)


def test_focal_perfect_prediction_is_zero():
    probs = Tensor(np.eye(3)[[0, 2, 1, 2]])
    assert L.focal_loss(probs, np.array([0, 2, 1, 2])).item() == 0.0


def test_focal_scalar_value():
    probs = Tensor([[0.9, 0.05, 0.05]], dtype=np.float64)
    loss = L.focal_loss(probs, np.array([0]), gamma=2.0, alpha=(1, 1, 1))
    assert loss.item() == pytest.approx(0.1 ** 2 * -math.log(0.9), rel=1e-9)
    assert loss.item() == pytest.approx(1.0536e-3, abs=1e-7)


def test_focal_negative_gamma_rejected():
    with pytest.raises(ValueError):
        L.focal_loss(Tensor([[1.0, 0, 0]]), np.array([0]), gamma=-1)
    with pytest.raises(ValueError):
        L.LossConfig(gamma=-0.5)


def test_focal_alpha_weights_by_true_class():
    probs = Tensor([[0.2, 0.3, 0.5]], dtype=np.float64)
    fg = L.focal_loss(probs, np.array([1]), 0.0, (1, 2, 0.25)).item()
    bg = L.focal_loss(probs, np.array([2]), 0.0, (1, 2, 0.25)).item()
    assert fg == pytest.approx(-2 * math.log(0.3))
    assert bg == pytest.approx(-0.25 * math.log(0.5))


@settings(max_examples=200, deadline=None)
@given(st.floats(0.001, 0.999), st.floats(0.0, 0.99), st.floats(0, 5))
def test_focal_non_increasing_in_p_true(p, frac, gamma):
    q = p + frac * (1 - p)
    lo = L.focal_loss(Tensor([[p, 1 - p, 0.0]], dtype=np.float64), np.array([0]), gamma, (1, 1, 1)).item()
    hi = L.focal_loss(Tensor([[q, 1 - q, 0.0]], dtype=np.float64), np.array([0]), gamma, (1, 1, 1)).item()
    assert hi <= lo + 1e-12


# ---------------------------------------------------------------- entropy


def test_entropy_one_hot_is_zero():
    assert L.entropy_reg(Tensor(np.eye(3))).item() == 0.0


def test_entropy_uniform():
    assert L.entropy_reg(Tensor([[1 / 3] * 3], dtype=np.float64)).item() == pytest.approx(math.log(3))


def test_entropy_two_rows():
    v = L.entropy_reg(Tensor([[0.5, 0.5, 0.0], [1.0, 0.0, 0.0]], dtype=np.float64)).item()
    assert v == pytest.approx(math.log(2))


@pytest.mark.parametrize("seed", range(20))
def test_entropy_decreases_along_line_to_argmax_vertex(seed):
    rng = np.random.default_rng(seed)
    row = random_probs(rng, 1)[0]
    target = np.eye(3)[np.argmax(row)]
    values = [L.entropy_reg(Tensor([(1 - s) * row + s * target], dtype=np.float64)).item()
              for s in np.linspace(0, 1, 21)]
    assert all(b <= a + 1e-12 for a, b in zip(values, values[1:]))


def test_entropy_can_rise_towards_a_minority_vertex():
    # the straight-line property needs the argmax vertex: moving off a peaked row first flattens it
    row = np.array([0.9, 0.05, 0.05])
    start = L.entropy_reg(Tensor([row], dtype=np.float64)).item()
    mid = L.entropy_reg(Tensor([0.5 * row + 0.5 * np.array([0, 1, 0])], dtype=np.float64)).item()
    assert mid > start


@pytest.mark.parametrize("seed", range(10))
def test_entropy_decreases_as_distribution_sharpens(seed):
    logits = np.random.default_rng(seed).normal(size=3)
    values = []
    for beta in np.linspace(0.0, 30.0, 31):
        e = np.exp(beta * (logits - logits.max()))
        values.append(L.entropy_reg(Tensor([e / e.sum()], dtype=np.float64)).item())
    assert all(b <= a + 1e-12 for a, b in zip(values, values[1:]))


# ---------------------------------------------------------------- windows


def test_sliding_window_degenerate_width():
    p = np.array([0.1, 0.4, 0.2])
    assert L.sliding_window_reg(Tensor(p, dtype=np.float64), 1).item() == pytest.approx(0.7)


def test_sliding_window_zero():
    assert L.sliding_window_reg(Tensor(np.zeros(6)), 4).item() == 0.0


def test_sliding_window_hand_example():
    assert L.sliding_window_reg(Tensor([0.5, 0.5, 0.5], dtype=np.float64), 3).item() == pytest.approx(3.5)


def test_fixed_window_examples():
    p = Tensor([0.2, 0.5, 0.1], dtype=np.float64)
    assert L.fixed_window_reg(p, [], 3).item() == 0.0
    assert L.fixed_window_reg(p, [1], 3).item() == pytest.approx(0.8)


def test_fixed_window_out_of_range():
    with pytest.raises(nk.ContractError):
        L.fixed_window_reg(Tensor([0.1, 0.2]), [2], 3)


@pytest.mark.parametrize("w", [1, 2, 3, 4, 7, 20])
def test_windows_match_direct_sums(w):
    rng = np.random.default_rng(w)
    for _ in range(20):
        T = int(rng.integers(1, 25))
        p = rng.random(T)
        g = sorted(rng.choice(T, size=int(rng.integers(0, T + 1)), replace=False).tolist())
        t = Tensor(p, dtype=np.float64)
        assert L.sliding_window_reg(t, w).item() == pytest.approx(window_sum_oracle(p, range(T), w))
        assert L.fixed_window_reg(t, g, w).item() == pytest.approx(window_sum_oracle(p, g, w))
        assert L.fixed_window_reg(t, list(range(T)), w).item() == pytest.approx(L.sliding_window_reg(t, w).item())


def test_fixed_window_bounded_by_sliding_1000_inputs():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        T = int(rng.integers(1, 40))
        w = int(rng.integers(1, 12))
        p = Tensor(rng.random(T) * rng.random(), dtype=np.float64)
        g = rng.choice(T, size=int(rng.integers(0, T + 1)), replace=False).tolist()
        assert L.fixed_window_reg(p, g, w).item() <= L.sliding_window_reg(p, w).item() + 1e-12


# ---------------------------------------------------------------- total


def _targets(T, frames):
    labels = np.full(T, 2)
    for f, c in frames:
        labels[f] = c
    return L.FrameTargets(labels, sorted(f for f, _ in frames))


def test_total_with_zero_lambda_is_focal():
    rng = np.random.default_rng(0)
    probs = Tensor(random_probs(rng, 10), dtype=np.float64)
    tg = _targets(10, [(3, 0), (7, 1)])
    for kind in L.RegKind:
        cfg = L.LossConfig(lam=0.0, reg_kind=kind)
        assert L.total_loss(probs, tg, cfg).item() == L.focal_loss(probs, tg.labels).item()


def test_default_config_matches_training_setup():
    cfg = L.LossConfig()
    assert cfg.reg_kind is L.RegKind.FIXED_WINDOW and cfg.lam == 0.01 and cfg.window_w == 4


def test_total_fixed_not_above_sliding():
    rng = np.random.default_rng(1)
    for _ in range(100):
        T = 20
        probs = Tensor(random_probs(rng, T), dtype=np.float64)
        frames = [(int(f), int(rng.integers(2))) for f in rng.choice(T, size=int(rng.integers(0, 4)), replace=False)]
        tg = _targets(T, frames)
        fw = L.total_loss(probs, tg, L.LossConfig(reg_kind="fixed_window", window_w=4)).item()
        sw = L.total_loss(probs, tg, L.LossConfig(reg_kind="sliding_window", window_w=4)).item()
        assert fw <= sw + 1e-12


def test_batch_total_averages_clips():
    rng = np.random.default_rng(2)
    p1, p2 = random_probs(rng, 8), random_probs(rng, 8)
    t1, t2 = _targets(8, [(2, 0)]), _targets(8, [(5, 1)])
    cfg = L.LossConfig(reg_kind="fixed_window", lam=0.5)
    single = [L.total_loss(Tensor(p, dtype=np.float64), t, cfg).item() for p, t in ((p1, t1), (p2, t2))]
    batch = L.total_loss(Tensor(np.stack([p1, p2]), dtype=np.float64), [t1, t2], cfg).item()
    assert batch == pytest.approx(np.mean(single))


@pytest.mark.parametrize("seed", range(10))
def test_all_losses_non_negative_and_finite(seed):
    rng = np.random.default_rng(seed)
    probs = Tensor(random_probs(rng, 12))
    probs.data[0] = [1.0, 0.0, 0.0]
    tg = _targets(12, [(0, 1), (6, 0)])
    values = [L.focal_loss(probs, tg.labels).item(), L.entropy_reg(probs).item(),
              L.sliding_window_reg(nk.sub(1.0, nk.gather_last(probs, np.full(12, 2))), 4).item(),
              L.fixed_window_reg(nk.sub(1.0, nk.gather_last(probs, np.full(12, 2))), tg.gt_frames, 4).item()]
    for kind in L.RegKind:
        values.append(L.total_loss(probs, tg, L.LossConfig(reg_kind=kind)).item())
    assert all(np.isfinite(v) and v >= 0 for v in values)


@pytest.mark.parametrize("kind", list(L.RegKind))
def test_loss_gradients_pass_grad_check(kind):
    rng = np.random.default_rng(0)
    logits = Tensor(rng.normal(size=(2, 10, 3)), requires_grad=True)
    targets = [_targets(10, [(4, 0)]), _targets(10, [(1, 1), (8, 0)])]
    cfg = L.LossConfig(reg_kind=kind, lam=0.3)
    report = nk.grad_check(lambda: L.total_loss(nk.softmax(logits), targets, cfg), {"logits": logits})
    assert report.passed, report.errors


def test_frame_targets_from_actions():
    acts = [GroundTruthAction("v", "take", 2.0), GroundTruthAction("v", "release", 2.625),
            GroundTruthAction("v", "take", 9.0)]
    tg = L.FrameTargets.from_actions(acts, 20, 4.0)
    assert tg.labels[8] == 0 and tg.labels[10] == 1  # 2.625 s * 4 = 10.5 -> earlier frame
    assert (tg.labels == 2).sum() == 18
    assert tg.gt_frames == [8, 10]
