import pytest
import torch

from transdiff.flow import (
    FlowSample,
    flow_loss,
    interpolate,
    recover_endpoints,
    velocity_target,
    velocity_to_score,
)


def test_interpolate_endpoints_bitwise():
    x, eps = torch.randn(5, 3), torch.randn(5, 3)
    assert torch.equal(interpolate(x, eps, 0.0), x)
    assert torch.equal(interpolate(x, eps, 1.0), eps)
    assert torch.equal(interpolate(torch.tensor([2.0]), torch.tensor([0.0]), 0.5), torch.tensor([1.0]))


def test_interpolate_per_batch_time():
    x, eps = torch.zeros(2, 4), torch.ones(2, 4)
    out = interpolate(x, eps, torch.tensor([0.25, 0.75]))
    assert torch.equal(out[0], torch.full((4,), 0.25))
    assert torch.equal(out[1], torch.full((4,), 0.75))


@pytest.mark.parametrize("t", [-0.1, 1.5])
def test_interpolate_rejects_time(t):
    with pytest.raises(ValueError):
        interpolate(torch.zeros(1), torch.zeros(1), t)


def test_velocity_target_examples():
    assert torch.equal(velocity_target(torch.tensor([1.0]), torch.tensor([3.0])), torch.tensor([2.0]))
    x = torch.randn(4)
    assert torch.equal(velocity_target(x, x), torch.zeros(4))


def test_velocity_target_is_path_derivative(f64):
    torch.manual_seed(0)
    x, eps = torch.randn(6, 4), torch.randn(6, 4)
    h = 1e-5
    for t in (0.2, 0.5, 0.9):
        fd = (interpolate(x, eps, t + h) - interpolate(x, eps, t - h)) / (2 * h)
        assert float((fd - velocity_target(x, eps)).abs().max()) <= 1e-6


def test_flow_loss_examples():
    x, eps = torch.randn(3, 2), torch.randn(3, 2)
    assert float(flow_loss(eps - x, x, eps)) == 0.0
    assert float(flow_loss(eps - x + 1, x, eps)) == pytest.approx(1.0, abs=1e-6)


def test_flow_loss_loop_oracle(f64):
    torch.manual_seed(3)
    v, x, eps = torch.randn(4, 5, 3), torch.randn(4, 5, 3), torch.randn(4, 5, 3)
    total, count = 0.0, 0
    for i in range(4):
        for j in range(5):
            for k in range(3):
                total += (float(eps[i, j, k]) - float(x[i, j, k]) - float(v[i, j, k])) ** 2
                count += 1
    assert abs(float(flow_loss(v, x, eps)) - total / count) <= 1e-7


def test_score_examples(f64):
    z = torch.randn(8)
    # at t = 1, zero velocity-correction: score of N(0, I)
    assert torch.allclose(velocity_to_score(torch.randn(8), z, 1.0), -z)
    x, eps = torch.randn(8), torch.randn(8)
    x_t = interpolate(x, eps, 0.5)
    assert torch.allclose(velocity_to_score(eps - x, x_t, 0.5), -eps / 0.5)
    s = velocity_to_score(torch.ones(3), torch.ones(3), 0.0, t_floor=1e-3)
    assert bool(torch.isfinite(s).all())
    assert torch.allclose(s, torch.full((3,), -2e3))


def test_score_is_linear(f64):
    v1, v2, x1, x2 = (torch.randn(5) for _ in range(4))
    a, b = 0.7, -1.3
    lhs = velocity_to_score(a * v1 + b * v2, a * x1 + b * x2, 0.3)
    rhs = a * velocity_to_score(v1, x1, 0.3) + b * velocity_to_score(v2, x2, 0.3)
    assert torch.allclose(lhs, rhs, atol=1e-12)


def test_recovered_endpoints_consistent():
    v, x_t = torch.randn(10), torch.randn(10)
    for t in (0.0, 0.4, 1.0):
        x_hat, eps_hat = recover_endpoints(v, x_t, t)
        assert torch.allclose(x_hat + t * v, x_t, atol=1e-6)
        assert torch.allclose(eps_hat - (1 - t) * v, x_t, atol=1e-6)


def test_flow_sample():
    s = FlowSample.draw(torch.zeros(2), torch.ones(2), 0.5)
    assert torch.equal(s.x_t, torch.full((2,), 0.5))
    assert torch.equal(s.target, torch.ones(2))
