import numpy as np
import pytest
import torch

from app.core.errors import ConfigError, FormatError, ShapeError, TrainingError
from app.nn.checkpoint import load_checkpoint, save_checkpoint
from app.nn.gradcheck import gradcheck, gradcheck_points, gradcheck_report
from app.nn.layers import (
    AttentionGateParams, ConvBlock, attention_gate, batchnorm2d, concat, conv2d, maxpool2x2, relu,
    sigmoid, upsample2x,
)
from app.nn.losses import get_loss, mae_loss, mse_loss
from app.nn.optim import make_optimizer, optimize_step, plateau_scheduler

TOL = 1e-6


def _rand(*shape):
    return torch.randn(*shape, dtype=torch.float64)


def _draw(gen, *shape):
    return torch.randn(*shape, generator=gen, dtype=torch.float64)


def _away_from_zero(gen, *shape, margin=0.1):
    z = _draw(gen, *shape)
    return torch.sign(z) * (margin + z.abs())


def _distinct(gen, *shape, spacing=0.1):
    """Values at least 0.08 apart in random order, so max-pool windows have no near ties."""
    n = int(np.prod(shape))
    perm = torch.randperm(n, generator=gen).to(torch.float64)
    jitter = 0.2 * spacing * torch.rand(n, generator=gen, dtype=torch.float64)
    return ((perm - n / 2) * spacing + jitter).reshape(shape)


def _gate_params(c_x=3, c_g=4, c_int=2):
    return AttentionGateParams(W_x=_rand(c_int, c_x, 1, 1), W_g=_rand(c_int, c_g, 1, 1), b_g=_rand(c_int),
                               psi=_rand(1, c_int, 1, 1), b_psi=_rand(1))


def test_identity_and_box_kernels():
    x = _rand(1, 1, 6, 6)
    center = torch.zeros(1, 1, 3, 3, dtype=torch.float64)
    center[0, 0, 1, 1] = 1.0
    torch.testing.assert_close(conv2d(x, center), x)
    const = torch.full((1, 1, 5, 5), 2.0, dtype=torch.float64)
    assert conv2d(const, torch.ones(1, 1, 3, 3, dtype=torch.float64))[0, 0, 2, 2].item() == pytest.approx(18.0)


@pytest.mark.parametrize("k", [1, 3])
def test_conv_gradcheck(k):
    def point(gen):
        x, w, b = _draw(gen, 2, 3, 5, 5), _draw(gen, 4, 3, k, k), _draw(gen, 4)
        return (lambda: conv2d(x, w, b)), [x, w, b]

    assert gradcheck_points(point, h=1e-3) < TOL


def test_conv_shape_errors():
    with pytest.raises(ShapeError):
        conv2d(_rand(1, 2, 4, 4), _rand(3, 3, 3, 3))
    with pytest.raises(ShapeError):
        conv2d(_rand(1, 3, 4, 4), _rand(3, 3, 5, 5))
    with pytest.raises(ShapeError):
        conv2d(_rand(3, 4, 4), _rand(3, 3, 3, 3))


def test_batchnorm_normalizes_in_training_mode():
    x = 3.0 + 2.0 * _rand(4, 3, 8, 8)
    y = batchnorm2d(x, torch.ones(3, dtype=torch.float64), torch.zeros(3, dtype=torch.float64),
                    torch.zeros(3, dtype=torch.float64), torch.ones(3, dtype=torch.float64), training=True)
    assert y.mean(dim=(0, 2, 3)).abs().max().item() < 1e-6
    assert (y.var(dim=(0, 2, 3), unbiased=False) - 1.0).abs().max().item() < 1e-4


def test_batchnorm_constant_batch_and_eval_identity():
    ones, zeros = torch.ones(2, dtype=torch.float64), torch.zeros(2, dtype=torch.float64)
    const = torch.full((3, 2, 4, 4), 7.0, dtype=torch.float64)
    y = batchnorm2d(const, ones, zeros, zeros.clone(), ones.clone(), training=True)
    assert y.abs().max().item() == 0.0
    x = _rand(2, 2, 4, 4)
    y = batchnorm2d(x, 2.0 * ones, zeros + 0.5, zeros.clone(), ones.clone(), training=False)
    torch.testing.assert_close(y, 2.0 * x / np.sqrt(1.0 + 1e-5) + 0.5)
    with pytest.raises(ShapeError):
        batchnorm2d(torch.zeros(2, 2, 0, 4, dtype=torch.float64), ones, zeros, zeros, ones, training=True)


def test_batchnorm_gradcheck():
    mean, var = torch.zeros(2, dtype=torch.float64), torch.ones(2, dtype=torch.float64)

    def point(gen):
        x, gamma, beta = _draw(gen, 3, 2, 4, 4), _away_from_zero(gen, 2, margin=0.5), _draw(gen, 2)
        return (lambda: batchnorm2d(x, gamma, beta, mean.clone(), var.clone(), training=True)), [x, gamma, beta]

    assert gradcheck_points(point, h=1e-3, stencil=4) < TOL


def test_pointwise_values():
    assert relu(torch.tensor([-1.0, 2.0])).tolist() == [0.0, 2.0]
    assert sigmoid(torch.tensor(0.0)).item() == 0.5


@pytest.mark.parametrize("op, draw", [(relu, _away_from_zero), (sigmoid, _draw), (maxpool2x2, _distinct),
                                      (upsample2x, _draw)])
def test_pointwise_and_resample_gradchecks(op, draw):
    def point(gen):
        x = draw(gen, 1, 2, 4, 4)
        return (lambda: op(x)), [x]

    assert gradcheck_points(point, h=1e-3, stencil=4) < TOL


def test_concat_gradcheck_and_shapes():
    a, b = _rand(1, 2, 4, 4), _rand(1, 3, 4, 4)
    assert concat(a, b).shape == (1, 5, 4, 4)

    def point(gen):
        a, b = _draw(gen, 1, 2, 4, 4), _draw(gen, 1, 3, 4, 4)
        return (lambda: concat(a, b)), [a, b]

    assert gradcheck_points(point, h=1e-3) < TOL
    with pytest.raises(ShapeError):
        concat(a, _rand(1, 3, 2, 2))


def test_pool_inverts_nearest_upsample():
    x = _rand(2, 3, 5, 7)
    assert torch.equal(maxpool2x2(upsample2x(x)), x)
    with pytest.raises(ShapeError):
        maxpool2x2(_rand(1, 1, 5, 4))


def test_gate_with_zero_psi_halves_the_input():
    x, g = _rand(1, 3, 4, 4), _rand(1, 4, 2, 2)
    p = _gate_params()
    p.psi = torch.zeros_like(p.psi)
    p.b_psi = torch.zeros_like(p.b_psi)
    out, alpha = attention_gate(x, g, p)
    assert torch.all(alpha == 0.5)
    torch.testing.assert_close(out, 0.5 * x)


def test_saturated_gate_passes_the_input():
    x, g = _rand(1, 3, 4, 4), _rand(1, 4, 4, 4)
    p = _gate_params()
    p.psi = torch.zeros_like(p.psi)
    p.b_psi = torch.full_like(p.b_psi, 20.0)
    out, alpha = attention_gate(x, g, p)
    assert (out - x).abs().max().item() < 1e-8
    assert torch.all((alpha > 0) & (alpha < 1))


def test_gate_gradcheck():
    def point(gen):
        # redraw until every gate pre-activation is clear of the ReLU kink
        while True:
            x, g = _draw(gen, 1, 3, 4, 4), _draw(gen, 1, 4, 2, 2)
            p = AttentionGateParams(W_x=_draw(gen, 2, 3, 1, 1), W_g=_draw(gen, 2, 4, 1, 1), b_g=_draw(gen, 2),
                                    psi=_draw(gen, 1, 2, 1, 1), b_psi=_draw(gen, 1))
            pre = conv2d(x, p.W_x) + conv2d(upsample2x(g), p.W_g, p.b_g)
            if pre.abs().min().item() > 0.05:
                break
        tensors = [x, g, p.W_x, p.W_g, p.b_g, p.psi, p.b_psi]
        return (lambda: attention_gate(x, g, p)[0]), tensors

    assert gradcheck_points(point, h=1e-3, stencil=4) < TOL


def test_gate_channel_mismatch():
    with pytest.raises(ShapeError):
        attention_gate(_rand(1, 2, 4, 4), _rand(1, 4, 4, 4), _gate_params())


def test_losses():
    pred = _rand(2, 1, 3, 3)
    assert mse_loss(pred, pred).item() == 0.0
    assert mse_loss(pred + 0.5, pred).item() == pytest.approx(0.25)
    assert mae_loss(pred - 0.5, pred).item() == pytest.approx(0.5)
    target = _rand(2, 1, 3, 3)
    with pytest.raises(ShapeError):
        mse_loss(pred, target[:1])
    with pytest.raises(ConfigError):
        get_loss("huber")


@pytest.mark.parametrize("loss", [mse_loss, mae_loss])
def test_loss_gradchecks(loss):
    def point(gen):
        target = _draw(gen, 2, 1, 3, 3)
        pred = target + _away_from_zero(gen, 2, 1, 3, 3)
        return (lambda: loss(pred, target)), [pred]

    assert gradcheck_points(point, h=1e-3) < TOL


def test_gradcheck_catches_a_wrong_backward():
    class FlippedSquare(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return x * x

        @staticmethod
        def backward(ctx, grad):
            (x,) = ctx.saved_tensors
            return -2.0 * x * grad

    x = _rand(5)
    assert gradcheck(lambda: FlippedSquare.apply(x), [x]) == pytest.approx(2.0, rel=1e-6)


def test_gradcheck_is_tight_on_linear_maps():
    x, w = _rand(3), _rand(4, 3)
    assert gradcheck(lambda: w @ x, [x, w], h=1e-2) < 1e-9


def test_gradcheck_sees_an_error_in_a_small_component():
    class MostlySquare(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return x * x

        @staticmethod
        def backward(ctx, grad):
            (x,) = ctx.saved_tensors
            wrong = 2.0 * x * grad
            wrong[1] = wrong[1] * 1.01
            return wrong

    x = torch.tensor([100.0, 1e-3], dtype=torch.float64)
    report = gradcheck_report(lambda: MostlySquare.apply(x), [x], h=1e-2)
    assert report.elementwise == pytest.approx(0.01 / 1.01, rel=1e-3)
    assert report.normwise < 1e-6


def test_gradcheck_rejects_unknown_stencils():
    x = _rand(2)
    with pytest.raises(ConfigError):
        gradcheck(lambda: x * x, [x], stencil=3)


def test_zero_gradient_leaves_parameters():
    w = torch.nn.Parameter(torch.ones(3))
    opt = make_optimizer([w], lr=1e-3, weight_decay=0.0)
    w.grad = torch.zeros(3)
    optimize_step(opt)
    assert torch.equal(w.detach(), torch.ones(3))


def test_first_adam_step_moves_by_lr():
    w = torch.nn.Parameter(torch.tensor([1.0], dtype=torch.float64))
    opt = make_optimizer([w], lr=1e-3, weight_decay=0.0)
    (w ** 2).sum().backward()
    optimize_step(opt)
    delta = w.item() - 1.0
    assert delta < 0
    assert abs(delta) == pytest.approx(1e-3, rel=1e-4)


def test_non_finite_gradient_aborts():
    w = torch.nn.Parameter(torch.ones(2))
    opt = make_optimizer([w])
    w.grad = torch.tensor([1.0, float("nan")])
    with pytest.raises(TrainingError):
        optimize_step(opt)


def test_plateau_decay_after_patience():
    assert plateau_scheduler([1.0, 1.0, 1.0]) == pytest.approx(1e-4)
    assert plateau_scheduler([1.0, 1.0, 1.0, 1.0]) == pytest.approx(0.3e-4)
    assert plateau_scheduler([1.0, 0.9, 0.8, 0.7]) == pytest.approx(1e-4)
    assert plateau_scheduler([1.0] * 60) == pytest.approx(1e-7)


def test_checkpoint_round_trip(tmp_path):
    block = ConvBlock(2, 3)
    with torch.no_grad():
        block.bn1.running_mean.fill_(0.25)
    path = tmp_path / "block.ckpt"
    save_checkpoint(path, block)
    restored = load_checkpoint(path, ConvBlock(2, 3))
    for name, value in block.state_dict().items():
        torch.testing.assert_close(restored.state_dict()[name], value, check_dtype=False)


def test_checkpoint_mismatch_is_format_error(tmp_path):
    path = tmp_path / "block.ckpt"
    save_checkpoint(path, ConvBlock(2, 3))
    with pytest.raises(FormatError):
        load_checkpoint(path, ConvBlock(2, 4))
    with pytest.raises(FormatError):
        load_checkpoint(path, torch.nn.Linear(2, 2))
