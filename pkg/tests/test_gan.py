import math

import pytest
import torch
from torch import nn

from clog.backbones import build_backbone
from clog.backbones.base import make_optimizers, optimization_step
from clog.backbones.gan import (
    GanBackbone,
    discriminator_loss,
    gan_sample,
    gan_train_step,
    generator_loss,
    r1_penalty,
)
from clog.errors import DivergenceError, InvalidInputError


class ConstD(nn.Module):
    """Logit independent of x: D = sigmoid(b)."""

    def __init__(self, b=0.0):
        super().__init__()
        self.b = nn.Parameter(torch.tensor(float(b), dtype=torch.float64))

    def forward(self, x, labels):
        return self.b.expand(len(x))


class LinearD(nn.Module):
    def __init__(self):
        super().__init__()
        self.w = nn.Parameter(torch.tensor([0.5, -0.3], dtype=torch.float64))
        self.b = nn.Parameter(torch.tensor(0.1, dtype=torch.float64))

    def forward(self, x, labels):
        return x.reshape(len(x), -1) @ self.w + self.b


class TinyG(nn.Module):
    """G(z, c) = A z + m[c]; 2x2 + 3x2 = 10 parameters, 2-pixel images."""

    def __init__(self):
        super().__init__()
        self.A = nn.Parameter(torch.tensor([[0.4, -0.2], [0.1, 0.3]], dtype=torch.float64))
        self.m = nn.Parameter(torch.tensor([[0.0, 0.1], [-0.2, 0.3], [0.5, -0.5]], dtype=torch.float64))

    def forward(self, z, labels):
        return (z @ self.A.T + self.m[labels]).view(len(z), 1, 1, 2)


def toy(d=None, r1_gamma=0.0, saturating=False):
    return GanBackbone(TinyG(), d or ConstD(), latent_dim=2, r1_gamma=r1_gamma, saturating=saturating)


def test_fixed_point_losses():
    bb = toy()
    real = torch.randn(16, 1, 1, 2, dtype=torch.float64)
    labels = torch.zeros(16, dtype=torch.int64)
    d = discriminator_loss(bb, real, labels, torch.Generator().manual_seed(0))
    g = generator_loss(bb, torch.randn(16, 2, dtype=torch.float64), labels)
    assert abs(d.item() - 2 * math.log(2)) <= 1e-6
    assert abs(g.item() - math.log(2)) <= 1e-6


def test_perfect_discriminator_limits():
    class Perfect(nn.Module):
        def forward(self, x, labels):
            return torch.where(x.reshape(len(x), -1)[:, 0] > 5, 40.0, -40.0).double()

    bb = toy(Perfect())
    real = torch.full((4, 1, 1, 2), 10.0, dtype=torch.float64)
    assert discriminator_loss(bb, real, torch.zeros(4, dtype=torch.int64)).item() < 1e-12
    bb_fooled = toy(ConstD(40.0))
    assert generator_loss(bb_fooled, torch.randn(4, 2, dtype=torch.float64), torch.zeros(4, dtype=torch.int64)).item() < 1e-12


def test_r1_zero_for_input_constant_discriminator():
    bb = toy(r1_gamma=1.0)
    real = torch.randn(8, 1, 1, 2, dtype=torch.float64)
    labels = torch.zeros(8, dtype=torch.int64)
    assert r1_penalty(bb, real, labels).item() == 0.0
    d = discriminator_loss(bb, real, labels, torch.Generator())
    assert d.item() == pytest.approx(2 * math.log(2), abs=1e-12)


def test_r1_of_linear_discriminator_is_weight_norm():
    bb = toy(LinearD(), r1_gamma=2.0)
    real = torch.randn(8, 1, 1, 2, dtype=torch.float64)
    assert r1_penalty(bb, real, torch.zeros(8, dtype=torch.int64)).item() == pytest.approx(0.25 + 0.09)


def test_saturating_flag():
    bb = toy(saturating=True)
    g = generator_loss(bb, torch.randn(4, 2, dtype=torch.float64), torch.zeros(4, dtype=torch.int64))
    # literal objective E log(1 - D) at D = 0.5
    assert g.item() == pytest.approx(-math.log(2))


def test_generator_gradient_matches_finite_differences():
    bb = toy(LinearD())
    z = torch.randn(6, 2, dtype=torch.float64, generator=torch.Generator().manual_seed(2))
    labels = torch.tensor([0, 1, 2, 0, 1, 2])
    params = list(bb.generator.parameters())
    assert sum(p.numel() for p in params) == 10
    grads = torch.autograd.grad(generator_loss(bb, z, labels), params)
    h = 1e-6
    for p, g in zip(params, grads):
        flat, gflat = p.data.view(-1), g.view(-1)
        for k in range(flat.numel()):
            old = flat[k].item()
            flat[k] = old + h
            up = generator_loss(bb, z, labels).item()
            flat[k] = old - h
            down = generator_loss(bb, z, labels).item()
            flat[k] = old
            numeric = (up - down) / (2 * h)
            assert abs(numeric - gflat[k].item()) <= 1e-3 * max(abs(numeric), 1e-8)


def test_discriminator_gradient_matches_finite_differences():
    bb = toy(LinearD(), r1_gamma=0.5)
    real = torch.randn(6, 1, 1, 2, dtype=torch.float64)
    labels = torch.zeros(6, dtype=torch.int64)

    def loss():
        return discriminator_loss(bb, real, labels, torch.Generator().manual_seed(5))

    params = list(bb.discriminator.parameters())
    grads = torch.autograd.grad(loss(), params)
    h = 1e-6
    for p, g in zip(params, grads):
        flat, gflat = p.data.view(-1), g.view(-1)
        for k in range(flat.numel()):
            old = flat[k].item()
            flat[k] = old + h
            up = loss().item()
            flat[k] = old - h
            down = loss().item()
            flat[k] = old
            numeric = (up - down) / (2 * h)
            assert abs(numeric - gflat[k].item()) <= 1e-3 * max(abs(numeric), 1e-8)


def test_frozen_discriminator_generator_descent():
    torch.manual_seed(0)

    class OnePixelG(nn.Module):
        def __init__(self):
            super().__init__()
            self.a = nn.Parameter(torch.tensor([-1.0]))

        def forward(self, z, labels):
            return (self.a + 0 * z[:, :1]).view(-1, 1, 1, 1)

    class FixedD(nn.Module):
        def forward(self, x, labels):
            return 2.0 * x.view(len(x))

    bb = GanBackbone(OnePixelG(), FixedD(), latent_dim=1)
    opt = torch.optim.SGD(bb.generator.parameters(), lr=0.05)
    losses = []
    z = torch.zeros(4, 1)
    labels = torch.zeros(4, dtype=torch.int64)
    for _ in range(100):
        opt.zero_grad()
        loss = generator_loss(bb, z, labels)
        loss.backward()
        opt.step()
        losses.append(loss.item())
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


def test_alternating_updates_touch_only_their_network(tiny_gan):
    x = torch.rand(8, 1, 8, 8) * 2 - 1
    y = torch.arange(8) % 4
    opts = make_optimizers(tiny_gan, 1e-2)
    g_before = [p.clone() for p in tiny_gan.generator.parameters()]
    d_before = [p.clone() for p in tiny_gan.discriminator.parameters()]
    # d phase only
    d_opts = {"d": opts["d"], "g": torch.optim.SGD(tiny_gan.generator.parameters(), lr=0.0)}
    optimization_step(tiny_gan, x, y, d_opts, torch.Generator())
    assert all(torch.equal(a, b) for a, b in zip(g_before, tiny_gan.generator.parameters()))
    assert any(not torch.equal(a, b) for a, b in zip(d_before, tiny_gan.discriminator.parameters()))
    d_mid = [p.clone() for p in tiny_gan.discriminator.parameters()]
    g_opts = {"d": torch.optim.SGD(tiny_gan.discriminator.parameters(), lr=0.0), "g": opts["g"]}
    optimization_step(tiny_gan, x, y, g_opts, torch.Generator())
    assert all(torch.equal(a, b) for a, b in zip(d_mid, tiny_gan.discriminator.parameters()))


def test_zero_learning_rate_changes_nothing(tiny_gan):
    before = tiny_gan.flat_parameters().clone()
    x = torch.rand(8, 1, 8, 8) * 2 - 1
    gan_train_step(tiny_gan, x, torch.arange(8) % 4, make_optimizers(tiny_gan, 0.0), torch.Generator())
    assert torch.equal(before, tiny_gan.flat_parameters())


def test_train_step_is_deterministic(gan_spec):
    x = torch.rand(8, 1, 8, 8) * 2 - 1
    y = torch.arange(8) % 4
    runs = []
    for _ in range(2):
        bb = build_backbone(gan_spec, 3)
        opts = make_optimizers(bb, 2e-3)
        g = torch.Generator().manual_seed(1)
        runs.append([gan_train_step(bb, x, y, opts, g, step=i) for i in range(3)])
    assert runs[0] == runs[1]
    assert bb.adam_betas == (0.0, 0.99)


def test_divergence_reports_step(tiny_gan):
    x = torch.full((4, 1, 8, 8), float("nan"))
    with pytest.raises(DivergenceError) as info:
        gan_train_step(tiny_gan, x, torch.zeros(4, dtype=torch.int64), make_optimizers(tiny_gan, 1e-3), torch.Generator(), step=17)
    assert info.value.step == 17


def test_sampling(tiny_gan):
    a = gan_sample(tiny_gan, 1, n=3, generator=torch.Generator().manual_seed(0))
    b = gan_sample(tiny_gan, 1, n=3, generator=torch.Generator().manual_seed(0))
    assert torch.equal(a, b) and a.shape == (3, 1, 8, 8)
    assert a.min() >= -1 and a.max() <= 1
    # an untrained class id still yields an image
    assert gan_sample(tiny_gan, 3, n=1).shape == (1, 1, 8, 8)
    with pytest.raises(InvalidInputError):
        gan_sample(tiny_gan, 0, n=0)


def test_discriminator_probability_in_open_interval(tiny_gan):
    p = tiny_gan.D(torch.rand(5, 1, 8, 8), torch.arange(5) % 4)
    assert bool(((p > 0) & (p < 1)).all())


def test_empty_batch_rejected():
    with pytest.raises(InvalidInputError):
        discriminator_loss(toy(), torch.zeros(0, 1, 1, 2, dtype=torch.float64), torch.zeros(0, dtype=torch.int64))
