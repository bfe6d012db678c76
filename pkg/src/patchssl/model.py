"""Networks and losses for the feature-matching semi-supervised GAN.

The discriminator emits K real-class logits; the "generated" class is implicit
with ``p(fake | x) = 1 / (1 + sum_k exp(l_k))``. The same discriminator with
only the supervised loss is the ConvNet baseline.

Tensors are NCHW throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

LATENT_DIM = 100


# ---------------------------------------------------------------------------
# weight-normalised layers: w = g * v / ||v||, norm taken per output unit


class _WeightNorm(nn.Module):
    norm_dims: tuple[int, ...] = ()
    out_axis: int = 0

    def _init_wn(self, v_shape: Sequence[int], n_out: int, bias: bool):
        self.v = nn.Parameter(torch.empty(*v_shape))
        self.g = nn.Parameter(torch.ones(n_out))
        self.b = nn.Parameter(torch.zeros(n_out)) if bias else None

    def weight(self) -> torch.Tensor:
        norm = self.v.pow(2).sum(dim=self.norm_dims, keepdim=True).sqrt()
        shape = [1] * self.v.dim()
        shape[self.out_axis] = -1
        return self.g.view(shape) * self.v / norm


class WNConv2d(_WeightNorm):
    norm_dims = (1, 2, 3)

    def __init__(self, cin: int, cout: int, kernel: int, stride: int = 1, padding: int = 0):
        super().__init__()
        self._init_wn((cout, cin, kernel, kernel), cout, bias=True)
        self.stride, self.padding = stride, padding

    def forward(self, x):
        return F.conv2d(x, self.weight(), self.b, self.stride, self.padding)


class WNConvTranspose2d(_WeightNorm):
    norm_dims = (0, 2, 3)
    out_axis = 1

    def __init__(self, cin: int, cout: int, kernel: int = 5, stride: int = 2):
        super().__init__()
        self._init_wn((cin, cout, kernel, kernel), cout, bias=True)
        self.stride = stride
        self.padding = kernel // 2
        self.output_padding = stride - 1

    def forward(self, x):
        return F.conv_transpose2d(x, self.weight(), self.b, self.stride, self.padding,
                                  self.output_padding)


class WNLinear(_WeightNorm):
    norm_dims = (1,)

    def __init__(self, fin: int, fout: int):
        super().__init__()
        self._init_wn((fout, fin), fout, bias=True)

    def forward(self, x):
        return F.linear(x, self.weight(), self.b)


def dropout(x: torch.Tensor, p: float, generator: torch.Generator | None) -> torch.Tensor:
    """Inverted dropout with an explicit generator (no global RNG)."""
    if p <= 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= p
    return x * keep / (1.0 - p)


def reduced_layer_geometry(size: int) -> tuple[int, int]:
    """(stride, padding) for the table's "pad=0 stride=2" layers at a given input size.

    Valid 3x3 conv with stride 2 when the map is at least 3 wide; a 1- or
    2-wide map cannot take a valid 3x3 kernel, so it gets padding 1, stride 1.
    """
    if size >= 3:
        return 2, 0
    return 1, 1


def conv_out(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


# ---------------------------------------------------------------------------
# networks


class Discriminator(nn.Module):
    """conv-large style classifier with weight norm and dropout.

    Three 3x3 convs at ``widths[0]`` (last one stride 2), three at
    ``widths[1]`` (last stride 2), two reduced-padding 3x3 convs, two NiN
    (1x1) layers, global average pool, dense to ``n_classes``.
    """

    def __init__(self, n_classes: int = 2, widths: tuple[int, int] = (96, 192),
                 input_size: int = 32, slope: float = 0.2,
                 dropout: tuple[float, float, float] = (0.2, 0.5, 0.5),
                 feature_mode: str = "pooled"):
        super().__init__()
        if n_classes < 2:
            raise ValueError("discriminator needs at least two real classes")
        if feature_mode not in ("pooled", "spatial"):
            raise ValueError(f"unknown feature_mode {feature_mode!r}")
        w1, w2 = widths
        self.n_classes, self.input_size = n_classes, input_size
        self.slope, self.dropout_p, self.feature_mode = slope, tuple(dropout), feature_mode

        self.block1 = nn.ModuleList([
            WNConv2d(3, w1, 3, 1, 1), WNConv2d(w1, w1, 3, 1, 1), WNConv2d(w1, w1, 3, 2, 1)])
        self.block2 = nn.ModuleList([
            WNConv2d(w1, w2, 3, 1, 1), WNConv2d(w2, w2, 3, 1, 1), WNConv2d(w2, w2, 3, 2, 1)])
        size = conv_out(conv_out(input_size, 3, 2, 1), 3, 2, 1)
        reduced = []
        for _ in range(2):
            stride, pad = reduced_layer_geometry(size)
            reduced.append(WNConv2d(w2, w2, 3, stride, pad))
            size = conv_out(size, 3, stride, pad)
        if size < 1:
            raise ValueError(f"input size {input_size} collapses before the NiN layers")
        self.block3 = nn.ModuleList(reduced + [WNConv2d(w2, w2, 1), WNConv2d(w2, w2, 1)])
        self.final_size = size
        self.feature_dim = w2 if feature_mode == "pooled" else w2 * size * size
        self.dense = WNLinear(w2, n_classes)

    def forward(self, x: torch.Tensor, train: bool = False,
                generator: torch.Generator | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        """Return ``(logits, features)``; dropout only when ``train``."""
        if x.dim() != 4 or x.shape[1:] != (3, self.input_size, self.input_size):
            raise ValueError(
                f"expected (B, 3, {self.input_size}, {self.input_size}), got {tuple(x.shape)}")
        p1, p2, p3 = self.dropout_p if train else (0.0, 0.0, 0.0)
        h = dropout(x, p1, generator)
        for layer in self.block1:
            h = F.leaky_relu(layer(h), self.slope)
        h = dropout(h, p2, generator)
        for layer in self.block2:
            h = F.leaky_relu(layer(h), self.slope)
        h = dropout(h, p3, generator)
        for layer in self.block3:
            h = F.leaky_relu(layer(h), self.slope)
        pooled = h.mean(dim=(2, 3))
        features = pooled if self.feature_mode == "pooled" else h.flatten(1)
        return self.dense(pooled), features


class Generator(nn.Module):
    """Uniform latent -> dense -> stride-2 5x5 transposed convs -> tanh image.

    ``channels`` lists the widths after the dense projection and after each
    hidden transposed conv (all batch-normed, ReLU); a final weight-normed
    transposed conv maps to 3 channels. Output size doubles per transposed
    conv, so the dense projection is ``output_size / 2**len(channels)`` wide.
    """

    def __init__(self, latent_dim: int = LATENT_DIM,
                 channels: tuple[int, ...] = (512, 256, 128), output_size: int = 32):
        super().__init__()
        n_up = len(channels)
        if n_up < 1 or output_size % (2 ** n_up):
            raise ValueError(f"output size {output_size} not reachable with {n_up} upsamplings")
        self.latent_dim, self.output_size = latent_dim, output_size
        self.start = output_size // 2 ** n_up
        self.channels = tuple(channels)
        self.project = nn.Linear(latent_dim, channels[0] * self.start ** 2, bias=False)
        self.bn0 = nn.BatchNorm2d(channels[0])
        self.ups = nn.ModuleList()
        self.bns = nn.ModuleList()
        for cin, cout in zip(channels[:-1], channels[1:]):
            self.ups.append(nn.ConvTranspose2d(cin, cout, 5, 2, 2, output_padding=1, bias=False))
            self.bns.append(nn.BatchNorm2d(cout))
        self.out = WNConvTranspose2d(channels[-1], 3, 5, 2)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        """Batch-norm uses batch statistics in ``.train()`` mode, running ones in ``.eval()``."""
        if z.dim() != 2 or z.shape[1] != self.latent_dim:
            raise ValueError(f"expected latents of shape (B, {self.latent_dim}), got {tuple(z.shape)}")
        h = self.project(z).view(z.shape[0], self.channels[0], self.start, self.start)
        h = F.relu(self.bn0(h))
        for up, bn in zip(self.ups, self.bns):
            h = F.relu(bn(up(h)))
        return torch.tanh(self.out(h))


def init_params(module: nn.Module, seed: int, sigma: float = 0.05) -> nn.Module:
    """Gaussian weights (0, sigma), zero biases, unit weight-norm and batch-norm scales."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in module.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            if leaf in ("b", "bias"):
                p.zero_()
            elif leaf == "g" or (leaf == "weight" and p.dim() == 1):
                p.fill_(1.0)
            else:
                p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * sigma)
    return module


def init_discriminator(n_classes: int, seed: int, sigma: float = 0.05, **kwargs) -> Discriminator:
    if n_classes < 2:
        raise ValueError("n_classes must be >= 2")
    return init_params(Discriminator(n_classes, **kwargs), seed, sigma)


def init_generator(seed: int, sigma: float = 0.05, **kwargs) -> Generator:
    return init_params(Generator(**kwargs), seed, sigma)


def sample_latent(n: int, generator: torch.Generator, dim: int = LATENT_DIM,
                  dtype: torch.dtype = torch.float32) -> torch.Tensor:
    return torch.rand((n, dim), generator=generator, dtype=dtype) * 2.0 - 1.0


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# ---------------------------------------------------------------------------
# losses


@dataclass
class LossBundle:
    l_supervised: float
    l_unsupervised: float
    l_g: float

    @property
    def l_d(self) -> float:
        return self.l_supervised + self.l_unsupervised

    def finite(self) -> bool:
        return all(math.isfinite(v) for v in (self.l_supervised, self.l_unsupervised, self.l_g))


def loss_supervised(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over the K real classes."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= logits.shape[1]):
        raise ValueError(f"labels must lie in [0, {logits.shape[1]})")
    return F.cross_entropy(logits, labels)


def unsupervised_terms(logits_real: torch.Tensor,
                       logits_fake: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Real and generated halves of the real-vs-fake loss.

    With ``Z = sum_k exp(l_k)``: ``-log(Z/(1+Z)) = softplus(-lse)`` for real
    samples and ``-log(1/(1+Z)) = softplus(lse)`` for generated ones.
    """
    lse_real = torch.logsumexp(logits_real, dim=1)
    lse_fake = torch.logsumexp(logits_fake, dim=1)
    return F.softplus(-lse_real).mean(), F.softplus(lse_fake).mean()


def loss_unsupervised(logits_real: torch.Tensor, logits_fake: torch.Tensor) -> torch.Tensor:
    real, fake = unsupervised_terms(logits_real, logits_fake)
    return real + fake


def loss_feature_matching(feat_real: torch.Tensor, feat_fake: torch.Tensor) -> torch.Tensor:
    """L1 distance between the batch-mean feature vectors."""
    if feat_real.shape[1:] != feat_fake.shape[1:]:
        raise ValueError(f"feature shapes differ: {tuple(feat_real.shape)} vs {tuple(feat_fake.shape)}")
    return (feat_real.mean(dim=0) - feat_fake.mean(dim=0)).abs().sum()


# ---------------------------------------------------------------------------
# gradient checking


class TinyDiscriminator(nn.Module):
    """Two weight-normed convs + pooled dense head; float64 gradient checks only."""

    def __init__(self, n_classes: int = 2, width: int = 4, slope: float = 0.2):
        super().__init__()
        self.conv = WNConv2d(3, width, 3, 2, 1)
        self.nin = WNConv2d(width, width, 1)
        self.dense = WNLinear(width, n_classes)
        self.slope = slope

    def forward(self, x, train=False, generator=None):
        h = F.leaky_relu(self.conv(x), self.slope)
        h = F.leaky_relu(self.nin(h), self.slope)
        features = h.mean(dim=(2, 3))
        return self.dense(features), features


@dataclass
class GradCheckResult:
    rel_errors: np.ndarray

    @property
    def max_rel_error(self) -> float:
        return float(self.rel_errors.max()) if self.rel_errors.size else 0.0

    def fraction_below(self, tol: float) -> float:
        return float((self.rel_errors < tol).mean()) if self.rel_errors.size else 1.0


def finite_difference_check(loss_fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor],
                            epsilon: float = 1e-5, floor: float = 1e-7) -> GradCheckResult:
    """Compare autograd against central differences, coordinate by coordinate.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps
    coordinates whose true gradient is ~0 from dominating.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = [p.grad.detach().clone() for p in params]
    errors = []
    with torch.no_grad():
        for p, a in zip(params, analytic):
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + epsilon
                up = loss_fn().item()
                flat[i] = orig - epsilon
                down = loss_fn().item()
                flat[i] = orig
                numeric = (up - down) / (2 * epsilon)
                ai = a.view(-1)[i].item()
                errors.append(abs(ai - numeric) / max(abs(ai), abs(numeric), floor))
    return GradCheckResult(np.array(errors))


def grad_check(loss_name: str, epsilon: float = 1e-5, seed: int = 0,
               batch: int = 6, size: int = 8) -> GradCheckResult:
    """Finite-difference check of one loss through tiny float64 networks.

    ``supervised`` and ``unsupervised`` differentiate w.r.t. the discriminator;
    ``feature_matching`` differentiates through the generator stack.
    """
    gen = torch.Generator().manual_seed(seed)
    dtype = torch.float64
    disc = init_params(TinyDiscriminator(), seed, sigma=0.5).to(dtype)
    x_real = torch.rand((batch, 3, size, size), generator=gen, dtype=dtype) * 2 - 1
    x_fake = torch.rand((batch, 3, size, size), generator=gen, dtype=dtype) * 2 - 1
    labels = torch.arange(batch) % 2

    if loss_name == "supervised":
        params = list(disc.parameters())
        fn = lambda: loss_supervised(disc(x_real)[0], labels)  # noqa: E731
    elif loss_name == "unsupervised":
        params = list(disc.parameters())
        fn = lambda: loss_unsupervised(disc(x_real)[0], disc(x_fake)[0])  # noqa: E731
    elif loss_name == "feature_matching":
        g = init_params(Generator(latent_dim=5, channels=(4,), output_size=size), seed + 1,
                        sigma=0.5).to(dtype)
        g.train()
        z = sample_latent(batch, gen, dim=5, dtype=dtype)
        params = list(g.parameters())

        def fn():
            return loss_feature_matching(disc(x_real)[1], disc(g(z))[1])
    else:
        raise ValueError(f"unknown loss {loss_name!r}")
    return finite_difference_check(fn, params, epsilon)
