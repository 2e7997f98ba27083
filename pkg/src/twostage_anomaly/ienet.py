"""Stage one: the impression extractor.

An inception encoder maps an image to a latent code ``z``; a decoder maps
``z`` back to image space, giving the anomaly-free *impression* ``m``.  While
training, a small MLP predicts the mean and spread of the latent distribution
and a discriminator ``T(x, z)`` separates matched (image, code) pairs from
batch-shuffled images paired with codes drawn from that Gaussian.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ExperimentConfig
from .errors import BatchTooSmallError, EmptyInputError, InvalidMomentsError, ShapeError

PROB_EPS = 1e-7


class InceptionBlock(nn.Module):
    """Parallel 1x1, 3x3, 5x5 and pooled branches, concatenated."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        b = out_ch // 4
        self.branch1 = nn.Conv2d(in_ch, b, 1)
        self.branch3 = nn.Sequential(nn.Conv2d(in_ch, b, 1), nn.ReLU(),
                                     nn.Conv2d(b, b, 3, padding=1))
        self.branch5 = nn.Sequential(nn.Conv2d(in_ch, b, 1), nn.ReLU(),
                                     nn.Conv2d(b, b, 5, padding=2))
        self.branch_pool = nn.Sequential(nn.MaxPool2d(3, stride=1, padding=1),
                                         nn.Conv2d(in_ch, b, 1))
        self.norm = nn.BatchNorm2d(4 * b)

    def forward(self, x):
        out = torch.cat([self.branch1(x), self.branch3(x), self.branch5(x),
                         self.branch_pool(x)], dim=1)
        return F.relu(self.norm(out))


class Encoder(nn.Module):
    def __init__(self, channels: int, widths, d_z: int, image_size: int):
        super().__init__()
        layers, prev = [], channels
        for w in widths:
            layers += [InceptionBlock(prev, w), nn.MaxPool2d(2)]
            prev = w
        self.features = nn.Sequential(*layers)
        self.side = image_size // 2 ** len(widths)
        self.feature_dim = prev
        self.to_latent = nn.Linear(prev * self.side ** 2, d_z)

    def forward(self, x):
        """Return ``(z, pooled)``; ``pooled`` is the spatially averaged
        pre-latent feature map, the image summary fed to the discriminator."""
        h = self.features(x)
        return self.to_latent(h.flatten(1)), h.mean(dim=(2, 3))


class Decoder(nn.Module):
    def __init__(self, channels: int, widths, d_z: int, image_size: int):
        super().__init__()
        self.side = image_size // 2 ** len(widths)
        self.top = widths[-1]
        self.from_latent = nn.Linear(d_z, self.top * self.side ** 2)
        rev = list(widths[::-1])
        outs = rev[1:] + [widths[0]]
        blocks = []
        for cin, cout in zip(rev, outs):
            blocks += [nn.Upsample(scale_factor=2, mode="nearest"), InceptionBlock(cin, cout)]
        self.blocks = nn.Sequential(*blocks)
        self.to_image = nn.Conv2d(widths[0], channels, 1)

    def forward(self, z):
        h = F.relu(self.from_latent(z)).view(-1, self.top, self.side, self.side)
        return torch.sigmoid(self.to_image(self.blocks(h)))


@dataclass
class MomentEstimate:
    mu: torch.Tensor
    sigma: torch.Tensor

    def sample(self, noise: torch.Tensor) -> torch.Tensor:
        """Reparameterized draw ``mu + sigma * noise``; one row per noise row."""
        return self.mu + self.sigma * noise


class MomentHead(nn.Module):
    """Three fully connected layers predicting ``(mu, log sigma^2)``.

    The input is the batch mean and population spread of the latents, so
    the estimate does not depend on batch order.  In per-sample mode each
    latent is fed with zero spread and one estimate per row is returned.
    """

    def __init__(self, d_z: int, hidden: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(2 * d_z, hidden), nn.ReLU(),
                                 nn.Linear(hidden, hidden), nn.ReLU(),
                                 nn.Linear(hidden, 2 * d_z))

    def forward(self, z, per_sample: bool = False) -> MomentEstimate:
        if z.shape[0] == 0:
            raise EmptyInputError("moment estimation needs at least one latent")
        if per_sample:
            summary = torch.cat([z, torch.zeros_like(z)], dim=1)
        else:
            summary = torch.cat([z.mean(0), z.std(0, unbiased=False)])[None]
        mu, logvar = self.net(summary).chunk(2, dim=1)
        if not per_sample:
            mu, logvar = mu[0], logvar[0]
        return MomentEstimate(mu, torch.exp(0.5 * logvar))


class Discriminator(nn.Module):
    def __init__(self, feature_dim: int, d_z: int, hidden: int, zero_init: bool = True):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(feature_dim + d_z, hidden), nn.ReLU(),
                                 nn.Linear(hidden, hidden), nn.ReLU(),
                                 nn.Linear(hidden, hidden), nn.ReLU(),
                                 nn.Linear(hidden, 1))
        if zero_init:
            nn.init.zeros_(self.net[-1].weight)
            nn.init.zeros_(self.net[-1].bias)

    def forward(self, pooled, z):
        return torch.sigmoid(self.net(torch.cat([pooled, z], dim=1))).squeeze(1)


class IENet(nn.Module):
    def __init__(self, config: ExperimentConfig):
        super().__init__()
        c = config.ie
        self.image_size = config.image_size
        self.channels = config.channels
        self.per_sample_kl = c.per_sample_kl
        self.encoder = Encoder(config.channels, c.widths, c.d_z, config.image_size)
        self.decoder = Decoder(config.channels, c.widths, c.d_z, config.image_size)
        self.moments = MomentHead(c.d_z, c.moment_hidden)
        self.disc = Discriminator(self.encoder.feature_dim, c.d_z, c.disc_hidden,
                                  c.zero_init_disc)

    def generator_parameters(self):
        for module in (self.encoder, self.decoder, self.moments):
            yield from module.parameters()

    def _check(self, x):
        want = (self.channels, self.image_size, self.image_size)
        if x.dim() != 4 or tuple(x.shape[1:]) != want:
            raise ShapeError(f"expected input of shape (N, {want[0]}, {want[1]}, {want[2]}), "
                             f"got {tuple(x.shape)}")

    def encode(self, x):
        self._check(x)
        return self.encoder(x)[0]

    def estimate_moments(self, z) -> MomentEstimate:
        return self.moments(z, per_sample=self.per_sample_kl)

    def discriminate(self, x, z):
        self._check(x)
        return self.disc(self.encoder(x)[1], z)

    def impression(self, x):
        self._check(x)
        return self.decoder(self.encoder(x)[0])

    def losses(self, x, perm=None, noise=None, use_mi: bool = True):
        """Loss components for one batch.

        ``perm`` is the batch derangement for the shuffled negatives and
        ``noise`` the standard-normal draws behind ``z~``; both are required
        when ``use_mi`` is set.  Returns a dict with ``l_t``, ``kl``, ``l_d``
        and the impression ``m``.
        """
        self._check(x)
        z, pooled = self.encoder(x)
        m = self.decoder(z)
        out = {"m": m, "l_d": ie_reconstruction_loss(m, x)}
        if use_mi:
            if x.shape[0] < 2:
                raise BatchTooSmallError("mutual-information loss needs a batch of >= 2")
            moments = self.estimate_moments(z)
            z_tilde = moments.sample(noise)
            p_pos = self.disc(pooled, z)
            p_neg = self.disc(pooled[perm], z_tilde)
            out["l_t"] = discriminator_cross_entropy(p_pos, p_neg)
            out["kl"] = kl_gaussian(moments.mu, moments.sigma)
        else:
            zero = x.new_zeros(())
            out["l_t"], out["kl"] = zero, zero
        return out


# ----------------------------------------------------------------------
# Loss terms

def discriminator_cross_entropy(p_pos, p_neg, eps: float = PROB_EPS):
    """Batch mean of ``-log T(x, z) - log(1 - T(x~, z~))``."""
    p_pos = torch.as_tensor(p_pos).clamp(eps, 1 - eps)
    p_neg = torch.as_tensor(p_neg).clamp(eps, 1 - eps)
    return (-torch.log(p_pos) - torch.log1p(-p_neg)).mean()


def mi_discriminator_loss(model: IENet, x, z, x_shuffled, z_prior_samples):
    """Discriminator loss on positives ``(x, z)`` and negatives
    ``(x_shuffled, z_prior_samples)``."""
    if x.shape[0] < 2:
        raise BatchTooSmallError("mutual-information loss needs a batch of >= 2")
    return discriminator_cross_entropy(model.discriminate(x, z),
                                       model.discriminate(x_shuffled, z_prior_samples))


def kl_gaussian(mu, sigma):
    """KL of a diagonal Gaussian from the standard normal.

    For a batch of estimates (2-D inputs) the per-row divergences are averaged.
    """
    mu, sigma = torch.as_tensor(mu), torch.as_tensor(sigma)
    if bool((sigma <= 0).any()):
        raise InvalidMomentsError("sigma must be strictly positive")
    var = sigma ** 2
    kl = 0.5 * (mu ** 2 + var - 1.0 - torch.log(var)).sum(-1)
    return kl.mean() if kl.dim() else kl


def ie_reconstruction_loss(m, x):
    return (m - x).abs().mean()


def ie_total_loss(l_t, kl, l_d, lam: float, lam1: float):
    """Weighted sum ``l_t + lam * kl + lam1 * l_d`` and its components."""
    total = l_t + lam * kl + lam1 * l_d
    return total, {"l_t": l_t, "kl": kl, "l_d": l_d}


def random_derangement(n: int, generator: torch.Generator | None = None) -> torch.Tensor:
    """Uniform permutation of ``range(n)`` with no fixed points (rejection)."""
    if n < 2:
        raise BatchTooSmallError("a derangement needs at least 2 elements")
    idx = torch.arange(n)
    while True:
        perm = torch.randperm(n, generator=generator)
        if not bool((perm == idx).any()):
            return perm

