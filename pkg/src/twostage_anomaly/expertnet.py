"""Stage two: restoring detail on top of the impression.

Two encoder/decoder pairs share one architecture.  Direction A maps an
impression ``m`` plus a detail code ``s`` to the high-fidelity image
``x_hat``; ``s`` comes from a shallow extractor and is injected through
adaptive instance normalization in the decoder's residual blocks.
Direction B maps the raw image ``x`` to the naive impression ``m_hat``.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call

from .config import ExperimentConfig
from .errors import PairingError, ShapeError

ADAIN_EPS = 1e-5


def channel_stats(k, eps: float = ADAIN_EPS):
    """Per-sample, per-channel mean and (population) standard deviation."""
    mean = k.mean(dim=(2, 3))
    std = torch.sqrt(k.var(dim=(2, 3), unbiased=False) + eps)
    return mean, std


def adain(k, gamma, beta, eps: float = ADAIN_EPS):
    """Renormalize each channel of ``k`` (N, C, H, W) to scale ``gamma`` and
    shift ``beta``, given per-channel as (C,) or per-sample as (N, C)."""
    if gamma.shape[-1] != k.shape[1] or beta.shape[-1] != k.shape[1]:
        raise ShapeError(f"gamma/beta length {gamma.shape[-1]} does not match "
                         f"{k.shape[1]} channels")
    mean, std = channel_stats(k, eps)
    gamma = gamma.expand(k.shape[0], -1)[:, :, None, None]
    beta = beta.expand(k.shape[0], -1)[:, :, None, None]
    return gamma * (k - mean[:, :, None, None]) / std[:, :, None, None] + beta


def _conv_block(cin, cout, kernel, stride, padding, norm=True):
    layers = [nn.Conv2d(cin, cout, kernel, stride, padding, padding_mode="reflect")]
    if norm:
        layers.append(nn.InstanceNorm2d(cout, affine=True))
    layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class ResBlock(nn.Module):
    """Two 3x3 convolutions with a skip.  Normalization is instance norm, or
    AdaIN when ``style`` parameters are passed to ``forward``."""

    def __init__(self, ch: int, adaptive: bool):
        super().__init__()
        self.adaptive = adaptive
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1, padding_mode="reflect")
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1, padding_mode="reflect")
        if not adaptive:
            self.norm1 = nn.InstanceNorm2d(ch, affine=True)
            self.norm2 = nn.InstanceNorm2d(ch, affine=True)

    def forward(self, x, style=None):
        h = self.conv1(x)
        h = adain(h, style[0], style[1]) if self.adaptive else self.norm1(h)
        h = self.conv2(F.relu(h))
        h = adain(h, style[2], style[3]) if self.adaptive else self.norm2(h)
        return x + h


class ImageEncoder(nn.Module):
    """Stem, ``n_down`` strided convolutions and one refining convolution,
    followed by ``n_res`` residual blocks."""

    def __init__(self, channels, base, n_down, n_res):
        super().__init__()
        layers = [_conv_block(channels, base, 7, 1, 3)]
        ch = base
        for _ in range(n_down):
            layers.append(_conv_block(ch, ch * 2, 4, 2, 1))
            ch *= 2
        layers.append(_conv_block(ch, ch, 3, 1, 1))
        self.convs = nn.Sequential(*layers)
        self.res = nn.ModuleList(ResBlock(ch, adaptive=False) for _ in range(n_res))
        self.out_channels = ch

    def forward(self, x):
        h = self.convs(x)
        for block in self.res:
            h = block(h)
        return h


class ImageDecoder(nn.Module):
    def __init__(self, channels, ch, n_down, n_res, adaptive):
        super().__init__()
        self.res = nn.ModuleList(ResBlock(ch, adaptive) for _ in range(n_res))
        ups = []
        for _ in range(n_down):
            ups += [nn.Upsample(scale_factor=2, mode="nearest"),
                    _conv_block(ch, ch // 2, 5, 1, 2, norm=False)]
            ch //= 2
        ups.append(_conv_block(ch, ch, 5, 1, 2, norm=False))
        self.ups = nn.Sequential(*ups)
        self.to_image = nn.Conv2d(ch, channels, 7, padding=3, padding_mode="reflect")

    def forward(self, h, styles=None):
        for i, block in enumerate(self.res):
            h = block(h, None if styles is None else styles[i])
        return torch.sigmoid(self.to_image(self.ups(h)))


class DetailExtractor(nn.Module):
    """Three convolutions and global average pooling to a ``d_s`` vector."""

    def __init__(self, channels, hidden, d_s):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(channels, hidden, 4, 2, 1), nn.ReLU(),
            nn.Conv2d(hidden, hidden * 2, 4, 2, 1), nn.ReLU(),
            nn.Conv2d(hidden * 2, d_s, 3, 1, 1),
            nn.AdaptiveAvgPool2d(1),
        )

    def forward(self, x):
        return self.net(x).flatten(1)


class StyleMLP(nn.Module):
    """Maps a detail code to (gamma, beta) pairs for every AdaIN layer."""

    def __init__(self, d_s, hidden, ch, n_res):
        super().__init__()
        self.ch, self.n_res = ch, n_res
        self.net = nn.Sequential(nn.Linear(d_s, hidden), nn.ReLU(),
                                 nn.Linear(hidden, hidden), nn.ReLU(),
                                 nn.Linear(hidden, 4 * n_res * ch))

    def forward(self, s):
        p = self.net(s).view(s.shape[0], self.n_res, 4, self.ch)
        # scales are offset by one so a zero output leaves activations unscaled
        return [(1 + p[:, i, 0], p[:, i, 1], 1 + p[:, i, 2], p[:, i, 3])
                for i in range(self.n_res)]


class ExpertNet(nn.Module):
    def __init__(self, config: ExperimentConfig):
        super().__init__()
        c = config.expert
        self.image_size = config.image_size
        self.channels = config.channels
        self.d_s = c.d_s
        self.enc_a = ImageEncoder(config.channels, c.base_channels, c.n_down, c.n_res)
        self.enc_b = ImageEncoder(config.channels, c.base_channels, c.n_down, c.n_res)
        ch = self.enc_a.out_channels
        self.dec_a = ImageDecoder(config.channels, ch, c.n_down, c.n_res, adaptive=True)
        self.dec_b = ImageDecoder(config.channels, ch, c.n_down, c.n_res, adaptive=False)
        self.detail = DetailExtractor(config.channels, c.detail_channels, c.d_s)
        self.style = StyleMLP(c.d_s, c.mlp_hidden, ch, c.n_res)

    def _check(self, x):
        want = (self.channels, self.image_size, self.image_size)
        if x.dim() != 4 or tuple(x.shape[1:]) != want:
            raise ShapeError(f"expected input of shape (N, {want[0]}, {want[1]}, {want[2]}), "
                             f"got {tuple(x.shape)}")

    def extract_details(self, x):
        self._check(x)
        return self.detail(x)

    def reconstruct(self, m, s):
        """High-fidelity reconstruction from impression ``m`` and details ``s``."""
        self._check(m)
        if s.shape != (m.shape[0], self.d_s):
            raise ShapeError(f"detail code must have shape ({m.shape[0]}, {self.d_s})")
        return self.dec_a(self.enc_a(m), self.style(s))

    def naive_impression(self, x):
        self._check(x)
        return self.dec_b(self.enc_b(x))

    def forward(self, x, m, s=None, stop_grad_detail: bool = False):
        """Training-time pass.

        With ``s=None`` the detail code is extracted from ``x`` and the
        re-encoded code ``s_hat`` of the reconstruction is returned as well;
        an explicit ``s`` (detail guidance disabled) skips both.
        """
        if x.shape != m.shape:
            raise PairingError(f"image {tuple(x.shape)} and impression {tuple(m.shape)} differ")
        guided = s is None
        if guided:
            s = self.extract_details(x)
        x_hat = self.reconstruct(m, s)
        out = {"x_hat": x_hat, "m_hat": self.naive_impression(x), "s": s, "s_hat": None}
        if guided:
            if stop_grad_detail:
                frozen = {k: v.detach() for k, v in self.detail.named_parameters()}
                out["s_hat"] = functional_call(self.detail, frozen, (x_hat,))
                out["s"] = s.detach()
            else:
                out["s_hat"] = self.detail(x_hat)
        return out


def expert_loss(x, m, x_hat, m_hat, s=None, s_hat=None, w_x=1.0, w_m=1.0, w_s=1.0):
    """Sum of the three L1 constraints ``x_hat~x``, ``m_hat~m``, ``s_hat~s``.

    The detail term is skipped when ``s_hat`` is ``None``.  Returns
    ``(total, components)``.
    """
    if x.shape != m.shape:
        raise PairingError(f"image {tuple(x.shape)} and impression {tuple(m.shape)} differ")
    l_x = (x_hat - x).abs().mean()
    l_m = (m_hat - m).abs().mean()
    l_s = (s_hat - s).abs().mean() if s_hat is not None else x.new_zeros(())
    total = w_x * l_x + w_m * l_m + w_s * l_s
    return total, {"l_x": l_x, "l_m": l_m, "l_s": l_s}
