"""Convolutional stem and multi-granularity patch embedding.

The stem turns an image into a C x H x W feature map. The MGEI stage pools it
to a fixed 12 x 12 grid, tiles the grid at several patch sizes, flattens each
patch channel-major and projects every scale to D-dim tokens.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, InputError, ShapeError
from .nn import Conv2d, Linear, Module
from .tensor import Tensor

GRID = 12
MIN_IMAGE = 96
# fixed input standardisation of [0, 1] pixels
PIXEL_MEAN, PIXEL_STD = 0.5, 0.25


@dataclass
class FeatureMap:
    X: Tensor

    @property
    def C(self) -> int:
        return self.X.shape[-3]

    @property
    def H(self) -> int:
        return self.X.shape[-2]

    @property
    def W(self) -> int:
        return self.X.shape[-1]


@dataclass
class PatchSet:
    scales: tuple[int, ...]
    patches: list[Tensor]  # per scale: (..., N_i, C * P_i^2)
    tokens: Tensor | None = None  # (..., N, D) after projection

    @property
    def counts(self) -> tuple[int, ...]:
        return tuple(token_count(p) for p in self.scales)

    @property
    def N(self) -> int:
        return sum(self.counts)


def token_count(patch: int) -> int:
    return (GRID // patch) ** 2


def check_scales(scales) -> tuple[int, ...]:
    scales = tuple(int(s) for s in scales)
    if not scales:
        raise ConfigError("at least one patch size is required")
    bad = [s for s in scales if s < 1 or GRID % s]
    if bad:
        raise ConfigError(f"patch sizes {bad} do not divide {GRID}")
    return scales


class ConvStem(Module):
    """Three stride-2 3x3 conv stages with GELU, 112 -> 14."""

    def __init__(self, channels: tuple[int, ...], rng: np.random.Generator, in_channels: int = 3):
        widths = (in_channels,) + tuple(channels)
        self.convs = [Conv2d(widths[i], widths[i + 1], 3, rng, stride=2, pad=1) for i in range(len(channels))]

    @property
    def out_channels(self) -> int:
        return self.convs[-1].weight.shape[0]

    def forward(self, image) -> FeatureMap:
        x = T.as_tensor(image)
        if x.shape[-1] < MIN_IMAGE or x.shape[-2] < MIN_IMAGE:
            raise InputError(f"image side must be >= {MIN_IMAGE}, got {x.shape[-2:]}")
        x = (x - PIXEL_MEAN) * (1.0 / PIXEL_STD)
        for conv in self.convs:
            x = T.gelu(conv(x))
        return FeatureMap(x)


def stem_forward(image, stem: ConvStem) -> FeatureMap:
    return stem(image)


def pool_to_grid(fm: FeatureMap | Tensor) -> Tensor:
    x = fm.X if isinstance(fm, FeatureMap) else fm
    if x.shape[-2] < GRID or x.shape[-1] < GRID:
        raise ShapeError(f"feature map {x.shape[-2:]} is smaller than the {GRID}x{GRID} grid")
    return T.adaptive_avg_pool2d(x, GRID, GRID)


def split_patches(x: Tensor, scales) -> PatchSet:
    """Tile a (..., C, 12, 12) grid into non-overlapping P x P patches per scale.

    Patches are row-major within a scale; each one is flattened channel-major
    then row-major spatially, giving width C * P^2.
    """
    scales = check_scales(scales)
    if x.shape[-2:] != (GRID, GRID):
        raise ShapeError(f"split_patches expects a {GRID}x{GRID} grid, got {x.shape}")
    lead = x.shape[:-3]
    C = x.shape[-3]
    k = len(lead)
    out = []
    for p in scales:
        g = GRID // p
        t = T.reshape(x, lead + (C, g, p, g, p))
        # (..., gh, gw, C, ph, pw)
        t = T.permute(t, tuple(range(k)) + (k + 1, k + 3, k, k + 2, k + 4))
        out.append(T.reshape(t, lead + (g * g, C * p * p)))
    return PatchSet(scales, out)


def unsplit_scale(patches: np.ndarray, C: int, p: int) -> np.ndarray:
    """Inverse tiling for one scale: (N_i, C*p*p) -> (C, 12, 12)."""
    g = GRID // p
    return patches.reshape(g, g, C, p, p).transpose(2, 0, 3, 1, 4).reshape(C, GRID, GRID)


def project_tokens(ps: PatchSet, projections) -> Tensor:
    if len(projections) != len(ps.scales):
        raise ShapeError(f"{len(projections)} projections for {len(ps.scales)} scales")
    toks = []
    for patches, proj in zip(ps.patches, projections):
        if proj.d_in != patches.shape[-1]:
            raise ShapeError(f"projection width {proj.d_in} != patch width {patches.shape[-1]}")
        toks.append(proj(patches))
    tokens = toks[0] if len(toks) == 1 else T.concat(toks, axis=-2)
    ps.tokens = tokens
    return tokens


class MGEI(Module):
    def __init__(self, channels: int, scales, dim: int, rng: np.random.Generator):
        self.scales = check_scales(scales)
        self.proj = [Linear(channels * p * p, dim, rng) for p in self.scales]

    @property
    def num_tokens(self) -> int:
        return sum(token_count(p) for p in self.scales)

    def forward(self, fm: FeatureMap | Tensor) -> Tensor:
        ps = split_patches(pool_to_grid(fm), self.scales)
        return project_tokens(ps, self.proj)
