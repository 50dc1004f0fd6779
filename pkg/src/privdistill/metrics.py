"""Output-quality metrics, generalization gap, loss histograms, output-noise defense.

Image quality is the unbiased squared MMD between feature sets under the
cubic polynomial kernel k(a, b) = (a.b / d + 1)^3, computed on features from
a pluggable deterministic extractor (default: a frozen random 3-layer conv
net with global average pooling). The normalized score divides by the value
measured against all-black images, putting quality on a 0-100% scale that is
comparable with attack AUC.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, NumericError
from .nets import gen_forward
from .rng import RngState, mix64

_KINDS = ("frozen-random-conv", "external-embedding")


@dataclass(eq=False)
class FeatureExtractor:
    """Deterministic image-to-vector embedding used by the quality metrics."""

    kind: str = "frozen-random-conv"
    seed: int = 0
    output_dim: int = 64
    embed_fn: Callable[[torch.Tensor], np.ndarray] | None = None
    _net: torch.nn.Module | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ConfigError(f"extractor kind must be one of {_KINDS}, got {self.kind!r}")
        if self.output_dim < 1:
            raise ConfigError(f"output_dim must be >= 1, got {self.output_dim}")
        if self.kind == "external-embedding" and self.embed_fn is None:
            raise ConfigError("external-embedding extractor needs embed_fn")

    def _build(self) -> torch.nn.Module:
        gen = torch.Generator().manual_seed(mix64(self.seed, "feature-extractor"))
        layers = []
        channels = [3, 16, 32, self.output_dim]
        for c_in, c_out in zip(channels[:-1], channels[1:]):
            conv = torch.nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)
            with torch.no_grad():
                std = (2.0 / (c_in * 9)) ** 0.5
                conv.weight.normal_(0.0, std, generator=gen)
                conv.bias.zero_()
            layers.append(conv)
        net = torch.nn.Sequential(*layers)
        net.requires_grad_(False)
        net.eval()
        return net

    def embed(self, image: torch.Tensor) -> np.ndarray:
        if self.kind == "external-embedding":
            vec = np.asarray(self.embed_fn(image), dtype=np.float64).reshape(-1)
        else:
            if self._net is None:
                self._net = self._build()
            with torch.no_grad():
                h = image.unsqueeze(0).float()
                for conv in self._net:
                    h = F.leaky_relu(conv(h), 0.2)
                vec = F.adaptive_avg_pool2d(h, 1).reshape(-1).numpy().astype(np.float64)
        if vec.shape[0] != self.output_dim:
            raise ConfigError(
                f"extractor produced dim {vec.shape[0]}, declared {self.output_dim}"
            )
        return vec


@dataclass
class KidResult:
    kid_raw: float  # unbiased estimate; may be slightly negative
    kid: float  # clamped at zero
    n_real: int
    n_gen: int


@dataclass
class NkidResult:
    nkid: float  # percent in [0, 100]
    kid_max: float
    kid: KidResult | None = None


@dataclass
class LossHistogram:
    bin_edges: list[float]
    member_p: list[float]
    nonmember_p: list[float]
    overlap: float  # sum of per-bin minima of the two normalized histograms


def extract_features(images: Sequence[torch.Tensor], fx: FeatureExtractor) -> np.ndarray:
    """Embed every image; images are processed one at a time so the result is
    independent of batch composition."""
    feats = np.stack([fx.embed(img) for img in images]) if len(images) else np.zeros((0, fx.output_dim))
    if not np.isfinite(feats).all():
        raise NumericError("feature extractor produced non-finite values")
    return feats


def _poly_kernel(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a.shape[1]
    return (a @ b.T / d + 1.0) ** 3


def kid(feats_real: np.ndarray, feats_gen: np.ndarray) -> KidResult:
    """Unbiased squared MMD with the cubic polynomial kernel."""
    feats_real = np.asarray(feats_real, dtype=np.float64)
    feats_gen = np.asarray(feats_gen, dtype=np.float64)
    m, n = feats_real.shape[0], feats_gen.shape[0]
    if m < 2 or n < 2:
        raise ConfigError(f"kid needs at least 2 vectors per set, got {m} and {n}")
    k_rr = _poly_kernel(feats_real, feats_real)
    k_gg = _poly_kernel(feats_gen, feats_gen)
    k_rg = _poly_kernel(feats_real, feats_gen)
    term_rr = (k_rr.sum() - np.trace(k_rr)) / (m * (m - 1))
    term_gg = (k_gg.sum() - np.trace(k_gg)) / (n * (n - 1))
    raw = float(term_rr + term_gg - 2.0 * k_rg.mean())
    return KidResult(kid_raw=raw, kid=max(raw, 0.0), n_real=m, n_gen=n)


def calibrate_kid_max(
    real_test_images: Sequence[torch.Tensor],
    fx: FeatureExtractor,
    image_shape: tuple[int, int, int] | None = None,
) -> float:
    """Distance between the real test set and all-black images (value -1),
    one black image per test image; the normalization ceiling."""
    if not len(real_test_images):
        raise ConfigError("calibration needs a non-empty test set")
    shape = image_shape or tuple(real_test_images[0].shape)
    black = [torch.full(shape, -1.0) for _ in real_test_images]
    return kid(extract_features(real_test_images, fx), extract_features(black, fx)).kid


def nkid(
    generated: Sequence[torch.Tensor],
    reference_real: Sequence[torch.Tensor],
    fx: FeatureExtractor,
    kid_max: float,
) -> NkidResult:
    """Quality as a percentage of the black-image ceiling, capped at 100."""
    if kid_max <= 0:
        raise ConfigError(f"kid_max must be > 0, got {kid_max}")
    result = kid(extract_features(reference_real, fx), extract_features(generated, fx))
    return NkidResult(nkid=min(100.0 * result.kid / kid_max, 100.0), kid_max=kid_max, kid=result)


def generalization_gap(
    g,
    train_inputs: Sequence[torch.Tensor],
    test_inputs: Sequence[torch.Tensor],
    train_refs: Sequence[torch.Tensor],
    test_refs: Sequence[torch.Tensor],
    fx: FeatureExtractor,
    kid_max: float,
    rng: RngState | None = None,
) -> float:
    """Quality drop on unseen inputs: NKID(test) - NKID(train); positive for
    models that render their training inputs better than fresh ones."""
    if not train_inputs or not test_inputs or not train_refs or not test_refs:
        raise ConfigError("generalization gap needs non-empty input and reference sets")
    rng = rng if rng is not None else RngState(0)
    with torch.no_grad():
        train_out = [gen_forward(g, x, rng) for x in train_inputs]
        test_out = [gen_forward(g, x, rng) for x in test_inputs]
    nkid_train = nkid(train_out, train_refs, fx, kid_max).nkid
    nkid_test = nkid(test_out, test_refs, fx, kid_max).nkid
    return nkid_test - nkid_train


def loss_histogram(
    member_scores: Sequence[float], nonmember_scores: Sequence[float], n_bins: int
) -> LossHistogram:
    """Shared-binning histograms of the two score populations plus their
    overlap coefficient sum(min(p_i, q_i)) in [0, 1]."""
    if n_bins < 2:
        raise ConfigError(f"n_bins must be >= 2, got {n_bins}")
    if not len(member_scores) or not len(nonmember_scores):
        raise ConfigError("histograms need non-empty score lists")
    m = np.asarray(member_scores, dtype=np.float64)
    q = np.asarray(nonmember_scores, dtype=np.float64)
    lo = float(min(m.min(), q.min()))
    hi = float(max(m.max(), q.max()))
    if lo == hi:
        lo -= 0.5
        hi += 0.5
    m_counts, edges = np.histogram(m, bins=n_bins, range=(lo, hi))
    q_counts, _ = np.histogram(q, bins=n_bins, range=(lo, hi))
    member_p = m_counts / m.size
    nonmember_p = q_counts / q.size
    overlap = float(np.minimum(member_p, nonmember_p).sum())
    return LossHistogram(
        bin_edges=[float(e) for e in edges],
        member_p=[float(v) for v in member_p],
        nonmember_p=[float(v) for v in nonmember_p],
        overlap=overlap,
    )


class GaussDefendedGenerator:
    """Serving-time wrapper adding per-pixel N(0, sigma^2) noise to outputs,
    clamped back to [-1, 1]. sigma = 0 is the bitwise identity."""

    def __init__(self, base, sigma: float):
        if sigma < 0:
            raise ConfigError(f"sigma must be >= 0, got {sigma}")
        self.base = base
        self.sigma = sigma

    @property
    def arch(self):
        return self.base.arch

    def generate(self, x: torch.Tensor, rng: RngState) -> torch.Tensor:
        out = gen_forward(self.base, x, rng)
        if self.sigma > 0:
            gen = rng.next_generator()
            noise = torch.randn(out.shape, generator=gen, dtype=out.dtype)
            out = (out + self.sigma * noise).clamp(-1.0, 1.0)
        return out


def gauss_defense(g, sigma: float) -> GaussDefendedGenerator:
    return GaussDefendedGenerator(g, sigma)
