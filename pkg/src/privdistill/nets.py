"""U-Net generator and convolutional discriminator with seeded dropout noise.

The generator's noise source is dropout kept active at inference time, drawn
from an explicit `RngState` so forwards replay exactly. The discriminator
scores the channel-concatenation of a candidate output and its conditioning
input with a single sigmoid probability, clamped away from {0, 1} so log
terms stay finite.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DataError, NumericError
from .rng import RngState, mix64

PROB_EPS = 1e-7
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class GeneratorArch:
    """U-Net descriptor: `depth` 2x down/up levels from `base_channels`,
    dropout in the two innermost decoder blocks."""

    height: int = 32
    width: int = 32
    in_channels: int = 3
    out_channels: int = 3
    depth: int = 3
    base_channels: int = 16
    dropout: float = 0.5
    norm: bool = True

    def validate(self) -> "GeneratorArch":
        if self.depth < 1:
            raise ConfigError(f"generator depth must be >= 1, got {self.depth}")
        factor = 1 << self.depth
        if self.height % factor or self.width % factor or min(self.height, self.width) < factor:
            raise ConfigError(
                f"depth {self.depth} needs image dims divisible by {factor}, "
                f"got {self.height}x{self.width}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if min(self.in_channels, self.out_channels, self.base_channels) < 1:
            raise ConfigError("channel counts must be positive")
        return self


@dataclass(frozen=True)
class DiscriminatorArch:
    """Four-layer CNN: three stride-2 convolutions then a valid convolution
    collapsing the map to a single logit."""

    height: int = 32
    width: int = 32
    in_channels: int = 6
    base_channels: int = 16
    norm: bool = True

    def validate(self) -> "DiscriminatorArch":
        if self.height % 8 or self.width % 8:
            raise ConfigError(
                f"discriminator needs image dims divisible by 8, got {self.height}x{self.width}"
            )
        if min(self.in_channels, self.base_channels) < 1:
            raise ConfigError("channel counts must be positive")
        return self


def discriminator_arch_for(gen_arch: GeneratorArch, base_channels: int | None = None) -> DiscriminatorArch:
    return DiscriminatorArch(
        height=gen_arch.height,
        width=gen_arch.width,
        in_channels=gen_arch.in_channels + gen_arch.out_channels,
        base_channels=base_channels or gen_arch.base_channels,
        norm=gen_arch.norm,
    )


def _seeded_dropout(x: torch.Tensor, p: float, gen: torch.Generator | None) -> torch.Tensor:
    if p <= 0.0 or gen is None:
        return x
    keep = (torch.rand(x.shape, generator=gen, dtype=x.dtype) >= p).to(x.dtype)
    return x * keep / (1.0 - p)


class UnetGenerator(nn.Module):
    """Encoder-decoder with skip connections and a tanh output head."""

    def __init__(self, arch: GeneratorArch):
        super().__init__()
        arch.validate()
        self.arch = arch
        self.dropout_active = True  # noise stays on at inference time
        enc_ch = [arch.base_channels * (1 << i) for i in range(arch.depth)]
        self.enc = nn.ModuleList()
        self.enc_norm = nn.ModuleList()
        prev = arch.in_channels
        for i, ch in enumerate(enc_ch):
            self.enc.append(nn.Conv2d(prev, ch, 4, stride=2, padding=1))
            use_norm = arch.norm and i > 0
            self.enc_norm.append(nn.InstanceNorm2d(ch, affine=True) if use_norm else nn.Identity())
            prev = ch
        self.dec = nn.ModuleList()
        self.dec_norm = nn.ModuleList()
        for i in range(arch.depth):
            final = i == arch.depth - 1
            in_ch = enc_ch[-1] if i == 0 else 2 * enc_ch[arch.depth - 1 - i]
            out_ch = arch.out_channels if final else enc_ch[arch.depth - 2 - i]
            self.dec.append(nn.ConvTranspose2d(in_ch, out_ch, 4, stride=2, padding=1))
            use_norm = arch.norm and not final
            self.dec_norm.append(nn.InstanceNorm2d(out_ch, affine=True) if use_norm else nn.Identity())

    def forward(self, x: torch.Tensor, gen: torch.Generator | None = None) -> torch.Tensor:
        single = x.dim() == 3
        h = x.unsqueeze(0) if single else x
        if h.shape[-3:] != (self.arch.in_channels, self.arch.height, self.arch.width):
            raise ConfigError(
                f"generator expects {(self.arch.in_channels, self.arch.height, self.arch.width)}, "
                f"got {tuple(h.shape[-3:])}"
            )
        skips = []
        for conv, norm in zip(self.enc, self.enc_norm):
            h = F.leaky_relu(norm(conv(h)), 0.2)
            skips.append(h)
        depth = self.arch.depth
        p = self.arch.dropout if self.dropout_active else 0.0
        for i, (deconv, norm) in enumerate(zip(self.dec, self.dec_norm)):
            inp = h if i == 0 else torch.cat([h, skips[depth - 1 - i]], dim=1)
            h = deconv(inp)
            if i == depth - 1:
                h = torch.tanh(h)
            else:
                h = norm(h)
                if i < 2:
                    h = _seeded_dropout(h, p, gen)
                h = F.relu(h)
        return h.squeeze(0) if single else h

    def generate(self, x: torch.Tensor, rng: RngState) -> torch.Tensor:
        """Forward pass drawing one dropout-mask stream from `rng`."""
        use_noise = self.dropout_active and self.arch.dropout > 0.0
        gen = rng.next_generator() if use_noise else None
        out = self.forward(x, gen)
        if torch.isnan(out).any():
            layer = _first_nonfinite_layer(self, x, gen)
            raise NumericError(f"non-finite activation in generator layer {layer!r}")
        return out


class ConvDiscriminator(nn.Module):
    """Scalar real/fake classifier over cat(candidate, conditioning input)."""

    def __init__(self, arch: DiscriminatorArch):
        super().__init__()
        arch.validate()
        self.arch = arch
        ch = [arch.base_channels, arch.base_channels * 2, arch.base_channels * 4]
        self.conv1 = nn.Conv2d(arch.in_channels, ch[0], 4, stride=2, padding=1)
        self.conv2 = nn.Conv2d(ch[0], ch[1], 4, stride=2, padding=1)
        self.conv3 = nn.Conv2d(ch[1], ch[2], 4, stride=2, padding=1)
        self.norm2 = nn.InstanceNorm2d(ch[1], affine=True) if arch.norm else nn.Identity()
        self.norm3 = nn.InstanceNorm2d(ch[2], affine=True) if arch.norm else nn.Identity()
        self.head = nn.Conv2d(ch[2], 1, (arch.height // 8, arch.width // 8))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        single = x.dim() == 3
        h = x.unsqueeze(0) if single else x
        if h.shape[-3:] != (self.arch.in_channels, self.arch.height, self.arch.width):
            raise ConfigError(
                f"discriminator expects {(self.arch.in_channels, self.arch.height, self.arch.width)}, "
                f"got {tuple(h.shape[-3:])}"
            )
        h = F.leaky_relu(self.conv1(h), 0.2)
        h = F.leaky_relu(self.norm2(self.conv2(h)), 0.2)
        h = F.leaky_relu(self.norm3(self.conv3(h)), 0.2)
        logit = self.head(h).reshape(h.shape[0])
        return logit.squeeze(0) if single else logit


def _first_nonfinite_layer(model: UnetGenerator, x: torch.Tensor, gen) -> str:
    # Diagnostic replay; only runs on the failure path.
    with torch.no_grad():
        h = x.unsqueeze(0) if x.dim() == 3 else x
        skips = []
        for i, (conv, norm) in enumerate(zip(model.enc, model.enc_norm)):
            h = F.leaky_relu(norm(conv(h)), 0.2)
            if not torch.isfinite(h).all():
                return f"enc.{i}"
            skips.append(h)
        depth = model.arch.depth
        for i, (deconv, norm) in enumerate(zip(model.dec, model.dec_norm)):
            inp = h if i == 0 else torch.cat([h, skips[depth - 1 - i]], dim=1)
            h = deconv(inp)
            h = torch.tanh(h) if i == depth - 1 else F.relu(norm(h))
            if not torch.isfinite(h).all():
                return f"dec.{i}"
    return "output"


def _init_params(model: nn.Module, gen: torch.Generator) -> None:
    # Conv weights ~ N(0, 0.02), norm gains ~ N(1, 0.02), biases zero;
    # iteration order is the registration order, so init is reproducible.
    for name, param in model.named_parameters():
        with torch.no_grad():
            if name.endswith("weight") and param.dim() == 1:
                param.normal_(1.0, 0.02, generator=gen)
            elif name.endswith("weight"):
                param.normal_(0.0, 0.02, generator=gen)
            else:
                param.zero_()


def init_generator(arch: GeneratorArch, seed: int) -> UnetGenerator:
    model = UnetGenerator(arch)
    _init_params(model, torch.Generator().manual_seed(mix64(seed, "init-generator")))
    return model


def init_discriminator(arch: DiscriminatorArch, seed: int) -> ConvDiscriminator:
    model = ConvDiscriminator(arch)
    _init_params(model, torch.Generator().manual_seed(mix64(seed, "init-discriminator")))
    return model


def gen_forward(g, x: torch.Tensor, rng: RngState) -> torch.Tensor:
    """Query a generator-like object (raw model, black-box wrapper, or
    output-noise wrapper) for one translation of `x`."""
    return g.generate(x, rng)


def disc_forward(d: ConvDiscriminator, candidate: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Probability that `candidate` is the real translation of `x`, clamped
    to [eps, 1-eps] so downstream logs are finite."""
    if candidate.shape[-2:] != x.shape[-2:]:
        raise ConfigError(
            f"candidate and conditioning input disagree on size: "
            f"{tuple(candidate.shape)} vs {tuple(x.shape)}"
        )
    joint = torch.cat([candidate, x], dim=-3)
    logit = d(joint)
    return torch.sigmoid(logit).clamp(PROB_EPS, 1.0 - PROB_EPS)


def grad(loss: torch.Tensor, params: Iterable[torch.Tensor]) -> list[torch.Tensor]:
    """Reverse-mode gradients of a scalar loss w.r.t. `params`."""
    params = list(params)
    if loss.numel() != 1:
        raise ConfigError("grad expects a scalar loss")
    return list(torch.autograd.grad(loss, params))


def params_digest(model: nn.Module) -> str:
    """Content hash of all parameters; equal only for bitwise-equal models."""
    import hashlib

    h = hashlib.sha256()
    for name, param in sorted(model.named_parameters()):
        h.update(name.encode())
        h.update(param.detach().cpu().numpy().astype("<f8").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Checkpoint format: manifest.json + one little-endian float32 file per tensor.
# ---------------------------------------------------------------------------


def save_checkpoint(model: UnetGenerator | ConvDiscriminator, path: str | Path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    if isinstance(model, UnetGenerator):
        kind = "generator"
        extra = {"dropout_active": model.dropout_active}
    elif isinstance(model, ConvDiscriminator):
        kind = "discriminator"
        extra = {}
    else:
        raise ConfigError(f"cannot checkpoint object of type {type(model).__name__}")
    tensors = []
    for name, param in model.named_parameters():
        data = param.detach().cpu().numpy().astype("<f4")
        (root / f"{name}.bin").write_bytes(data.tobytes())
        tensors.append({"name": name, "shape": list(param.shape), "dtype": "float32"})
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "kind": kind,
        "arch": asdict(model.arch),
        "tensors": tensors,
        **extra,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(path: str | Path) -> UnetGenerator | ConvDiscriminator:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"missing checkpoint manifest: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version: {manifest.get('format_version')}")
    kind = manifest.get("kind")
    if kind == "generator":
        model: UnetGenerator | ConvDiscriminator = UnetGenerator(GeneratorArch(**manifest["arch"]))
        model.dropout_active = bool(manifest.get("dropout_active", True))
    elif kind == "discriminator":
        model = ConvDiscriminator(DiscriminatorArch(**manifest["arch"]))
    else:
        raise DataError(f"unknown checkpoint kind: {kind!r}")
    params = dict(model.named_parameters())
    listed = {t["name"] for t in manifest["tensors"]}
    if listed != set(params):
        raise DataError("checkpoint tensor names do not match the architecture")
    for entry in manifest["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        raw = (root / f"{name}.bin").read_bytes()
        arr = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        if tuple(params[name].shape) != shape:
            raise DataError(f"tensor {name} has shape {shape}, expected {tuple(params[name].shape)}")
        with torch.no_grad():
            params[name].copy_(torch.from_numpy(arr))
    return model
