"""
Residual encoder / dual-decoder generator.

The encoder maps an image to a latent code; one decoder produces the
per-channel magnitude field, the other a single-channel soft location mask.
Both decoders share the same layout and differ only in the width of the
output layer.
"""

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import NamedTuple

import torch
from torch import nn

from . import quantize

QUANTIZERS = ("random", "ste")


@dataclass
class GeneratorConfig:
    input_channels: int = 3
    base_width: int = 64
    num_residual_blocks: int = 6
    num_down: int = 3
    num_up: int = 3
    epsilon: float = 255.0  # 0-255 scale
    norm: str = "instance"
    decouple: bool = True

    def validate(self):
        if self.num_down != self.num_up:
            raise ValueError("num_down must equal num_up")
        if self.num_down < 1:
            raise ValueError("num_down must be at least 1")
        if self.base_width < 8:
            raise ValueError("base_width must be at least 8")
        if self.num_residual_blocks < 0:
            raise ValueError("num_residual_blocks must be non-negative")
        if self.input_channels < 1:
            raise ValueError("input_channels must be positive")
        if self.norm not in ("instance", "batch", "none"):
            raise ValueError(f"unknown norm {self.norm!r}")
        quantize.unit_epsilon(self.epsilon)
        return self


class PerturbationTriple(NamedTuple):
    r: torch.Tensor       # magnitude field, (B, C, H, W)
    soft: torch.Tensor    # soft mask, (B, 1, H, W)
    mask: torch.Tensor    # binary (infer) or partially soft (train) mask
    gate: torch.Tensor | None = None

    @property
    def delta(self):
        return self.r * self.mask


def _norm(kind, channels):
    if kind == "instance":
        return nn.InstanceNorm2d(channels, affine=True)
    if kind == "batch":
        return nn.BatchNorm2d(channels)
    return nn.Identity()


class ResidualBlock(nn.Module):
    def __init__(self, channels, norm):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1), nn.Conv2d(channels, channels, 3), _norm(norm, channels),
            nn.ReLU(True),
            nn.ReflectionPad2d(1), nn.Conv2d(channels, channels, 3), _norm(norm, channels),
        )

    def forward(self, x):
        return x + self.body(x)


def _decoder(cfg, out_channels):
    layers = []
    width = cfg.base_width * 2 ** cfg.num_up
    for _ in range(cfg.num_up):
        layers += [
            nn.ConvTranspose2d(width, width // 2, 3, stride=2, padding=1, output_padding=1),
            _norm(cfg.norm, width // 2), nn.ReLU(True),
        ]
        width //= 2
    layers += [nn.ReflectionPad2d(3), nn.Conv2d(width, out_channels, 7)]
    return nn.Sequential(*layers)


class SparseGenerator(nn.Module):
    """Maps clean images to a :class:`PerturbationTriple`.

    With ``cfg.decouple = False`` only the magnitude decoder is built and the
    mask is identically one, so the perturbation is the dense field itself.
    """

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg.validate()
        w = cfg.base_width
        enc = [nn.ReflectionPad2d(3), nn.Conv2d(cfg.input_channels, w, 7),
               _norm(cfg.norm, w), nn.ReLU(True)]
        for _ in range(cfg.num_down):
            enc += [nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), _norm(cfg.norm, 2 * w),
                    nn.ReLU(True)]
            w *= 2
        enc += [ResidualBlock(w, cfg.norm) for _ in range(cfg.num_residual_blocks)]
        self.encoder = nn.Sequential(*enc)
        self.magnitude_decoder = _decoder(cfg, cfg.input_channels)
        self.mask_decoder = _decoder(cfg, 1) if cfg.decouple else None

    @property
    def epsilon(self):
        return quantize.unit_epsilon(self.cfg.epsilon)

    def check_input(self, x):
        if x.dim() != 4 or x.shape[1] != self.cfg.input_channels:
            raise ValueError(f"expected (B, {self.cfg.input_channels}, H, W) input, "
                             f"got {tuple(x.shape)}")
        step = 2 ** self.cfg.num_down
        if x.shape[2] % step or x.shape[3] % step:
            raise ValueError(f"spatial size {tuple(x.shape[2:])} not divisible by {step}")

    def heads(self, x):
        """Return ``(r, soft)`` without any quantization."""
        self.check_input(x)
        z = self.encoder(2 * x - 1)
        raw = self.magnitude_decoder(z)
        if not torch.isfinite(raw).all():
            raise FloatingPointError("non-finite activations in the magnitude decoder")
        r = quantize.project_magnitude(raw, self.epsilon)
        if self.mask_decoder is None:
            soft = torch.ones_like(r[:, :1])
        else:
            logits = self.mask_decoder(z)
            if not torch.isfinite(logits).all():
                raise FloatingPointError("non-finite activations in the mask decoder")
            soft = torch.sigmoid(logits)
        return r, soft

    def forward(self, x, mode="infer", p=0.5, tau=0.5, generator=None, quantizer="random"):
        r, soft = self.heads(x)
        if self.mask_decoder is None:
            return PerturbationTriple(r, soft, soft, None)
        if mode == "infer":
            return PerturbationTriple(r, soft, quantize.hard_quantize(soft, tau), None)
        if mode != "train":
            raise ValueError(f"unknown mode {mode!r}")
        if quantizer == "ste":
            return PerturbationTriple(r, soft, quantize.ste_quantize(soft, tau), None)
        if quantizer != "random":
            raise ValueError(f"unknown quantizer {quantizer!r}")
        mask, gate = quantize.random_quantize(soft, tau, p, generator=generator)
        return PerturbationTriple(r, soft, mask, gate)

    def attack(self, x, tau=0.5):
        """Inference-mode adversarial images (no gradient)."""
        with torch.no_grad():
            t = self(x, mode="infer", tau=tau)
            return quantize.apply_perturbation(x, t.r, t.mask)


def init_weights(model: nn.Module, seed: int, std: float = 0.02):
    g = torch.Generator().manual_seed(seed)
    for mod in model.modules():
        if isinstance(mod, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(mod.weight, 0.0, std, generator=g)
            if mod.bias is not None:
                nn.init.zeros_(mod.bias)
        elif isinstance(mod, (nn.InstanceNorm2d, nn.BatchNorm2d)) and mod.affine:
            nn.init.normal_(mod.weight, 1.0, std, generator=g)
            nn.init.zeros_(mod.bias)


def build_generator(cfg: GeneratorConfig, seed: int = 0) -> SparseGenerator:
    model = SparseGenerator(cfg)
    init_weights(model, seed)
    return model


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def generator_forward(G, x, mode="infer", p=0.5, tau=0.5, generator=None, quantizer="random"):
    return G(x, mode=mode, p=p, tau=tau, generator=generator, quantizer=quantizer)


# checkpoints ---------------------------------------------------------------

WEIGHTS_NAME = "generator.pt"
MANIFEST_NAME = "manifest.json"


def save_checkpoint(G, directory, manifest: dict, optimizer=None):
    """Write the weights plus a JSON manifest describing how they were produced."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    state = {"model": G.state_dict()}
    if optimizer is not None:
        state["optimizer"] = optimizer.state_dict()
    torch.save(state, directory / WEIGHTS_NAME)
    body = {"generator": asdict(G.cfg), "parameter_count": parameter_count(G), **manifest}
    (directory / MANIFEST_NAME).write_text(json.dumps(body, indent=2, sort_keys=True))
    return directory


class ManifestMismatch(ValueError):
    pass


def load_checkpoint(directory, expected: dict | None = None):
    """Load a generator checkpoint.

    ``expected`` maps manifest keys to required values; any disagreement
    raises :class:`ManifestMismatch`. Returns ``(model, manifest, state)``
    where ``state`` still holds the optimizer entry if one was saved.
    """
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST_NAME).read_text())
    for key, want in (expected or {}).items():
        have = manifest.get(key)
        if key == "generator":
            have = {f.name: have.get(f.name) for f in fields(GeneratorConfig)} if have else None
            want = asdict(want) if isinstance(want, GeneratorConfig) else want
        if have != want:
            raise ManifestMismatch(f"manifest field {key!r} is {have!r}, expected {want!r}")
    cfg = GeneratorConfig(**manifest["generator"])
    model = SparseGenerator(cfg)
    state = torch.load(directory / WEIGHTS_NAME, map_location="cpu", weights_only=True)
    model.load_state_dict(state["model"])
    return model, manifest, state
