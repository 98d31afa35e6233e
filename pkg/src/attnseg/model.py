"""Network assembly: a five-level U-Net with spatial, channel and scale attention.

Level 1 is the full-resolution stage (16 channels by default), level 5 the
bottleneck (256). Attention names follow the depth order used for reporting:
``SA1`` is the bottleneck non-local block, ``SA2``–``SA4`` the skip gates of
levels 4, 3 and 2, and ``CA1``–``CA4`` the decoder stages of levels 4 to 1.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Any

import numpy as np

from .attention import ChannelAttention, DualPathGate, NonLocalBlock, ScaleAttention
from .errors import ConfigError, ContractError, DimensionError
from .layers import Conv2d, ConvBNReLU, Module, bilinear_resize, maxpool2x2, parameter_count
from .tensor import Tensor, as_tensor, concat_channels, no_grad

SA_VARIANTS = ("Js-A", "s-AG", "t-AG", "n-Local")
CA_PLACEMENTS = ("Enc", "Dec", "EncDec")
LEVELS = 5


@dataclass
class ModelConfig:
    in_channels: int = 3
    num_classes: int = 2
    base_channels: int = 16
    enable_sa: bool = True
    enable_ca: bool = True
    enable_la: bool = True
    sa_variant: str = "Js-A"
    ca_placement: str = "Dec"
    la_scales: int = 4
    ca_use_max: bool = True
    gamma_star_per_scale: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.in_channels < 1 or self.num_classes < 1:
            raise ConfigError("in_channels and num_classes must be positive")
        if self.base_channels < 2 or self.base_channels % 2:
            raise ConfigError(f"base_channels must be an even integer >= 2, got {self.base_channels}")
        if self.sa_variant not in SA_VARIANTS:
            raise ConfigError(f"sa_variant must be one of {SA_VARIANTS}, got {self.sa_variant!r}")
        if self.ca_placement not in CA_PLACEMENTS:
            raise ConfigError(f"ca_placement must be one of {CA_PLACEMENTS}, got {self.ca_placement!r}")
        if self.la_scales not in (2, 3, 4, 5):
            raise ConfigError(f"la_scales must be in 2..5, got {self.la_scales}")

    @property
    def widths(self) -> list[int]:
        return [self.base_channels * 2**i for i in range(LEVELS)]

    @property
    def divisor(self) -> int:
        return 2 ** (LEVELS - 1)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def baseline(cls, **kw) -> "ModelConfig":
        return cls(enable_sa=False, enable_ca=False, enable_la=False, **kw)


class ConvBlock(Module):
    """Two 3×3 conv + BN + ReLU layers."""

    def __init__(self, cin, cout, rng):
        self.layers = [ConvBNReLU(cin, cout, rng=rng), ConvBNReLU(cout, cout, rng=rng)]

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class ExpandedBlock(Module):
    """Three 3×3 conv + BN + ReLU layers widening to 2×cout in the middle.

    Used wherever channel attention is placed.
    """

    def __init__(self, cin, cout, rng):
        self.layers = [
            ConvBNReLU(cin, cout, rng=rng),
            ConvBNReLU(cout, 2 * cout, rng=rng),
            ConvBNReLU(2 * cout, cout, rng=rng),
        ]

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class CANet(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        cfg = self.config = config
        w = cfg.widths
        ca_enc = cfg.enable_ca and cfg.ca_placement in ("Enc", "EncDec")
        ca_dec = cfg.enable_ca and cfg.ca_placement in ("Dec", "EncDec")

        self.encoder = []
        self.encoder_ca = []
        prev = cfg.in_channels
        for level, width in enumerate(w, start=1):
            if ca_enc and level < LEVELS:
                self.encoder.append(ExpandedBlock(prev, width, rng))
                self.encoder_ca.append(ChannelAttention(width, use_max=cfg.ca_use_max, rng=rng))
            else:
                self.encoder.append(ConvBlock(prev, width, rng))
            prev = width

        self.nonlocal_block = None
        if cfg.enable_sa and cfg.sa_variant in ("Js-A", "n-Local"):
            self.nonlocal_block = NonLocalBlock(w[-1], rng=rng)

        gated: tuple[int, ...] = ()
        if cfg.enable_sa and cfg.sa_variant == "Js-A":
            gated = (4, 3, 2)
        elif cfg.enable_sa and cfg.sa_variant in ("s-AG", "t-AG"):
            gated = (4, 3, 2, 1)
        self.gated_levels = gated
        pathways = 1 if cfg.sa_variant == "s-AG" else 2

        self.gates = []
        self.decoder_ca = []
        self.decoder = []
        up = w[-1]
        for level in range(LEVELS - 1, 0, -1):
            skip = w[level - 1]
            if level in gated:
                self.gates.append(DualPathGate(skip, up, skip // 2, pathways=pathways, rng=rng))
                skip = skip // 2
            cat = skip + up
            if ca_dec:
                self.decoder_ca.append(ChannelAttention(cat, use_max=cfg.ca_use_max, rng=rng))
                self.decoder.append(ExpandedBlock(cat, w[level - 1], rng))
            else:
                self.decoder.append(ConvBlock(cat, w[level - 1], rng))
            up = w[level - 1]

        self.scale_attention = None
        head_in = w[0]
        if cfg.enable_la:
            self.scale_attention = ScaleAttention(
                w[: cfg.la_scales], gamma_star_per_scale=cfg.gamma_star_per_scale, rng=rng
            )
            head_in = self.scale_attention.out_channels
        self.head = Conv2d(head_in, cfg.num_classes, 1, rng=rng)
        self.last_attention: dict[str, Tensor] | None = None

    def forward(self, x) -> tuple[Tensor, dict[str, Tensor]]:
        x = as_tensor(x)
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise DimensionError(f"expected N×{cfg.in_channels}×H×W input, got {x.shape}")
        h, wd = x.shape[2:]
        if h % cfg.divisor or wd % cfg.divisor:
            raise DimensionError(f"input extents {h}×{wd} must be divisible by {cfg.divisor}")

        att: dict[str, Tensor] = {}
        skips = []
        feat = x
        enc_names = _enc_ca_names(cfg)
        for level, block in enumerate(self.encoder, start=1):
            if level > 1:
                feat = maxpool2x2(feat)
            feat = block(feat)
            if level <= len(self.encoder_ca):
                feat, beta = self.encoder_ca[level - 1](feat)
                att[enc_names[level - 1]] = beta
            skips.append(feat)

        if self.nonlocal_block is not None:
            feat, alpha1 = self.nonlocal_block(feat)
            att["SA1"] = alpha1
        decoded = {LEVELS: feat}

        gate_iter = iter(self.gates)
        sa_index = 2 if cfg.sa_variant == "Js-A" else 1
        for stage, level in enumerate(range(LEVELS - 1, 0, -1)):
            skip = skips[level - 1]
            x_high = bilinear_resize(feat, *skip.shape[2:])
            if level in self.gated_levels:
                skip, alphas = next(gate_iter)(skip, x_high)
                att[f"SA{sa_index}"] = concat_channels(alphas)
                sa_index += 1
            cat = concat_channels([skip, x_high])
            if self.decoder_ca:
                cat, beta = self.decoder_ca[stage](cat)
                att[f"CA{stage + 1}"] = beta
            feat = self.decoder[stage](cat)
            decoded[level] = feat

        if self.scale_attention is not None:
            feats = [decoded[s] for s in range(1, cfg.la_scales + 1)]
            feat, gamma, gamma_star = self.scale_attention(feats, (h, wd))
            att["LA.gamma"] = gamma
            att["LA.gamma_star"] = gamma_star
        logits = self.head(feat)
        self.last_attention = att
        return logits, att

    def module_parameter_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for name, child in self.children():
            counts[name] = parameter_count(child)
        return counts


def _enc_ca_names(cfg: ModelConfig) -> list[str]:
    prefix = "CAenc" if cfg.ca_placement == "EncDec" else "CA"
    # depth order: the deepest CA-equipped encoder stage is number 1
    return [f"{prefix}{LEVELS - level}" for level in range(1, LEVELS)]


def build(config: ModelConfig | None = None, seed: int = 0) -> CANet:
    """Construct the attention network (or an ablation variant) with deterministic initialisation."""
    config = config or ModelConfig()
    config.validate()
    return CANet(config, np.random.default_rng(seed))


def forward(model: CANet, x) -> tuple[Tensor, dict[str, Tensor]]:
    return model(x)


def predict_mask(logits) -> np.ndarray:
    """Per-pixel argmax over the class axis; ties go to the lower class index."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return arr.argmax(axis=1).astype(np.int64)


def predict(model: CANet, x) -> tuple[np.ndarray, dict[str, Tensor]]:
    with no_grad():
        logits, att = model(x)
    return predict_mask(logits), att


@dataclass
class AttentionMaps:
    """Detached attention coefficients from one forward pass.

    ``maps`` holds ``SA1`` (the N×HW×HW non-local affinity), ``SA2``–``SA4``
    (N×P×H×W gate maps, one channel per pathway), ``CA1``–``CA4`` (N×C×1×1)
    and ``LA`` (N×K×H×W pixel-wise scale weights γ·γ*). ``gamma`` is the
    N×K global scale weight vector.
    """

    maps: dict[str, np.ndarray] = field(default_factory=dict)
    gamma: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.maps)

    def __getitem__(self, key: str) -> np.ndarray:
        return self.maps[key]

    def __contains__(self, key: str) -> bool:
        return key in self.maps


def export_attention_maps(source) -> AttentionMaps:
    """Copy attention coefficients out of a completed forward pass.

    ``source`` is either a model (its most recent forward is used) or the
    attention dict returned by :meth:`CANet.forward`.
    """
    att = source.last_attention if isinstance(source, CANet) else source
    if att is None:
        raise ContractError("no forward pass has been run yet")
    out = AttentionMaps()
    for name, t in att.items():
        if name.startswith("LA."):
            continue
        out.maps[name] = t.data.copy()
    if "LA.gamma" in att:
        gamma = att["LA.gamma"].data
        gamma_star = att["LA.gamma_star"].data
        n, k = gamma.shape[:2]
        out.gamma = gamma.reshape(n, k).copy()
        out.maps["LA"] = gamma.reshape(n, k, 1, 1) * gamma_star
    return out

