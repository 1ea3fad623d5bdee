"""Feature nets, matching nets and the four stereo architecture variants.

Pipeline: a Siamese feature net maps each image to 1/3-resolution features, a
concatenation volume is built over ``dmax // 3`` disparity bins, a U-shaped
matching net regularizes it into a cost volume and soft-argmax projects that
to disparity, which is upsampled back to full resolution.

=========  ==================  ==================
variant    feature net         matching net
=========  ==================  ==================
baseline   CNN                 CNN
type1      transformer         CNN   (the hybrid)
type2      CNN                 transformer
type3      transformer         transformer
=========  ==================  ==================
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import (
    BlockConfig,
    PatchEmbed,
    PatchExpand3d,
    PatchMerging3d,
    TransformerBlock,
    check_finite,
    init_transformer_weights,
)
from .cost_volume import build_feature_volume, soft_argmax_projection, upsample_disparity
from .errors import ConfigurationError

VARIANTS = {
    "baseline": ("cnn", "cnn"),
    "type1": ("transformer", "cnn"),
    "type2": ("cnn", "transformer"),
    "type3": ("transformer", "transformer"),
}
ALIASES = {"hybrid": "type1", "hybridstereonet": "type1", "leastereo": "baseline"}

# Reported parameter counts at 504x840 input, millions.
REFERENCE_PARAMS_M = {"baseline": 1.81, "type2": 9.54, "type3": 9.62, "type1": 1.89}

FEATURE_STRIDE = 3


def canonical_variant(name: str) -> str:
    key = name.lower().replace("-", "").replace("_", "").replace(" ", "")
    key = ALIASES.get(key, key)
    if key not in VARIANTS:
        raise ConfigurationError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
    return key


@dataclass
class FeatureNetConfig:
    kind: str = "transformer"
    layers: int = 6
    channels: int = 32
    window: int = 7
    mlp_ratio: float = 4.0


@dataclass
class MatchNetConfig:
    kind: str = "cnn"
    layers: int = 12
    stages: int = 3
    channels: int = 16
    window: int = 4
    mlp_ratio: float = 4.0

    @property
    def blocks_per_stage(self) -> int:
        if self.stages < 1 or self.layers % (2 * self.stages):
            raise ConfigurationError(
                f"{self.layers} matching layers cannot be split over {self.stages} encoder/decoder stages"
            )
        return self.layers // (2 * self.stages)


@dataclass
class ModelConfig:
    """Everything needed to rebuild a :class:`StereoModel`."""

    variant: str = "type1"
    dmax: int = 192
    feature_channels: int = 32
    feature_layers: int = 6
    feature_window: int = 7
    match_channels: int = 16
    match_layers: int = 12
    match_stages: int = 3
    match_window: int = 4
    mlp_ratio: float = 4.0
    seed: int = 0

    def __post_init__(self) -> None:
        self.variant = canonical_variant(self.variant)
        if self.dmax < FEATURE_STRIDE:
            raise ConfigurationError(f"dmax must be >= {FEATURE_STRIDE}, got {self.dmax}")

    @property
    def d_bins(self) -> int:
        return self.dmax // FEATURE_STRIDE

    def feature_config(self) -> FeatureNetConfig:
        return FeatureNetConfig(
            kind=VARIANTS[self.variant][0],
            layers=self.feature_layers,
            channels=self.feature_channels,
            window=self.feature_window,
            mlp_ratio=self.mlp_ratio,
        )

    def match_config(self) -> MatchNetConfig:
        return MatchNetConfig(
            kind=VARIANTS[self.variant][1],
            layers=self.match_layers,
            stages=self.match_stages,
            channels=self.match_channels,
            window=self.match_window,
            mlp_ratio=self.mlp_ratio,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> ModelConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


def toy_config(variant: str = "type1", **overrides) -> ModelConfig:
    """Small configuration used by tests and desk-scale experiments."""
    base = dict(
        variant=variant,
        dmax=24,
        feature_channels=8,
        feature_layers=2,
        feature_window=4,
        match_channels=8,
        match_layers=6,
        match_stages=3,
        match_window=2,
    )
    base.update(overrides)
    return ModelConfig(**base)


# -- CNN components ---------------------------------------------------------


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(1, channels)


class ConvNormAct(nn.Sequential):
    def __init__(self, cin: int, cout: int, kernel: int = 3, stride: int = 1, padding: int = 1, dims: int = 2):
        conv = nn.Conv2d if dims == 2 else nn.Conv3d
        super().__init__(
            conv(cin, cout, kernel, stride=stride, padding=padding, bias=False),
            _norm(cout),
            nn.ReLU(inplace=True),
        )


class ResidualConv(nn.Module):
    """``relu(x + norm(conv(x)))`` with a 3x3 (or 3x3x3) kernel."""

    def __init__(self, channels: int, dims: int = 2) -> None:
        super().__init__()
        conv = nn.Conv2d if dims == 2 else nn.Conv3d
        self.conv = conv(channels, channels, 3, padding=1, bias=False)
        self.norm = _norm(channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(x + self.norm(self.conv(x)))


def _kaiming_init(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Conv3d)):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.GroupNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def _pad_to_multiple(x: torch.Tensor, multiple: int, mode: str = "reflect") -> torch.Tensor:
    h, w = x.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if not (ph or pw):
        return x
    if mode == "reflect" and (ph >= h or pw >= w):
        mode = "replicate"
    return F.pad(x, (0, pw, 0, ph), mode=mode)


class CFeatureNet(nn.Module):
    """Convolutional feature extractor with output stride 3.

    A full-resolution stem, one stride-3 convolution and ``layers - 2``
    residual convolutions. Input ``(B, 3, H, W)``, output
    ``(B, C, ceil(H/3), ceil(W/3))``.
    """

    def __init__(self, cfg: FeatureNetConfig, in_channels: int = 3) -> None:
        super().__init__()
        if cfg.layers < 2:
            raise ConfigurationError("CNN feature net needs at least 2 layers")
        c = cfg.channels
        self.stem = ConvNormAct(in_channels, c // 2)
        self.down = ConvNormAct(c // 2, c, kernel=3, stride=FEATURE_STRIDE, padding=0)
        self.blocks = nn.Sequential(*[ResidualConv(c) for _ in range(cfg.layers - 2)])
        _kaiming_init(self)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        x = self.stem(img)
        x = _pad_to_multiple(x, FEATURE_STRIDE)
        return self.blocks(self.down(x))


class TFeatureNet(nn.Module):
    """Transformer feature extractor: 3x3 patch embedding then window blocks.

    Blocks alternate between plain and half-window shifted windows.
    """

    def __init__(self, cfg: FeatureNetConfig, in_channels: int = 3) -> None:
        super().__init__()
        c = cfg.channels
        self.embed = PatchEmbed(in_channels, FEATURE_STRIDE, c, rank=2)
        self.blocks = nn.Sequential(
            *[
                TransformerBlock(c, BlockConfig.alternating(cfg.window, i, 2, mlp_ratio=cfg.mlp_ratio))
                for i in range(cfg.layers)
            ]
        )
        self.norm = nn.LayerNorm(c)
        init_transformer_weights(self)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        x = self.norm(self.blocks(self.embed(img)))
        return x.permute(0, 3, 1, 2).contiguous()


def build_cfeaturenet(cfg: FeatureNetConfig) -> CFeatureNet:
    return CFeatureNet(cfg)


def build_tfeaturenet(cfg: FeatureNetConfig) -> TFeatureNet:
    return TFeatureNet(cfg)


def _pad_volume(x: torch.Tensor, multiple: int) -> torch.Tensor:
    pads = []
    for n in reversed(x.shape[2:]):
        pads += [0, (-n) % multiple]
    if not any(pads):
        return x
    return F.pad(x, pads, mode="replicate")


class CMatchNet(nn.Module):
    """3D convolutional U-net regularizing a ``(B, 2C, D, H, W)`` volume.

    Each encoder stage is a stride-2 convolution (halving D, H and W, doubling
    channels) followed by residual convolutions; decoder stages mirror it with
    trilinear upsampling plus convolution, add the matching encoder output and
    run residual convolutions. Returns a ``(B, D, H, W)`` cost volume.
    """

    def __init__(self, cfg: MatchNetConfig, in_channels: int) -> None:
        super().__init__()
        self.stages = cfg.stages
        per_stage = cfg.blocks_per_stage
        c = cfg.channels
        self.stem = ConvNormAct(in_channels, c, dims=3)
        self.down = nn.ModuleList()
        self.encoder = nn.ModuleList()
        for s in range(cfg.stages):
            cin, cout = c * 2**s, c * 2 ** (s + 1)
            self.down.append(ConvNormAct(cin, cout, stride=2, dims=3))
            self.encoder.append(nn.Sequential(*[ResidualConv(cout, dims=3) for _ in range(per_stage)]))
        self.up = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for s in reversed(range(cfg.stages)):
            cin, cout = c * 2 ** (s + 1), c * 2**s
            self.up.append(ConvNormAct(cin, cout, dims=3))
            self.decoder.append(nn.Sequential(*[ResidualConv(cout, dims=3) for _ in range(per_stage)]))
        self.head = nn.Conv3d(c, 1, 3, padding=1)
        _kaiming_init(self)

    def forward(self, volume: torch.Tensor) -> torch.Tensor:
        d, h, w = volume.shape[2:]
        x = self.stem(_pad_volume(volume, 2**self.stages))
        skips = [x]
        for down, enc in zip(self.down, self.encoder):
            x = enc(down(x))
            skips.append(x)
        skips.pop()
        for up, dec in zip(self.up, self.decoder):
            skip = skips.pop()
            x = F.interpolate(x, size=skip.shape[2:], mode="trilinear", align_corners=False)
            x = dec(up(x) + skip)
        return self.head(x)[:, 0, :d, :h, :w]

    def stage_shapes(self, volume_shape) -> list[tuple[int, ...]]:
        """Encoder ``(C, D, H, W)`` shapes for a ``(B, 2C, D, H, W)`` input, stem first."""
        x = torch.zeros(volume_shape)
        shapes = []
        with torch.no_grad():
            x = self.stem(_pad_volume(x, 2**self.stages))
            shapes.append(tuple(x.shape[1:]))
            for down, enc in zip(self.down, self.encoder):
                x = enc(down(x))
                shapes.append(tuple(x.shape[1:]))
        return shapes


class TMatchNet(nn.Module):
    """3D window-transformer U-net over the disparity volume.

    1x1x1 patch embedding, then per encoder stage a patch merge (halving D,
    H, W and doubling channels) and window blocks; decoder stages expand,
    add the mirrored encoder output and run window blocks. A linear head maps
    tokens to one matching cost each.
    """

    def __init__(self, cfg: MatchNetConfig, in_channels: int) -> None:
        super().__init__()
        self.stages = cfg.stages
        per_stage = cfg.blocks_per_stage
        c = cfg.channels

        def blocks(dim: int) -> nn.Sequential:
            return nn.Sequential(
                *[
                    TransformerBlock(dim, BlockConfig.alternating(cfg.window, i, 3, mlp_ratio=cfg.mlp_ratio))
                    for i in range(per_stage)
                ]
            )

        self.embed = PatchEmbed(in_channels, 1, c, rank=3)
        self.down = nn.ModuleList()
        self.encoder = nn.ModuleList()
        for s in range(cfg.stages):
            self.down.append(PatchMerging3d(c * 2**s))
            self.encoder.append(blocks(c * 2 ** (s + 1)))
        self.up = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for s in reversed(range(cfg.stages)):
            self.up.append(PatchExpand3d(c * 2 ** (s + 1)))
            self.decoder.append(blocks(c * 2**s))
        self.norm = nn.LayerNorm(c)
        self.head = nn.Linear(c, 1)
        init_transformer_weights(self)

    def forward(self, volume: torch.Tensor) -> torch.Tensor:
        d, h, w = volume.shape[2:]
        x = self.embed(_pad_volume(volume, 2**self.stages))
        skips = [x]
        for down, enc in zip(self.down, self.encoder):
            x = enc(down(x))
            skips.append(x)
        skips.pop()
        for up, dec in zip(self.up, self.decoder):
            skip = skips.pop()
            x = up(x)
            x = x[:, : skip.shape[1], : skip.shape[2], : skip.shape[3]]
            x = dec(x + skip)
        cost = self.head(self.norm(x))[..., 0]
        return cost[:, :d, :h, :w]

    def stage_shapes(self, volume_shape) -> list[tuple[int, ...]]:
        """Encoder ``(C, D, H, W)`` shapes for a ``(B, 2C, D, H, W)`` input, embedding first."""
        x = torch.zeros(volume_shape)
        shapes = []
        with torch.no_grad():
            x = self.embed(_pad_volume(x, 2**self.stages))
            shapes.append((x.shape[-1],) + tuple(x.shape[1:-1]))
            for down, enc in zip(self.down, self.encoder):
                x = enc(down(x))
                shapes.append((x.shape[-1],) + tuple(x.shape[1:-1]))
        return shapes


def build_cmatchnet(cfg: MatchNetConfig, in_channels: int) -> CMatchNet:
    return CMatchNet(cfg, in_channels)


def build_tmatchnet(cfg: MatchNetConfig, in_channels: int) -> TMatchNet:
    return TMatchNet(cfg, in_channels)


class StereoModel(nn.Module):
    """Image pair to full-resolution left disparity.

    ``forward`` takes ``(B, 3, H, W)`` left/right images in ``[0, 1]`` and
    returns ``(B, H, W)`` disparities in pixels, bounded by ``[0, dmax]``.
    The same feature net instance processes both views.
    """

    # image side lengths are padded to this so every stage divides evenly
    PAD_MULTIPLE = FEATURE_STRIDE * 8

    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.config = config
        fcfg, mcfg = config.feature_config(), config.match_config()
        self.feature_net = build_tfeaturenet(fcfg) if fcfg.kind == "transformer" else build_cfeaturenet(fcfg)
        volume_channels = 2 * fcfg.channels
        if mcfg.kind == "transformer":
            self.match_net = build_tmatchnet(mcfg, volume_channels)
        else:
            self.match_net = build_cmatchnet(mcfg, volume_channels)

    @property
    def dmax(self) -> int:
        return self.config.dmax

    def features(self, left: torch.Tensor, right: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        both = torch.cat([left, right], dim=0) * 2.0 - 1.0
        feats = self.feature_net(both)
        return feats[: left.shape[0]], feats[left.shape[0] :]

    def forward(self, left: torch.Tensor, right: torch.Tensor) -> torch.Tensor:
        if left.shape != right.shape:
            raise ValueError(f"left {tuple(left.shape)} and right {tuple(right.shape)} differ")
        h, w = left.shape[-2:]
        left = _pad_to_multiple(left, self.PAD_MULTIPLE)
        right = _pad_to_multiple(right, self.PAD_MULTIPLE)
        f_left, f_right = self.features(left, right)
        volume = build_feature_volume(f_left, f_right, self.config.d_bins)
        cost = check_finite(self.match_net(volume), "matching net")
        disp = soft_argmax_projection(cost)
        disp = upsample_disparity(disp, FEATURE_STRIDE, size=left.shape[-2:])
        return disp[:, :h, :w]


def assemble_variant(spec: str | ModelConfig, dmax: int | None = None, **overrides) -> StereoModel:
    """Build a seeded :class:`StereoModel` for a variant name or full config."""
    if isinstance(spec, ModelConfig):
        config = dataclasses.replace(spec, **overrides) if overrides else spec
        if dmax is not None:
            config = dataclasses.replace(config, dmax=dmax)
    else:
        if dmax is not None:
            overrides["dmax"] = dmax
        config = ModelConfig(variant=spec, **overrides)
    with torch.random.fork_rng():
        torch.manual_seed(config.seed)
        return StereoModel(config)


def count_parameters(model: nn.Module) -> int:
    """Trainable scalars; shared (Siamese) modules are counted once."""
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def parameter_report(**overrides) -> list[dict]:
    """Parameter counts of all four variants at the reference configuration.

    Our CNN components are plain residual stacks rather than searched cells,
    so the reference numbers are listed for comparison only.
    """
    rows = []
    for variant in ("baseline", "type1", "type2", "type3"):
        model = assemble_variant(variant, **overrides)
        count = count_parameters(model)
        rows.append(
            {
                "variant": variant,
                "params": count,
                "params_m": round(count / 1e6, 3),
                "reference_params_m": REFERENCE_PARAMS_M[variant],
            }
        )
    return rows


def format_parameter_report(rows: list[dict]) -> str:
    lines = [f"{'variant':<10}{'ours [M]':>10}{'reported [M]':>14}"]
    for r in rows:
        lines.append(f"{r['variant']:<10}{r['params_m']:>10.3f}{r['reference_params_m']:>14.2f}")
    lines.append("reported values come from searched CNN cells; an exact match is not expected")
    return "\n".join(lines)
