"""U-Net assembly: MSEDA after each encoder conv stage, PCBAM on skip
connections, CAB after each decoder conv stage.
"""
from __future__ import annotations

import dataclasses
import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import CAB, DEFAULT_MAX_POSITIONS, MSEDA, PCBAM
from .errors import ConfigError, ShapeError

SCHEMA_VERSION = 1
WEIGHTS_FILE = "model.pt"
OPTIM_FILE = "optim.pt"
META_FILE = "meta.json"


@dataclass
class NetworkConfig:
    in_channels: int = 1
    base_channels: int = 16
    depth: int = 4
    # None -> [1, 2, 4, ..., 2**depth]
    channel_multipliers: list[int] | None = None
    # None -> the two deepest skip levels
    pcbam_levels: list[int] | None = None
    use_mseda: bool = True
    use_pcbam: bool = True
    use_cab: bool = True
    head_count: int = 3
    dilations: list[int] = field(default_factory=lambda: [1, 2, 3])
    pcbam_fusion: str = "sum"
    max_positions: int = DEFAULT_MAX_POSITIONS

    def __post_init__(self):
        if self.channel_multipliers is None:
            self.channel_multipliers = [2**k for k in range(self.depth + 1)]
        if self.pcbam_levels is None:
            self.pcbam_levels = list(range(max(self.depth - 2, 0), self.depth))
        self.channel_multipliers = [int(m) for m in self.channel_multipliers]
        self.pcbam_levels = sorted(int(k) for k in self.pcbam_levels)
        self.dilations = [int(r) for r in self.dilations]

    def validate(self) -> None:
        for name in ("in_channels", "base_channels", "depth", "head_count", "max_positions"):
            if getattr(self, name) < 1:
                raise ConfigError(f"network.{name} must be a positive integer, got {getattr(self, name)}")
        if len(self.channel_multipliers) != self.depth + 1:
            raise ConfigError(
                f"network.channel_multipliers needs depth + 1 = {self.depth + 1} entries, "
                f"got {len(self.channel_multipliers)}"
            )
        if any(m < 1 for m in self.channel_multipliers):
            raise ConfigError("network.channel_multipliers must all be positive")
        bad = [k for k in self.pcbam_levels if not 0 <= k < self.depth]
        if bad:
            raise ConfigError(f"network.pcbam_levels {bad} outside 0..{self.depth - 1}")
        if len(self.dilations) != self.head_count:
            raise ConfigError(
                f"network.dilations needs head_count = {self.head_count} entries, got {self.dilations}"
            )
        if self.pcbam_fusion not in ("sum", "multiply"):
            raise ConfigError(f"network.pcbam_fusion must be 'sum' or 'multiply', got {self.pcbam_fusion!r}")

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_multipliers]

    @property
    def divisor(self) -> int:
        return 2**self.depth

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "NetworkConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)


class ConvStage(nn.Sequential):
    """Two (3x3 conv, batch norm, GELU) layers."""

    def __init__(self, cin: int, cout: int):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=1),
            nn.BatchNorm2d(cout),
            nn.GELU(),
            nn.Conv2d(cout, cout, 3, padding=1),
            nn.BatchNorm2d(cout),
            nn.GELU(),
        )


class Up(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 1)

    def forward(self, x):
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return self.conv(x)


class MSCANet(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        ch = cfg.channels

        def mseda(c):
            return MSEDA(c, cfg.head_count, cfg.dilations) if cfg.use_mseda else nn.Identity()

        self.enc = nn.ModuleList()
        self.enc_attn = nn.ModuleList()
        self.skip_attn = nn.ModuleList()
        cin = cfg.in_channels
        for k in range(cfg.depth):
            self.enc.append(ConvStage(cin, ch[k]))
            self.enc_attn.append(mseda(ch[k]))
            if cfg.use_pcbam and k in cfg.pcbam_levels:
                self.skip_attn.append(PCBAM(ch[k], cfg.pcbam_fusion, cfg.max_positions))
            else:
                self.skip_attn.append(nn.Identity())
            cin = ch[k]
        self.bottleneck = ConvStage(ch[-2], ch[-1])
        self.bottleneck_attn = mseda(ch[-1])

        self.up = nn.ModuleList(Up(ch[k + 1], ch[k]) for k in range(cfg.depth))
        self.dec = nn.ModuleList(ConvStage(2 * ch[k], ch[k]) for k in range(cfg.depth))
        self.dec_attn = nn.ModuleList(
            CAB(ch[k]) if cfg.use_cab else nn.Identity() for k in range(cfg.depth)
        )
        self.head = nn.Conv2d(ch[0], 1, 1)

    def check_input(self, images: torch.Tensor) -> None:
        if images.dim() != 4 or images.shape[1] != self.cfg.in_channels:
            raise ShapeError(
                f"expected images of shape (B, {self.cfg.in_channels}, H, W), got {tuple(images.shape)}"
            )
        h, w = images.shape[-2:]
        m = self.cfg.divisor
        if h % m or w % m:
            raise ShapeError(f"input H, W = {h}, {w} must be divisible by 2**depth = {m}")

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        self.check_input(images)
        x = images
        skips = []
        for conv, attn, skip in zip(self.enc, self.enc_attn, self.skip_attn):
            x = attn(conv(x))
            skips.append(skip(x))
            x = F.max_pool2d(x, 2)
        x = self.bottleneck_attn(self.bottleneck(x))
        for k in reversed(range(self.cfg.depth)):
            x = self.up[k](x)
            x = self.dec[k](torch.cat([x, skips[k]], dim=1))
            x = self.dec_attn[k](x)
        return torch.sigmoid(self.head(x))


def _name_seed(seed: int, name: str) -> int:
    return (int(seed) * 1_000_003 + zlib.crc32(name.encode())) % (2**63)


@torch.no_grad()
def init_parameters(model: nn.Module, seed: int) -> None:
    """Fan-in scaled uniform init for every conv/linear weight, zero biases.

    Each layer draws from its own generator keyed by (seed, qualified name), so
    layers common to two ablation variants start from identical weights.
    """
    for name, mod in model.named_modules():
        if isinstance(mod, (nn.Conv2d, nn.Linear)):
            w = mod.weight
            fan_in = w[0].numel()
            bound = math.sqrt(3.0 / fan_in)
            g = torch.Generator().manual_seed(_name_seed(seed, name))
            w.copy_((torch.rand(w.shape, generator=g, dtype=torch.float64) * 2 - 1) * bound)
            if mod.bias is not None:
                mod.bias.zero_()


def build_mscanet(cfg: NetworkConfig, seed: int = 0) -> MSCANet:
    cfg.validate()
    model = MSCANet(cfg)
    init_parameters(model, seed)
    model.seed = int(seed)
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def pcbam_resolutions(cfg: NetworkConfig, height: int, width: int) -> dict[int, tuple[int, int]]:
    """Skip-level resolution for every level that carries PCBAM."""
    if not cfg.use_pcbam:
        return {}
    return {k: (height >> k, width >> k) for k in cfg.pcbam_levels}


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(
    model: MSCANet,
    path: str | Path,
    *,
    seed: int,
    epoch: int,
    metrics: dict | None = None,
    optimizer: torch.optim.Optimizer | None = None,
    extra: dict | None = None,
) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path / WEIGHTS_FILE)
    if optimizer is not None:
        torch.save(optimizer.state_dict(), path / OPTIM_FILE)
    meta = {
        "schema_version": SCHEMA_VERSION,
        "network": model.cfg.to_dict(),
        "seed": int(seed),
        "epoch": int(epoch),
        "metrics": metrics or {},
    }
    if extra:
        meta.update(extra)
    (path / META_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def read_meta(path: str | Path) -> dict:
    meta_path = Path(path) / META_FILE
    if not meta_path.is_file():
        raise ConfigError(f"not a checkpoint directory (no {META_FILE}): {path}")
    meta = json.loads(meta_path.read_text())
    if meta.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"unsupported checkpoint schema {meta.get('schema_version')!r} in {path}")
    return meta


def load_checkpoint(path: str | Path, map_location: str | torch.device = "cpu") -> tuple[MSCANet, dict]:
    path = Path(path)
    meta = read_meta(path)
    cfg = NetworkConfig.from_dict(meta["network"])
    model = build_mscanet(cfg, meta["seed"])
    state = torch.load(path / WEIGHTS_FILE, map_location=map_location, weights_only=True)
    try:
        model.load_state_dict(state)
    except RuntimeError as e:
        raise ConfigError(f"checkpoint weights do not match its network config: {e}") from None
    return model, meta
