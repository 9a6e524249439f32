"""Attention blocks of MSCA-Net: MSEDA (encoder), PCBAM (skip connections), CAB (decoder).

All blocks take and return ``(B, C, H, W)`` feature maps of the same shape.
"""
from __future__ import annotations

from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, NumericError

LN_EPS = 1e-5
DEFAULT_MAX_POSITIONS = 4096


def _check_input(x: torch.Tensor, channels: int, block: str) -> None:
    if x.dim() != 4:
        raise ConfigError(f"{block}: expected a (B, C, H, W) tensor, got shape {tuple(x.shape)}")
    if x.shape[1] != channels:
        raise ConfigError(f"{block}: built for {channels} channels, got input with {x.shape[1]}")
    if not torch.isfinite(x).all():
        raise NumericError(f"{block}: input contains NaN or Inf")


class LayerNorm2d(nn.Module):
    """Layer norm over the channel axis, applied independently at every pixel."""

    def __init__(self, channels: int, eps: float = LN_EPS):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x.permute(0, 2, 3, 1)
        x = F.layer_norm(x, x.shape[-1:], self.weight, self.bias, self.eps)
        return x.permute(0, 3, 1, 2)


# ---------------------------------------------------------------------------
# MSEDA
# ---------------------------------------------------------------------------

def dilated_window_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    dilation: int,
    kernel_size: int = 3,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Sliding-window self-attention with a dilated ``kernel_size`` x ``kernel_size`` window.

    Every query pixel attends to the ``kernel_size**2`` positions of its dilated
    neighbourhood. Positions that fall outside the image are zero-padded and
    excluded from the softmax, so each query's weights sum to one over the
    in-bounds part of its window.

    Args:
        q, k, v: ``(B, d, H, W)`` tensors for one head.
        dilation: spacing between window taps; the window covers
            ``(kernel_size - 1) * dilation + 1`` pixels per side.
        kernel_size: odd window size.

    Returns:
        ``(out, attn)`` where ``out`` is ``(B, d, H, W)`` and ``attn`` is
        ``(B, kernel_size**2, H*W)`` holding the softmax weights per query.
    """
    b, d, h, w = q.shape
    taps = kernel_size * kernel_size
    pad = dilation * (kernel_size // 2)
    k_win = F.unfold(k, kernel_size, dilation=dilation, padding=pad).view(b, d, taps, h * w)
    v_win = F.unfold(v, kernel_size, dilation=dilation, padding=pad).view(b, d, taps, h * w)
    logits = (q.reshape(b, d, 1, h * w) * k_win).sum(dim=1) * d ** -0.5

    inside = F.unfold(q.new_ones(1, 1, h, w), kernel_size, dilation=dilation, padding=pad) > 0.5
    logits = logits.masked_fill(~inside, float("-inf"))
    attn = logits.softmax(dim=1)
    out = (attn.unsqueeze(1) * v_win).sum(dim=2)
    return out.view(b, d, h, w), attn


class MultiDilateAttention(nn.Module):
    """Multi-head dilated window attention.

    q, k, v come from one 1x1 convolution; the ``attn_channels`` attention width
    is split evenly over the heads and head ``i`` attends with dilation
    ``dilations[i]``. Head outputs are concatenated and projected back to
    ``channels`` by a 1x1 convolution.
    """

    def __init__(
        self,
        channels: int,
        head_count: int = 3,
        dilations: Sequence[int] = (1, 2, 3),
        kernel_size: int = 3,
        attn_channels: int | None = None,
    ):
        super().__init__()
        attn_channels = channels if attn_channels is None else attn_channels
        if head_count < 1:
            raise ConfigError(f"head_count must be positive, got {head_count}")
        if len(dilations) != head_count:
            raise ConfigError(
                f"need one dilation per head: head_count={head_count}, dilations={list(dilations)}"
            )
        if any(int(r) < 1 for r in dilations):
            raise ConfigError(f"dilations must be positive integers, got {list(dilations)}")
        if attn_channels % head_count:
            raise ConfigError(
                f"attention channels ({attn_channels}) not divisible by head_count ({head_count})"
            )
        if kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd, got {kernel_size}")
        self.channels = channels
        self.attn_channels = attn_channels
        self.head_count = head_count
        self.dilations = [int(r) for r in dilations]
        self.kernel_size = kernel_size
        self.qkv = nn.Conv2d(channels, 3 * attn_channels, 1)
        self.proj = nn.Conv2d(attn_channels, channels, 1)

    @property
    def receptive_fields(self) -> list[int]:
        return [(self.kernel_size - 1) * r + 1 for r in self.dilations]

    def _heads(self, x: torch.Tensor):
        q, k, v = self.qkv(x).chunk(3, dim=1)
        d = self.attn_channels // self.head_count
        for i, r in enumerate(self.dilations):
            sl = slice(i * d, (i + 1) * d)
            yield dilated_window_attention(q[:, sl], k[:, sl], v[:, sl], r, self.kernel_size)

    def attention_weights(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Per-head softmax weights, each ``(B, kernel_size**2, H*W)``."""
        return [attn for _, attn in self._heads(x)]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_input(x, self.channels, "MultiDilateAttention")
        out = torch.cat([h for h, _ in self._heads(x)], dim=1)
        return self.proj(out)


class MSEDA(nn.Module):
    """Multi-scale enhanced detection attention.

    Two gated residual convolution stages scaled by ``lambda1``/``lambda2``,
    a residual 1x1+GELU embedding of their output ``X``,
    ``E = X + GELU(Conv1(X))``, then ``E + MultiDilateAttention(E)``.

    Branch kernels: the small kernel is 1x1, the large kernel a depthwise 5x5,
    and the dilated kernel a depthwise 7x7 evaluated at dilations 2 and 3 (the
    two ``f`` branches, concatenated and fused by a 1x1 convolution).

    When ``channels`` is not a multiple of ``head_count`` the attention width is
    rounded up to the next multiple; the attention projection maps back to
    ``channels``.
    """

    def __init__(
        self,
        channels: int,
        head_count: int = 3,
        dilations: Sequence[int] = (1, 2, 3),
        branch_dilations: Sequence[int] = (2, 3),
        lambda_init: float = 0.0,
    ):
        super().__init__()
        self.channels = channels
        c = channels

        self.norm1 = LayerNorm2d(c)
        self.large = nn.Conv2d(c, c, 5, padding=2, groups=c)
        self.dilated = nn.ModuleList(
            nn.Conv2d(c, c, 7, padding=3 * r, dilation=r, groups=c) for r in branch_dilations
        )
        self.dilated_pw = nn.ModuleList(nn.Conv2d(c, c, 1) for _ in branch_dilations)
        self.fuse = nn.Conv2d(c * len(branch_dilations), c, 1)
        self.gate1 = nn.Conv2d(c, c, 1)
        self.out1 = nn.Conv2d(c, c, 1)
        self.lambda1 = nn.Parameter(torch.full((1,), float(lambda_init)))

        self.norm2 = LayerNorm2d(c)
        self.large2 = nn.Conv2d(c, c, 5, padding=2, groups=c)
        self.large2_pw = nn.Conv2d(c, c, 1)
        self.gate2 = nn.Conv2d(c, c, 1)
        self.out2 = nn.Conv2d(c, c, 1)
        self.lambda2 = nn.Parameter(torch.full((1,), float(lambda_init)))

        self.embed = nn.Conv2d(c, c, 1)
        attn_channels = -(-c // head_count) * head_count
        self.attn = MultiDilateAttention(c, head_count, dilations, attn_channels=attn_channels)

    def branch(self, n: torch.Tensor) -> torch.Tensor:
        """The fused multi-dilation branch ``Conv1(f_1(N), f_2(N))``."""
        a = self.large(n)
        fs = [pw(conv(a)) * a for conv, pw in zip(self.dilated, self.dilated_pw)]
        return self.fuse(torch.cat(fs, dim=1))

    def pre_embedding(self, x: torch.Tensor) -> torch.Tensor:
        _check_input(x, self.channels, "MSEDA")
        n = self.norm1(x)
        x = x + self.lambda1 * self.out1(self.gate1(n) * self.branch(n))
        n = self.norm2(x)
        x = x + self.lambda2 * self.out2(self.gate2(n) * self.large2_pw(self.large2(n)))
        return x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.pre_embedding(x)
        # residuals around the embedding and the window attention; without
        # them the GELU and the windowed average wash out 1-3 px targets
        x = x + F.gelu(self.embed(x))
        return x + self.attn(x)


# ---------------------------------------------------------------------------
# PCBAM
# ---------------------------------------------------------------------------

class ChannelAttention(nn.Module):
    """sigmoid(mlp(avgpool) + mlp(maxpool)) with a shared C -> C/8 -> C mlp."""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.hidden = max(channels // 8, 1)
        self.mlp = nn.Sequential(
            nn.Linear(channels, self.hidden),
            nn.ReLU(inplace=True),
            nn.Linear(self.hidden, channels),
        )

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        b, c = f.shape[:2]
        avg = self.mlp(f.mean(dim=(2, 3)))
        mx = self.mlp(f.amax(dim=(2, 3)))
        return torch.sigmoid(avg + mx).view(b, c, 1, 1)


class SpatialAttention(nn.Module):
    def __init__(self, kernel_size: int = 7, dilation: int = 4):
        super().__init__()
        # per-pixel dense layers on the pooled maps
        self.dense_avg = nn.Conv2d(1, 1, 1)
        self.dense_max = nn.Conv2d(1, 1, 1)
        pad = dilation * (kernel_size // 2)
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=pad, dilation=dilation)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        avg = self.dense_avg(f.mean(dim=1, keepdim=True))
        mx = self.dense_max(f.amax(dim=1, keepdim=True))
        return torch.sigmoid(self.conv(torch.cat([avg, mx], dim=1)))


class PositionAttention(nn.Module):
    """Softmax attention over all ``N = H*W`` positions, gated by ``alpha`` (init 0).

    ``F_P[j] = alpha * sum_i s[j, i] * D[i] + F[j]`` with
    ``s[j, :] = softmax_i(B[i] . Z[j])``.
    """

    def __init__(
        self,
        channels: int,
        key_channels: int | None = None,
        max_positions: int = DEFAULT_MAX_POSITIONS,
    ):
        super().__init__()
        key_channels = key_channels or max(channels // 8, 1)
        self.channels = channels
        self.max_positions = max_positions
        self.key = nn.Conv2d(channels, key_channels, 1)  # B
        self.query = nn.Conv2d(channels, key_channels, 1)  # Z
        self.value = nn.Conv2d(channels, channels, 1)  # D
        self.alpha = nn.Parameter(torch.zeros(1))

    def forward(
        self, f: torch.Tensor, return_attention: bool = False
    ) -> torch.Tensor | tuple[torch.Tensor, torch.Tensor]:
        b, c, h, w = f.shape
        n = h * w
        if n > self.max_positions:
            raise ConfigError(
                f"position attention over {h}x{w} = {n} positions exceeds the budget of "
                f"{self.max_positions}; place PCBAM at a coarser level or raise max_positions"
            )
        keys = self.key(f).view(b, -1, n).transpose(1, 2)
        queries = self.query(f).view(b, -1, n).transpose(1, 2)
        values = self.value(f).view(b, c, n).transpose(1, 2)
        if return_attention:
            s = torch.bmm(queries, keys.transpose(1, 2)).softmax(dim=-1)  # s[:, j, i]
            out = torch.bmm(s, values)
        else:
            # fused kernel, same softmax(Z B^T) D without materialising s.
            # Zero-padding Z and B up to the value width leaves every dot product
            # unchanged but lets the CPU use its fast path (equal head dims).
            extra = c - queries.shape[-1]
            if extra > 0:
                queries = F.pad(queries, (0, extra))
                keys = F.pad(keys, (0, extra))
            out = F.scaled_dot_product_attention(
                queries.unsqueeze(1), keys.unsqueeze(1), values.contiguous().unsqueeze(1), scale=1.0
            ).squeeze(1)
        out = self.alpha * out.transpose(1, 2).reshape(b, c, h, w) + f
        return (out, s) if return_attention else out


class PCBAM(nn.Module):
    """Channel, spatial and position attention fused by summation.

    ``fusion="sum"`` returns ``F_C' + F_S + F_P`` with the one-channel spatial map
    broadcast over channels. ``fusion="multiply"`` uses the CBAM-style
    ``F_C' * F_S + F_P`` instead.
    """

    def __init__(
        self,
        channels: int,
        fusion: str = "sum",
        max_positions: int = DEFAULT_MAX_POSITIONS,
    ):
        super().__init__()
        if fusion not in ("sum", "multiply"):
            raise ConfigError(f"fusion must be 'sum' or 'multiply', got {fusion!r}")
        self.channels = channels
        self.fusion = fusion
        self.cam = ChannelAttention(channels)
        self.sam = SpatialAttention()
        self.pam = PositionAttention(channels, max_positions=max_positions)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        _check_input(f, self.channels, "PCBAM")
        fc = self.cam(f) * f
        fs = self.sam(fc)
        fp = self.pam(f)
        if self.fusion == "multiply":
            return fc * fs + fp
        return fc + fs + fp


# ---------------------------------------------------------------------------
# CAB
# ---------------------------------------------------------------------------

class CAB(nn.Module):
    """Channel aggregation block.

    ``Y = GELU(conv3x3(conv1x1(LN(x))))``, ``CA = Y + gamma * (Y - GELU(conv1x1(Y)))``
    where the inner 1x1 collapses channels to one map (broadcast back), and
    the output is ``x + conv1x1(CA)``. ``gamma`` is per-channel and starts at 0.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.norm = LayerNorm2d(channels)
        self.pw_in = nn.Conv2d(channels, channels, 1)
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.collapse = nn.Conv2d(channels, 1, 1)
        self.gamma = nn.Parameter(torch.zeros(1, channels, 1, 1))
        self.pw_out = nn.Conv2d(channels, channels, 1)

    def aggregate(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return ``(Y, CA)``."""
        _check_input(x, self.channels, "CAB")
        y = F.gelu(self.conv(self.pw_in(self.norm(x))))
        ca = y + self.gamma * (y - F.gelu(self.collapse(y)))
        return y, ca

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _, ca = self.aggregate(x)
        return x + self.pw_out(ca)
