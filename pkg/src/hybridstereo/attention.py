"""Window attention transformer blocks over 2D token grids and 3D token volumes.

Every grid here is channels-last: ``(B, *dims, C)`` with ``len(dims)`` equal to
2 (image tokens) or 3 (disparity volume tokens). Windows, shifts and patch
sizes are tuples with one entry per spatial axis.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NumericError

MASK_VALUE = float("-inf")


def _tuple(value, k: int) -> tuple[int, ...]:
    if isinstance(value, int):
        return (value,) * k
    value = tuple(int(v) for v in value)
    if len(value) != k:
        raise ValueError(f"expected {k} entries, got {value}")
    return value


def pad_channels_last(x: torch.Tensor, multiples, value: float = 0.0) -> torch.Tensor:
    """Zero-pad the spatial axes of ``(B, *dims, C)`` up to the given multiples."""
    dims = x.shape[1:-1]
    pads = []
    for n, m in zip(reversed(dims), reversed(tuple(multiples))):
        pads += [0, (-n) % m]
    if not any(pads):
        return x
    return F.pad(x, [0, 0] + pads, value=value)


def window_partition(x: torch.Tensor, window) -> torch.Tensor:
    """Split ``(B, *dims, C)`` into ``(B * num_windows, prod(window), C)``.

    Each ``dims[i]`` must be a multiple of ``window[i]``. Windows are ordered
    batch-major, then in row-major order over the window grid.
    """
    b, *dims, c = x.shape
    k = len(dims)
    window = _tuple(window, k)
    shape = [b]
    for n, w in zip(dims, window):
        if n % w:
            raise ValueError(f"grid {tuple(dims)} not divisible by window {window}")
        shape += [n // w, w]
    x = x.reshape(*shape, c)
    perm = [0] + [1 + 2 * i for i in range(k)] + [2 + 2 * i for i in range(k)] + [2 * k + 1]
    return x.permute(perm).reshape(-1, math.prod(window), c)


def window_reverse(windows: torch.Tensor, window, dims) -> torch.Tensor:
    """Inverse of :func:`window_partition` for a grid of spatial size ``dims``."""
    dims = tuple(dims)
    k = len(dims)
    window = _tuple(window, k)
    counts = [n // w for n, w in zip(dims, window)]
    c = windows.shape[-1]
    b = windows.shape[0] // math.prod(counts)
    x = windows.reshape(b, *counts, *window, c)
    perm = [0]
    for i in range(k):
        perm += [1 + i, 1 + k + i]
    perm.append(2 * k + 1)
    return x.permute(perm).reshape(b, *dims, c)


def shifted_mask(grid_shape, window, shift) -> torch.Tensor:
    """Attention mask for cyclically shifted windows.

    After rolling a grid by ``-shift`` some windows mix tokens that were not
    neighbours. Tokens are labelled by the region they came from and pairs
    from different regions get ``-inf``.

    Returns:
        ``(num_windows, N, N)`` float tensor of zeros and ``-inf``.
    """
    grid_shape = tuple(grid_shape)
    k = len(grid_shape)
    window = _tuple(window, k)
    shift = _tuple(shift, k)
    labels = torch.zeros(grid_shape)
    axis_slices = []
    for w, s in zip(window, shift):
        if s > 0:
            axis_slices.append((slice(0, -w), slice(-w, -s), slice(-s, None)))
        else:
            axis_slices.append((slice(None),))
    for region, index in enumerate(itertools.product(*axis_slices)):
        labels[index] = region
    windows = window_partition(labels[None, ..., None], window).squeeze(-1)
    different = windows[:, None, :] != windows[:, :, None]
    mask = torch.zeros(different.shape)
    return mask.masked_fill(different, MASK_VALUE)


@lru_cache(maxsize=64)
def relative_position_index(window: tuple[int, ...], table_window: tuple[int, ...]) -> torch.Tensor:
    """Index into a bias table of ``prod(2 * table_window - 1)`` offsets.

    ``window`` may be smaller than ``table_window`` (windows are clamped for
    small grids); its offsets are a subset of the table's.
    """
    coords = torch.stack(
        torch.meshgrid(*[torch.arange(w) for w in window], indexing="ij")
    ).flatten(1)
    rel = coords[:, :, None] - coords[:, None, :]
    index = torch.zeros(rel.shape[1:], dtype=torch.long)
    for axis, w in enumerate(table_window):
        index = index * (2 * w - 1) + rel[axis] + (w - 1)
    return index


def window_msa(
    x: torch.Tensor,
    qkv_weight: torch.Tensor,
    qkv_bias: torch.Tensor | None,
    proj_weight: torch.Tensor,
    proj_bias: torch.Tensor | None,
    num_heads: int,
    position_bias: torch.Tensor | None = None,
    mask: torch.Tensor | None = None,
    return_weights: bool = False,
):
    """Multi-head self-attention inside each window.

    Per head: ``softmax(Q K^T / sqrt(d_head) + position_bias + mask) V``; heads
    are concatenated and passed through the output projection.

    Args:
        x: ``(B * num_windows, N, C)`` tokens.
        qkv_weight: ``(3C, C)`` fused query/key/value projection.
        qkv_bias: ``(3C,)`` or None.
        proj_weight: ``(C, C)`` output projection.
        proj_bias: ``(C,)`` or None.
        num_heads: Head count; must divide ``C``.
        position_bias: ``(num_heads, N, N)`` additive bias or None.
        mask: ``(num_windows, N, N)`` of 0 / ``-inf`` or None.
        return_weights: Also return the ``(B * num_windows, heads, N, N)``
            attention probabilities.
    """
    bw, n, c = x.shape
    if c % num_heads:
        raise ValueError(f"{num_heads} heads do not divide {c} channels")
    head_dim = c // num_heads
    qkv = F.linear(x, qkv_weight, qkv_bias).reshape(bw, n, 3, num_heads, head_dim)
    q, k, v = qkv.permute(2, 0, 3, 1, 4)
    attn = (q * head_dim**-0.5) @ k.transpose(-2, -1)
    if position_bias is not None:
        attn = attn + position_bias.unsqueeze(0)
    if mask is not None:
        nw = mask.shape[0]
        attn = attn.reshape(bw // nw, nw, num_heads, n, n) + mask.to(attn.dtype)[None, :, None]
        attn = attn.reshape(bw, num_heads, n, n)
    attn = attn.softmax(dim=-1)
    out = (attn @ v).transpose(1, 2).reshape(bw, n, c)
    out = F.linear(out, proj_weight, proj_bias)
    if return_weights:
        return out, attn
    return out


class WindowAttention(nn.Module):
    """Window MSA with a learned relative position bias table per head."""

    def __init__(self, dim: int, window, num_heads: int) -> None:
        super().__init__()
        self.dim = dim
        self.window = tuple(window)
        self.num_heads = num_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        table_size = math.prod(2 * w - 1 for w in self.window)
        self.relative_position_bias_table = nn.Parameter(torch.zeros(table_size, num_heads))

    def position_bias(self, window) -> torch.Tensor:
        index = relative_position_index(tuple(window), self.window)
        n = index.shape[0]
        bias = self.relative_position_bias_table[index.reshape(-1)]
        return bias.reshape(n, n, self.num_heads).permute(2, 0, 1)

    def forward(self, x: torch.Tensor, window=None, mask: torch.Tensor | None = None):
        window = self.window if window is None else tuple(window)
        return window_msa(
            x,
            self.qkv.weight,
            self.qkv.bias,
            self.proj.weight,
            self.proj.bias,
            self.num_heads,
            position_bias=self.position_bias(window),
            mask=mask,
        )


@dataclass(frozen=True)
class BlockConfig:
    """Hyperparameters of one transformer block.

    ``shift`` is either 0 or half the window on each axis. ``num_heads=None``
    means ``max(1, dim // 32)``.
    """

    window: tuple[int, ...]
    shift: tuple[int, ...]
    mlp_ratio: float = 4.0
    num_heads: int | None = None
    eps: float = 1e-5

    def __post_init__(self) -> None:
        if len(self.window) != len(self.shift):
            raise ValueError("window and shift must have the same rank")
        for w, s in zip(self.window, self.shift):
            if w < 1 or not 0 <= s < w:
                raise ValueError(f"invalid window {self.window} / shift {self.shift}")

    @classmethod
    def alternating(cls, window, index: int, rank: int, **kwargs) -> BlockConfig:
        """Config for the ``index``-th block of a stack: odd blocks are shifted."""
        window = _tuple(window, rank)
        shift = tuple(w // 2 for w in window) if index % 2 else (0,) * rank
        return cls(window=window, shift=shift, **kwargs)


class TransformerBlock(nn.Module):
    """Pre-norm (shifted) window transformer block on a ``(B, *dims, C)`` grid.

    ``x + WMSA(LN(x))`` followed by ``x + MLP(LN(x))``. Windows larger than the
    grid are clamped to it, and shifting is disabled on such axes.
    """

    def __init__(self, dim: int, config: BlockConfig) -> None:
        super().__init__()
        self.config = config
        heads = config.num_heads or max(1, dim // 32)
        self.norm1 = nn.LayerNorm(dim, eps=config.eps)
        self.attn = WindowAttention(dim, config.window, heads)
        self.norm2 = nn.LayerNorm(dim, eps=config.eps)
        hidden = int(dim * config.mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))
        self._masks: dict = {}

    def effective_window(self, dims) -> tuple[tuple[int, ...], tuple[int, ...]]:
        window, shift = [], []
        for n, w, s in zip(dims, self.config.window, self.config.shift):
            if n <= w:
                window.append(n)
                shift.append(0)
            else:
                window.append(w)
                shift.append(s)
        return tuple(window), tuple(shift)

    def _mask(self, dims, window, shift) -> torch.Tensor | None:
        if not any(shift):
            return None
        key = (dims, window, shift)
        if key not in self._masks:
            self._masks[key] = shifted_mask(dims, window, shift)
        return self._masks[key]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        dims = tuple(x.shape[1:-1])
        axes = tuple(range(1, len(dims) + 1))
        window, shift = self.effective_window(dims)
        shortcut = x
        x = self.norm1(x)
        x = pad_channels_last(x, window)
        padded = tuple(x.shape[1:-1])
        if any(shift):
            x = torch.roll(x, shifts=tuple(-s for s in shift), dims=axes)
        windows = window_partition(x, window)
        windows = self.attn(windows, window=window, mask=self._mask(padded, window, shift))
        x = window_reverse(windows, window, padded)
        if any(shift):
            x = torch.roll(x, shifts=shift, dims=axes)
        x = x[(slice(None),) + tuple(slice(0, n) for n in dims)]
        x = shortcut + x
        return x + self.mlp(self.norm2(x))


def patch_partition(x: torch.Tensor, patch) -> torch.Tensor:
    """Flatten non-overlapping patches of a channels-first tensor.

    Args:
        x: ``(B, C, *dims)`` with every ``dims[i]`` divisible by ``patch[i]``.

    Returns:
        ``(B, *grid, C * prod(patch))`` where each feature vector is the patch
        flattened channel-major, then in row-major order within the patch.
    """
    b, c, *dims = x.shape
    k = len(dims)
    patch = _tuple(patch, k)
    shape = [b, c]
    for n, p in zip(dims, patch):
        if n % p:
            raise ValueError(f"dims {tuple(dims)} not divisible by patch {patch}")
        shape += [n // p, p]
    x = x.reshape(shape)
    perm = [0] + [2 + 2 * i for i in range(k)] + [1] + [3 + 2 * i for i in range(k)]
    x = x.permute(perm)
    grid = [n // p for n, p in zip(dims, patch)]
    return x.reshape(b, *grid, c * math.prod(patch))


def _reflect_pad(x: torch.Tensor, multiples) -> torch.Tensor:
    dims = x.shape[2:]
    pads = []
    for n, m in zip(reversed(dims), reversed(tuple(multiples))):
        pads += [0, (-n) % m]
    if not any(pads):
        return x
    mode = "reflect" if all(p < n for p, n in zip(pads[1::2], reversed(dims))) else "replicate"
    return F.pad(x, pads, mode=mode)


class PatchEmbed(nn.Module):
    """Patch partition followed by a linear embedding (and optional LayerNorm).

    Inputs are channels-first ``(B, C, *dims)`` and reflect-padded up to a
    multiple of the patch size; the output grid is channels-last.
    """

    def __init__(self, in_channels: int, patch, embed_dim: int, rank: int, norm: bool = True) -> None:
        super().__init__()
        self.patch = _tuple(patch, rank)
        self.proj = nn.Linear(in_channels * math.prod(self.patch), embed_dim)
        self.norm = nn.LayerNorm(embed_dim) if norm else nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = _reflect_pad(x, self.patch)
        return self.norm(self.proj(patch_partition(x, self.patch)))


class PatchMerging3d(nn.Module):
    """Stride-2 downsampling of ``(B, D, H, W, C)`` to ``(B, D/2, H/2, W/2, 2C)``.

    All three axes are halved so disparity resolution follows the spatial one.
    Odd axes are zero-padded first.
    """

    def __init__(self, dim: int) -> None:
        super().__init__()
        self.norm = nn.LayerNorm(8 * dim)
        self.reduction = nn.Linear(8 * dim, 2 * dim, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = pad_channels_last(x, (2, 2, 2))
        parts = [
            x[:, i::2, j::2, k::2]
            for i, j, k in itertools.product((0, 1), repeat=3)
        ]
        return self.reduction(self.norm(torch.cat(parts, dim=-1)))


class PatchExpand3d(nn.Module):
    """Stride-2 upsampling of ``(B, D, H, W, C)`` to ``(B, 2D, 2H, 2W, C/2)``."""

    def __init__(self, dim: int) -> None:
        super().__init__()
        if dim % 2:
            raise ValueError(f"cannot halve {dim} channels")
        self.out_dim = dim // 2
        self.expand = nn.Linear(dim, 8 * self.out_dim, bias=False)
        self.norm = nn.LayerNorm(self.out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, d, h, w, _ = x.shape
        x = self.expand(x).reshape(b, d, h, w, 2, 2, 2, self.out_dim)
        x = x.permute(0, 1, 4, 2, 5, 3, 6, 7).reshape(b, 2 * d, 2 * h, 2 * w, self.out_dim)
        return self.norm(x)


def init_transformer_weights(module: nn.Module) -> None:
    """Truncated normal (std 0.02) linear weights, zero biases, unit LayerNorm."""
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def check_finite(x: torch.Tensor, where: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NumericError(f"non-finite activations in {where}")
    return x
