"""Multi-head attention with optional additive position codes and adapters.

Position codes are fixed sinusoids added to the query/key projection inputs
only (never to values), so zero-projected attention branches stay exactly
zero and residual streams keep their closed forms.
"""

from __future__ import annotations

import math
from typing import Optional

import torch
import torch.nn as nn

from .datamodel import ValidationError


def sinusoid_positions(n: int, dim: int, dtype=torch.float64, offset: int = 0) -> torch.Tensor:
    """(n, dim) transformer-style sine/cosine position codes."""
    pos = torch.arange(offset, offset + n, dtype=dtype).unsqueeze(1)
    half = dim // 2
    freqs = torch.exp(torch.arange(half, dtype=dtype) * (-math.log(10000.0) / max(half - 1, 1)))
    angles = pos * freqs
    out = torch.zeros(n, dim, dtype=dtype)
    out[:, 0:2 * half:2] = torch.sin(angles)
    out[:, 1:2 * half:2] = torch.cos(angles)
    return out


def grid_positions(height: int, width: int, dim: int, dtype=torch.float64) -> torch.Tensor:
    """(height*width, dim) 2-D position codes: row codes in the first half
    of the channels, column codes in the second half."""
    half = dim // 2
    rows = sinusoid_positions(height, half, dtype)
    cols = sinusoid_positions(width, dim - half, dtype)
    out = torch.cat([rows[:, None, :].expand(height, width, half),
                     cols[None, :, :].expand(height, width, dim - half)], dim=-1)
    return out.reshape(height * width, dim)


_POS_CACHE = {}


def cached_positions(n: int, dim: int, dtype=torch.float64, offset: int = 0) -> torch.Tensor:
    key = ("t", n, dim, dtype, offset)
    if key not in _POS_CACHE:
        _POS_CACHE[key] = sinusoid_positions(n, dim, dtype, offset)
    return _POS_CACHE[key]


def cached_grid_positions(height: int, width: int, dim: int, dtype=torch.float64) -> torch.Tensor:
    key = ("g", height, width, dim, dtype)
    if key not in _POS_CACHE:
        _POS_CACHE[key] = grid_positions(height, width, dim, dtype)
    return _POS_CACHE[key]


class AdaptableLinear(nn.Module):
    """Linear layer with an optional additive low-rank adapter.

    y = base(x) + scale * ((x @ down) @ up); `up` starts at zero so a freshly
    installed adapter leaves the output exactly unchanged.
    """

    def __init__(self, dim_in: int, dim_out: int, dtype=torch.float64):
        super().__init__()
        self.base = nn.Linear(dim_in, dim_out, dtype=dtype)
        self.adapter_down: Optional[nn.Parameter] = None
        self.adapter_up: Optional[nn.Parameter] = None
        self.adapter_scale = 1.0

    def install_adapter(self, rank: int, scale: float = 1.0,
                        generator: Optional[torch.Generator] = None):
        if rank < 1:
            raise ValidationError(f"adapter rank must be >= 1, got {rank}")
        w = self.base.weight
        down = torch.randn(w.shape[1], rank, generator=generator, dtype=w.dtype) / w.shape[1] ** 0.5
        self.adapter_down = nn.Parameter(down)
        self.adapter_up = nn.Parameter(torch.zeros(rank, w.shape[0], dtype=w.dtype))
        self.adapter_scale = scale

    def merged_weight(self) -> torch.Tensor:
        """Equivalent dense weight: W + scale * (down @ up)^T."""
        w = self.base.weight
        if self.adapter_down is None:
            return w
        return w + self.adapter_scale * (self.adapter_down @ self.adapter_up).T

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.base(x)
        if self.adapter_down is not None:
            y = y + self.adapter_scale * ((x @ self.adapter_down) @ self.adapter_up)
        return y


def apply_adapter(base_out: torch.Tensor, x: torch.Tensor, down: torch.Tensor,
                  up: torch.Tensor, scale: float = 1.0) -> torch.Tensor:
    """base_out + scale * (x @ down @ up); shapes must already agree."""
    if x.shape[-1] != down.shape[0] or base_out.shape[-1] != up.shape[1]:
        raise ValidationError("adapter: shape mismatch with target projection")
    return base_out + scale * ((x @ down) @ up)


class CrossAttention(nn.Module):
    """Scaled dot-product attention; queries dim_q, keys/values dim_kv.

    q/k/v live behind AdaptableLinear so low-rank adapters can be installed on
    the designated projections. `zero_init_out` zeroes the output projection,
    making the branch exactly silent at initialization.
    """

    def __init__(self, dim_q: int, dim_kv: int, heads: int = 1,
                 zero_init_out: bool = False, dtype=torch.float64):
        super().__init__()
        if dim_q % heads != 0:
            raise ValidationError(f"attention width {dim_q} not divisible by heads {heads}")
        self.heads = heads
        self.q = AdaptableLinear(dim_q, dim_q, dtype)
        self.k = AdaptableLinear(dim_kv, dim_q, dtype)
        self.v = AdaptableLinear(dim_kv, dim_q, dtype)
        self.out = nn.Linear(dim_q, dim_q, dtype=dtype)
        if zero_init_out:
            nn.init.zeros_(self.out.weight)
            nn.init.zeros_(self.out.bias)

    def forward(self, queries: torch.Tensor, context: torch.Tensor,
                q_pos: Optional[torch.Tensor] = None, k_pos: Optional[torch.Tensor] = None,
                causal: bool = False) -> torch.Tensor:
        # queries: (B, Nq, dim_q); context: (B, Nk, dim_kv)
        if context.shape[1] == 0:
            raise ValidationError("attention: empty context")
        B, Nq, D = queries.shape
        Nk = context.shape[1]
        q_in = queries + q_pos if q_pos is not None else queries
        k_in = context + k_pos if k_pos is not None else context
        H, Dh = self.heads, D // self.heads
        q = self.q(q_in).reshape(B, Nq, H, Dh).transpose(1, 2)
        k = self.k(k_in).reshape(B, Nk, H, Dh).transpose(1, 2)
        v = self.v(context).reshape(B, Nk, H, Dh).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(Dh)
        if causal:
            if Nq != Nk:
                raise ValidationError("causal attention requires equal query/key lengths")
            mask = torch.triu(torch.ones(Nq, Nk, dtype=torch.bool, device=scores.device), 1)
            scores = scores.masked_fill(mask, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        mixed = (attn @ v).transpose(1, 2).reshape(B, Nq, D)
        return self.out(mixed)

    def adaptable_projections(self):
        """The designated adapter targets: query and key/value projections."""
        return [self.q, self.k, self.v]
