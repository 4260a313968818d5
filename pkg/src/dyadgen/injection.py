"""Region-decoupled conditioning injection for the avatar generator.

Every latent cell attends independently to two conditioning branches: the
user-context tokens and the avatar self-audio tokens. Lip-mask cells take the
self-audio stream only; face-mask cells take a learned per-cell convex blend
of both streams; all other cells pass through unchanged:

    lip  = avt_stream * M_lip
    face = (g * avt_stream + (1 - g) * usr_stream) * M_face
    out  = h + lip + face
    g    = sigmoid(gate([conv1(usr_stream); conv2(avt_stream)]))

Both stream output projections start at zero, so the whole block is exactly
the identity at initialization. Feature maps use the channels-last layout
(B, T, H, W, C); the 1x1 convolution projectors are per-cell linear maps over
the channel dim. A fused single-stream variant (no regions, no gate) is
provided for the direct-fusion ablation.
"""

from __future__ import annotations

from typing import Dict, Optional, Tuple

import torch
import torch.nn as nn

from .attention import CrossAttention, cached_grid_positions, cached_positions
from .datamodel import ValidationError


def _check_masks(lip: torch.Tensor, face: torch.Tensor):
    if lip.shape != face.shape:
        raise ValidationError("region masks: lip/face shapes differ")
    if torch.any((lip > 0) & (face > 0)):
        raise ValidationError("region masks: lip and face overlap")


class _CellAttention(nn.Module):
    """Cross-attention where the queries are all spatio-temporal latent cells."""

    def __init__(self, width: int, dim_ctx: int, heads: int, dtype=torch.float64):
        super().__init__()
        self.width = width
        self.attn = CrossAttention(width, dim_ctx, heads, zero_init_out=True, dtype=dtype)

    def forward(self, h: torch.Tensor, ctx: torch.Tensor, ctx_offset: int = 0,
                k_positions: Optional[torch.Tensor] = None) -> torch.Tensor:
        # h: (B, T, H, W, C); ctx: (B, N, D_ctx)
        B, T, H, W, C = h.shape
        cells = h.reshape(B, T * H * W, C)
        tpos = cached_positions(T, C, h.dtype)
        spos = cached_grid_positions(H, W, C, h.dtype)
        qpos = (tpos[:, None, :] + spos[None, :, :]).reshape(T * H * W, C)
        kpos = (k_positions if k_positions is not None
                else cached_positions(ctx.shape[1], ctx.shape[-1], h.dtype, offset=ctx_offset))
        out = self.attn(cells, ctx, q_pos=qpos, k_pos=kpos)
        return out.reshape(B, T, H, W, C)


class RegionDecoupledInjection(nn.Module):
    """Dual-stream injection with lip/face decoupling (see module docstring)."""

    def __init__(self, width: int, dim_user_ctx: int, dim_avatar_ctx: int, heads: int,
                 dtype=torch.float64):
        super().__init__()
        self.stream_user = _CellAttention(width, dim_user_ctx, heads, dtype)
        self.stream_avatar = _CellAttention(width, dim_avatar_ctx, heads, dtype)
        self.conv_user = nn.Linear(width, width, dtype=dtype)      # 1x1 conv over cells
        self.conv_avatar = nn.Linear(width, width, dtype=dtype)    # 1x1 conv over cells
        self.gate_proj = nn.Linear(2 * width, 1, dtype=dtype)

    def spatial_gate(self, h_user: torch.Tensor, h_avatar: torch.Tensor) -> torch.Tensor:
        """(B, T, H, W, C) streams -> per-cell gate (B, T, H, W, 1) in (0,1)."""
        if h_user.shape != h_avatar.shape:
            raise ValidationError("spatial gate: stream shapes differ")
        u = self.conv_user(h_user)
        a = self.conv_avatar(h_avatar)
        return torch.sigmoid(self.gate_proj(torch.cat([u, a], dim=-1)))

    def forward(self, h: torch.Tensor, user_ctx: Optional[torch.Tensor],
                avatar_ctx: torch.Tensor, masks: Tuple[torch.Tensor, torch.Tensor],
                ctx_offset: int = 0) -> torch.Tensor:
        lip, face = masks
        _check_masks(lip, face)
        if avatar_ctx is None or avatar_ctx.shape[1] == 0:
            raise ValidationError("injection: avatar context must be non-empty")
        h_avt = self.stream_avatar(h, avatar_ctx, ctx_offset)
        if user_ctx is not None:
            h_usr = self.stream_user(h, user_ctx, ctx_offset)
        else:
            h_usr = torch.zeros_like(h_avt)
        g = self.spatial_gate(h_usr, h_avt)
        lip_b = lip[None, None, :, :, None]
        face_b = face[None, None, :, :, None]
        lip_part = h_avt * lip_b
        face_part = (g * h_avt + (1.0 - g) * h_usr) * face_b
        return h + lip_part + face_part


class FusedInjection(nn.Module):
    """Direct-fusion ablation: both branches are projected into one shared
    token space, concatenated, and injected through a single cross-attention
    over every cell with no region masks and no gate."""

    def __init__(self, width: int, dim_user_ctx: int, dim_avatar_ctx: int, heads: int,
                 dtype=torch.float64):
        super().__init__()
        self.proj_user = nn.Linear(dim_user_ctx, width, dtype=dtype)
        self.proj_avatar = nn.Linear(dim_avatar_ctx, width, dtype=dtype)
        self.stream = _CellAttention(width, width, heads, dtype)

    def forward(self, h: torch.Tensor, user_ctx: Optional[torch.Tensor],
                avatar_ctx: torch.Tensor, masks=None, ctx_offset: int = 0) -> torch.Tensor:
        if avatar_ctx is None or avatar_ctx.shape[1] == 0:
            raise ValidationError("injection: avatar context must be non-empty")
        tokens = self.proj_avatar(avatar_ctx)
        frame_pos = cached_positions(avatar_ctx.shape[1], h.shape[-1], h.dtype,
                                     offset=ctx_offset)
        kpos = frame_pos
        if user_ctx is not None:
            if user_ctx.shape[1] != avatar_ctx.shape[1]:
                raise ValidationError("fused injection: branch token counts differ")
            tokens = torch.cat([self.proj_user(user_ctx), tokens], dim=1)
            kpos = torch.cat([frame_pos, frame_pos], dim=0)  # both groups keep frame positions
        return h + self.stream(h, tokens, ctx_offset, k_positions=kpos)
