"""Avatar latent velocity-field generator and flow-matching sampler.

Backbone: per block, pre-norm spatial self-attention, pre-norm causal
temporal self-attention, region-decoupled conditioning injection, pre-norm
emotion cross-attention (zero-initialized output), pre-norm feed-forward.
The reference latent is channel-concatenated to every frame's input; clean
previous frames are prefixed along the temporal axis and excluded from the
returned velocity. With every residual branch zero-projected the network
reduces exactly to out_proj(in_proj(x) + time_embedding).

Feature maps flow through the blocks in channels-last layout (B, T, H, W, C);
the public interface stays (B, T, C, H, W) to match SpatialLatent.
"""

from __future__ import annotations

import math
from typing import Callable, Dict, List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import CrossAttention, cached_grid_positions, cached_positions
from .config import Config
from .datamodel import ValidationError
from .injection import FusedInjection, RegionDecoupledInjection


class TimeEmbedding(nn.Module):
    """Sinusoidal embedding of the flow time followed by a small MLP."""

    def __init__(self, width: int, freq_dim: int = 32, dtype=torch.float64):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(freq_dim, width, dtype=dtype), nn.SiLU(),
                                 nn.Linear(width, width, dtype=dtype))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        # t: (B,) in [0, 1]
        half = self.freq_dim // 2
        freqs = torch.exp(torch.arange(half, dtype=t.dtype, device=t.device)
                          * (-math.log(10000.0) / max(half - 1, 1)))
        angles = t[:, None] * 1000.0 * freqs[None, :]
        emb = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)
        return self.mlp(emb)


class FeedForward(nn.Module):
    def __init__(self, width: int, mult: int, dtype=torch.float64):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(width, mult * width, dtype=dtype), nn.SiLU(),
                                 nn.Linear(mult * width, width, dtype=dtype))

    def forward(self, x):
        return self.net(x)


class _Norm(nn.Module):
    """LayerNorm over the trailing channel dim."""

    def __init__(self, width: int, dtype=torch.float64):
        super().__init__()
        self.scale = nn.Parameter(torch.ones(width, dtype=dtype))
        self.shift = nn.Parameter(torch.zeros(width, dtype=dtype))
        self.width = width

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.layer_norm(x, (self.width,), self.scale, self.shift, eps=1e-6)


class GeneratorBlock(nn.Module):
    def __init__(self, width: int, heads: int, ffn_mult: int, dim_user_ctx: int,
                 dim_emotion: int, fused_injection: bool = False, dtype=torch.float64):
        super().__init__()
        self.norm_spatial = _Norm(width, dtype)
        self.norm_temporal = _Norm(width, dtype)
        self.norm_emotion = _Norm(width, dtype)
        self.norm_ffn = _Norm(width, dtype)
        self.attn_spatial = CrossAttention(width, width, heads, dtype=dtype)
        self.attn_temporal = CrossAttention(width, width, heads, dtype=dtype)
        inj_cls = FusedInjection if fused_injection else RegionDecoupledInjection
        self.injection = inj_cls(width, dim_user_ctx, width, heads, dtype)
        self.attn_emotion = CrossAttention(width, dim_emotion, heads, zero_init_out=True,
                                           dtype=dtype)
        self.ffn = FeedForward(width, ffn_mult, dtype)

    def _spatial(self, h: torch.Tensor) -> torch.Tensor:
        B, T, H, W, C = h.shape
        tokens = h.reshape(B * T, H * W, C)
        pos = cached_grid_positions(H, W, C, h.dtype)
        out = self.attn_spatial(tokens, tokens, q_pos=pos, k_pos=pos)
        return out.reshape(B, T, H, W, C)

    def _temporal(self, h: torch.Tensor) -> torch.Tensor:
        B, T, H, W, C = h.shape
        tokens = h.permute(0, 2, 3, 1, 4).reshape(B * H * W, T, C)
        pos = cached_positions(T, C, h.dtype)
        out = self.attn_temporal(tokens, tokens, q_pos=pos, k_pos=pos, causal=True)
        return out.reshape(B, H, W, T, C).permute(0, 3, 1, 2, 4)

    def _emotion(self, h: torch.Tensor, emotion: torch.Tensor) -> torch.Tensor:
        B, T, H, W, C = h.shape
        cells = h.reshape(B, T * H * W, C)
        return self.attn_emotion(cells, emotion).reshape(B, T, H, W, C)

    def forward(self, h: torch.Tensor, user_ctx: Optional[torch.Tensor],
                avatar_ctx: torch.Tensor, emotion: Optional[torch.Tensor],
                masks, ctx_offset: int) -> torch.Tensor:
        h = h + self._spatial(self.norm_spatial(h))
        h = h + self._temporal(self.norm_temporal(h))
        h = self.injection(h, user_ctx, avatar_ctx, masks, ctx_offset)
        if emotion is not None:
            h = h + self._emotion(self.norm_emotion(h), emotion)
        return h + self.ffn(self.norm_ffn(h))


class AvatarGenerator(nn.Module):
    """Velocity field over the avatar latent clip, conditioned per block."""

    def __init__(self, cfg: Config, dtype=torch.float64):
        super().__init__()
        width = cfg["model.width"]
        C = cfg["data.latent_channels"]
        self.width, self.channels = width, C
        self.window = cfg["data.frames_window"]
        self.in_proj = nn.Linear(2 * C, width, dtype=dtype)
        self.out_proj = nn.Linear(width, C, dtype=dtype)
        self.time_embed = TimeEmbedding(width, dtype=dtype)
        self.audio_fuser = nn.Linear(cfg["data.audio_window"] * cfg["data.audio_dim"],
                                     width, dtype=dtype)
        self.blocks = nn.ModuleList(
            GeneratorBlock(width, cfg["model.heads"], cfg["model.ffn_mult"],
                           cfg["model.context_dim"], cfg["model.emotion_dim"],
                           fused_injection=cfg["model.no_sdcm"], dtype=dtype)
            for _ in range(cfg["model.blocks"]))

    def fuse_avatar_audio(self, avatar_audio: torch.Tensor) -> torch.Tensor:
        """(B, T_cur, L_w, D_a) windowed self-audio -> (B, T_cur, width) tokens."""
        B, T, L, D = avatar_audio.shape
        return self.audio_fuser(avatar_audio.reshape(B, T, L * D))

    def forward(self, x: torch.Tensor, t: torch.Tensor, cond: Dict,
                return_features: bool = False):
        """Velocity for the current window.

        x: (B, T_cur, C, H, W) noisy current frames; t: (B,) flow times;
        cond: ref (B,C,H,W), prev (B,T_prev,C,H,W), avatar_audio windows,
        user_ctx (B,T_cur,D_p) or None, emotion (B,N_e,D_e) or None,
        masks (lip, face) tensors. Returned velocity covers only the current
        window; block features (when requested) cover prefix + window.
        """
        B, T_cur, C, H, W = x.shape
        prev = cond["prev"]
        T_prev = prev.shape[1]
        full = torch.cat([prev, x], dim=1) if T_prev else x
        T = T_prev + T_cur
        ref = cond["ref"][:, None].expand(B, T, C, H, W)
        inp = torch.cat([full, ref], dim=2).permute(0, 1, 3, 4, 2)  # channels-last
        h = self.in_proj(inp)
        h = h + self.time_embed(t)[:, None, None, None, :]
        avatar_ctx = self.fuse_avatar_audio(cond["avatar_audio"])
        feats: List[torch.Tensor] = []
        for block in self.blocks:
            h = block(h, cond.get("user_ctx"), avatar_ctx, cond.get("emotion"),
                      cond["masks"], ctx_offset=T_prev)
            if return_features:
                feats.append(h)
        v = self.out_proj(h).permute(0, 1, 4, 2, 3)
        v = v[:, T_prev:]
        return (v, feats) if return_features else v

    def adapter_targets(self) -> List[Tuple[str, nn.Module]]:
        """Named q/k/v projections of both injection streams and the emotion
        cross-attention in every block (the designated adapter sites)."""
        targets = []
        for b, block in enumerate(self.blocks):
            inj = block.injection
            if isinstance(inj, RegionDecoupledInjection):
                attns = [("injection.user", inj.stream_user.attn),
                         ("injection.avatar", inj.stream_avatar.attn)]
            else:
                attns = [("injection.fused", inj.stream.attn)]
            attns.append(("emotion", block.attn_emotion))
            for tag, attn in attns:
                for pname, proj in zip(("q", "k", "v"), attn.adaptable_projections()):
                    targets.append((f"block{b}.{tag}.{pname}", proj))
        return targets

    def install_adapters(self, rank: int, scale: float = 1.0,
                         generator: Optional[torch.Generator] = None):
        for _, proj in self.adapter_targets():
            proj.install_adapter(rank, scale, generator)


def flow_sample(velocity_fn: Callable[[torch.Tensor, float], torch.Tensor],
                x0: torch.Tensor, n_steps: int) -> torch.Tensor:
    """Euler integration of dx/dt = v(x, t) on the uniform grid t_k = k/n."""
    if n_steps < 1:
        raise ValidationError(f"flow_sample: n_steps must be >= 1, got {n_steps}")
    x = x0
    for k in range(n_steps):
        x = x + velocity_fn(x, k / n_steps) / n_steps
    return x
