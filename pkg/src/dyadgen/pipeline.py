"""Assembled avatar model: conditioning pipeline + generator + codec.

Owns batch collation, conditioning construction, velocity evaluation, clip
sampling, stage-wise parameter groups, and the checkpoint format (named
arrays; adapter arrays stored under a separate prefix so a stage-1 reference
reloads without them).
"""

from __future__ import annotations

import os
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from .arrayio import read_container, write_container
from .conditioning import ConditioningPipeline, ScanLayer
from .config import Config, ConfigError
from .datamodel import (ConversationSample, LoadError, MotionLatentCodec, ValidationError,
                        codec_from_config, layout_from_config, masks_from_config)
from .generator import AvatarGenerator, flow_sample

CHECKPOINT_VERSION = 1

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


def torch_dtype(cfg: Config) -> torch.dtype:
    name = cfg["model.dtype"]
    if name not in _DTYPES:
        raise ConfigError(f"model.dtype must be one of {sorted(_DTYPES)}, got '{name}'")
    return _DTYPES[name]


class AvatarModel(nn.Module):
    """Conditioning pipeline + velocity-field generator, built from one config."""

    def __init__(self, cfg: Config, dtype: Optional[torch.dtype] = None):
        super().__init__()
        self.cfg = cfg
        dtype = dtype or torch_dtype(cfg)
        torch.manual_seed(cfg["model.seed"])
        self.conditioning = ConditioningPipeline(cfg)
        self.generator = AvatarGenerator(cfg)
        masks = masks_from_config(cfg)
        self.register_buffer("lip_mask", torch.as_tensor(masks.lip, dtype=torch.float64))
        self.register_buffer("face_mask", torch.as_tensor(masks.face, dtype=torch.float64))
        self.stage = 1
        self.to(dtype)
        self._dtype = dtype

    @property
    def dtype(self) -> torch.dtype:
        return self._dtype

    @property
    def codec(self) -> MotionLatentCodec:
        if not hasattr(self, "_codec"):
            self._codec = codec_from_config(self.cfg)
        return self._codec

    @property
    def masks(self) -> Tuple[torch.Tensor, torch.Tensor]:
        return self.lip_mask, self.face_mask

    # ---- batching ---------------------------------------------------------

    def collate(self, samples: Sequence[ConversationSample]) -> Dict:
        """Stack samples into a batch dict of torch tensors + stub-side arrays."""
        if not samples:
            raise ValidationError("collate: empty batch")
        layout = layout_from_config(self.cfg)
        shapes = samples[0].user_audio.data.shape
        for s in samples:
            if s.mask_layout != layout:
                raise ValidationError("collate: sample mask layout differs from config")
            if s.user_audio.data.shape != shapes:
                raise ValidationError("collate: inconsistent sample shapes in batch")

        def stack(get):
            return torch.as_tensor(np.stack([get(s) for s in samples]), dtype=self._dtype)

        return {
            "user_audio": stack(lambda s: s.user_audio.data),
            "user_visual": stack(lambda s: s.user_visual.data),
            "face_mask": torch.as_tensor(samples[0].user_visual.face_token_mask,
                                         dtype=self._dtype),
            "avatar_audio": stack(lambda s: s.avatar_audio.data),
            "ref": stack(lambda s: s.ref_latent),
            "prev": stack(lambda s: s.prev_frames.data),
            "gt_latent": stack(lambda s: s.gt_latent.data),
            "avatar_speaking": stack(lambda s: s.avatar_speaking),
            "dialogues": [s.dialogue for s in samples],
            "emotion_labels": [s.emotion_label for s in samples],
            "user_audio_np": [s.user_audio.data for s in samples],
            "user_visual_np": [s.user_visual.data for s in samples],
            "face_mask_np": samples[0].user_visual.face_token_mask,
        }

    # ---- conditioning and velocity ---------------------------------------

    def build_cond(self, batch: Dict, conditioned: Optional[bool] = None,
                   labels_override: Optional[Sequence[Optional[str]]] = None) -> Dict:
        """Conditioning dict for the generator; stage 1 runs unconditioned
        (reference + self-audio only)."""
        conditioned = self.stage >= 2 if conditioned is None else conditioned
        user_ctx, emotion, labels = None, None, [None] * len(batch["dialogues"])
        if conditioned:
            window = batch["avatar_audio"].shape[1]
            user_ctx = self.conditioning.user_context(batch, window)
            emotion, labels = self.conditioning.emotion_tokens(batch["dialogues"],
                                                               labels_override)
        return {"ref": batch["ref"], "prev": batch["prev"],
                "avatar_audio": batch["avatar_audio"], "user_ctx": user_ctx,
                "emotion": emotion, "masks": self.masks, "labels": labels}

    def velocity(self, x: torch.Tensor, t: torch.Tensor, cond: Dict,
                 return_features: bool = False):
        return self.generator(x, t, cond, return_features=return_features)

    @torch.no_grad()
    def sample_clip(self, batch: Dict, n_steps: int, seed: int,
                    conditioned: Optional[bool] = None,
                    labels_override: Optional[Sequence[Optional[str]]] = None,
                    prev_override: Optional[torch.Tensor] = None) -> np.ndarray:
        """Euler-integrate a latent clip; (B, T_cur, C, H, W) numpy output."""
        if prev_override is not None:
            batch = dict(batch, prev=prev_override.to(self._dtype))
        cond = self.build_cond(batch, conditioned, labels_override)
        B, T_cur = batch["gt_latent"].shape[:2]
        shape = (B, T_cur) + tuple(batch["gt_latent"].shape[2:])
        gen = torch.Generator().manual_seed(seed)
        x0 = torch.randn(shape, generator=gen, dtype=torch.float64).to(self._dtype)

        def vfield(x, t):
            tb = torch.full((B,), t, dtype=self._dtype)
            return self.velocity(x, tb, cond)

        x1 = flow_sample(vfield, x0, n_steps)
        return x1.double().numpy()

    # ---- parameter groups --------------------------------------------------

    _STAGE2_GEN_TRAINABLE = ("stream_user.attn.out", "attn_emotion.out", "conv_user",
                             "conv_avatar", "gate_proj", "norm_emotion", "proj_user",
                             "adapter_down", "adapter_up")

    def stage1_parameters(self) -> List[nn.Parameter]:
        """Backbone + avatar stream + gate; user/emotion branches stay silent."""
        skip = ("stream_user", "attn_emotion", "proj_user", "adapter_")
        return [p for name, p in self.generator.named_parameters()
                if not any(tag in name for tag in skip)]

    def stage2_parameter_groups(self) -> Tuple[List[nn.Parameter], List[nn.Parameter]]:
        """(directly trained params, adapter params); base weights stay frozen."""
        direct = list(self.conditioning.parameters())
        adapters = []
        for name, p in self.generator.named_parameters():
            if "adapter_" in name:
                adapters.append(p)
            elif any(tag in name for tag in self._STAGE2_GEN_TRAINABLE):
                direct.append(p)
        return direct, adapters

    def freeze_for_stage(self, stage: int):
        self.stage = stage
        for p in self.parameters():
            p.requires_grad_(False)
        if stage == 1:
            for p in self.stage1_parameters():
                p.requires_grad_(True)
        else:
            direct, adapters = self.stage2_parameter_groups()
            for p in direct + adapters:
                p.requires_grad_(True)

    def project_stable(self):
        """Re-impose |decay| < 1 on every scan layer after an optimizer step."""
        for m in self.conditioning.modules():
            if isinstance(m, ScanLayer):
                m.project_stable()

    # ---- checkpoints --------------------------------------------------------

    def save_checkpoint(self, path, step: int = 0, extra: Optional[Dict] = None):
        arrays = {}
        for name, tensor in self.state_dict().items():
            prefix = "adapter/" if "adapter_" in name else "base/"
            arrays[prefix + name] = tensor.detach().cpu().numpy()
        rank = 0
        for _, proj in self.generator.adapter_targets():
            if proj.adapter_down is not None:
                rank = proj.adapter_down.shape[1]
                break
        meta = {"format": "checkpoint", "version": CHECKPOINT_VERSION,
                "config": self.cfg.to_dict(), "stage": self.stage, "step": step,
                "dtype": str(self._dtype).replace("torch.", ""),
                "adapter_rank": rank,
                "adapter_scale": self.cfg["train.adapter_scale"],
                "extra": extra or {}}
        write_container(path, arrays, meta)


def load_checkpoint(path, with_adapters: bool = True) -> AvatarModel:
    if not os.path.exists(path):
        raise LoadError(f"checkpoint not found: {path}")
    arrays, meta = read_container(path)
    if meta.get("format") != "checkpoint":
        raise LoadError(f"{path}: not a checkpoint container")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise LoadError(f"{path}: checkpoint version {meta.get('version')} unsupported")
    cfg = Config(meta["config"])
    model = AvatarModel(cfg, dtype=_DTYPES[meta["dtype"]])
    model.stage = int(meta["stage"])
    rank = int(meta.get("adapter_rank", 0))
    if with_adapters and rank > 0:
        model.generator.install_adapters(rank, float(meta.get("adapter_scale", 1.0)))
    state = {}
    for key, arr in arrays.items():
        prefix, name = key.split("/", 1)
        if prefix == "adapter" and not (with_adapters and rank > 0):
            continue
        state[name] = torch.as_tensor(arr)
    missing, unexpected = model.load_state_dict(state, strict=False)
    unexpected = [k for k in unexpected]
    missing = [k for k in missing if with_adapters or "adapter_" not in k]
    if missing or unexpected:
        raise LoadError(f"{path}: state mismatch (missing {missing[:3]}, "
                        f"unexpected {unexpected[:3]})")
    return model
