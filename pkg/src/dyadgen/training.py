"""Two-stage training: losses, energy-based frame weights, trainers.

Stage 1 learns identity-consistent, self-audio-synchronized generation
(flow-matching + decoded-motion L1). Stage 2 freezes the stage-1 generator as
a reference, installs low-rank adapters on the designated cross-attention
projections, and trains the conditioning pipeline plus the new injection
branches under flow-matching + a feature-alignment regularizer whose frame
weights follow the self-audio RMS energy (speaking frames anchored to the
reference, listening frames free to adapt).
"""

from __future__ import annotations

import copy
import json
import os
import time
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .config import Config, ConfigError
from .datamodel import ConversationSample, ValidationError
from .pipeline import AvatarModel, load_checkpoint
from .arrayio import read_container


class NumericalError(RuntimeError):
    """Training hit a non-finite loss; message carries diagnostics."""


def rms_frame_weights(avatar_audio: np.ndarray, w_min: float, eps: float = 1e-8) -> np.ndarray:
    """Per-frame alignment weights from windowed self-audio RMS energy.

    e(i) = RMS over (window, dim) of frame i; w = w_min + (1-w_min) * e / (max e + eps).
    Silent clips give uniform w_min; positive rescaling of the audio leaves w
    unchanged up to eps. Accepts (T, L_w, D) or (B, T, L_w, D).
    """
    if not 0.0 <= w_min <= 1.0:
        raise ValidationError(f"w_min must lie in [0, 1], got {w_min}")
    x = np.asarray(avatar_audio, dtype=np.float64)
    batched = x.ndim == 4
    if not batched:
        x = x[None]
    energy = np.sqrt(np.mean(x ** 2, axis=(2, 3)))            # (B, T)
    peak = energy.max(axis=1, keepdims=True)
    w = w_min + (1.0 - w_min) * energy / (peak + eps)
    return w if batched else w[0]


def flow_matching_terms(model: AvatarModel, batch: Dict, cond: Dict,
                        gen: torch.Generator, return_features: bool = False) -> Dict:
    """Draw (t, x0) per clip, form x_t on the linear path, evaluate the
    velocity, and return the flow loss plus the pieces other losses reuse."""
    x1 = batch["gt_latent"]
    B = x1.shape[0]
    if B == 0:
        raise ValidationError("flow matching: empty batch")
    t = torch.rand(B, generator=gen, dtype=torch.float64).to(x1.dtype)
    x0 = torch.randn(x1.shape, generator=gen, dtype=torch.float64).to(x1.dtype)
    tb = t.view(B, 1, 1, 1, 1)
    x_t = (1.0 - tb) * x0 + tb * x1
    out = model.velocity(x_t, t, cond, return_features=return_features)
    v, feats = out if return_features else (out, None)
    target = x1 - x0
    flow = torch.mean((v - target) ** 2)
    return {"flow": flow, "velocity": v, "features": feats, "x_t": x_t, "t": t,
            "x0": x0, "x1": x1}


def pixel_loss(gen_latent: torch.Tensor, gt_latent: torch.Tensor,
               decode_matrix: torch.Tensor) -> torch.Tensor:
    """L1 distance between motion sequences decoded from two latent clips."""
    if gen_latent.shape != gt_latent.shape:
        raise ValidationError("pixel loss: latent shapes differ")
    flat_g = gen_latent.reshape(*gen_latent.shape[:-3], -1)
    flat_t = gt_latent.reshape(*gt_latent.shape[:-3], -1)
    motion_g = flat_g @ decode_matrix.T
    motion_t = flat_t @ decode_matrix.T
    return torch.mean(torch.abs(motion_g - motion_t))


def denoised_estimate(x_t: torch.Tensor, t: torch.Tensor, velocity: torch.Tensor) -> torch.Tensor:
    """One-step denoised endpoint estimate x1_hat = x_t + (1-t) * v."""
    tb = t.view(-1, 1, 1, 1, 1)
    return x_t + (1.0 - tb) * velocity


def feature_alignment_loss(student_feats: Sequence[torch.Tensor],
                           reference_feats: Sequence[torch.Tensor],
                           block_subset: Sequence[int], weights: torch.Tensor,
                           window: int) -> torch.Tensor:
    """Frame-weighted feature distance to the frozen reference.

    (1/|S|) sum over blocks in S, sum over current frames i of
    w(i) * mean-over-cells ||h(i) - h_ref(i)||^2.
    """
    if len(student_feats) != len(reference_feats):
        raise ValidationError("alignment: student/reference block counts differ")
    if len(block_subset) == 0:
        raise ValidationError("alignment: empty block subset")
    total = None
    for idx in block_subset:
        hs = student_feats[idx][:, -window:]
        hr = reference_feats[idx][:, -window:]
        if hs.shape != hr.shape:
            raise ValidationError("alignment: feature shapes differ between models")
        d = torch.mean((hs - hr) ** 2, dim=(2, 3, 4))   # (B, T_cur)
        term = (weights * d).sum(dim=1).mean()
        total = term if total is None else total + term
    return total / len(block_subset)


class _Log:
    def __init__(self, path):
        self.path = path
        self.records: List[Dict] = []

    def add(self, **record):
        self.records.append(record)

    def flush(self):
        with open(self.path, "w", encoding="utf-8") as f:
            for rec in self.records:
                f.write(json.dumps(rec, sort_keys=True) + "\n")


def _check_finite(loss: torch.Tensor, step: int, parts: Dict[str, float]):
    if not torch.isfinite(loss):
        raise NumericalError(f"non-finite loss at step {step}: "
                             + ", ".join(f"{k}={v:.6g}" for k, v in parts.items()))


def _draw_batch(dataset: Sequence[ConversationSample], batch_size: int,
                gen: torch.Generator) -> List[ConversationSample]:
    idx = torch.randint(len(dataset), (batch_size,), generator=gen)
    return [dataset[int(i)] for i in idx]


def stage1_train(dataset: Sequence[ConversationSample], cfg: Config, out_dir,
                 log_name: str = "train_log.jsonl",
                 ckpt_name: str = "stage1.ckpt") -> str:
    """Train the base generator on self-audio + reference conditioning only."""
    os.makedirs(out_dir, exist_ok=True)
    if not dataset:
        raise ValidationError("stage 1: empty dataset")
    model = AvatarModel(cfg)
    model.freeze_for_stage(1)
    opt = torch.optim.AdamW(model.stage1_parameters(), lr=cfg["train.lr_base"],
                            betas=(cfg["train.beta1"], cfg["train.beta2"]),
                            weight_decay=cfg["train.weight_decay"])
    gen = torch.Generator().manual_seed(cfg["train.seed"])
    decode_m = torch.as_tensor(model.codec.decode_matrix, dtype=model.dtype)
    lam = cfg["train.lambda_pixel"]
    log = _Log(os.path.join(out_dir, log_name))
    t_start = time.time()
    for step in range(cfg["train.steps"]):
        batch = model.collate(_draw_batch(dataset, cfg["train.batch"], gen))
        cond = model.build_cond(batch, conditioned=False)
        terms = flow_matching_terms(model, batch, cond, gen)
        loss = terms["flow"]
        parts = {"flow": float(terms["flow"].detach())}
        if lam > 0:
            x1_hat = denoised_estimate(terms["x_t"], terms["t"], terms["velocity"])
            lp = pixel_loss(x1_hat, terms["x1"], decode_m)
            loss = loss + lam * lp
            parts["pixel"] = float(lp)
        parts["total"] = float(loss)
        _check_finite(loss, step, parts)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if step % cfg["train.log_every"] == 0 or step == cfg["train.steps"] - 1:
            log.add(step=step, wall=round(time.time() - t_start, 3), **parts)
    model.stage = 1
    ckpt = os.path.join(out_dir, ckpt_name)
    model.save_checkpoint(ckpt, step=cfg["train.steps"])
    log.flush()
    return ckpt


def _load_stage1_generator(student: AvatarModel, stage1_ckpt: str):
    """Copy stage-1 generator weights into a (possibly re-configured) student."""
    arrays, meta = read_container(stage1_ckpt)
    if meta.get("format") != "checkpoint":
        raise ConfigError(f"{stage1_ckpt}: not a checkpoint")
    if bool(meta["config"].get("model.no_sdcm")) != bool(student.cfg["model.no_sdcm"]):
        raise ConfigError("stage 2: injection variant differs from the stage-1 checkpoint")
    gen_state = {}
    for key, arr in arrays.items():
        prefix, name = key.split("/", 1)
        if prefix == "base" and name.startswith("generator."):
            gen_state[name[len("generator."):]] = torch.as_tensor(arr, dtype=student.dtype)
    student.generator.load_state_dict(gen_state, strict=True)


def stage2_train(dataset: Sequence[ConversationSample], stage1_ckpt: str, cfg: Config,
                 out_dir, log_name: str = "train_log.jsonl",
                 ckpt_name: str = "stage2.ckpt") -> str:
    """Adapt the frozen stage-1 generator to interactive conditioning."""
    os.makedirs(out_dir, exist_ok=True)
    if not dataset:
        raise ValidationError("stage 2: empty dataset")
    student = AvatarModel(cfg)
    _load_stage1_generator(student, stage1_ckpt)
    reference = copy.deepcopy(student.generator)
    for p in reference.parameters():
        p.requires_grad_(False)
    reference.eval()

    gen = torch.Generator().manual_seed(cfg["train.seed"])
    student.generator.install_adapters(cfg["train.adapter_rank"],
                                       cfg["train.adapter_scale"], generator=gen)
    student.freeze_for_stage(2)
    direct, adapters = student.stage2_parameter_groups()
    opt = torch.optim.AdamW(
        [{"params": direct, "lr": cfg["train.lr_base"]},
         {"params": adapters, "lr": cfg["train.lr_adapters"]}],
        betas=(cfg["train.beta1"], cfg["train.beta2"]),
        weight_decay=cfg["train.weight_decay"])
    gamma = cfg["train.gamma_align"]
    n_blocks = len(student.generator.blocks)
    subset_size = min(cfg["train.align_blocks"], n_blocks)
    if subset_size < 1:
        raise ConfigError("train.align_blocks must be >= 1")
    log = _Log(os.path.join(out_dir, log_name))
    t_start = time.time()
    window = cfg["data.frames_window"]
    for step in range(cfg["train.steps"]):
        samples = _draw_batch(dataset, cfg["train.batch"], gen)
        batch = student.collate(samples)
        cond = student.build_cond(batch, conditioned=True)
        terms = flow_matching_terms(student, batch, cond, gen, return_features=True)
        loss = terms["flow"]
        parts = {"flow": float(terms["flow"].detach())}
        if gamma > 0:
            with torch.no_grad():
                _, ref_feats = reference(terms["x_t"], terms["t"], cond,
                                         return_features=True)
            subset = torch.randperm(n_blocks, generator=gen)[:subset_size].tolist()
            w = torch.as_tensor(rms_frame_weights(
                np.stack([s.avatar_audio.data for s in samples]), cfg["train.w_min"]),
                dtype=student.dtype)
            la = feature_alignment_loss(terms["features"], ref_feats, subset, w, window)
            loss = loss + gamma * la
            parts["align"] = float(la)
        parts["total"] = float(loss)
        _check_finite(loss, step, parts)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        student.project_stable()
        if step % cfg["train.log_every"] == 0 or step == cfg["train.steps"] - 1:
            log.add(step=step, wall=round(time.time() - t_start, 3), **parts)
    student.stage = 2
    ckpt = os.path.join(out_dir, ckpt_name)
    student.save_checkpoint(ckpt, step=cfg["train.steps"])
    log.flush()
    return ckpt
