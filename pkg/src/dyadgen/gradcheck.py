"""Central finite-difference verification of every differentiable operation.

Each registered op builds a tiny float64 instance: a scalar-valued closure
over named parameter/input tensors. Analytic gradients come from autograd;
numeric gradients from central differences at eps=1e-5. The per-slot error is

    err(slot) = max|g_a - g_n| / (max|g_a| + max|g_n| + 1e-12)

Linear ops must pass at 1e-9, smooth nonlinear ops at 1e-4.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import torch

from .config import Config
from .conditioning import GatedCrossAttentionFusion, GatedModulation, ScanLayer
from .attention import CrossAttention
from .injection import RegionDecoupledInjection
from .pipeline import AvatarModel
from .training import (denoised_estimate, feature_alignment_loss, flow_matching_terms,
                       pixel_loss)

EPS = 1e-5

# (closure returning a scalar, named slots to differentiate)
OpBuild = Tuple[Callable[[], torch.Tensor], Dict[str, torch.Tensor]]


@dataclass
class OpSpec:
    name: str
    threshold: float
    builder: Callable[[int], OpBuild]


@dataclass
class OpResult:
    name: str
    threshold: float
    slot_errors: Dict[str, float] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.slot_errors.values()) if self.slot_errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error <= self.threshold


def central_difference_check(fn: Callable[[], torch.Tensor],
                             slots: Dict[str, torch.Tensor],
                             eps: float = EPS) -> Dict[str, float]:
    for t in slots.values():
        t.requires_grad_(True)
    value = fn()
    if value.ndim != 0:
        raise ValueError("gradcheck closures must return scalars")
    grads = torch.autograd.grad(value, list(slots.values()), allow_unused=True)
    errors: Dict[str, float] = {}
    for (name, tensor), grad in zip(slots.items(), grads):
        analytic = torch.zeros_like(tensor) if grad is None else grad
        numeric = torch.zeros_like(tensor)
        flat = tensor.detach().reshape(-1)
        nflat = numeric.reshape(-1)
        with torch.no_grad():
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                f_plus = fn().item()
                flat[i] = orig - eps
                f_minus = fn().item()
                flat[i] = orig
                nflat[i] = (f_plus - f_minus) / (2 * eps)
        scale = analytic.abs().max() + numeric.abs().max() + 1e-12
        errors[name] = float((analytic - numeric).abs().max() / scale)
    for t in slots.values():
        t.requires_grad_(False)
    return errors


def _weights_like(t: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    return torch.randn(t.shape, generator=gen, dtype=torch.float64)


def _scalarize(out: torch.Tensor, gen: torch.Generator) -> Callable:
    w = torch.randn(out.shape, generator=gen, dtype=torch.float64)
    return lambda o: (w * o).sum()


def _module_slots(module: torch.nn.Module, prefix: str = "") -> Dict[str, torch.Tensor]:
    return {prefix + name: p for name, p in module.named_parameters()}


def _tiny_cfg() -> Config:
    return Config({
        "data.frames_total": 6, "data.frames_window": 2, "data.frames_prev": 1,
        "data.audio_window": 3, "data.audio_dim": 4, "data.visual_tokens": 4,
        "data.visual_dim": 6, "data.latent_channels": 2, "data.latent_h": 4,
        "data.latent_w": 4,
        "mask.face_r0": 0, "mask.face_r1": 3, "mask.face_c0": 0, "mask.face_c1": 3,
        "mask.lip_r0": 2, "mask.lip_r1": 2, "mask.lip_c0": 1, "mask.lip_c1": 2,
        "model.width": 8, "model.blocks": 1, "model.heads": 2, "model.ffn_mult": 2,
        "model.context_dim": 6, "model.scan_layers": 1, "model.scan_state": 5,
        "model.emotion_dim": 6, "model.understanding_dim": 5, "model.understanding_tokens": 2,
        "model.dtype": "float64",
    })


def _build_linear(seed: int) -> OpBuild:
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(3, 4, generator=g, dtype=torch.float64)
    w = torch.randn(4, 5, generator=g, dtype=torch.float64)
    b = torch.randn(5, generator=g, dtype=torch.float64)
    s = _scalarize(torch.zeros(3, 5), g)
    return (lambda: s(x @ w + b)), {"x": x, "w": w, "b": b}


def _build_scan_layer(seed: int) -> OpBuild:
    g = torch.Generator().manual_seed(seed)
    layer = ScanLayer(3, 4, generator=g)
    x = torch.randn(1, 5, 3, generator=g, dtype=torch.float64)
    s = _scalarize(torch.zeros(1, 5, 3), g)
    slots = _module_slots(layer)
    slots["input"] = x
    return (lambda: s(layer(x))), slots


def _build_gated_modulation(seed: int) -> OpBuild:
    g = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    mod = GatedModulation(4)
    cur = torch.randn(1, 3, 3, 4, generator=g, dtype=torch.float64)
    ctx = torch.randn(1, 3, 4, generator=g, dtype=torch.float64)
    s = _scalarize(cur, g)
    slots = _module_slots(mod)
    slots.update(current=cur, context=ctx)
    return (lambda: s(mod(cur, ctx))), slots


def _build_gca_fuse(seed: int) -> OpBuild:
    g = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    fusion = GatedCrossAttentionFusion(4, 3)
    with torch.no_grad():  # open the gates so alpha/beta branches are exercised
        fusion.alpha.fill_(0.3)
        fusion.beta.fill_(-0.2)
    p = torch.randn(1, 3, 4, generator=g, dtype=torch.float64)
    s_tok = torch.randn(1, 4, 3, generator=g, dtype=torch.float64)
    s = _scalarize(p, g)
    slots = _module_slots(fusion)
    slots.update(percepts=p, understanding=s_tok)
    return (lambda: s(fusion(p, s_tok))), slots


def _build_cross_attend(seed: int) -> OpBuild:
    g = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    attn = CrossAttention(4, 3, heads=2)
    q = torch.randn(1, 5, 4, generator=g, dtype=torch.float64)
    ctx = torch.randn(1, 3, 3, generator=g, dtype=torch.float64)
    s = _scalarize(q, g)
    slots = _module_slots(attn)
    slots.update(queries=q, context=ctx)
    return (lambda: s(attn(q, ctx))), slots


def _tiny_injection(seed: int) -> Tuple[RegionDecoupledInjection, Dict, torch.Generator]:
    g = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    inj = RegionDecoupledInjection(4, 3, 3, heads=2)
    with torch.no_grad():  # exercise non-zero streams
        for attn in (inj.stream_user.attn, inj.stream_avatar.attn):
            attn.out.weight.add_(0.3 * torch.randn(attn.out.weight.shape, generator=g,
                                                   dtype=torch.float64))
            attn.out.bias.add_(0.1 * torch.randn(attn.out.bias.shape, generator=g,
                                                 dtype=torch.float64))
    lip = torch.zeros(4, 4, dtype=torch.float64)
    face = torch.zeros(4, 4, dtype=torch.float64)
    lip[2, 1:3] = 1.0
    face[1:4, 0:4] = 1.0
    face[lip > 0] = 0.0
    tensors = {
        "h": torch.randn(1, 2, 4, 4, 4, generator=g, dtype=torch.float64),
        "user_ctx": torch.randn(1, 2, 3, generator=g, dtype=torch.float64),
        "avatar_ctx": torch.randn(1, 2, 3, generator=g, dtype=torch.float64),
    }
    tensors["masks"] = (lip, face)
    return inj, tensors, g


def _build_spatial_gate(seed: int) -> OpBuild:
    inj, tensors, g = _tiny_injection(seed)
    hu = torch.randn(1, 2, 4, 4, 4, generator=g, dtype=torch.float64)
    ha = torch.randn(1, 2, 4, 4, 4, generator=g, dtype=torch.float64)
    s = _scalarize(torch.zeros(1, 2, 4, 4, 1), g)
    slots = {"conv_user." + n: p for n, p in inj.conv_user.named_parameters()}
    slots.update({"conv_avatar." + n: p for n, p in inj.conv_avatar.named_parameters()})
    slots.update({"gate_proj." + n: p for n, p in inj.gate_proj.named_parameters()})
    slots.update(h_user=hu, h_avatar=ha)
    return (lambda: s(inj.spatial_gate(hu, ha))), slots


def _build_sdcm_forward(seed: int) -> OpBuild:
    inj, tensors, g = _tiny_injection(seed)
    s = _scalarize(tensors["h"], g)
    slots = _module_slots(inj)
    slots.update(h=tensors["h"], user_ctx=tensors["user_ctx"], avatar_ctx=tensors["avatar_ctx"])
    fn = lambda: s(inj(tensors["h"], tensors["user_ctx"], tensors["avatar_ctx"],
                       tensors["masks"]))
    return fn, slots


def _tiny_model(seed: int) -> Tuple[AvatarModel, Dict, torch.Generator]:
    cfg = _tiny_cfg()
    model = AvatarModel(cfg)
    g = torch.Generator().manual_seed(seed)
    B, T_cur, T_prev = 1, 2, 1
    C, H, W = 2, 4, 4
    batchless = {
        "x": torch.randn(B, T_cur, C, H, W, generator=g, dtype=torch.float64),
        "ref": torch.randn(B, C, H, W, generator=g, dtype=torch.float64),
        "prev": torch.randn(B, T_prev, C, H, W, generator=g, dtype=torch.float64),
        "avatar_audio": torch.randn(B, T_cur, 3, 4, generator=g, dtype=torch.float64),
        "user_ctx": torch.randn(B, T_cur, 6, generator=g, dtype=torch.float64),
        "emotion": torch.randn(B, 2, 6, generator=g, dtype=torch.float64),
    }
    with torch.no_grad():  # open the zero-initialized branches
        for block in model.generator.blocks:
            for attn in (block.injection.stream_user.attn, block.injection.stream_avatar.attn,
                         block.attn_emotion):
                attn.out.weight.add_(0.3 * torch.randn(attn.out.weight.shape, generator=g,
                                                       dtype=torch.float64))
    return model, batchless, g


def _gen_cond(model: AvatarModel, tensors: Dict) -> Dict:
    return {"ref": tensors["ref"], "prev": tensors["prev"],
            "avatar_audio": tensors["avatar_audio"], "user_ctx": tensors["user_ctx"],
            "emotion": tensors["emotion"], "masks": model.masks}


def _build_generator_forward(seed: int) -> OpBuild:
    model, tensors, g = _tiny_model(seed)
    t = torch.full((1,), 0.37, dtype=torch.float64)
    s = _scalarize(tensors["x"], g)
    cond = _gen_cond(model, tensors)
    slots = _module_slots(model.generator)
    slots.update({k: v for k, v in tensors.items()})
    fn = lambda: s(model.generator(tensors["x"], t, cond))
    return fn, slots


def _build_flow_matching_loss(seed: int) -> OpBuild:
    model, tensors, g = _tiny_model(seed)
    t = torch.tensor([0.41], dtype=torch.float64)
    x0 = torch.randn(tensors["x"].shape, generator=g, dtype=torch.float64)
    x1 = torch.randn(tensors["x"].shape, generator=g, dtype=torch.float64)
    cond = _gen_cond(model, tensors)
    slots = _module_slots(model.generator)
    slots.update(x0=x0, x1=x1, user_ctx=tensors["user_ctx"], emotion=tensors["emotion"],
                 ref=tensors["ref"], prev=tensors["prev"],
                 avatar_audio=tensors["avatar_audio"])

    def fn():
        tb = t.view(1, 1, 1, 1, 1)
        x_t = (1 - tb) * x0 + tb * x1
        v = model.generator(x_t, t, cond)
        return torch.mean((v - (x1 - x0)) ** 2)

    return fn, slots


def _build_pixel_loss(seed: int) -> OpBuild:
    g = torch.Generator().manual_seed(seed)
    decode = torch.randn(7, 2 * 4 * 4, generator=g, dtype=torch.float64)
    a = torch.randn(1, 2, 2, 4, 4, generator=g, dtype=torch.float64)
    b = torch.randn(1, 2, 2, 4, 4, generator=g, dtype=torch.float64)
    return (lambda: pixel_loss(a, b, decode)), {"gen": a, "gt": b, "decode": decode}


def _build_hfa_loss(seed: int) -> OpBuild:
    g = torch.Generator().manual_seed(seed)
    feats = [torch.randn(1, 3, 2, 4, 4, generator=g, dtype=torch.float64) for _ in range(2)]
    refs = [torch.randn(1, 3, 2, 4, 4, generator=g, dtype=torch.float64) for _ in range(2)]
    w = torch.rand(1, 2, generator=g, dtype=torch.float64)
    fn = lambda: feature_alignment_loss(feats, refs, [0, 1], w, window=2)
    slots = {f"feat{i}": f for i, f in enumerate(feats)}
    slots.update({f"ref{i}": r for i, r in enumerate(refs)})
    slots["w"] = w
    return fn, slots


REGISTRY: Dict[str, OpSpec] = {}


def register_op(name: str, threshold: float, builder: Callable[[int], OpBuild]):
    REGISTRY[name] = OpSpec(name, threshold, builder)


register_op("linear_map", 1e-9, _build_linear)
register_op("scan_layer", 1e-4, _build_scan_layer)
register_op("gated_residual_modulate", 1e-4, _build_gated_modulation)
register_op("gca_fuse", 1e-4, _build_gca_fuse)
register_op("cross_attend", 1e-4, _build_cross_attend)
register_op("spatial_gate", 1e-4, _build_spatial_gate)
register_op("sdcm_forward", 1e-4, _build_sdcm_forward)
register_op("generator_forward", 1e-4, _build_generator_forward)
register_op("flow_matching_loss", 1e-4, _build_flow_matching_loss)
register_op("pixel_loss", 1e-4, _build_pixel_loss)
register_op("hfa_loss", 1e-4, _build_hfa_loss)


def run_gradcheck(names: Optional[List[str]] = None, seed: int = 0,
                  eps: float = EPS) -> List[OpResult]:
    names = names if names is not None else list(REGISTRY)
    results = []
    for name in names:
        if name not in REGISTRY:
            raise KeyError(f"unregistered differentiable op '{name}'")
        spec = REGISTRY[name]
        fn, slots = spec.builder(seed)
        res = OpResult(name=name, threshold=spec.threshold)
        res.slot_errors = central_difference_check(fn, slots, eps)
        results.append(res)
    return results


def format_report(results: List[OpResult]) -> str:
    lines = []
    for r in results:
        worst = max(r.slot_errors, key=r.slot_errors.get) if r.slot_errors else "-"
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{status}  {r.name:<26} max_rel_err={r.max_error:.3e} "
                     f"(threshold {r.threshold:.0e}, worst slot: {worst})")
    return "\n".join(lines)
