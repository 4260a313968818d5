"""Motion-space evaluation metrics: reconstruction error, distributional
Fréchet distance, cluster-assignment diversity entropy, temporal variance,
user-avatar responsiveness, and a lip-sync proxy against the self-audio
envelope. All metrics are numpy-only, deterministic, and paired with
brute-force oracles in the test suite.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .datamodel import (AudioFeatureSeq, MotionLatentCodec, MotionSeq, RegionMasks,
                        SpatialLatent, ValidationError)
from .emotions import EXPRESSION_DIMS, MOTION_DIMS
from .datamodel import LIP_MOTION_DIMS


class MetricError(ValueError):
    """Inputs violate a metric precondition (lengths, variance, counts)."""


def _split(data: np.ndarray, split: str) -> np.ndarray:
    if split == "exp":
        return data[:, :EXPRESSION_DIMS]
    if split == "pose":
        return data[:, EXPRESSION_DIMS:]
    if split == "all":
        return data
    raise MetricError(f"unknown split '{split}'")


def motion_mse(gen: MotionSeq, gt: MotionSeq) -> Tuple[float, float]:
    """Mean squared error over time and dims, per (expression, pose) split."""
    if gen.frames != gt.frames:
        raise MetricError(f"motion mse: lengths differ ({gen.frames} vs {gt.frames})")
    diff = (gen.data.astype(np.float64) - gt.data.astype(np.float64)) ** 2
    return float(diff[:, :EXPRESSION_DIMS].mean()), float(diff[:, EXPRESSION_DIMS:].mean())


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition, eigenvalues clipped at 0."""
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(gen_set: Sequence[MotionSeq], gt_set: Sequence[MotionSeq],
                     split: str = "exp", reg: float = 1e-6) -> float:
    """Gaussian Fréchet distance between pooled frame distributions.

    ||mu_g - mu_r||^2 + Tr(S_g + S_r - 2 (S_g S_r)^{1/2}), covariances
    regularized by +reg*I; the cross term uses the symmetrized product root
    S_g^{1/2} S_r S_g^{1/2}.
    """
    g = np.concatenate([_split(m.data.astype(np.float64), split) for m in gen_set])
    r = np.concatenate([_split(m.data.astype(np.float64), split) for m in gt_set])
    if len(g) < 2 or len(r) < 2:
        raise MetricError("frechet distance: need at least 2 frames per set")
    dim = g.shape[1]
    if len(g) < dim or len(r) < dim:
        warnings.warn("frechet distance: fewer frames than dims; covariance is "
                      "rank-deficient and relies on regularization", RuntimeWarning)
    mu_g, mu_r = g.mean(0), r.mean(0)
    cov_g = np.cov(g, rowvar=False) + reg * np.eye(dim)
    cov_r = np.cov(r, rowvar=False) + reg * np.eye(dim)
    root_g = _psd_sqrt(cov_g)
    cross = _psd_sqrt(root_g @ cov_r @ root_g)
    val = float(np.sum((mu_g - mu_r) ** 2) + np.trace(cov_g) + np.trace(cov_r)
                - 2.0 * np.trace(cross))
    return max(val, 0.0)


def kmeans_fit(data: np.ndarray, k: int, seed: int, restarts: int = 20,
               iters: int = 300) -> np.ndarray:
    """Lloyd's k-means with squared-Euclidean distance; seeded, restarted,
    empty clusters re-seeded to random points; returns the best centroids."""
    n = data.shape[0]
    if k < 1:
        raise MetricError("kmeans: k must be >= 1")
    if np.unique(data, axis=0).shape[0] < k:
        raise MetricError(f"kmeans: fewer than k={k} distinct points")
    rng = np.random.default_rng(seed)
    best, best_inertia = None, np.inf
    for _ in range(restarts):
        centroids = data[rng.choice(n, size=k, replace=False)].copy()
        for _ in range(iters):
            d2 = ((data[:, None, :] - centroids[None, :, :]) ** 2).sum(-1)
            assign = d2.argmin(1)
            new = np.empty_like(centroids)
            moved = False
            for j in range(k):
                pts = data[assign == j]
                if len(pts) == 0:
                    new[j] = data[rng.integers(n)]  # re-seed empty cluster
                    moved = True
                else:
                    new[j] = pts.mean(0)
            if not moved and np.allclose(new, centroids, rtol=0, atol=1e-12):
                centroids = new
                break
            centroids = new
        d2 = ((data[:, None, :] - centroids[None, :, :]) ** 2).sum(-1)
        inertia = d2.min(1).sum()
        if inertia < best_inertia:
            best, best_inertia = centroids.copy(), inertia
    return best


def assignment_entropy(counts: np.ndarray) -> float:
    """Shannon entropy (base 2) of a cluster-assignment histogram."""
    p = counts.astype(np.float64)
    total = p.sum()
    if total == 0:
        raise MetricError("entropy: empty assignment histogram")
    p = p[p > 0] / total
    return float(-(p * np.log2(p)).sum())


def sid(gen_set: Sequence[MotionSeq], gt_set: Sequence[MotionSeq], split: str, k: int,
        seed: int = 0) -> float:
    """Diversity score: entropy of generated frames' assignments to k-means
    clusters fit on the ground-truth frames of the split."""
    gt = np.concatenate([_split(m.data.astype(np.float64), split) for m in gt_set])
    gen = np.concatenate([_split(m.data.astype(np.float64), split) for m in gen_set])
    centroids = kmeans_fit(gt, k, seed)
    d2 = ((gen[:, None, :] - centroids[None, :, :]) ** 2).sum(-1)
    assign = d2.argmin(1)
    return assignment_entropy(np.bincount(assign, minlength=k))


def temporal_variance(gen_set: Sequence[MotionSeq]) -> float:
    """Per-sequence unbiased variance over time, averaged over dims, then
    averaged over sequences."""
    vals = []
    for m in gen_set:
        if m.frames < 2:
            raise MetricError("temporal variance: sequences need >= 2 frames")
        vals.append(m.data.astype(np.float64).var(axis=0, ddof=1).mean())
    return float(np.mean(vals))


def _pcc_per_dim(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Pearson correlation per dim over time; returns (pcc, valid mask)."""
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    ac = a - a.mean(0)
    bc = b - b.mean(0)
    sa = np.sqrt((ac ** 2).sum(0))
    sb = np.sqrt((bc ** 2).sum(0))
    valid = (sa > 1e-12) & (sb > 1e-12)
    pcc = np.zeros(a.shape[1])
    pcc[valid] = (ac * bc).sum(0)[valid] / (sa * sb)[valid]
    return pcc, valid


def rpcc(gen: MotionSeq, gt: MotionSeq, user: MotionSeq,
         frames: Optional[np.ndarray] = None, dims: Optional[np.ndarray] = None,
         mode: str = "per_dim") -> float:
    """Responsiveness error: |pcc(gt, user) - pcc(gen, user)|.

    mode 'per_dim' (default): PCC per dim over time, averaged over dims that
    are non-constant in all three sequences (constant dims are skipped).
    mode 'mean_signal': PCC of the dim-averaged signals.
    `frames` restricts time (e.g. listening segments); `dims` restricts dims.
    """
    if not (gen.frames == gt.frames == user.frames):
        raise MetricError("rpcc: sequence lengths differ")
    g, t, u = gen.data, gt.data, user.data
    if frames is not None:
        g, t, u = g[frames], t[frames], u[frames]
    if dims is not None:
        g, t, u = g[:, dims], t[:, dims], u[:, dims]
    if g.shape[0] < 3:
        raise MetricError("rpcc: need at least 3 frames")
    if mode == "mean_signal":
        g, t, u = g.mean(1, keepdims=True), t.mean(1, keepdims=True), u.mean(1, keepdims=True)
    elif mode != "per_dim":
        raise MetricError(f"rpcc: unknown mode '{mode}'")
    pcc_gt, valid_gt = _pcc_per_dim(t, u)
    pcc_gen, valid_gen = _pcc_per_dim(g, u)
    valid = valid_gt & valid_gen
    if not valid.any():
        raise MetricError("rpcc: all dims have zero temporal variance")
    return float(np.abs(pcc_gt[valid] - pcc_gen[valid]).mean())


def audio_envelope(audio: AudioFeatureSeq) -> np.ndarray:
    """Per-frame RMS energy over (window, dim) of the raw window features."""
    return np.sqrt(np.mean(audio.data.astype(np.float64) ** 2, axis=(1, 2)))


def lipsync_proxy(gen_latent: SpatialLatent, avatar_audio: AudioFeatureSeq,
                  masks: RegionMasks, codec: MotionLatentCodec,
                  speaking: np.ndarray) -> float:
    """PCC between the decoded lip channel and the self-audio RMS envelope
    over speaking frames (requires at least 4)."""
    if gen_latent.frames != avatar_audio.frames or gen_latent.frames != len(speaking):
        raise MetricError("lipsync: latent/audio/speaking lengths differ")
    speak = np.asarray(speaking) > 0
    if speak.sum() < 4:
        raise MetricError(f"lipsync: need >= 4 speaking frames, got {int(speak.sum())}")
    motion = codec.decode(gen_latent).data
    lip = motion[:, list(LIP_MOTION_DIMS)].mean(axis=1)
    env = audio_envelope(avatar_audio)
    lip_s, env_s = lip[speak], env[speak]
    if lip_s.std() < 1e-12 or env_s.std() < 1e-12:
        raise MetricError("lipsync: zero variance in lip channel or envelope "
                          "over speaking frames (skipped dim)")
    return float(np.corrcoef(lip_s, env_s)[0, 1])


@dataclass
class MetricReport:
    """Aggregate metric values plus the per-sequence breakdown."""

    fd_exp: float
    fd_pose: float
    sid_exp: float
    sid_pose: float
    var_mean: float
    mse_exp: float
    mse_pose: float
    rpcc: float
    lipsync_pcc: Optional[float] = None
    per_sequence: List[Dict] = field(default_factory=list)

    def validate(self, k_exp: int, k_pose: int):
        checks = [
            (0.0 <= self.sid_exp <= np.log2(k_exp) + 1e-9, "sid_exp out of [0, log2(k)]"),
            (0.0 <= self.sid_pose <= np.log2(k_pose) + 1e-9, "sid_pose out of [0, log2(k)]"),
            (self.var_mean >= 0, "var_mean negative"),
            (self.mse_exp >= 0 and self.mse_pose >= 0, "mse negative"),
            (self.fd_exp >= 0 and self.fd_pose >= 0, "fd negative"),
            (0.0 <= self.rpcc <= 2.0, "rpcc out of [0, 2]"),
        ]
        if self.lipsync_pcc is not None:
            checks.append((-1.0 <= self.lipsync_pcc <= 1.0, "lipsync_pcc out of [-1, 1]"))
        for ok, msg in checks:
            if not ok:
                raise MetricError(f"metric report invariant violated: {msg}")

    def to_dict(self) -> Dict:
        return {"fd_exp": self.fd_exp, "fd_pose": self.fd_pose, "sid_exp": self.sid_exp,
                "sid_pose": self.sid_pose, "var_mean": self.var_mean, "mse_exp": self.mse_exp,
                "mse_pose": self.mse_pose, "rpcc": self.rpcc, "lipsync_pcc": self.lipsync_pcc,
                "per_sequence": self.per_sequence}

    def table(self) -> str:
        rows = [("FD exp", self.fd_exp), ("FD pose", self.fd_pose),
                ("SID exp", self.sid_exp), ("SID pose", self.sid_pose),
                ("Var", self.var_mean), ("MSE exp", self.mse_exp),
                ("MSE pose", self.mse_pose), ("rPCC", self.rpcc)]
        if self.lipsync_pcc is not None:
            rows.append(("LipSync PCC", self.lipsync_pcc))
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{name:<{width}}  {val: .6f}" for name, val in rows)


def evaluate_sets(gen_set: Sequence[MotionSeq], gt_set: Sequence[MotionSeq],
                  user_set: Sequence[MotionSeq], k_exp: int = 15, k_pose: int = 9,
                  kmeans_seed: int = 0, rpcc_mode: str = "per_dim",
                  lipsync: Optional[Sequence[Optional[float]]] = None) -> MetricReport:
    """Full metric suite over matched (generated, ground-truth, user) triples."""
    if not (len(gen_set) == len(gt_set) == len(user_set)) or not gen_set:
        raise MetricError("evaluate: need equally many gen/gt/user sequences")
    per_seq = []
    rpccs, lips = [], []
    for i, (g, t, u) in enumerate(zip(gen_set, gt_set, user_set)):
        mse_e, mse_p = motion_mse(g, t)
        r = rpcc(g, t, u, mode=rpcc_mode)
        rec = {"index": i, "mse_exp": mse_e, "mse_pose": mse_p, "rpcc": r}
        if lipsync is not None and lipsync[i] is not None:
            rec["lipsync_pcc"] = lipsync[i]
            lips.append(lipsync[i])
        rpccs.append(r)
        per_seq.append(rec)
    mse_exp = float(np.mean([r["mse_exp"] for r in per_seq]))
    mse_pose = float(np.mean([r["mse_pose"] for r in per_seq]))
    report = MetricReport(
        fd_exp=frechet_distance(gen_set, gt_set, "exp"),
        fd_pose=frechet_distance(gen_set, gt_set, "pose"),
        sid_exp=sid(gen_set, gt_set, "exp", k_exp, kmeans_seed),
        sid_pose=sid(gen_set, gt_set, "pose", k_pose, kmeans_seed),
        var_mean=temporal_variance(gen_set),
        mse_exp=mse_exp, mse_pose=mse_pose,
        rpcc=float(np.mean(rpccs)),
        lipsync_pcc=float(np.mean(lips)) if lips else None,
        per_sequence=per_seq)
    report.validate(k_exp, k_pose)
    return report
