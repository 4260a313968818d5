"""Procedural dyadic conversations with a known coupling law.

Each conversation is generated from a per-sample seed and follows:

  (a) half-duplex alternating speaking turns; the current window always
      contains at least ~5 frames of each role (single-window samples);
  (b) audio features: a smoothed random envelope times a fixed unit
      direction, nonzero only during the speaker's own turns, expanded into
      centered per-frame context windows;
  (c) user expression dims 1..49 = smoothed noise trajectories plus the
      sampled emotion's constant offset (plus a constant identity vector);
  (d) avatar lip dim 0 = affine in the avatar's own windowed audio RMS
      envelope during avatar turns, near-zero noise otherwise;
  (e) avatar expression dims 1..49 = mirror_gain * user expression delayed
      by `lag` frames + emotion offset + identity + gaussian noise;
  (f) dialogue turns embed the sampled emotion's keywords (user side only);
  (g) gt/prev/ref latents are codec encodings of the motion.

Optional regime extension (`synth.regime_coupling`): a per-conversation
arousal state, visible only as pre-window user-motion amplitude, flips the
mirror sign of half of the mirrored dims. Off by default, in which case
law (e) holds verbatim for every dim.

Visual face tokens are a fixed seeded linear featurization of user motion,
so user behavior (including the emotion offset) is decodable from them.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .config import Config, ConfigError
from .datamodel import (AudioFeatureSeq, ConversationSample, DialogueHistory, MotionSeq,
                        SpatialLatent, VisualTokenSeq, codec_from_config, layout_from_config,
                        save_sample)
from .emotions import (EMOTIONS, EXPRESSION_DIMS, LIP_DIM, MOTION_DIMS, OFFSET_DIMS,
                       emotion_offset, keywords_for, load_keyword_table)
from .utils import splitmix64

USER, AVATAR = "user", "avatar"

_USER_TEMPLATES = (
    "Honestly I have felt so {kw} since this morning.",
    "It has been a lot lately and I feel {kw} about all of it.",
    "Talking about what happened makes me {kw} all over again.",
)
_AVATAR_TEMPLATES = (
    "I hear you, tell me more about that.",
    "That sounds important, please go on.",
    "Thank you for sharing that with me.",
)

# Identity offsets avoid the lip channel and the emotion-offset dims so the
# emotion stays linearly decodable from mean expression.
_IDENTITY_DIMS = np.array([d for d in range(MOTION_DIMS)
                           if d != LIP_DIM and d not in OFFSET_DIMS.values()])

_MIRROR_DIMS = np.array([d for d in range(1, EXPRESSION_DIMS)])


def _gauss_kernel(sigma: float) -> np.ndarray:
    half = max(1, int(np.ceil(3 * sigma)))
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / max(sigma, 1e-6)) ** 2)
    return k / k.sum()


def _smooth(x: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian smoothing along axis 0 with edge padding."""
    k = _gauss_kernel(sigma)
    half = len(k) // 2
    pad = np.concatenate([np.repeat(x[:1], half, axis=0), x,
                          np.repeat(x[-1:], half, axis=0)], axis=0)
    if x.ndim == 1:
        return np.convolve(pad, k, mode="valid")
    return np.stack([np.convolve(pad[:, d], k, mode="valid") for d in range(x.shape[1])], axis=1)


def _alternating_schedule(total: int, window_end: int, window: int, rng: np.random.Generator,
                          turn_min: int, turn_max: int) -> np.ndarray:
    """Speaker id per frame (0=user, 1=avatar), half-duplex.

    The turn boundary nearest to `window_end` is placed so that the final
    window [window_end-window, window_end) holds 5..window-6 frames of the
    tail speaker, guaranteeing both roles appear in it.
    """
    tail_len = int(rng.integers(5, window - 5))  # frames of the tail turn inside the window
    tail_speaker = int(rng.integers(0, 2))
    speakers = np.zeros(total, dtype=np.int64)
    speakers[window_end - tail_len:] = tail_speaker
    # fill backwards with alternating turns
    pos = window_end - tail_len
    who = 1 - tail_speaker
    while pos > 0:
        length = int(rng.integers(turn_min, turn_max + 1))
        speakers[max(0, pos - length):pos] = who
        pos -= length
        who = 1 - who
    # forward past the first window for multi-window episodes
    pos = window_end
    who = 1 - tail_speaker
    while pos < total:
        length = int(rng.integers(turn_min, turn_max + 1))
        speakers[pos:pos + length] = who
        pos += length
        who = 1 - who
    return speakers


def _window_stack(feats: np.ndarray, L_w: int) -> np.ndarray:
    """(T, D) frame features -> (T, L_w, D) centered windows, zero padded."""
    T, D = feats.shape
    half = L_w // 2
    padded = np.concatenate([np.zeros((half, D)), feats, np.zeros((half, D))], axis=0)
    return np.stack([padded[t:t + L_w] for t in range(T)], axis=0)


def window_rms(windowed: np.ndarray) -> np.ndarray:
    """Per-frame RMS energy over (window, dim) of a (T, L_w, D) array."""
    return np.sqrt(np.mean(np.asarray(windowed, dtype=np.float64) ** 2, axis=(1, 2)))


@dataclass
class _Conversation:
    """Full-length signals of one synthetic conversation before slicing."""

    speakers: np.ndarray         # (T_conv,) 0=user 1=avatar
    user_audio_win: np.ndarray   # (T_conv, L_w, D_a)
    avatar_audio_win: np.ndarray
    user_motion: np.ndarray      # (T_conv, 56)
    avatar_motion: np.ndarray
    visual: np.ndarray           # (T_conv, N_tok, D_v)
    face_token_mask: np.ndarray
    dialogue: List[Tuple[str, str]]
    emotion: str
    regime_sign: int
    identity_avatar: np.ndarray  # (56,)


def face_token_indices(n_tokens: int) -> np.ndarray:
    """Central block of the square token grid; at least one token."""
    side = int(round(n_tokens ** 0.5))
    lo, hi = side // 4, side // 4 + max(1, side // 2)
    idx = [r * side + c for r in range(lo, min(hi, side)) for c in range(lo, min(hi, side))]
    return np.array(idx, dtype=np.int64)


def _featurizers(cfg: Config):
    """Fixed (dataset-independent) featurizer parameters from synth.feat_seed."""
    rng = np.random.default_rng(cfg["synth.feat_seed"])
    D_a, D_v = cfg["data.audio_dim"], cfg["data.visual_dim"]
    dir_user = rng.standard_normal(D_a)
    dir_user /= np.linalg.norm(dir_user)
    dir_avatar = rng.standard_normal(D_a)
    dir_avatar /= np.linalg.norm(dir_avatar)
    face_idx = face_token_indices(cfg["data.visual_tokens"])
    vis_proj = rng.standard_normal((len(face_idx), D_v, MOTION_DIMS)) / np.sqrt(MOTION_DIMS)
    return dir_user, dir_avatar, face_idx, vis_proj


def visual_featurizer_projection(cfg: Config) -> Tuple[np.ndarray, np.ndarray]:
    """(face token indices, per-token (D_v, 56) projections) of the fixed featurizer."""
    _, _, face_idx, vis_proj = _featurizers(cfg)
    return face_idx, vis_proj


def _speech_envelope(total: int, mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Syllable-like bumpy envelope: oscillation slow enough to survive the
    window-RMS pooling, modulated by smoothed noise, zero outside own turns."""
    period = float(rng.uniform(7.0, 11.0))
    phase = float(rng.uniform(0.0, 2 * np.pi))
    t = np.arange(total, dtype=np.float64)
    osc = 0.5 + 0.5 * np.sin(2 * np.pi * t / period + phase)
    bump = _smooth(rng.uniform(0.0, 1.0, total), 2.0)
    bump = 0.6 + 0.4 * (bump - bump.min()) / (bump.max() - bump.min() + 1e-9)
    return mask * (0.2 + 0.8 * osc * bump)


def _lip_channel(rms: np.ndarray, mask: np.ndarray, rng: np.random.Generator,
                 lip_noise: float) -> np.ndarray:
    peak = rms[mask > 0].max() if mask.any() else 1.0
    lip = np.where(mask > 0, 0.1 + 0.8 * rms / (peak + 1e-9), 0.0)
    lip = lip + np.where(mask > 0, lip_noise, 0.5 * lip_noise) * rng.standard_normal(len(rms))
    return lip


def _build_conversation(cfg: Config, seed: int, total: int, first_window_end: int) -> _Conversation:
    rng = np.random.default_rng(seed)
    T_cur = cfg["data.frames_window"]
    L_w, D_a = cfg["data.audio_window"], cfg["data.audio_dim"]
    N_tok, D_v = cfg["data.visual_tokens"], cfg["data.visual_dim"]
    lag, rho = cfg["synth.lag"], cfg["synth.mirror_gain"]
    sigma_n = cfg["synth.noise"]
    dir_user, dir_avatar, face_idx, vis_proj = _featurizers(cfg)

    emotion = EMOTIONS[int(rng.integers(0, len(EMOTIONS)))]
    offset = emotion_offset(emotion)

    speakers = _alternating_schedule(total, first_window_end, T_cur, rng,
                                     cfg["synth.turn_min"], cfg["synth.turn_max"])
    user_mask = (speakers == 0).astype(np.float64)
    avatar_mask = (speakers == 1).astype(np.float64)

    # regime: arousal is only visible as pre-window user amplitude
    regime_sign = 1
    amp = np.ones(total)
    if cfg["synth.regime_coupling"]:
        high = rng.uniform() < cfg["synth.regime_high_prob"]
        regime_sign = -1 if high else 1
        if high:
            boost = cfg["synth.regime_amp_boost"]
            pre = first_window_end - T_cur
            amp[:pre] += boost
            ramp = min(5, pre)
            if ramp > 0:  # avoid a hard amplitude step at the window boundary
                amp[pre - ramp:pre] = 1.0 + boost * np.linspace(1.0, 0.0, ramp, endpoint=False)

    # audio: envelope * fixed direction with multiplicative jitter, own turns only
    env_user = _speech_envelope(total, user_mask, rng)
    env_avatar = _speech_envelope(total, avatar_mask, rng)
    jitter_u = 1.0 + 0.05 * rng.standard_normal((total, D_a))
    jitter_a = 1.0 + 0.05 * rng.standard_normal((total, D_a))
    user_audio = env_user[:, None] * dir_user[None, :] * jitter_u
    avatar_audio = env_avatar[:, None] * dir_avatar[None, :] * jitter_a
    user_audio_win = _window_stack(user_audio, L_w)
    avatar_audio_win = _window_stack(avatar_audio, L_w)

    # identities: constant per-sample baselines on non-emotion dims
    id_scale = cfg["synth.identity_scale"]
    identity_user = np.zeros(MOTION_DIMS)
    identity_avatar = np.zeros(MOTION_DIMS)
    identity_user[_IDENTITY_DIMS] = id_scale * rng.standard_normal(len(_IDENTITY_DIMS))
    identity_avatar[_IDENTITY_DIMS] = id_scale * rng.standard_normal(len(_IDENTITY_DIMS))

    # user motion
    traj = _smooth(rng.standard_normal((total, len(_MIRROR_DIMS))), cfg["synth.traj_smooth"])
    traj = traj - traj.mean(axis=0, keepdims=True)
    traj = traj / (traj.std(axis=0, keepdims=True) + 1e-9) * cfg["synth.traj_std"]
    traj = traj * amp[:, None]
    user_motion = np.zeros((total, MOTION_DIMS))
    user_motion[:, _MIRROR_DIMS] = traj
    user_motion += offset[None, :] + identity_user[None, :]
    user_rms = window_rms(user_audio_win)
    user_motion[:, LIP_DIM] = _lip_channel(user_rms, user_mask, rng, cfg["synth.lip_noise"])
    pose = _smooth(rng.standard_normal((total, MOTION_DIMS - EXPRESSION_DIMS)), 3.0)
    user_motion[:, EXPRESSION_DIMS:] += pose * cfg["synth.pose_std"]

    # avatar motion: lagged mirror of the user's expression (law e)
    shifted_idx = np.maximum(np.arange(total) - lag, 0)
    mirrored = user_motion[shifted_idx][:, _MIRROR_DIMS].copy()
    if regime_sign < 0:
        n_regime = int(round(cfg["synth.regime_dims_frac"] * len(_MIRROR_DIMS)))
        regime_dims = np.arange(len(_MIRROR_DIMS))[-n_regime:] if n_regime else []
        # flip only the temporal part; constant offsets keep the emotion decodable
        const = (offset + identity_user)[_MIRROR_DIMS][regime_dims]
        mirrored[:, regime_dims] = -(mirrored[:, regime_dims] - const) + const
    avatar_motion = np.zeros((total, MOTION_DIMS))
    avatar_motion[:, _MIRROR_DIMS] = (rho * mirrored + offset[_MIRROR_DIMS]
                                      + sigma_n * rng.standard_normal((total, len(_MIRROR_DIMS))))
    avatar_rms = window_rms(avatar_audio_win)
    avatar_motion[:, LIP_DIM] = _lip_channel(avatar_rms, avatar_mask, rng, cfg["synth.lip_noise"])
    pose_a = _smooth(rng.standard_normal((total, MOTION_DIMS - EXPRESSION_DIMS)), 3.0)
    avatar_motion[:, EXPRESSION_DIMS:] += pose_a * cfg["synth.pose_std"]
    avatar_motion += identity_avatar[None, :]

    # visual tokens: face tokens are linear features of user motion
    visual = 0.3 * rng.standard_normal((total, N_tok, D_v))
    for j, tok in enumerate(face_idx):
        visual[:, tok, :] = (user_motion @ vis_proj[j].T
                             + 0.02 * rng.standard_normal((total, D_v)))
    face_token_mask = np.zeros(N_tok, dtype=np.float64)
    face_token_mask[face_idx] = 1.0

    # dialogue with the emotion's keywords in user turns
    table = load_keyword_table(cfg["model.keyword_table"] or None)
    kws = keywords_for(emotion, table)
    n_pairs = int(rng.integers(2, 4))
    dialogue: List[Tuple[str, str]] = []
    for p in range(n_pairs):
        kw = kws[int(rng.integers(0, len(kws)))]
        tmpl = _USER_TEMPLATES[int(rng.integers(0, len(_USER_TEMPLATES)))]
        dialogue.append((USER, tmpl.format(kw=kw)))
        if p < n_pairs - 1:
            dialogue.append((AVATAR, _AVATAR_TEMPLATES[int(rng.integers(0, len(_AVATAR_TEMPLATES)))]))

    return _Conversation(speakers=speakers, user_audio_win=user_audio_win,
                         avatar_audio_win=avatar_audio_win, user_motion=user_motion,
                         avatar_motion=avatar_motion, visual=visual,
                         face_token_mask=face_token_mask, dialogue=dialogue,
                         emotion=emotion, regime_sign=regime_sign,
                         identity_avatar=identity_avatar)


def _slice_window(cfg: Config, conv: _Conversation, window_end: int, codec,
                  episode_id: str, window_index: int) -> ConversationSample:
    T_cur, T_prev = cfg["data.frames_window"], cfg["data.frames_prev"]
    fps = cfg["data.fps"]
    w0 = window_end - T_cur
    gt_window = MotionSeq(conv.avatar_motion[w0:window_end])
    prev = conv.avatar_motion[w0 - T_prev:w0] if T_prev else conv.avatar_motion[:0]
    prev_data = (np.stack([codec.encode_frame(m) for m in prev], axis=0) if len(prev)
                 else np.zeros((0, codec.channels, codec.height, codec.width)))
    return ConversationSample(
        user_audio=AudioFeatureSeq(conv.user_audio_win[:window_end].astype(np.float32), fps=fps),
        user_visual=VisualTokenSeq(conv.visual[:window_end].astype(np.float32),
                                   conv.face_token_mask.astype(np.float32)),
        avatar_audio=AudioFeatureSeq(conv.avatar_audio_win[w0:window_end].astype(np.float32),
                                     fps=fps),
        dialogue=DialogueHistory.of(conv.dialogue),
        ref_latent=codec.encode_frame(conv.identity_avatar).astype(np.float32),
        prev_frames=SpatialLatent(prev_data.astype(np.float32)),
        gt_latent=SpatialLatent(codec.encode(gt_window).data.astype(np.float32)),
        gt_motion=MotionSeq(conv.avatar_motion[:window_end].astype(np.float32)),
        user_motion=MotionSeq(conv.user_motion[:window_end].astype(np.float32)),
        avatar_speaking=(conv.speakers[w0:window_end] == 1).astype(np.float32),
        user_speaking=(conv.speakers[:window_end] == 0).astype(np.float32),
        mask_layout=layout_from_config(cfg),
        emotion_label=conv.emotion,
        meta={"episode_id": episode_id, "window_index": window_index,
              "seed": None, "regime_sign": conv.regime_sign},
    )


def synth_conversation(cfg: Config, seed: int, windows: Optional[int] = None,
                       episode_id: str = "ep", codec=None) -> List[ConversationSample]:
    """Generate one conversation as `windows` consecutive window samples."""
    if cfg["synth.turn_min"] < 1 or cfg["synth.turn_max"] < cfg["synth.turn_min"]:
        raise ConfigError("synth: need 1 <= turn_min <= turn_max")
    if not (0.0 < cfg["synth.mirror_gain"] <= 1.0):
        raise ConfigError("synth.mirror_gain must lie in (0, 1]")
    if cfg["synth.lag"] < 0 or cfg["synth.noise"] < 0:
        raise ConfigError("synth.lag and synth.noise must be non-negative")
    T, T_cur, T_prev = cfg["data.frames_total"], cfg["data.frames_window"], cfg["data.frames_prev"]
    if T_cur > T:
        raise ConfigError(f"frames_window={T_cur} exceeds frames_total={T}")
    if T - T_cur - T_prev < 0:
        raise ConfigError("frames_total too small for window + prev prefix")
    if T_cur < 12:
        raise ConfigError("frames_window must be >= 12 so both roles fit the window")
    windows = windows if windows is not None else cfg["synth.windows"]
    total = T + (windows - 1) * T_cur
    conv = _build_conversation(cfg, seed, total, first_window_end=T)
    codec = codec if codec is not None else codec_from_config(cfg)
    samples = []
    for k in range(windows):
        s = _slice_window(cfg, conv, T + k * T_cur, codec, episode_id, k)
        s.meta["seed"] = seed
        samples.append(s)
    return samples


def synth_dataset(cfg: Config, out_dir, n: Optional[int] = None,
                  seed: Optional[int] = None) -> Dict:
    """Write n conversations (possibly multi-window episodes) plus a manifest.

    Per-sample seeds are splitmix64(master_seed, episode_index); the manifest
    lists one relative sample path per line in generation order.
    """
    n = n if n is not None else cfg["synth.n"]
    seed = seed if seed is not None else cfg["synth.seed"]
    if n < 1:
        raise ConfigError("synth: n must be >= 1")
    os.makedirs(out_dir, exist_ok=True)
    codec = codec_from_config(cfg)
    rel_paths: List[str] = []
    emotions: Dict[str, int] = {}
    windows = cfg["synth.windows"]
    for i in range(n):
        ep_seed = splitmix64(seed, i)
        eid = f"ep{i:05d}"
        samples = synth_conversation(cfg, ep_seed, windows=windows, episode_id=eid, codec=codec)
        for k, sample in enumerate(samples):
            rel = f"{eid}_w{k}.dgs" if windows > 1 else f"{eid}.dgs"
            save_sample(os.path.join(out_dir, rel), sample)
            rel_paths.append(rel)
        emotions[samples[0].emotion_label] = emotions.get(samples[0].emotion_label, 0) + 1
    with open(os.path.join(out_dir, "manifest.txt"), "w", encoding="utf-8") as f:
        f.write("\n".join(rel_paths) + "\n")
    summary = {"n_episodes": n, "windows_per_episode": windows, "n_samples": len(rel_paths),
               "master_seed": seed, "emotion_counts": dict(sorted(emotions.items()))}
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    return summary


def load_manifest(dataset_dir) -> List[str]:
    manifest = os.path.join(dataset_dir, "manifest.txt")
    with open(manifest, "r", encoding="utf-8") as f:
        rels = [line.strip() for line in f if line.strip()]
    return [os.path.join(dataset_dir, rel) for rel in rels]
