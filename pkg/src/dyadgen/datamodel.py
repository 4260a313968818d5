"""Core domain types, region masks, the fixed motion<->latent codec, sample IO.

All persisted arrays are little-endian float32 (the container format pins
this); in-memory math that needs more precision (codec, training) converts to
float64 explicitly. Every type validates its invariants at construction and
is treated as immutable afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .arrayio import ContainerError, read_container, write_container
from .config import Config
from .emotions import EXPRESSION_DIMS, LIP_DIM, MOTION_DIMS, POSE_DIMS

SAMPLE_FORMAT_VERSION = 1


class ValidationError(ValueError):
    """A domain invariant is violated; message names the offending field."""


class LoadError(Exception):
    """A sample/checkpoint file is missing, truncated, or inconsistent."""


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ValidationError(msg)


def _finite(name: str, arr: np.ndarray) -> None:
    _require(np.isfinite(arr).all(), f"{name}: contains non-finite values")


@dataclass(frozen=True)
class AudioFeatureSeq:
    """Framed audio features: (frames, window slots, feature dim)."""

    data: np.ndarray  # (T, L_w, D_a)
    fps: int = 25

    def __post_init__(self):
        _require(self.data.ndim == 3, "audio data: expected (T, L_w, D_a)")
        T, L_w, D_a = self.data.shape
        _require(T >= 1, "audio data: T >= 1")
        _require(L_w >= 1 and L_w % 2 == 1, f"audio window: L_w must be odd and >= 1, got {L_w}")
        _require(D_a >= 1, "audio data: D_a >= 1")
        _finite("audio data", self.data)

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def window(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class VisualTokenSeq:
    """Per-frame spatial feature tokens plus a facial-token selection mask."""

    data: np.ndarray  # (T, N_tok, D_v)
    face_token_mask: np.ndarray  # (N_tok,) in {0,1}

    def __post_init__(self):
        _require(self.data.ndim == 3, "visual data: expected (T, N_tok, D_v)")
        T, N_tok, _ = self.data.shape
        _finite("visual data", self.data)
        mask = np.asarray(self.face_token_mask)
        _require(mask.shape == (N_tok,), "face_token_mask: length must equal N_tok")
        _require(set(np.unique(mask)).issubset({0.0, 1.0}), "face_token_mask: binary")
        _require(mask.sum() >= 1, "face_token_mask: needs at least one facial token")
        side = int(round(N_tok ** 0.5))
        _require(side * side == N_tok, f"visual tokens: N_tok={N_tok} must be a perfect square")

    @property
    def frames(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class DialogueHistory:
    """Ordered (speaker, utterance) turns; speakers are 'user' or 'avatar'."""

    turns: Tuple[Tuple[str, str], ...]

    def __post_init__(self):
        _require(len(self.turns) >= 1, "dialogue: must be non-empty")
        for i, (speaker, text) in enumerate(self.turns):
            _require(speaker in ("user", "avatar"), f"dialogue turn {i}: bad speaker '{speaker}'")
            _require(len(text.strip()) > 0, f"dialogue turn {i}: empty text")

    @staticmethod
    def of(turns: List[Tuple[str, str]]) -> "DialogueHistory":
        return DialogueHistory(tuple((s, t) for s, t in turns))


@dataclass(frozen=True)
class SpatialLatent:
    """Latent video clip: (frames, channels, height, width)."""

    data: np.ndarray  # (T, C, H, W)

    def __post_init__(self):
        _require(self.data.ndim == 4, "latent: expected (T, C, H, W)")
        _, C, H, W = self.data.shape
        _require(C >= 1, "latent: C >= 1")
        _require(H >= 4 and W >= 4, f"latent: H, W >= 4, got {H}x{W}")
        _finite("latent", self.data)

    @property
    def frames(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class RegionMasks:
    """Disjoint binary lip/face masks over the latent grid."""

    lip: np.ndarray  # (H, W)
    face: np.ndarray  # (H, W)

    def __post_init__(self):
        _require(self.lip.shape == self.face.shape, "masks: lip/face shapes differ")
        for name, m in (("lip", self.lip), ("face", self.face)):
            _require(set(np.unique(m)).issubset({0.0, 1.0}), f"{name} mask: binary")
            _require(m.sum() >= 1, f"{name} mask: needs at least one set cell")
        _require(not np.any((self.lip > 0) & (self.face > 0)), "masks: lip and face overlap")


@dataclass(frozen=True)
class MotionSeq:
    """Motion coefficients: (T, 56) = 50 expression dims then 6 pose dims."""

    data: np.ndarray  # (T, 56)

    def __post_init__(self):
        _require(self.data.ndim == 2 and self.data.shape[1] == MOTION_DIMS,
                 f"motion: expected (T, {MOTION_DIMS})")
        _require(self.data.shape[0] >= 2, "motion: T >= 2 (metrics need temporal statistics)")
        _finite("motion", self.data)

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def expression(self) -> np.ndarray:
        return self.data[:, :EXPRESSION_DIMS]

    @property
    def pose(self) -> np.ndarray:
        return self.data[:, EXPRESSION_DIMS:]


@dataclass(frozen=True)
class MaskLayout:
    """Rectangles (inclusive row/col bounds) defining face and lip regions."""

    face_rows: Tuple[int, int] = (1, 6)
    face_cols: Tuple[int, int] = (1, 6)
    lip_rows: Tuple[int, int] = (4, 5)
    lip_cols: Tuple[int, int] = (3, 4)

    def to_meta(self) -> list:
        return [list(self.face_rows), list(self.face_cols),
                list(self.lip_rows), list(self.lip_cols)]

    @staticmethod
    def from_meta(meta) -> "MaskLayout":
        fr, fc, lr, lc = meta
        return MaskLayout(tuple(fr), tuple(fc), tuple(lr), tuple(lc))


class ConfigurationError(ValueError):
    """A mask layout or codec configuration is inconsistent."""


def build_region_masks(height: int, width: int, layout: MaskLayout = MaskLayout()) -> RegionMasks:
    """Build disjoint lip/face masks; lip cells are carved out of the face rect.

    The lip rectangle must lie strictly inside the face rectangle and both
    must fit the grid; violations raise ConfigurationError.
    """
    if height < 4 or width < 4:
        raise ConfigurationError(f"grid too small: {height}x{width} (minimum 4x4)")

    def check_rect(name, rows, cols):
        r0, r1 = rows
        c0, c1 = cols
        if not (0 <= r0 <= r1 < height and 0 <= c0 <= c1 < width):
            raise ConfigurationError(f"{name} rectangle {rows}x{cols} out of bounds "
                                     f"for {height}x{width} grid")

    check_rect("face", layout.face_rows, layout.face_cols)
    check_rect("lip", layout.lip_rows, layout.lip_cols)
    if not (layout.face_rows[0] <= layout.lip_rows[0]
            and layout.lip_rows[1] <= layout.face_rows[1]
            and layout.face_cols[0] <= layout.lip_cols[0]
            and layout.lip_cols[1] <= layout.face_cols[1]):
        raise ConfigurationError("lip rectangle must lie inside the face rectangle")

    lip = np.zeros((height, width), dtype=np.float32)
    face = np.zeros((height, width), dtype=np.float32)
    face[layout.face_rows[0]:layout.face_rows[1] + 1,
         layout.face_cols[0]:layout.face_cols[1] + 1] = 1.0
    lip[layout.lip_rows[0]:layout.lip_rows[1] + 1,
        layout.lip_cols[0]:layout.lip_cols[1] + 1] = 1.0
    face[lip > 0] = 0.0
    return RegionMasks(lip=lip, face=face)


# Motion dims that the codec routes into lip-mask cells; the rest of the
# expression block goes to face-mask cells and pose goes to off-mask cells.
LIP_MOTION_DIMS = (LIP_DIM,)


@dataclass(frozen=True)
class MotionLatentCodec:
    """Fixed linear 56-d motion <-> (C,H,W) latent map with region-disjoint support.

    encode_matrix has orthonormal columns built blockwise so that lip motion
    dims only touch lip-mask cells, remaining expression dims only face-mask
    cells, and pose dims only cells outside both masks. decode_matrix is the
    transpose, which equals the pseudo-inverse for orthonormal columns, so
    decode(encode(m)) == m up to float rounding.
    """

    encode_matrix: np.ndarray  # (C*H*W, 56), float64
    decode_matrix: np.ndarray  # (56, C*H*W), float64
    channels: int
    height: int
    width: int

    @staticmethod
    def create(channels: int, masks: RegionMasks, seed: int = 51423) -> "MotionLatentCodec":
        H, W = masks.lip.shape
        n_cells = H * W
        lip_cells = np.flatnonzero(masks.lip.ravel() > 0)
        face_cells = np.flatnonzero(masks.face.ravel() > 0)
        off_cells = np.flatnonzero((masks.lip.ravel() == 0) & (masks.face.ravel() == 0))

        lip_dims = np.array(LIP_MOTION_DIMS)
        expr_dims = np.array([d for d in range(EXPRESSION_DIMS) if d not in LIP_MOTION_DIMS])
        pose_dims = np.arange(EXPRESSION_DIMS, MOTION_DIMS)

        def latent_rows(cells: np.ndarray) -> np.ndarray:
            # All channels of each selected cell, flattened in (C, H, W) order.
            return (np.arange(channels)[:, None] * n_cells + cells[None, :]).ravel()

        groups = [
            (latent_rows(lip_cells), lip_dims),
            (latent_rows(face_cells), expr_dims),
            (latent_rows(off_cells), pose_dims),
        ]
        rng = np.random.default_rng(seed)
        E = np.zeros((channels * n_cells, MOTION_DIMS))
        for rows, dims in groups:
            if len(rows) < len(dims):
                raise ConfigurationError(
                    f"codec: {len(rows)} latent dims cannot carry {len(dims)} motion dims; "
                    "enlarge the grid or the masks")
            block = rng.standard_normal((len(rows), len(dims)))
            q, _ = np.linalg.qr(block)
            E[np.ix_(rows, dims)] = q[:, :len(dims)]
        return MotionLatentCodec(encode_matrix=E, decode_matrix=E.T,
                                 channels=channels, height=H, width=W)

    @property
    def latent_size(self) -> int:
        return self.channels * self.height * self.width

    def encode(self, motion: MotionSeq) -> SpatialLatent:
        """Per-frame linear map into the latent grid."""
        m = motion.data.astype(np.float64)
        flat = m @ self.encode_matrix.T  # (T, C*H*W)
        data = flat.reshape(motion.frames, self.channels, self.height, self.width)
        return SpatialLatent(data=data)

    def encode_frame(self, motion_vec: np.ndarray) -> np.ndarray:
        """Single 56-d vector -> (C, H, W) latent frame."""
        if motion_vec.shape != (MOTION_DIMS,):
            raise ValidationError(f"codec encode_frame: expected ({MOTION_DIMS},) vector")
        flat = self.encode_matrix @ motion_vec.astype(np.float64)
        return flat.reshape(self.channels, self.height, self.width)

    def decode(self, latent: SpatialLatent) -> MotionSeq:
        if latent.data.shape[1:] != (self.channels, self.height, self.width):
            raise ValidationError(f"codec decode: latent shape {latent.data.shape[1:]} "
                                  f"does not match codec {(self.channels, self.height, self.width)}")
        flat = latent.data.astype(np.float64).reshape(latent.frames, -1)
        return MotionSeq(data=flat @ self.decode_matrix.T)

    def decode_array(self, latent: np.ndarray) -> np.ndarray:
        """(T, C, H, W) array -> (T, 56) array without MotionSeq validation."""
        flat = np.asarray(latent, dtype=np.float64).reshape(latent.shape[0], -1)
        return flat @ self.decode_matrix.T


def encode_motion(motion: MotionSeq, codec: MotionLatentCodec) -> SpatialLatent:
    return codec.encode(motion)


def decode_latent(latent: SpatialLatent, codec: MotionLatentCodec) -> MotionSeq:
    return codec.decode(latent)


@dataclass(frozen=True)
class ConversationSample:
    """One dyadic clip: long-range user context plus the avatar's current window."""

    user_audio: AudioFeatureSeq          # frames 1..T
    user_visual: VisualTokenSeq          # frames 1..T
    avatar_audio: AudioFeatureSeq        # current window, T_cur frames
    dialogue: DialogueHistory
    ref_latent: np.ndarray               # (C, H, W)
    prev_frames: SpatialLatent           # T_prev frames (may be 0)
    gt_latent: SpatialLatent             # T_cur frames
    gt_motion: MotionSeq                 # frames 1..T
    user_motion: MotionSeq               # frames 1..T
    avatar_speaking: np.ndarray          # (T_cur,) in {0,1}
    user_speaking: np.ndarray            # (T,) in {0,1}
    mask_layout: MaskLayout = MaskLayout()
    emotion_label: Optional[str] = None
    meta: Dict = field(default_factory=dict)

    def __post_init__(self):
        T = self.user_audio.frames
        T_cur = self.avatar_audio.frames
        _require(self.user_visual.frames == T, "user_visual: frame count differs from user_audio")
        _require(T_cur <= T, f"avatar_audio: T_cur={T_cur} exceeds T={T}")
        _require(self.gt_latent.frames == T_cur, "gt_latent: frame count differs from T_cur")
        _require(self.gt_motion.frames == T, "gt_motion: frame count differs from T")
        _require(self.user_motion.frames == T, "user_motion: frame count differs from T")
        _require(self.avatar_speaking.shape == (T_cur,),
                 "avatar_speaking: must align with avatar_audio frames")
        _require(self.user_speaking.shape == (T,), "user_speaking: length must equal T")
        for name, m in (("avatar_speaking", self.avatar_speaking),
                        ("user_speaking", self.user_speaking)):
            _require(set(np.unique(m)).issubset({0.0, 1.0}), f"{name}: binary")
        _require(self.ref_latent.ndim == 3, "ref_latent: expected (C, H, W)")
        _require(self.ref_latent.shape == self.gt_latent.data.shape[1:],
                 "ref_latent: shape differs from gt_latent frames")
        _require(self.prev_frames.data.shape[1:] == self.gt_latent.data.shape[1:],
                 "prev_frames: latent shape differs from gt_latent")
        _finite("ref_latent", self.ref_latent)

    @property
    def frames(self) -> int:
        return self.user_audio.frames

    @property
    def window(self) -> int:
        return self.avatar_audio.frames

    def region_masks(self) -> RegionMasks:
        _, H, W = self.ref_latent.shape
        return build_region_masks(H, W, self.mask_layout)


def _f32(arr: np.ndarray) -> np.ndarray:
    return np.asarray(arr, dtype="<f4")


def save_sample(path, sample: ConversationSample) -> None:
    arrays = {
        "user_audio": _f32(sample.user_audio.data),
        "user_visual": _f32(sample.user_visual.data),
        "face_token_mask": _f32(sample.user_visual.face_token_mask),
        "avatar_audio": _f32(sample.avatar_audio.data),
        "ref_latent": _f32(sample.ref_latent),
        "prev_frames": _f32(sample.prev_frames.data),
        "gt_latent": _f32(sample.gt_latent.data),
        "gt_motion": _f32(sample.gt_motion.data),
        "user_motion": _f32(sample.user_motion.data),
        "avatar_speaking": _f32(sample.avatar_speaking),
        "user_speaking": _f32(sample.user_speaking),
    }
    meta = {
        "format": "conversation_sample",
        "version": SAMPLE_FORMAT_VERSION,
        "fps": sample.user_audio.fps,
        "mask_layout": sample.mask_layout.to_meta(),
        "dialogue": [[s, t] for s, t in sample.dialogue.turns],
        "emotion_label": sample.emotion_label,
        "shapes": {k: list(v.shape) for k, v in arrays.items()},
        "extra": sample.meta,
    }
    write_container(path, arrays, meta)


_SAMPLE_FIELDS = ("user_audio", "user_visual", "face_token_mask", "avatar_audio",
                  "ref_latent", "prev_frames", "gt_latent", "gt_motion",
                  "user_motion", "avatar_speaking", "user_speaking")


def load_sample(path) -> ConversationSample:
    try:
        arrays, meta = read_container(path)
    except (ContainerError, OSError) as e:
        raise LoadError(f"{path}: {e}") from e
    if meta.get("format") != "conversation_sample":
        raise LoadError(f"{path}: not a conversation sample container")
    if meta.get("version") != SAMPLE_FORMAT_VERSION:
        raise LoadError(f"{path}: format version {meta.get('version')} != "
                        f"{SAMPLE_FORMAT_VERSION}")
    for name in _SAMPLE_FIELDS:
        if name not in arrays:
            raise LoadError(f"{path}: missing array field '{name}'")
        expected = meta.get("shapes", {}).get(name)
        if expected is not None and list(arrays[name].shape) != expected:
            raise LoadError(f"{path}: field '{name}' shape {list(arrays[name].shape)} "
                            f"!= declared {expected}")
    try:
        return ConversationSample(
            user_audio=AudioFeatureSeq(arrays["user_audio"], fps=int(meta["fps"])),
            user_visual=VisualTokenSeq(arrays["user_visual"], arrays["face_token_mask"]),
            avatar_audio=AudioFeatureSeq(arrays["avatar_audio"], fps=int(meta["fps"])),
            dialogue=DialogueHistory.of([(s, t) for s, t in meta["dialogue"]]),
            ref_latent=arrays["ref_latent"],
            prev_frames=SpatialLatent(arrays["prev_frames"]),
            gt_latent=SpatialLatent(arrays["gt_latent"]),
            gt_motion=MotionSeq(arrays["gt_motion"]),
            user_motion=MotionSeq(arrays["user_motion"]),
            avatar_speaking=arrays["avatar_speaking"],
            user_speaking=arrays["user_speaking"],
            mask_layout=MaskLayout.from_meta(meta["mask_layout"]),
            emotion_label=meta.get("emotion_label"),
            meta=meta.get("extra", {}),
        )
    except ValidationError:
        raise
    except (KeyError, TypeError) as e:
        raise LoadError(f"{path}: malformed metadata: {e}") from e


def layout_from_config(cfg: Config) -> MaskLayout:
    return MaskLayout(
        face_rows=(cfg["mask.face_r0"], cfg["mask.face_r1"]),
        face_cols=(cfg["mask.face_c0"], cfg["mask.face_c1"]),
        lip_rows=(cfg["mask.lip_r0"], cfg["mask.lip_r1"]),
        lip_cols=(cfg["mask.lip_c0"], cfg["mask.lip_c1"]),
    )


def masks_from_config(cfg: Config) -> RegionMasks:
    return build_region_masks(cfg["data.latent_h"], cfg["data.latent_w"], layout_from_config(cfg))


def codec_from_config(cfg: Config) -> MotionLatentCodec:
    return MotionLatentCodec.create(cfg["data.latent_channels"], masks_from_config(cfg),
                                    seed=cfg["data.codec_seed"])
