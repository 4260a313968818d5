"""Flat dotted-key run configuration.

Config files are plain text, one `key = value` per line, '#' comments.
Override pairs (from the CLI) win over file values, which win over defaults.
Unknown keys are rejected, and every run writes back a fully resolved
snapshot that is sufficient to replay it.
"""

from __future__ import annotations

from typing import Dict, Iterable, List, Tuple


class ConfigError(ValueError):
    """Unknown key, unparsable value, or inconsistent configuration."""


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


# key -> (type, default, help)
SCHEMA: Dict[str, Tuple[type, object, str]] = {
    # clip geometry
    "data.frames_total": (int, 64, "context length T in frames"),
    "data.frames_window": (int, 16, "generated window length T_cur"),
    "data.frames_prev": (int, 4, "previous-frame prefix length T_prev"),
    "data.fps": (int, 25, "frame rate"),
    "data.audio_window": (int, 5, "per-frame audio context window L_w (odd)"),
    "data.audio_dim": (int, 32, "audio feature dim"),
    "data.visual_tokens": (int, 16, "visual tokens per frame (square grid)"),
    "data.visual_dim": (int, 64, "visual token dim"),
    "data.latent_channels": (int, 4, "latent channels C"),
    "data.latent_h": (int, 8, "latent grid height"),
    "data.latent_w": (int, 8, "latent grid width"),
    "data.codec_seed": (int, 51423, "seed of the fixed motion<->latent codec"),
    # region mask layout (inclusive rectangle bounds)
    "mask.face_r0": (int, 1, "face rect first row"),
    "mask.face_r1": (int, 6, "face rect last row"),
    "mask.face_c0": (int, 1, "face rect first col"),
    "mask.face_c1": (int, 6, "face rect last col"),
    "mask.lip_r0": (int, 4, "lip rect first row"),
    "mask.lip_r1": (int, 5, "lip rect last row"),
    "mask.lip_c0": (int, 3, "lip rect first col"),
    "mask.lip_c1": (int, 4, "lip rect last col"),
    # synthetic conversation generator
    "synth.n": (int, 64, "number of conversations"),
    "synth.seed": (int, 0, "master dataset seed"),
    "synth.windows": (int, 1, "consecutive windows per conversation (episodes)"),
    "synth.turn_min": (int, 8, "min speaking-turn length (frames)"),
    "synth.turn_max": (int, 16, "max speaking-turn length (frames)"),
    "synth.lag": (int, 3, "mimicry lag L in frames"),
    "synth.mirror_gain": (float, 0.7, "mimicry gain rho in (0,1]"),
    "synth.noise": (float, 0.03, "mimicry noise sigma_n"),
    "synth.traj_std": (float, 0.3, "user expression trajectory std"),
    "synth.traj_smooth": (float, 3.0, "trajectory smoothing kernel sigma (frames)"),
    "synth.pose_std": (float, 0.1, "pose trajectory std"),
    "synth.identity_scale": (float, 0.2, "per-sample identity offset scale"),
    "synth.lip_noise": (float, 0.012, "lip channel noise during speech"),
    "synth.regime_coupling": (bool, False, "enable arousal-dependent mirror-sign regime"),
    "synth.regime_dims_frac": (float, 0.5, "fraction of mirrored dims that are regime-signed"),
    "synth.regime_high_prob": (float, 0.5, "probability of the high-arousal regime"),
    "synth.regime_amp_boost": (float, 2.0, "extra pre-window amplitude in the high regime"),
    "synth.feat_seed": (int, 7310, "seed of the fixed audio/visual featurizers"),
    # model
    "model.width": (int, 64, "generator channel width"),
    "model.blocks": (int, 4, "generator block count"),
    "model.heads": (int, 4, "attention heads"),
    "model.ffn_mult": (int, 4, "feed-forward expansion factor"),
    "model.context_dim": (int, 64, "user context token dim D_p"),
    "model.scan_layers": (int, 2, "scan encoder depth K"),
    "model.scan_state": (int, 64, "scan recurrence state dim"),
    "model.emotion_dim": (int, 32, "emotion embedding dim D_e"),
    "model.emotion_vocab": (int, 4096, "hash embedding table size"),
    "model.understanding": (str, "stat_stub", "understanding model id (stat_stub|oracle_stub)"),
    "model.understanding_tokens": (int, 8, "understanding token count N_s"),
    "model.understanding_dim": (int, 32, "understanding token dim D_s"),
    "model.understanding_seed": (int, 97, "seed of the understanding stub projection"),
    "model.reasoner": (str, "keyword", "affective reasoner id (keyword)"),
    "model.keyword_table": (str, "", "keyword table path ('' = packaged default)"),
    "model.no_lpe": (bool, False, "ablation: drop user visual percepts + integration"),
    "model.no_hbcu": (bool, False, "ablation: drop high-level behavior understanding"),
    "model.no_lau": (bool, False, "ablation: drop dialogue-derived emotion guidance"),
    "model.no_sdcm": (bool, False, "ablation: single fused conditioning stream"),
    "model.seed": (int, 1234, "parameter init seed"),
    "model.dtype": (str, "float32", "training dtype (float32|float64)"),
    # training
    "train.stage": (int, 1, "training stage (1|2)"),
    "train.steps": (int, 1000, "optimization steps"),
    "train.batch": (int, 8, "clips per step"),
    "train.seed": (int, 0, "training seed (batching, noise, flow times)"),
    "train.lr_base": (float, 2e-3, "step size for directly trained modules"),
    "train.lr_adapters": (float, 5e-3, "step size for low-rank adapters"),
    "train.weight_decay": (float, 0.01, "decoupled weight decay"),
    "train.beta1": (float, 0.9, "Adam beta1"),
    "train.beta2": (float, 0.999, "Adam beta2"),
    "train.lambda_pixel": (float, 0.1, "stage-1 pixel-loss coefficient"),
    "train.gamma_align": (float, 0.5, "stage-2 feature-alignment coefficient"),
    "train.adapter_rank": (int, 8, "low-rank adapter rank"),
    "train.adapter_scale": (float, 1.0, "adapter output scale"),
    "train.align_blocks": (int, 2, "alignment block-subset size per step"),
    "train.w_min": (float, 0.1, "frame-weight floor"),
    "train.log_every": (int, 50, "steps between log records"),
    # generation
    "generate.steps": (int, 25, "Euler integration steps"),
    "generate.seed": (int, 0, "noise seed"),
    # evaluation
    "evaluate.kmeans_seed": (int, 0, "k-means seed"),
    "evaluate.k_exp": (int, 15, "expression cluster count"),
    "evaluate.k_pose": (int, 9, "pose cluster count"),
    "evaluate.rpcc_mode": (str, "per_dim", "responsiveness aggregation (per_dim|mean_signal)"),
}


class Config:
    """Resolved flat configuration with typed access."""

    def __init__(self, values: Dict[str, object] | None = None):
        self._values = {k: d for k, (_, d, _) in SCHEMA.items()}
        if values:
            for k, v in values.items():
                self.set(k, v)

    def set(self, key: str, value) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key '{key}'")
        typ = SCHEMA[key][0]
        if isinstance(value, str) and typ is not str:
            try:
                value = _bool(value) if typ is bool else typ(value)
            except ValueError as e:
                raise ConfigError(f"bad value for '{key}': {e}") from e
        if not isinstance(value, typ):
            if typ is float and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
            else:
                raise ConfigError(f"'{key}' expects {typ.__name__}, got {value!r}")
        self._values[key] = value

    def __getitem__(self, key: str):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key '{key}'")
        return self._values[key]

    def items(self):
        return sorted(self._values.items())

    def copy(self) -> "Config":
        return Config(dict(self._values))

    def to_dict(self) -> Dict[str, object]:
        return dict(self._values)

    def __eq__(self, other):
        return isinstance(other, Config) and self._values == other._values


def parse_config_text(text: str, origin: str = "<config>") -> Dict[str, str]:
    pairs: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def load_config(path=None, overrides: Iterable[str] = ()) -> Config:
    cfg = Config()
    if path is not None:
        with open(path, "r", encoding="utf-8") as f:
            for key, value in parse_config_text(f.read(), str(path)).items():
                cfg.set(key, value)
    for pair in overrides:
        if "=" not in pair:
            raise ConfigError(f"override must be key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        cfg.set(key.strip(), value.strip())
    return cfg


def dump_config(cfg: Config) -> str:
    lines = [f"{k} = {v}" for k, v in cfg.items()]
    return "\n".join(lines) + "\n"


def write_resolved(cfg: Config, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(dump_config(cfg))
