"""User-context conditioning: turns long-range user audio-visual behavior and
dialogue history into (a) per-frame context tokens for the generator and
(b) an emotion embedding derived from a descriptive emotional state.

Pipeline: window-fused audio -> residual stack of causal scan layers ->
gated residual injection into the current window; face-token-masked visual
features -> spatio-temporal scan; both pooled and projected into per-frame
percept tokens; optionally fused with tokens from a pluggable understanding
model through gated cross-attention (identity at init). Dialogue goes through
a pluggable affective reasoner and a hash-embedding text encoder.
"""

from __future__ import annotations

import re
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from .config import Config, ConfigError
from .datamodel import DialogueHistory, ValidationError
from .emotions import EMOTIONS, EXPRESSION_DIMS, MODIFIERS, OFFSET_DIMS, OFFSET_SCALE, \
    load_keyword_table
from .synthdata import visual_featurizer_projection
from .utils import fnv1a64

THINK_PROMPT = ("Watch the user's behavior over the whole clip and summarize "
                "their activity and mood.")

_TOKEN_RE = re.compile(r"[a-z0-9]+|[,;:]")


def tokenize(text: str) -> List[str]:
    """Lowercased alphanumeric runs; , ; : are tokens; . ! ? are separators."""
    return _TOKEN_RE.findall(text.lower())


class ScanLayer(nn.Module):
    """Diagonal input-gated linear recurrence with causal state memory.

    s_t = a * s_{t-1} + (b * gate(x_t)) * in_proj(norm(x_t)),  s_0 = 0
    y_t = out_proj(c * s_t)

    The decay must satisfy |a| < 1 (validated at construction; the trainer
    re-projects after each optimizer step). Evaluation is the plain
    sequential recurrence vectorized over batch and state dims, so it is
    bit-identical to a scalar loop at any precision.
    """

    def __init__(self, dim_in: int, dim_state: int, generator: Optional[torch.Generator] = None):
        super().__init__()
        g = generator
        decay = 0.3 + 0.67 * torch.rand(dim_state, generator=g, dtype=torch.float64)
        self.decay = nn.Parameter(decay)
        self.input_gain = nn.Parameter(torch.ones(dim_state, dtype=torch.float64))
        self.output_gain = nn.Parameter(torch.ones(dim_state, dtype=torch.float64))
        self.in_proj = nn.Parameter(
            torch.randn(dim_in, dim_state, generator=g, dtype=torch.float64) / dim_in ** 0.5)
        self.out_proj = nn.Parameter(
            torch.randn(dim_state, dim_in, generator=g, dtype=torch.float64) / dim_state ** 0.5)
        self.gate_proj = nn.Parameter(
            torch.randn(dim_in, dim_state, generator=g, dtype=torch.float64) / dim_in ** 0.5)
        self.gate_bias = nn.Parameter(torch.zeros(dim_state, dtype=torch.float64))
        self.norm_scale = nn.Parameter(torch.ones(dim_in, dtype=torch.float64))
        self.norm_shift = nn.Parameter(torch.zeros(dim_in, dtype=torch.float64))
        self._validate()

    def _validate(self):
        if not torch.all(self.decay.abs() < 1.0):
            raise ValidationError("scan layer: |decay| must be < 1 for a stable recurrence")

    @classmethod
    def from_arrays(cls, decay, input_gain, output_gain, in_proj, out_proj,
                    gate_proj, gate_bias=None, norm_scale=None, norm_shift=None) -> "ScanLayer":
        decay = torch.as_tensor(decay, dtype=torch.float64)
        if not torch.all(decay.abs() < 1.0):
            raise ValidationError("scan layer: |decay| must be < 1 for a stable recurrence")
        dim_state = decay.numel()
        in_proj = torch.as_tensor(in_proj, dtype=torch.float64)
        dim_in = in_proj.shape[0]
        layer = cls.__new__(cls)
        nn.Module.__init__(layer)
        layer.decay = nn.Parameter(decay)
        layer.input_gain = nn.Parameter(torch.as_tensor(input_gain, dtype=torch.float64))
        layer.output_gain = nn.Parameter(torch.as_tensor(output_gain, dtype=torch.float64))
        layer.in_proj = nn.Parameter(in_proj)
        layer.out_proj = nn.Parameter(torch.as_tensor(out_proj, dtype=torch.float64))
        layer.gate_proj = nn.Parameter(torch.as_tensor(gate_proj, dtype=torch.float64))
        layer.gate_bias = nn.Parameter(torch.zeros(dim_state, dtype=torch.float64)
                                       if gate_bias is None
                                       else torch.as_tensor(gate_bias, dtype=torch.float64))
        layer.norm_scale = nn.Parameter(torch.ones(dim_in, dtype=torch.float64)
                                        if norm_scale is None
                                        else torch.as_tensor(norm_scale, dtype=torch.float64))
        layer.norm_shift = nn.Parameter(torch.zeros(dim_in, dtype=torch.float64)
                                        if norm_shift is None
                                        else torch.as_tensor(norm_shift, dtype=torch.float64))
        return layer

    def project_stable(self, margin: float = 0.005):
        """Clamp the decay back inside the open unit interval after an update."""
        with torch.no_grad():
            self.decay.clamp_(-1.0 + margin, 1.0 - margin)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, T, D_in)
        mean = x.mean(dim=-1, keepdim=True)
        var = x.var(dim=-1, keepdim=True, unbiased=False)
        xn = (x - mean) / torch.sqrt(var + 1e-6) * self.norm_scale + self.norm_shift
        drive = ((self.input_gain * torch.sigmoid(x @ self.gate_proj + self.gate_bias))
                 * (xn @ self.in_proj))  # (B, T, D_state)
        states = []
        s = torch.zeros(x.shape[0], self.decay.numel(), dtype=x.dtype, device=x.device)
        for t in range(x.shape[1]):
            s = self.decay * s + drive[:, t]
            states.append(s)
        stacked = torch.stack(states, dim=1)  # (B, T, D_state)
        return (self.output_gain * stacked) @ self.out_proj


class ScanStack(nn.Module):
    """Residual stack: h_k = h_{k-1} + scan_k(h_{k-1}); causal per layer."""

    def __init__(self, dim_in: int, dim_state: int, depth: int,
                 generator: Optional[torch.Generator] = None):
        super().__init__()
        if depth < 1:
            raise ValidationError("scan stack: depth must be >= 1")
        self.layers = nn.ModuleList(ScanLayer(dim_in, dim_state, generator) for _ in range(depth))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for layer in self.layers:
            x = x + layer(x)
        return x


class AudioContextEncoder(nn.Module):
    """Window-fused frame embeddings followed by a causal scan stack."""

    def __init__(self, window: int, dim_audio: int, dim_state: int, depth: int,
                 generator: Optional[torch.Generator] = None):
        super().__init__()
        self.window = window
        self.window_fuser = nn.Linear(window * dim_audio, dim_audio, dtype=torch.float64)
        self.scan = ScanStack(dim_audio, dim_state, depth, generator)

    def fuse(self, audio: torch.Tensor) -> torch.Tensor:
        """(B, T, L_w, D_a) -> (B, T, D_a) frame-wise linear fuse of the window."""
        B, T, L_w, D = audio.shape
        if L_w != self.window:
            raise ValidationError(f"audio window {L_w} != encoder window {self.window}")
        return self.window_fuser(audio.reshape(B, T, L_w * D))

    def forward(self, audio: torch.Tensor) -> torch.Tensor:
        return self.scan(self.fuse(audio))


class GatedModulation(nn.Module):
    """Injects encoded long-range context into current-window audio features.

    out = x + g * tanh(proj(context_broadcast)), g = sigmoid(fuse([x; context])).
    """

    def __init__(self, dim_audio: int):
        super().__init__()
        self.proj = nn.Linear(dim_audio, dim_audio, dtype=torch.float64)
        self.gate_fuser = nn.Linear(2 * dim_audio, dim_audio, dtype=torch.float64)

    def forward(self, current: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        # current: (B, T_cur, L_w, D_a); context: (B, T_cur, D_a)
        if current.shape[1] != context.shape[1]:
            raise ValidationError("gated modulation: frame counts differ")
        ctx = context.unsqueeze(2).expand_as(current)
        gate = torch.sigmoid(self.gate_fuser(torch.cat([current, ctx], dim=-1)))
        return current + gate * torch.tanh(self.proj(ctx))


def mask_face_tokens(visual: torch.Tensor, face_mask: torch.Tensor) -> torch.Tensor:
    """Select tokens where mask==1, preserving frame and token order.

    visual: (B, T, N_tok, D_v); face_mask: (N_tok,). Output (B, T, N_f, D_v).
    """
    idx = torch.nonzero(face_mask > 0, as_tuple=False).squeeze(-1)
    if idx.numel() == 0:
        raise ValidationError("face token mask selects no tokens")
    return visual.index_select(dim=2, index=idx)


class VisualContextEncoder(nn.Module):
    """Scan over the frame-major, token-minor flattening of face tokens."""

    def __init__(self, dim_visual: int, dim_state: int, depth: int,
                 generator: Optional[torch.Generator] = None):
        super().__init__()
        self.scan = ScanStack(dim_visual, dim_state, depth, generator)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        B, T, N, D = tokens.shape
        flat = tokens.reshape(B, T * N, D)
        return self.scan(flat).reshape(B, T, N, D)


class PerceptionIntegrator(nn.Module):
    """Mean-pool each modality per frame, concatenate, project to D_p.

    With the visual branch disabled (user-percept ablation) only the audio
    pool is projected.
    """

    def __init__(self, dim_audio: int, dim_visual: int, dim_out: int, use_visual: bool = True):
        super().__init__()
        self.use_visual = use_visual
        dim_in = dim_audio + (dim_visual if use_visual else 0)
        self.proj = nn.Linear(dim_in, dim_out, dtype=torch.float64)

    def forward(self, audio: torch.Tensor, visual: Optional[torch.Tensor]) -> torch.Tensor:
        # audio: (B, T_cur, L_w, D_a); visual: (B, T_cur, N_f, D_v) or None
        pooled = audio.mean(dim=2)
        if self.use_visual:
            if visual is None:
                raise ValidationError("integrator: visual branch enabled but no visual input")
            if visual.shape[1] != audio.shape[1]:
                raise ValidationError("integrator: temporal lengths differ")
            pooled = torch.cat([pooled, visual.mean(dim=2)], dim=-1)
        return self.proj(pooled)


class StatStub:
    """Deterministic understanding stand-in: a fixed seeded projection of
    per-third-segment mean/variance statistics of the audio+visual features."""

    name = "stat_stub"

    def __init__(self, n_tokens: int, dim: int, dim_audio: int, dim_visual: int, seed: int):
        self.n_tokens, self.dim = n_tokens, dim
        rng = np.random.default_rng(seed)
        stat_len = 3 * 2 * (dim_audio + dim_visual)
        self.proj = rng.standard_normal((n_tokens * dim, stat_len)) / np.sqrt(stat_len)
        self.bias = 0.1 * rng.standard_normal((n_tokens, dim))

    def tokens(self, prompt: str, visual: np.ndarray, face_mask: np.ndarray,
               audio: np.ndarray) -> np.ndarray:
        if not prompt.strip():
            raise ValidationError("understanding: prompt must be non-empty")
        a = np.asarray(audio, dtype=np.float64).mean(axis=1)     # (T, D_a)
        v = np.asarray(visual, dtype=np.float64).mean(axis=1)    # (T, D_v)
        stats = []
        for seg in np.array_split(np.arange(a.shape[0]), 3):
            stats += [a[seg].mean(0), a[seg].var(0), v[seg].mean(0), v[seg].var(0)]
        flat = self.proj @ np.concatenate(stats)
        return flat.reshape(self.n_tokens, self.dim) + self.bias


class OracleStub:
    """Understanding stand-in for synthetic data: decodes the conversation's
    emotion from the fixed visual featurization and emits it as a one-hot
    token block (argmax channel == emotion index)."""

    name = "oracle_stub"

    def __init__(self, n_tokens: int, dim: int, cfg: Config):
        if dim < len(EMOTIONS):
            raise ConfigError(f"oracle stub needs dim >= {len(EMOTIONS)}")
        self.n_tokens, self.dim = n_tokens, dim
        face_idx, vis_proj = visual_featurizer_projection(cfg)
        self.face_idx = face_idx
        stacked = vis_proj.reshape(-1, vis_proj.shape[-1])  # (N_f*D_v, 56)
        self.decode = np.linalg.pinv(stacked)               # (56, N_f*D_v)

    def tokens(self, prompt: str, visual: np.ndarray, face_mask: np.ndarray,
               audio: np.ndarray) -> np.ndarray:
        if not prompt.strip():
            raise ValidationError("understanding: prompt must be non-empty")
        face = np.asarray(visual, dtype=np.float64)[:, self.face_idx, :]  # (T, N_f, D_v)
        motion = face.reshape(face.shape[0], -1) @ self.decode.T          # (T, 56)
        mean_expr = motion[:, :EXPRESSION_DIMS].mean(axis=0)
        scores = [mean_expr[OFFSET_DIMS[e]] for e in EMOTIONS]
        out = np.zeros((self.n_tokens, self.dim))
        out[:, int(np.argmax(scores))] = OFFSET_SCALE
        return out


def build_understanding(cfg: Config):
    """Understanding-model registry keyed by `model.understanding`."""
    key = cfg["model.understanding"]
    n, d = cfg["model.understanding_tokens"], cfg["model.understanding_dim"]
    if key == "stat_stub":
        return StatStub(n, d, cfg["data.audio_dim"], cfg["data.visual_dim"],
                        seed=cfg["model.understanding_seed"])
    if key == "oracle_stub":
        return OracleStub(n, d, cfg)
    raise ConfigError(f"unregistered understanding model '{key}'")


class GatedCrossAttentionFusion(nn.Module):
    """Fuses percept tokens with understanding tokens; exact identity at init.

    f_m  = attn(P, align(S)) * tanh(alpha) + P
    out  = ffn(f_m) * tanh(beta) + f_m
    with alpha = beta = 0 initially, so out == P until the gates open.
    """

    def __init__(self, dim: int, dim_understanding: int):
        super().__init__()
        dt = torch.float64
        self.align = nn.Sequential(nn.Linear(dim_understanding, dim, dtype=dt), nn.SiLU(),
                                   nn.Linear(dim, dim, dtype=dt))
        self.q = nn.Linear(dim, dim, dtype=dt)
        self.k = nn.Linear(dim, dim, dtype=dt)
        self.v = nn.Linear(dim, dim, dtype=dt)
        self.out = nn.Linear(dim, dim, dtype=dt)
        self.ffn = nn.Sequential(nn.Linear(dim, 4 * dim, dtype=dt), nn.SiLU(),
                                 nn.Linear(4 * dim, dim, dtype=dt))
        self.alpha = nn.Parameter(torch.zeros((), dtype=dt))
        self.beta = nn.Parameter(torch.zeros((), dtype=dt))

    def forward(self, percepts: torch.Tensor, understanding: torch.Tensor) -> torch.Tensor:
        # percepts: (B, T_cur, D_p); understanding: (B, N_s, D_s)
        s = self.align(understanding)
        q, k, v = self.q(percepts), self.k(s), self.v(s)
        attn = torch.softmax(q @ k.transpose(-1, -2) / q.shape[-1] ** 0.5, dim=-1)
        fused = self.out(attn @ v) * torch.tanh(self.alpha) + percepts
        return self.ffn(fused) * torch.tanh(self.beta) + fused


class KeywordReasoner:
    """Deterministic keyword-vote affective reasoner over a fixed label set.

    Ties are broken by the most recent turn containing a keyword of a tied
    label; no keyword hits defaults to 'neutral'.
    """

    name = "keyword"

    def __init__(self, table: Optional[Dict[str, str]] = None):
        self.table = table if table is not None else load_keyword_table()

    def infer(self, dialogue: DialogueHistory) -> str:
        votes: Dict[str, int] = {}
        last_seen: Dict[str, int] = {}
        for turn_idx, (_, text) in enumerate(dialogue.turns):
            for tok in tokenize(text):
                label = self.table.get(tok)
                if label is not None:
                    votes[label] = votes.get(label, 0) + 1
                    last_seen[label] = turn_idx
        if not votes:
            return "neutral"
        best = max(votes.values())
        tied = [lab for lab, n in votes.items() if n == best]
        return max(tied, key=lambda lab: last_seen[lab])

    def describe(self, dialogue: DialogueHistory) -> str:
        label = self.infer(dialogue)
        return emotion_sentence(label)


def emotion_sentence(label: str) -> str:
    if label not in MODIFIERS:
        raise ValidationError(f"unknown emotion label '{label}'")
    return f"The avatar feels {label}, {MODIFIERS[label]}."


def build_reasoner(cfg: Config) -> KeywordReasoner:
    key = cfg["model.reasoner"]
    if key == "keyword":
        path = cfg["model.keyword_table"] or None
        return KeywordReasoner(load_keyword_table(path))
    raise ConfigError(f"unregistered affective reasoner '{key}'")


class HashTextEmbedder(nn.Module):
    """Whitespace/punctuation tokenizer + FNV-1a hashing into a learned table."""

    def __init__(self, vocab: int, dim: int):
        super().__init__()
        self.vocab = vocab
        self.table = nn.Parameter(torch.randn(vocab, dim, dtype=torch.float64) * 0.1)

    def token_ids(self, text: str) -> List[int]:
        toks = tokenize(text)
        if not toks:
            raise ValidationError("text embedder: empty token sequence")
        return [fnv1a64(tok) % self.vocab for tok in toks]

    def forward(self, text: str) -> torch.Tensor:
        ids = torch.as_tensor(self.token_ids(text), dtype=torch.long)
        return self.table[ids]


class ConditioningPipeline(nn.Module):
    """Assembles percept/understanding/emotion conditioning for a batch.

    Ablation flags: use_visual (user percepts keep only the audio pool when
    off), use_understanding (gated fusion skipped when off), use_emotion
    (emotion tokens become None when off).
    """

    def __init__(self, cfg: Config, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.cfg = cfg
        self.use_visual = not cfg["model.no_lpe"]
        self.use_understanding = not cfg["model.no_hbcu"]
        self.use_emotion = not cfg["model.no_lau"]
        g = generator
        self.audio_encoder = AudioContextEncoder(cfg["data.audio_window"], cfg["data.audio_dim"],
                                                 cfg["model.scan_state"], cfg["model.scan_layers"],
                                                 g)
        self.modulation = GatedModulation(cfg["data.audio_dim"])
        self.visual_encoder = (VisualContextEncoder(cfg["data.visual_dim"],
                                                    cfg["model.scan_state"],
                                                    cfg["model.scan_layers"], g)
                               if self.use_visual else None)
        self.integrator = PerceptionIntegrator(cfg["data.audio_dim"], cfg["data.visual_dim"],
                                               cfg["model.context_dim"], self.use_visual)
        self.fusion = (GatedCrossAttentionFusion(cfg["model.context_dim"],
                                                 cfg["model.understanding_dim"])
                       if self.use_understanding else None)
        self.understanding = build_understanding(cfg) if self.use_understanding else None
        self.reasoner = build_reasoner(cfg) if self.use_emotion else None
        self.embedder = (HashTextEmbedder(cfg["model.emotion_vocab"], cfg["model.emotion_dim"])
                         if self.use_emotion else None)

    def percepts(self, user_audio: torch.Tensor, user_visual: Optional[torch.Tensor],
                 face_mask: Optional[torch.Tensor], window: int) -> torch.Tensor:
        """(B, T, L_w, D_a), (B, T, N_tok, D_v) -> (B, T_cur, D_p)."""
        encoded = self.audio_encoder(user_audio)           # (B, T, D_a)
        current = user_audio[:, -window:]
        modulated = self.modulation(current, encoded[:, -window:])
        visual_win = None
        if self.use_visual:
            faces = mask_face_tokens(user_visual, face_mask)
            visual_win = self.visual_encoder(faces)[:, -window:]
        return self.integrator(modulated, visual_win)

    def understanding_tokens(self, visual_np: Sequence[np.ndarray],
                             face_mask_np: np.ndarray,
                             audio_np: Sequence[np.ndarray],
                             dtype: torch.dtype) -> torch.Tensor:
        toks = [self.understanding.tokens(THINK_PROMPT, v, face_mask_np, a)
                for v, a in zip(visual_np, audio_np)]
        return torch.as_tensor(np.stack(toks), dtype=dtype)

    def user_context(self, batch: Dict, window: int) -> torch.Tensor:
        """Full percept+understanding fusion -> (B, T_cur, D_p) context tokens."""
        p = self.percepts(batch["user_audio"],
                          batch.get("user_visual") if self.use_visual else None,
                          batch.get("face_mask") if self.use_visual else None, window)
        if self.use_understanding:
            s = self.understanding_tokens(batch["user_visual_np"], batch["face_mask_np"],
                                          batch["user_audio_np"], p.dtype)
            p = self.fusion(p, s)
        return p

    def emotion_tokens(self, dialogues: Sequence[DialogueHistory],
                       labels: Optional[Sequence[Optional[str]]] = None
                       ) -> Tuple[Optional[torch.Tensor], List[Optional[str]]]:
        """Reason per sample, embed the descriptive sentences, stack.

        `labels` overrides the reasoner per sample (used for conditioning
        swap experiments); None entries fall back to the reasoner.
        """
        if not self.use_emotion:
            return None, [None] * len(dialogues)
        out, used = [], []
        for i, d in enumerate(dialogues):
            label = labels[i] if labels is not None and labels[i] is not None \
                else self.reasoner.infer(d)
            used.append(label)
            out.append(self.embedder(emotion_sentence(label)))
        return torch.stack(out), used
