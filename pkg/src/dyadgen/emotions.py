"""Shared emotion vocabulary: labels, expression-space offsets, keyword table.

The five labels are a closed set used by the keyword reasoner, the synthetic
conversation generator, and the oracle understanding stub. Each label owns an
offset direction in expression space: orthogonal unit basis vectors scaled by
OFFSET_SCALE, placed on distinct expression dims so conditioning effects stay
linearly decodable from generated motion.
"""

from __future__ import annotations

import importlib.resources
from typing import Dict, List

import numpy as np

EMOTIONS = ("happy", "sad", "concerned", "neutral", "fearful")

# Offset support dims inside the 50-d expression block (dim 0 is the lip
# articulation channel and is never used for offsets).
OFFSET_DIMS = {"happy": 10, "sad": 18, "concerned": 26, "neutral": 34, "fearful": 42}
OFFSET_SCALE = 0.5

# One-word sentence tail per label for the emotion-state template.
MODIFIERS = {
    "happy": "warm",
    "sad": "downcast",
    "concerned": "attentive",
    "neutral": "attentive",
    "fearful": "uneasy",
}

EXPRESSION_DIMS = 50
POSE_DIMS = 6
MOTION_DIMS = EXPRESSION_DIMS + POSE_DIMS
LIP_DIM = 0


def emotion_offset(label: str) -> np.ndarray:
    """Offset vector over the full 56-d motion space (zeros outside its dim)."""
    if label not in OFFSET_DIMS:
        raise KeyError(f"unknown emotion label '{label}'")
    v = np.zeros(MOTION_DIMS)
    v[OFFSET_DIMS[label]] = OFFSET_SCALE
    return v


def emotion_index(label: str) -> int:
    return EMOTIONS.index(label)


def default_keyword_table_path() -> str:
    res = importlib.resources.files("dyadgen").joinpath("data/emotion_keywords.txt")
    return str(res)


def load_keyword_table(path=None) -> Dict[str, str]:
    """Parse a 'keyword label' per-line table; '#' lines are comments."""
    path = path or default_keyword_table_path()
    table: Dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'keyword label', got {line!r}")
            kw, label = parts
            if label not in EMOTIONS:
                raise ValueError(f"{path}:{lineno}: unknown label '{label}'")
            table[kw.lower()] = label
    if not table:
        raise ValueError(f"{path}: empty keyword table")
    return table


def keywords_for(label: str, table: Dict[str, str] | None = None) -> List[str]:
    table = table or load_keyword_table()
    return sorted(kw for kw, lab in table.items() if lab == label)
