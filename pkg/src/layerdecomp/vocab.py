"""The closed word list used for synthetic prompts."""

from __future__ import annotations

from .errors import VocabularyError

COLORS = {
    "red": (0.86, 0.12, 0.12),
    "green": (0.15, 0.65, 0.2),
    "blue": (0.12, 0.25, 0.85),
    "yellow": (0.95, 0.85, 0.1),
    "orange": (0.98, 0.55, 0.08),
    "purple": (0.5, 0.2, 0.7),
    "cyan": (0.1, 0.8, 0.85),
    "magenta": (0.85, 0.15, 0.7),
    "white": (0.97, 0.97, 0.97),
    "black": (0.05, 0.05, 0.05),
    "gray": (0.55, 0.55, 0.55),
    "pink": (0.98, 0.65, 0.75),
    "brown": (0.5, 0.3, 0.12),
    "teal": (0.05, 0.45, 0.45),
}
SHAPES = ("circle", "rectangle", "triangle", "ring")
EXTRA = ("background", "gradient")

WORDS = (*COLORS, *SHAPES, *EXTRA)
_INDEX = {w: i for i, w in enumerate(WORDS)}


def encode(words) -> list:
    try:
        return [_INDEX[w] for w in words]
    except KeyError as exc:
        raise VocabularyError(f"unknown prompt word {exc.args[0]!r}") from None


def decode(ids) -> list:
    return [WORDS[i] for i in ids]
