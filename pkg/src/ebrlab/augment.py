"""Typo-aware query corruption.

Applies at most one character-level edit per call, drawn from six operations
(delete, transpose, insert, substitute, keyboard-adjacent replace, interior
space insert). Fully numeric words are never altered so model-number queries
keep their meaning. All randomness flows through an explicit
``numpy.random.Generator`` handle; callers own RNG partitioning.
"""

from __future__ import annotations

import string
from dataclasses import dataclass, field

import numpy as np

ALL_OPERATIONS = (
    "delete",
    "transpose",
    "insert",
    "substitute",
    "keyboard_replace",
    "space_insert",
)

# Minimum word length for each operation to be well-defined.
_MIN_LEN = {
    "delete": 2,
    "transpose": 2,
    "insert": 1,
    "substitute": 1,
    "keyboard_replace": 1,
    "space_insert": 2,
}

_LETTERS = string.ascii_lowercase


def _build_qwerty_map() -> dict[str, tuple[str, ...]]:
    """Adjacency from the three staggered QWERTY letter rows.

    A key neighbors its same-row left/right keys plus, on the row below,
    the keys at its column and the next column; the relation is then
    symmetrized (e.g. 'q' -> ('a', 's', 'w')).
    """
    rows = ("qwertyuiop", "asdfghjkl", "zxcvbnm")
    neighbors: dict[str, set[str]] = {c: set() for row in rows for c in row}
    for r, row in enumerate(rows):
        for c, key in enumerate(row):
            if c > 0:
                neighbors[key].add(row[c - 1])
            if c + 1 < len(row):
                neighbors[key].add(row[c + 1])
            if r + 1 < len(rows):
                below = rows[r + 1]
                for cc in (c, c + 1):
                    if 0 <= cc < len(below):
                        neighbors[key].add(below[cc])
                        neighbors[below[cc]].add(key)
    return {key: tuple(sorted(adj)) for key, adj in neighbors.items()}


KEYBOARD_QWERTY: dict[str, tuple[str, ...]] = _build_qwerty_map()


@dataclass(frozen=True)
class TypoConfig:
    injection_probability: float = 0.5
    operations: tuple[str, ...] = ALL_OPERATIONS
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.injection_probability <= 1.0:
            raise ValueError(f"injection_probability must be in [0, 1], got {self.injection_probability}")
        ops = tuple(self.operations)
        if not ops:
            raise ValueError("operations must be non-empty")
        unknown = set(ops) - set(ALL_OPERATIONS)
        if unknown:
            raise ValueError(f"unknown operations {sorted(unknown)}; known: {ALL_OPERATIONS}")
        object.__setattr__(self, "operations", ops)


def make_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def is_numeric_word(word: str) -> bool:
    """True when every character is a decimal digit ("14", not "14in")."""
    return bool(word) and word.isdigit()


def op_delete(word: str, index: int) -> str:
    if len(word) < 2:
        raise ValueError(f"delete needs a word of length >= 2, got {word!r}")
    if not 0 <= index < len(word):
        raise ValueError(f"delete index {index} out of range for {word!r}")
    return word[:index] + word[index + 1 :]


def op_transpose(word: str, index: int) -> str:
    if not 0 <= index <= len(word) - 2:
        raise ValueError(f"transpose index {index} out of range for {word!r}")
    return word[:index] + word[index + 1] + word[index] + word[index + 2 :]


def op_insert(word: str, index: int, rng: np.random.Generator) -> str:
    if not 0 <= index <= len(word):
        raise ValueError(f"insert index {index} out of range for {word!r}")
    letter = _LETTERS[rng.integers(len(_LETTERS))]
    return word[:index] + letter + word[index:]


def op_substitute(word: str, index: int, rng: np.random.Generator) -> str:
    if not 0 <= index < len(word):
        raise ValueError(f"substitute index {index} out of range for {word!r}")
    original = word[index]
    letter = original
    while letter == original:
        letter = _LETTERS[rng.integers(len(_LETTERS))]
    return word[:index] + letter + word[index + 1 :]


def op_keyboard_replace(word: str, index: int, rng: np.random.Generator) -> str:
    """Replace with a keyboard-adjacent letter, or a random letter when the
    character has no adjacency defined."""
    if not 0 <= index < len(word):
        raise ValueError(f"keyboard_replace index {index} out of range for {word!r}")
    original = word[index]
    adjacent = KEYBOARD_QWERTY.get(original.lower())
    if adjacent:
        letter = adjacent[rng.integers(len(adjacent))]
    else:
        letter = _LETTERS[rng.integers(len(_LETTERS))]
    return word[:index] + letter + word[index + 1 :]


def op_space_insert(word: str, index: int) -> str:
    """Insert a space at an interior position (1 <= index <= len-1)."""
    if not 1 <= index <= len(word) - 1:
        raise ValueError(f"space_insert index {index} not interior for {word!r}")
    return word[:index] + " " + word[index:]


def inject_typos(text: str, config: TypoConfig, rng: np.random.Generator) -> str:
    """Apply zero or one typo to ``text``.

    With probability ``injection_probability``: pick one enabled operation
    uniformly, then a uniform target word among those long enough for it.
    A fully numeric target skips the injection entirely; otherwise exactly
    one edit is applied at a uniform valid position.
    """
    if rng.random() >= config.injection_probability:
        return text
    op = config.operations[rng.integers(len(config.operations))]
    words = text.split()
    eligible = [i for i, w in enumerate(words) if len(w) >= _MIN_LEN[op]]
    if not eligible:
        return text
    wi = eligible[rng.integers(len(eligible))]
    word = words[wi]
    if is_numeric_word(word):
        return text

    if op == "delete":
        edited = op_delete(word, int(rng.integers(len(word))))
    elif op == "transpose":
        edited = op_transpose(word, int(rng.integers(len(word) - 1)))
    elif op == "insert":
        edited = op_insert(word, int(rng.integers(len(word) + 1)), rng)
    elif op == "substitute":
        edited = op_substitute(word, int(rng.integers(len(word))), rng)
    elif op == "keyboard_replace":
        edited = op_keyboard_replace(word, int(rng.integers(len(word))), rng)
    else:
        edited = op_space_insert(word, int(rng.integers(1, len(word))))

    words[wi] = edited
    return " ".join(words)
