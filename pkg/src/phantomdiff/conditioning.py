"""Label-to-prompt templating and frozen dual-encoder prompt embeddings.

Prompts follow the fixed template ``"Chest X-ray of a subject with
<findings>"`` where multiple findings are joined by commas with "and"
before the last, in vocabulary order.  Two frozen bag-of-words hash
encoders (64- and 32-dimensional) embed a prompt: every word maps to a
fixed pseudo-random unit direction keyed by a blake2b hash of the word,
the word vectors are summed and L2-normalized.  The two encoder outputs
are kept as a 2-token sequence in the concatenated 96-dimensional space
(token 1 carries encoder 1's output in dims 0..63, token 2 carries
encoder 2's output in dims 64..95).

Everything here is a pure function; the encoders have no trainable state.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .findings import FINDINGS, active_findings, validate_labels
from .rng import generator

PROMPT_PREFIX = "Chest X-ray of a subject with "

ENCODER_DIMS = (64, 32)
COND_DIM = sum(ENCODER_DIMS)
COND_TOKENS = len(ENCODER_DIMS)

_ENCODER_KEYS = (0x632D31, 0x632D32)  # fixed stream keys, one per encoder


@dataclass(frozen=True)
class Prompt:
    text: str


@dataclass(frozen=True)
class PromptEmbedding:
    """Outputs of the two encoders plus their token-sequence view."""

    e1: np.ndarray  # (64,)
    e2: np.ndarray  # (32,)

    def tokens(self) -> np.ndarray:
        """(2, 96) token sequence in the concatenated embedding space."""
        out = np.zeros((COND_TOKENS, COND_DIM))
        out[0, : ENCODER_DIMS[0]] = self.e1
        out[1, ENCODER_DIMS[0] :] = self.e2
        return out

    def concatenated(self) -> np.ndarray:
        """(96,) concatenation of the two encoder outputs."""
        return np.concatenate([self.e1, self.e2])


def labels_to_prompt(labels: np.ndarray) -> Prompt:
    """Render a label vector as a prompt string."""
    labels = validate_labels(labels)
    names = active_findings(labels)
    if len(names) == 1:
        findings = names[0]
    else:
        findings = ", ".join(names[:-1]) + " and " + names[-1]
    return Prompt(text=PROMPT_PREFIX + findings)


def parse_prompt(prompt: Prompt | str) -> np.ndarray:
    """Invert :func:`labels_to_prompt`; used to round-trip prompts in tests."""
    text = prompt.text if isinstance(prompt, Prompt) else prompt
    if not text.startswith(PROMPT_PREFIX):
        raise ValueError(f"prompt does not match template: {text!r}")
    body = text[len(PROMPT_PREFIX) :]
    head, _, last = body.rpartition(" and ")
    names = ([*head.split(", "), last] if head else [last]) if last else []
    vec = np.zeros(len(FINDINGS), dtype=np.int8)
    for name in names:
        if name not in FINDINGS:
            raise ValueError(f"prompt names unknown finding {name!r}")
        vec[FINDINGS.index(name)] = 1
    return validate_labels(vec)


@lru_cache(maxsize=4096)
def _word_vector(word: str, dim: int, key: int) -> np.ndarray:
    rng = generator(key, "word-encoder", word)
    vec = rng.standard_normal(dim)
    return vec / np.linalg.norm(vec)


def _encode(text: str, dim: int, key: int) -> np.ndarray:
    words = text.replace(",", " ").split()
    total = np.zeros(dim)
    for word in words:
        total = total + _word_vector(word, dim, key)
    norm = np.linalg.norm(total)
    return total / norm if norm > 0 else total


def embed_prompt(prompt: Prompt | str) -> PromptEmbedding:
    """Embed a prompt with the two frozen encoders."""
    text = prompt.text if isinstance(prompt, Prompt) else prompt
    if not text:
        raise ValueError("prompt must be non-empty")
    e1 = _encode(text, ENCODER_DIMS[0], _ENCODER_KEYS[0])
    e2 = _encode(text, ENCODER_DIMS[1], _ENCODER_KEYS[1])
    return PromptEmbedding(e1=e1, e2=e2)


def embed_labels(labels: np.ndarray) -> PromptEmbedding:
    """Shorthand for ``embed_prompt(labels_to_prompt(labels))``."""
    return embed_prompt(labels_to_prompt(labels))


def null_embedding() -> PromptEmbedding:
    """The all-zeros embedding used for guidance dropout and unconditional passes."""
    return PromptEmbedding(e1=np.zeros(ENCODER_DIMS[0]), e2=np.zeros(ENCODER_DIMS[1]))


def prompt_table(label_vectors: list[np.ndarray]) -> list[dict]:
    """Label/prompt mapping rows, exportable as JSON for audit."""
    rows = []
    for labels in label_vectors:
        labels = validate_labels(labels)
        rows.append(
            {
                "labels": [int(b) for b in labels],
                "findings": active_findings(labels),
                "prompt": labels_to_prompt(labels).text,
            }
        )
    return rows
