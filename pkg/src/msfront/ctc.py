"""CTC loss (log-space forward-backward), greedy decoding, and error rates."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Tensor, custom_op

BLANK = 0


class InfeasibleLabelError(ValueError):
    """The label cannot be emitted in the available number of frames."""


class CTCNumericError(FloatingPointError):
    """A feasible label whose likelihood underflowed to zero."""


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def min_frames(label: Sequence[int]) -> int:
    """Frames needed to emit ``label``: one per symbol plus a blank between repeats."""
    repeats = sum(1 for a, b in zip(label, label[1:]) if a == b)
    return len(label) + repeats


def _extend(label: Sequence[int]) -> np.ndarray:
    ext = np.full(2 * len(label) + 1, BLANK, dtype=np.int64)
    ext[1::2] = label
    return ext


def ctc_forward_backward(logp: np.ndarray, label: Sequence[int]) -> tuple[float, np.ndarray]:
    """Return ``-log P(label)`` and the per-frame symbol occupancy ``gamma[T, V]``."""
    n_frames, vocab = logp.shape
    if any(not 1 <= c < vocab for c in label):
        raise ValueError(f"label symbols must lie in [1, {vocab - 1}]")
    if n_frames < min_frames(label):
        raise InfeasibleLabelError(
            f"label of length {len(label)} needs {min_frames(label)} frames, only {n_frames} available")
    ext = _extend(label)
    S = ext.size
    # transitions s-2 -> s are allowed onto non-blank symbols that differ from s-2
    skip = np.zeros(S, dtype=bool)
    skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    emit = logp[:, ext]  # [T, S]

    alpha = np.full((n_frames, S), -np.inf)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, n_frames):
        prev = alpha[t - 1]
        a = prev.copy()
        a[1:] = np.logaddexp(a[1:], prev[:-1])
        a[2:] = np.where(skip[2:], np.logaddexp(a[2:], prev[:-2]), a[2:])
        alpha[t] = a + emit[t]

    # beta excludes the emission at its own frame
    beta = np.full((n_frames, S), -np.inf)
    beta[-1, -1] = 0.0
    if S > 1:
        beta[-1, -2] = 0.0
    for t in range(n_frames - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        b = nxt.copy()
        b[:-1] = np.logaddexp(b[:-1], nxt[1:])
        b[:-2] = np.where(skip[2:], np.logaddexp(b[:-2], nxt[2:]), b[:-2])
        beta[t] = b

    log_p = np.logaddexp(alpha[-1, -1], alpha[-1, -2]) if S > 1 else alpha[-1, -1]
    if not np.isfinite(log_p):
        raise CTCNumericError("label likelihood underflowed to zero")
    occ = np.exp(alpha + beta - log_p)  # [T, S]
    gamma = np.zeros((n_frames, vocab))
    for s in range(S):
        gamma[:, ext[s]] += occ[:, s]
    return float(-log_p), gamma


def ctc_loss(logits: Tensor, label: Sequence[int]) -> Tensor:
    """Scalar ``-log P(label | softmax(logits))``; blank is symbol 0."""
    logp = log_softmax(logits.data)
    loss, gamma = ctc_forward_backward(logp, list(label))
    probs = np.exp(logp)
    return custom_op(np.array([loss]), (logits,), lambda g: (g[0] * (probs - gamma),), "ctc_loss")


def merge_repeats(path: Sequence[int]) -> list[int]:
    return [int(p) for i, p in enumerate(path) if i == 0 or p != path[i - 1]]


def collapse(path: Sequence[int]) -> list[int]:
    """Merge repeated symbols, then drop blanks."""
    return [p for p in merge_repeats(list(path)) if p != BLANK]


def greedy_decode(logits, alphabet: str) -> str:
    """Per-frame argmax, merge repeats, drop blanks; symbol ``i`` is ``alphabet[i - 1]``."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return "".join(alphabet[i - 1] for i in collapse(data.argmax(axis=1)))


def encode(text: str, alphabet: str) -> list[int]:
    try:
        return [alphabet.index(c) + 1 for c in text]
    except ValueError:
        bad = sorted(set(text) - set(alphabet))
        raise ValueError(f"characters {bad} not in alphabet {alphabet!r}") from None


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def wer(ref, hyp) -> float:
    """Word-level Levenshtein distance over the reference length.

    Strings are split on whitespace; token sequences are used as given.
    """
    ref_t = ref.split() if isinstance(ref, str) else list(ref)
    hyp_t = hyp.split() if isinstance(hyp, str) else list(hyp)
    if not ref_t:
        raise ValueError("reference must contain at least one word")
    return edit_distance(ref_t, hyp_t) / len(ref_t)


def cer(ref: str, hyp: str) -> float:
    if not ref:
        raise ValueError("reference must contain at least one character")
    return edit_distance(list(ref), list(hyp)) / len(ref)
