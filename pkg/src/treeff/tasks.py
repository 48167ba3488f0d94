"""Desk-scale tasks: 2D checkerboard classification and a char-level corpus.

The corpus is a deterministic synthetic nested-bracket language so nothing
here needs external data: closing characters are fully determined by the
nesting stack, which gives a next-char task with real structure, while
opening choices stay random (irreducible entropy floor).
"""

from __future__ import annotations

import csv

import numpy as np

OPEN_CHARS = "([{"
CLOSE_CHARS = ")]}"
SEPARATOR = "."


def checkerboard_label(x: np.ndarray, grid: int) -> np.ndarray:
    """Cell-parity labels over [0, 1)^2: (floor(x1 g) + floor(x2 g)) mod 2."""
    cells = np.floor(x * grid).astype(np.int64)
    return (cells[:, 0] + cells[:, 1]) % 2


def gen_checkerboard(rng: np.random.Generator, n: int, grid: int = 4):
    """n uniform points in [0, 1)^2 with checkerboard labels."""
    x = rng.random((n, 2))
    return x, checkerboard_label(x, grid)


def centered(x: np.ndarray) -> np.ndarray:
    """Map task points from [0, 1)^2 onto the zero-mean square [-1, 1)^2.

    Models train on centered coordinates so that sign-based routing splits
    both ways at initialization instead of sending every point one way.
    """
    return 2.0 * np.asarray(x, dtype=np.float64) - 1.0


def write_points_csv(path, x: np.ndarray, labels: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x1", "x2", "label"])
        for (x1, x2), lab in zip(x, labels):
            writer.writerow([f"{x1:.17g}", f"{x2:.17g}", int(lab)])


def read_points_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["x1", "x2", "label"]:
            raise ValueError(f"unexpected points header {header}")
        rows = [(float(a), float(b), int(c)) for a, b, c in reader]
    x = np.array([(a, b) for a, b, _ in rows])
    labels = np.array([c for _, _, c in rows], dtype=np.int64)
    return x, labels


def cross_entropy(logits: np.ndarray, targets: np.ndarray):
    """Mean cross-entropy and its gradient, via stable log-softmax.

    logits: (B, V), targets: (B,) int.  Returns (loss, g_logits) where
    g_logits already carries the 1/B from the mean.
    """
    logits = np.asarray(logits, dtype=np.float64)
    batch = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    rows = np.arange(batch)
    loss = -float(log_p[rows, targets].mean())
    grad = np.exp(log_p)
    grad[rows, targets] -= 1.0
    grad /= batch
    return loss, grad


def perplexity(total_nll: float, token_count: int) -> float:
    """exp(mean NLL); a uniform model over V symbols scores exactly V."""
    if token_count <= 0:
        raise ValueError("token_count must be positive")
    return float(np.exp(total_nll / token_count))


def accuracy(logits: np.ndarray, targets: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=-1) == targets))


def bracket_corpus(rng: np.random.Generator, n_chars: int, max_depth: int = 6, open_prob: float = 0.55) -> str:
    """Concatenated balanced bracket sentences separated by '.'.

    A sentence is a random walk over a nesting stack: open a random bracket
    type while below max_depth with probability open_prob, otherwise close
    the innermost one.  Closing characters are determined by context.
    """
    out = []
    stack = []
    while len(out) < n_chars:
        if not stack:
            out.append(SEPARATOR)
            kind = int(rng.integers(0, len(OPEN_CHARS)))
            out.append(OPEN_CHARS[kind])
            stack.append(kind)
        elif len(stack) >= max_depth or rng.random() >= open_prob:
            out.append(CLOSE_CHARS[stack.pop()])
        else:
            kind = int(rng.integers(0, len(OPEN_CHARS)))
            out.append(OPEN_CHARS[kind])
            stack.append(kind)
    while stack:
        out.append(CLOSE_CHARS[stack.pop()])
    return "".join(out)


def build_vocab(text: str):
    """Sorted unique characters and the char -> id map."""
    chars = sorted(set(text))
    return chars, {c: i for i, c in enumerate(chars)}


def encode(text: str, stoi: dict) -> np.ndarray:
    return np.array([stoi[c] for c in text], dtype=np.int64)


def sample_windows(rng: np.random.Generator, tokens: np.ndarray, batch: int, context: int):
    """Random (inputs, targets) windows for next-char prediction."""
    if tokens.size < context + 1:
        raise ValueError("corpus shorter than one context window")
    starts = rng.integers(0, tokens.size - context - 1, size=batch)
    idx = starts[:, None] + np.arange(context + 1)[None, :]
    window = tokens[idx]
    return window[:, :-1], window[:, 1:]
