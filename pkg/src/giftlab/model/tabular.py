from __future__ import annotations

import numpy as np

from ..exceptions import DomainError
from .base import PolicyModel


class TabularPolicy(PolicyModel):
    """Order-``k`` conditional table: one row of logits per ``k``-token context.

    Contexts shorter than ``k`` are left-padded with an extra virtual symbol
    (index ``vocab_size``) so the empty context has its own row. The table
    therefore has ``(vocab_size + 1) ** order`` rows.
    """

    kind = "tabular"

    def __init__(self, vocab_size: int, order: int = 1, params=None):
        if vocab_size < 2:
            raise DomainError("tabular policy needs at least two tokens")
        if order < 1:
            raise DomainError("order must be >= 1")
        self.vocab_size = int(vocab_size)
        self.order = int(order)
        self.n_rows = (self.vocab_size + 1) ** self.order
        if params is None:
            params = np.zeros(self.n_rows * self.vocab_size)
        params = np.asarray(params, dtype=np.float64)
        if params.size != self.n_rows * self.vocab_size:
            raise DomainError(
                f"expected {self.n_rows * self.vocab_size} parameters, got {params.size}"
            )
        self.params = params.ravel().copy()

    @property
    def table(self) -> np.ndarray:
        return self.params.reshape(self.n_rows, self.vocab_size)

    def context_rows(self, tokens: np.ndarray) -> np.ndarray:
        """Row index of the context ending at each position of ``tokens``."""
        B, T = tokens.shape
        base = self.vocab_size + 1
        padded = np.concatenate(
            [np.full((B, self.order - 1), self.vocab_size, dtype=np.int64), tokens], axis=1
        )
        rows = np.zeros((B, T), dtype=np.int64)
        for j in range(self.order):
            rows = rows * base + padded[:, j : j + T]
        return rows

    def row_for_context(self, context) -> int:
        ctx = [self.vocab_size] * self.order + [int(t) for t in context]
        row = 0
        for t in ctx[-self.order :]:
            row = row * (self.vocab_size + 1) + t
        return row

    def next_token_logprobs(self, context) -> np.ndarray:
        context = np.asarray(context, dtype=np.int64)
        if context.size and (context.min() < 0 or context.max() >= self.vocab_size):
            raise DomainError(f"token ids must lie in [0, {self.vocab_size})")
        row = self.table[self.row_for_context(context)]
        m = row.max()
        return row - m - np.log(np.exp(row - m).sum())

    def _forward(self, tokens):
        rows = self.context_rows(tokens)
        logits = self.table[rows]
        return logits, {"rows": rows, "logits_shape": logits.shape}

    def _backward(self, cache, dlogits):
        grad = np.zeros((self.n_rows, self.vocab_size))
        np.add.at(grad, cache["rows"].ravel(), dlogits.reshape(-1, self.vocab_size))
        return grad.ravel()

    def fit_counts(self, sequences, pseudocount: float = 0.0, floor: float = -50.0) -> "TabularPolicy":
        """Set every observed row to the log of its empirical next-token frequencies.

        Each entry of ``sequences`` is a token list; every position after the
        first is a training target. Zero counts (with no pseudocount) become
        ``floor`` so logits stay finite. Unobserved rows are left untouched.
        """
        counts = np.zeros((self.n_rows, self.vocab_size))
        for seq in sequences:
            seq = np.asarray(seq, dtype=np.int64)[None, :]
            rows = self.context_rows(seq[:, :-1])[0]
            np.add.at(counts, (rows, seq[0, 1:]), 1.0)
        seen = counts.sum(axis=1) > 0
        sm = counts[seen] + pseudocount
        with np.errstate(divide="ignore"):
            logp = np.log(sm / sm.sum(axis=1, keepdims=True))
        table = self.table
        table[seen] = np.maximum(logp, floor)
        return self

    def copy(self) -> "TabularPolicy":
        return TabularPolicy(self.vocab_size, self.order, self.params)

    def architecture(self) -> dict:
        return {"kind": self.kind, "vocab_size": self.vocab_size, "order": self.order}

    @classmethod
    def random(cls, vocab_size: int, order: int, rng, scale: float = 1.0) -> "TabularPolicy":
        n = ((vocab_size + 1) ** order) * vocab_size
        return cls(vocab_size, order, rng.normal(0.0, scale, size=n))
