from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..exceptions import DomainError, UnsupportedOperationError
from ..numerics import log_softmax, softmax


@dataclass(frozen=True)
class Vocabulary:
    """A fixed symbol table with three special ids."""

    size: int
    bos: int = 1
    eos: int = 2
    pad: int = 0
    symbols: tuple[str, ...] = ()

    def __post_init__(self):
        if self.size < 3:
            raise DomainError(f"vocabulary size must be >= 3, got {self.size}")
        specials = (self.bos, self.eos, self.pad)
        if len(set(specials)) != 3 or max(specials) >= self.size or min(specials) < 0:
            raise DomainError(f"special ids {specials} must be distinct and < {self.size}")
        if self.symbols and len(self.symbols) != self.size:
            raise DomainError("symbol table length must equal vocabulary size")

    def to_dict(self) -> dict:
        return {"size": self.size, "bos": self.bos, "eos": self.eos, "pad": self.pad,
                "symbols": list(self.symbols)}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(size=d["size"], bos=d["bos"], eos=d["eos"], pad=d["pad"],
                   symbols=tuple(d.get("symbols", ())))


@dataclass(frozen=True)
class TokenSequence:
    prompt: tuple[int, ...]
    response: tuple[int, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "prompt", tuple(int(t) for t in self.prompt))
        object.__setattr__(self, "response", tuple(int(t) for t in self.response))

    def validate(self, vocab: Vocabulary) -> None:
        for t in self.prompt + self.response:
            if not 0 <= t < vocab.size:
                raise DomainError(f"token id {t} outside vocabulary of size {vocab.size}")

    def is_complete(self, vocab: Vocabulary) -> bool:
        return bool(self.response) and self.response[-1] == vocab.eos


class PolicyModel:
    """Common surface of the autoregressive policies.

    Subclasses own a flat float64 ``params`` vector and implement
    ``_forward(tokens) -> (logits, cache)`` and ``_backward(cache, dlogits)``.
    ``tokens`` is always a ``(batch, time)`` integer array; position ``t`` of
    the output holds the logits of the token that follows ``tokens[:, :t+1]``.
    """

    kind = "abstract"
    params: np.ndarray
    vocab_size: int

    @property
    def n_params(self) -> int:
        return self.params.size

    @property
    def context_length(self) -> int:
        return np.iinfo(np.int64).max

    def _check_tokens(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        if tokens.ndim != 2:
            raise DomainError(f"tokens must be 1-D or 2-D, got shape {tokens.shape}")
        if tokens.shape[1] > self.context_length:
            raise DomainError(
                f"sequence length {tokens.shape[1]} exceeds context length {self.context_length}"
            )
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.vocab_size):
            raise DomainError(f"token ids must lie in [0, {self.vocab_size})")
        return tokens

    def forward(self, tokens):
        """Return ``(logits, cache)`` for a token batch; ``cache`` feeds ``backward``."""
        tokens = self._check_tokens(tokens)
        return self._forward(tokens)

    def forward_logits(self, tokens) -> np.ndarray:
        """Logits per position. A 1-D input gives a ``(time, vocab)`` array."""
        squeeze = np.ndim(tokens) == 1
        logits, _ = self.forward(tokens)
        return logits[0] if squeeze else logits

    def backward(self, cache, dlogits) -> np.ndarray:
        """Gradient over ``params`` of a loss whose logit-gradient is ``dlogits``."""
        dlogits = np.asarray(dlogits, dtype=np.float64)
        if dlogits.shape != cache["logits_shape"]:
            raise DomainError(
                f"logit gradient shape {dlogits.shape} != forward output {cache['logits_shape']}"
            )
        return self._backward(cache, dlogits)

    def next_token_logprobs(self, context) -> np.ndarray:
        """Normalised log-probabilities of the token following ``context``."""
        return log_softmax(self.forward_logits(np.asarray(context, dtype=np.int64))[-1])

    def hidden_states(self, tokens) -> np.ndarray:
        raise UnsupportedOperationError(f"{self.kind} models have no hidden representation")

    def sample_sequence(self, prompt, temperature: float, max_len: int, rng, eos: int | None = None):
        """Sample one continuation of ``prompt``; see :func:`sample_batch`."""
        from .sampling import sample_batch

        out = sample_batch(self, [prompt], temperature, max_len, rng, eos=eos)
        return TokenSequence(prompt=tuple(int(t) for t in prompt), response=out[0])

    def copy(self) -> "PolicyModel":
        raise NotImplementedError

    def architecture(self) -> dict:
        raise NotImplementedError

    def probs(self, tokens) -> np.ndarray:
        return softmax(self.forward_logits(tokens))
