"""Input checks shared by the estimator wrappers."""

from __future__ import annotations

import numpy as np

from .exceptions import DomainError
from .model.base import PolicyModel, TokenSequence, Vocabulary


def check_random_state(seed) -> np.random.Generator:
    """``None``, an int or a Generator, returned as a Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None or isinstance(seed, (int, np.integer)):
        return np.random.default_rng(seed)
    raise DomainError(f"cannot turn {seed!r} into a random generator")


def check_sequences(X, vocab: Vocabulary) -> list[TokenSequence]:
    """Accept TokenSequences, ``(prompt, response)`` pairs or task instances; validate ids."""
    out = []
    for item in X:
        if hasattr(item, "sequence"):
            item = item.sequence
        if not isinstance(item, TokenSequence):
            prompt, response = item
            item = TokenSequence(tuple(prompt), tuple(response))
        item.validate(vocab)
        out.append(item)
    if not out:
        raise DomainError("X is empty")
    return out


def check_prompts(X, vocab: Vocabulary) -> list[tuple[int, ...]]:
    out = []
    for item in X:
        if hasattr(item, "sequence"):
            item = item.sequence.prompt
        elif isinstance(item, TokenSequence):
            item = item.prompt
        prompt = tuple(int(t) for t in item)
        if any(t < 0 or t >= vocab.size for t in prompt):
            raise DomainError("prompt token id outside the vocabulary")
        out.append(prompt)
    if not out:
        raise DomainError("X is empty")
    return out


def check_policy(model, vocab: Vocabulary, name: str = "model") -> PolicyModel:
    if not isinstance(model, PolicyModel):
        raise DomainError(f"{name} must be a PolicyModel, got {type(model).__name__}")
    if model.vocab_size != vocab.size:
        raise DomainError(f"{name} vocabulary size {model.vocab_size} != {vocab.size}")
    return model
