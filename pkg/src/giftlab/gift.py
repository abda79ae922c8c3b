"""Soft-target fine-tuning losses.

Every loss here has the shape ``sum_t w_t * f(logits_t)`` over response
positions, so each one is written as a per-position value plus its gradient
with respect to the logits, then pushed through ``model.backward`` once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import DomainError
from .model.base import TokenSequence, Vocabulary
from .numerics import log_softmax, softmax

NORMALIZATIONS = ("token", "sequence")


@dataclass(frozen=True)
class GiftConfig:
    beta: float = 5.0
    mask_prompt: bool = True
    normalize: str = "token"

    def __post_init__(self):
        if not np.isfinite(self.beta) or self.beta < 0:
            raise DomainError(f"beta must be finite and >= 0, got {self.beta}")
        if self.normalize not in NORMALIZATIONS:
            raise DomainError(f"normalize must be one of {NORMALIZATIONS}")


@dataclass
class PackedBatch:
    """Teacher-forced view of a batch of ``(prompt, response)`` pairs.

    ``inputs[b, j]`` predicts ``targets[b, j]``; ``mask`` marks positions that
    enter the loss. Inputs begin with the vocabulary's BOS token.
    """

    inputs: np.ndarray
    targets: np.ndarray
    mask: np.ndarray
    response_mask: np.ndarray

    @property
    def n_sequences(self) -> int:
        return self.inputs.shape[0]

    def weights(self, normalize: str = "token") -> np.ndarray:
        if normalize == "token":
            total = self.mask.sum()
            return self.mask / total if total > 0 else self.mask
        return self.mask / self.n_sequences

    def take(self, idx) -> "PackedBatch":
        """Select rows, trimming trailing columns that carry no loss (causal, so safe)."""
        idx = np.asarray(idx)
        used = self.mask[idx].any(axis=0) | self.response_mask[idx].any(axis=0)
        last = int(np.max(np.flatnonzero(used), initial=0)) + 1
        return PackedBatch(self.inputs[idx, :last], self.targets[idx, :last],
                           self.mask[idx, :last], self.response_mask[idx, :last])


def pack_batch(batch, vocab: Vocabulary, mask_prompt: bool = True) -> PackedBatch:
    if isinstance(batch, PackedBatch):
        return batch
    batch = list(batch)
    if not batch:
        raise DomainError("empty batch")
    fulls, plens = [], []
    for seq in batch:
        if not isinstance(seq, TokenSequence):
            seq = TokenSequence(*seq)
        seq.validate(vocab)
        fulls.append([vocab.bos, *seq.prompt, *seq.response])
        plens.append(len(seq.prompt))
    T = max(len(f) for f in fulls) - 1
    B = len(fulls)
    inputs = np.full((B, T), vocab.pad, dtype=np.int64)
    targets = np.full((B, T), vocab.pad, dtype=np.int64)
    resp = np.zeros((B, T))
    for b, (full, pl) in enumerate(zip(fulls, plens)):
        n = len(full) - 1
        inputs[b, :n] = full[:-1]
        targets[b, :n] = full[1:]
        resp[b, pl:n] = 1.0
    mask = resp.copy()
    if not mask_prompt:
        for b, full in enumerate(fulls):
            mask[b, : len(full) - 1] = 1.0
    return PackedBatch(inputs, targets, mask, resp)


def gift_targets(base_logprobs, oracle, beta: float) -> np.ndarray:
    """Gibbs-reweighted token targets: ``softmax(base_logprobs + beta * onehot(oracle))``.

    Works on ``(T, V)`` or ``(B, T, V)`` blocks with matching oracle ids.
    """
    base_logprobs = np.asarray(base_logprobs, dtype=np.float64)
    oracle = np.asarray(oracle, dtype=np.int64)
    V = base_logprobs.shape[-1]
    if oracle.shape != base_logprobs.shape[:-1]:
        raise DomainError(f"oracle shape {oracle.shape} does not match logprobs {base_logprobs.shape}")
    if oracle.size and (oracle.min() < 0 or oracle.max() >= V):
        raise DomainError(f"oracle token id outside vocabulary of size {V}")
    z = base_logprobs + beta * np.eye(V)[oracle]
    return softmax(z)


def base_logprobs(base, packed: PackedBatch, chunk: int = 256) -> np.ndarray:
    """Log-probabilities of the frozen base model on every position of ``packed``."""
    out = np.empty(packed.inputs.shape + (base.vocab_size,))
    for s in range(0, packed.n_sequences, chunk):
        out[s : s + chunk] = log_softmax(base.forward_logits(packed.inputs[s : s + chunk]))
    return out


def _base_block(model, base, packed, cached):
    if cached is not None:
        return cached
    if base.vocab_size != model.vocab_size:
        raise DomainError("model and base must share a vocabulary")
    return base_logprobs(base, packed)


def _soft_target_step(model, packed, target, weights, extra=None):
    logits, cache = model.forward(packed.inputs)
    lp = log_softmax(logits)
    p = np.exp(lp)
    per_pos = -np.sum(np.where(target > 0, target * lp, 0.0), axis=-1)
    loss = float(np.sum(weights * per_pos))
    dlogits = weights[..., None] * (p - target)
    if extra is not None:
        add_loss, add_grad = extra(lp, p)
        loss += add_loss
        dlogits = dlogits + add_grad
    return loss, model.backward(cache, dlogits)


def soft_target_loss(model, packed: PackedBatch, target, normalize: str = "token"):
    """Cross-entropy of ``model`` against an explicit per-position target block."""
    return _soft_target_step(model, packed, target, packed.weights(normalize))


def _onehot(packed, V):
    return np.eye(V)[packed.targets]


def sft_loss(model, batch, mask_prompt: bool = True, vocab: Vocabulary | None = None,
             normalize: str = "token"):
    """Negative log-likelihood of the demonstration tokens."""
    packed = pack_batch(batch, vocab, mask_prompt)
    return soft_target_loss(model, packed, _onehot(packed, model.vocab_size), normalize)


def gift_loss(model, base, batch, cfg: GiftConfig, vocab: Vocabulary | None = None,
              cached_base_logprobs=None):
    """Cross-entropy against GIFT targets built from the frozen ``base``.

    The targets are constants: ``base`` never receives a gradient. Pass
    ``cached_base_logprobs`` to skip the base forward pass.
    """
    packed = pack_batch(batch, vocab, cfg.mask_prompt)
    blp = _base_block(model, base, packed, cached_base_logprobs)
    target = gift_targets(blp, packed.targets, cfg.beta)
    return soft_target_loss(model, packed, target, cfg.normalize)


def entropy_reg_loss(model, batch, lambda_h: float = 0.01, mask_prompt: bool = True,
                     vocab: Vocabulary | None = None, normalize: str = "token"):
    """SFT loss minus ``lambda_h`` times the mean predictive entropy."""
    if lambda_h < 0:
        raise DomainError("lambda_h must be >= 0")
    packed = pack_batch(batch, vocab, mask_prompt)
    w = packed.weights(normalize)

    def entropy_term(lp, p):
        H = -np.sum(p * lp, axis=-1)
        # d(-H)/dz = p * (log p + H)
        return -lambda_h * float(np.sum(w * H)), lambda_h * w[..., None] * p * (lp + H[..., None])

    return _soft_target_step(model, packed, _onehot(packed, model.vocab_size), w, entropy_term)


def label_smoothing_targets(oracle, V: int, eps: float) -> np.ndarray:
    if not 0 <= eps < 1:
        raise DomainError(f"eps must lie in [0, 1), got {eps}")
    return (1 - eps) * np.eye(V)[np.asarray(oracle)] + eps / V


def label_smoothing_loss(model, batch, eps: float = 0.01, mask_prompt: bool = True,
                         vocab: Vocabulary | None = None, normalize: str = "token"):
    packed = pack_batch(batch, vocab, mask_prompt)
    target = label_smoothing_targets(packed.targets, model.vocab_size, eps)
    return soft_target_loss(model, packed, target, normalize)


def kd_loss(model, base, batch, alpha: float = 0.1, mask_prompt: bool = True,
            vocab: Vocabulary | None = None, normalize: str = "token", cached_base_logprobs=None):
    """SFT loss plus ``alpha * KL(base || model)`` averaged over positions."""
    if alpha < 0:
        raise DomainError("alpha must be >= 0")
    packed = pack_batch(batch, vocab, mask_prompt)
    w = packed.weights(normalize)
    blp = _base_block(model, base, packed, cached_base_logprobs)
    bp = np.exp(blp)

    def distill(lp, p):
        kl = np.sum(bp * (blp - lp), axis=-1)
        return alpha * float(np.sum(w * kl)), alpha * w[..., None] * (p - bp)

    return _soft_target_step(model, packed, _onehot(packed, model.vocab_size), w, distill)


def mean_target_entropy(target, packed: PackedBatch, normalize: str = "token") -> float:
    t = np.asarray(target)
    H = -np.sum(np.where(t > 0, t * np.log(np.where(t > 0, t, 1.0)), 0.0), axis=-1)
    return float(np.sum(packed.weights(normalize) * H))
