"""Log-space primitives and a central-difference gradient checker.

Everything here works in float64 and along the last axis, so the same
functions serve single vectors and ``(batch, time, vocab)`` blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .exceptions import DomainError


def _as_logits(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 0 or v.shape[-1] == 0:
        raise DomainError("log_sum_exp of an empty vector")
    if not np.all(np.isfinite(v)):
        raise DomainError("logits must be finite")
    return v


def log_sum_exp(v, axis: int = -1):
    """Return ``log(sum(exp(v)))`` along ``axis`` without overflow."""
    v = _as_logits(v)
    m = np.max(v, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True))
    out = np.squeeze(out, axis=axis)
    return float(out) if out.ndim == 0 else out


def log_softmax(v, axis: int = -1) -> np.ndarray:
    v = _as_logits(v)
    m = np.max(v, axis=axis, keepdims=True)
    shifted = v - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def softmax(v, axis: int = -1) -> np.ndarray:
    return np.exp(log_softmax(v, axis=axis))


def entropy(p, axis: int = -1):
    """Shannon entropy in nats with ``0 ln 0 = 0``."""
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    out = -np.sum(terms, axis=axis)
    return float(out) if np.ndim(out) == 0 else out


def soft_cross_entropy(target, model_logprobs, axis: int = -1):
    """Cross-entropy ``-sum(target * logprobs)`` of a soft target.

    ``model_logprobs`` must already be normalised (a ``log_softmax`` output).
    Entries where the target is exactly zero contribute nothing, even if the
    model assigns them ``-inf``.
    """
    target = np.asarray(target, dtype=np.float64)
    model_logprobs = np.asarray(model_logprobs, dtype=np.float64)
    if target.shape != model_logprobs.shape:
        raise DomainError(
            f"length mismatch: target {target.shape} vs logprobs {model_logprobs.shape}"
        )
    prod = np.where(target > 0, target * np.where(target > 0, model_logprobs, 0.0), 0.0)
    out = -np.sum(prod, axis=axis)
    return float(out) if np.ndim(out) == 0 else out


def kl_divergence(p, q) -> float:
    """``KL(p || q)`` in nats for two probability vectors."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DomainError(f"length mismatch: {p.shape} vs {q.shape}")
    bad = np.flatnonzero((p > 0) & (q <= 0))
    if bad.size:
        raise DomainError(f"support violation at index {int(bad[0])}: p > 0 where q = 0")
    mask = p > 0
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


def kl_from_logprobs(logp, logq, axis: int = -1):
    """Rowwise ``KL(p || q)`` given normalised log-probabilities."""
    logp = np.asarray(logp, dtype=np.float64)
    logq = np.asarray(logq, dtype=np.float64)
    return np.sum(np.exp(logp) * (logp - logq), axis=axis)


def total_variation(p, q) -> float:
    return 0.5 * float(np.sum(np.abs(np.asarray(p, dtype=np.float64) - np.asarray(q, dtype=np.float64))))


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_index: int
    rel_errors: np.ndarray = field(repr=False)
    numeric: np.ndarray = field(repr=False)
    analytic: np.ndarray = field(repr=False)
    failed_index: int | None = None

    def passed(self, tol: float) -> bool:
        return self.failed_index is None and self.max_rel_error <= tol


def grad_check(
    loss_fn: Callable[[np.ndarray], float],
    params,
    analytic_grad=None,
    step: float = 1e-6,
    indices=None,
) -> GradCheckReport:
    """Compare an analytic gradient with central differences.

    ``loss_fn`` may return either the loss or ``(loss, grad)``; in the latter
    case the analytic gradient is taken from the call at ``params`` unless
    ``analytic_grad`` is given. ``indices`` restricts the check to a subset of
    coordinates, which keeps large models cheap to verify.

    The error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if not (1e-7 <= step <= 1e-4):
        raise DomainError(f"step must lie in [1e-7, 1e-4], got {step}")
    x = np.array(params, dtype=np.float64, copy=True)

    def value(at):
        out = loss_fn(at)
        return out[0] if isinstance(out, tuple) else out

    if analytic_grad is None:
        out = loss_fn(x.copy())
        if not isinstance(out, tuple):
            raise DomainError("analytic_grad missing and loss_fn returned no gradient")
        analytic_grad = out[1]
    analytic = np.asarray(analytic_grad, dtype=np.float64).ravel()
    idx = np.arange(x.size) if indices is None else np.asarray(indices)

    numeric = np.zeros(idx.size)
    for j, i in enumerate(idx):
        orig = x.flat[i]
        x.flat[i] = orig + step
        f_plus = float(value(x))
        x.flat[i] = orig - step
        f_minus = float(value(x))
        x.flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            return GradCheckReport(np.inf, int(i), np.full(idx.size, np.inf), numeric, analytic[idx], failed_index=int(i))
        numeric[j] = (f_plus - f_minus) / (2.0 * step)

    a = analytic[idx]
    rel = np.abs(a - numeric) / np.maximum(1.0, np.abs(a))
    worst = int(np.argmax(rel)) if rel.size else 0
    return GradCheckReport(
        max_rel_error=float(rel.max()) if rel.size else 0.0,
        worst_index=int(idx[worst]) if rel.size else 0,
        rel_errors=rel,
        numeric=numeric,
        analytic=a,
    )
