"""Drift and exploration diagnostics between checkpoints."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tasks
from .exceptions import DomainError
from .gift import pack_batch
from .model.base import Vocabulary
from .model.sampling import sample_batch
from .numerics import log_softmax

SCHEMA_VERSION = 1
DEFAULT_TOPK = (1, 5, 10, 50, 100)
DEFAULT_PASS_KS = (1, 2, 4, 8)


def pass_at_k(n: int, c: int, k: int) -> float:
    """Unbiased estimate of P(at least one of k draws is correct) from n draws with c correct.

    ``1 - C(n-c, k) / C(n, k)``, accumulated as a sum of log ratios.
    """
    if not 0 <= c <= n:
        raise DomainError(f"need 0 <= c <= n, got n={n}, c={c}")
    if not 1 <= k <= n:
        raise DomainError(f"need 1 <= k <= n, got k={k}, n={n}")
    if n - c < k:
        return 1.0
    log_ratio = sum(math.log((n - c - i) / (n - i)) for i in range(k))
    return 1.0 - math.exp(log_ratio)


def _topk_ids(p: np.ndarray, k: int) -> np.ndarray:
    # descending probability, ties to the smaller token id
    order = np.lexsort((np.arange(p.size), -p))
    return order[:k]


def topk_overlap(p, q, k: int) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DomainError("distributions must have equal length")
    if not 1 <= k <= p.size:
        raise DomainError(f"k must lie in [1, {p.size}], got {k}")
    return len(set(_topk_ids(p, k).tolist()) & set(_topk_ids(q, k).tolist())) / k


def _response_logprobs(model, packed, chunk=256):
    out = []
    for s in range(0, packed.n_sequences, chunk):
        out.append(log_softmax(model.forward_logits(packed.inputs[s : s + chunk])))
    return np.concatenate(out, axis=0)


def _check_pair(a, b):
    if a.vocab_size != b.vocab_size:
        raise DomainError(f"vocabulary mismatch: {a.vocab_size} vs {b.vocab_size}")


def model_kl(a, b, eval_set, vocab: Vocabulary = tasks.VOCAB) -> float:
    """Mean ``KL(a || b)`` of next-token distributions over teacher-forced response positions."""
    _check_pair(a, b)
    eval_set = list(eval_set)
    if not eval_set:
        raise DomainError("empty evaluation set")
    packed = pack_batch(eval_set, vocab, mask_prompt=True)
    la, lb = _response_logprobs(a, packed), _response_logprobs(b, packed)
    kl = np.sum(np.exp(la) * (la - lb), axis=-1)
    on = packed.response_mask > 0
    return float(kl[on].mean())


def mean_topk_overlap(a, b, eval_set, ks=DEFAULT_TOPK, vocab: Vocabulary = tasks.VOCAB) -> dict[int, float]:
    """Average top-K overlap per K over teacher-forced response positions.

    K values above the vocabulary size are clipped to it.
    """
    _check_pair(a, b)
    packed = pack_batch(list(eval_set), vocab, mask_prompt=True)
    la, lb = _response_logprobs(a, packed), _response_logprobs(b, packed)
    on = packed.response_mask > 0
    pa, pb = la[on], lb[on]
    grid = sorted({min(int(k), a.vocab_size) for k in ks})
    out = {}
    for k in grid:
        out[k] = float(np.mean([topk_overlap(x, y, k) for x, y in zip(pa, pb)]))
    return out


def pooled_representations(model, eval_set, vocab: Vocabulary = tasks.VOCAB) -> np.ndarray:
    """Last-layer hidden states mean-pooled over each sequence's response positions."""
    packed = pack_batch(list(eval_set), vocab, mask_prompt=True)
    h = model.hidden_states(packed.inputs)
    m = packed.response_mask[..., None]
    return (h * m).sum(axis=1) / m.sum(axis=1)


def cosine_l2(u, v) -> tuple[np.ndarray, np.ndarray]:
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    cos = np.sum(u * v, axis=-1) / (np.linalg.norm(u, axis=-1) * np.linalg.norm(v, axis=-1))
    return np.clip(cos, -1.0, 1.0), np.linalg.norm(u - v, axis=-1)


def rep_similarity(a, b, eval_set, vocab: Vocabulary = tasks.VOCAB) -> tuple[float, float]:
    """Mean cosine similarity and mean L2 distance of pooled last-layer states."""
    _check_pair(a, b)
    wa, wb = getattr(a, "width", None), getattr(b, "width", None)
    if wa is not None and wb is not None and wa != wb:
        raise DomainError(f"width mismatch: {wa} vs {wb}")
    eval_set = list(eval_set)
    cos, l2 = cosine_l2(pooled_representations(a, eval_set, vocab), pooled_representations(b, eval_set, vocab))
    return float(cos.mean()), float(l2.mean())


@dataclass
class ConsistencyReport:
    stage: str
    cosine: float
    l2: float
    kl: float
    topk_overlap: dict[int, float]
    kl_direction: str = "earlier||later"
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        d = asdict(self)
        d["topk_overlap"] = {str(k): v for k, v in sorted(self.topk_overlap.items())}
        return d

    def to_json(self) -> str:
        # no sort_keys: K keys must stay in numeric order
        return json.dumps(self.to_dict())


def consistency_report(earlier, later, eval_set, stage: str, ks=DEFAULT_TOPK,
                       direction: str = "forward", vocab: Vocabulary = tasks.VOCAB) -> ConsistencyReport:
    """Cos / L2 / KL / top-K overlap between two checkpoints.

    ``direction="forward"`` measures ``KL(earlier || later)``; ``"reverse"`` swaps it.
    Tabular models get NaN geometry since they have no hidden states.
    """
    eval_set = list(eval_set)
    if direction == "forward":
        kl, label = model_kl(earlier, later, eval_set, vocab), "earlier||later"
    elif direction == "reverse":
        kl, label = model_kl(later, earlier, eval_set, vocab), "later||earlier"
    else:
        raise DomainError("direction must be 'forward' or 'reverse'")
    try:
        cos, l2 = rep_similarity(earlier, later, eval_set, vocab)
    except TypeError:
        cos, l2 = float("nan"), float("nan")
    overlap = mean_topk_overlap(earlier, later, eval_set, ks, vocab)
    return ConsistencyReport(stage, cos, l2, kl, overlap, label)


@dataclass
class PassAtKReport:
    ks: tuple[int, ...]
    per_prompt: list[tuple[int, int]]
    estimates: dict[int, float] = field(default_factory=dict)
    temperature: float = 1.0
    schema_version: int = SCHEMA_VERSION

    def to_json(self) -> str:
        return json.dumps({
            "schema_version": self.schema_version, "ks": list(self.ks), "temperature": self.temperature,
            "per_prompt": [list(x) for x in self.per_prompt],
            "estimates": {str(k): v for k, v in sorted(self.estimates.items())},
        })


def pass_at_k_report(counts, ks=DEFAULT_PASS_KS, temperature: float = 1.0) -> PassAtKReport:
    counts = [(int(n), int(c)) for n, c in counts]
    est = {int(k): float(np.mean([pass_at_k(n, c, k) for n, c in counts])) for k in ks}
    return PassAtKReport(tuple(int(k) for k in ks), counts, est, temperature)


def evaluate_pass_at_k(model, instances, spec: tasks.TaskSpec, rng, n_samples: int = 16,
                       ks=DEFAULT_PASS_KS, temperature: float = 0.6,
                       vocab: Vocabulary = tasks.VOCAB, chunk: int = 512) -> PassAtKReport:
    """Draw ``n_samples`` responses per prompt, verify them, and estimate pass@k."""
    if max(ks) > n_samples:
        raise DomainError("every k must be <= n_samples")
    prompts = [inst.sequence.prompt for inst in instances]
    contexts = [(vocab.bos, *p) for p in prompts for _ in range(n_samples)]
    responses = []
    for s in range(0, len(contexts), chunk):
        responses += sample_batch(model, contexts[s : s + chunk], temperature,
                                  spec.max_response_len, rng, eos=vocab.eos)
    counts = []
    for i, p in enumerate(prompts):
        rs = responses[i * n_samples : (i + 1) * n_samples]
        counts.append((n_samples, int(sum(tasks.reward(spec, p, r) for r in rs))))
    return pass_at_k_report(counts, ks, temperature)


def mean_token_tv(a, b, eval_set, vocab: Vocabulary = tasks.VOCAB) -> float:
    """Mean total variation between next-token distributions over response positions."""
    _check_pair(a, b)
    packed = pack_batch(list(eval_set), vocab, mask_prompt=True)
    pa, pb = np.exp(_response_logprobs(a, packed)), np.exp(_response_logprobs(b, packed))
    tv = 0.5 * np.abs(pa - pb).sum(axis=-1)
    return float(tv[packed.response_mask > 0].mean())
