from __future__ import annotations

import numpy as np

from ..exceptions import DomainError
from ..numerics import log_softmax


def sample_batch(model, contexts, temperature: float, max_len: int, rng, eos: int | None = None,
                 return_logprobs: bool = False):
    """Autoregressively extend each context by up to ``max_len`` tokens.

    Rows are right-padded while they grow; causal attention makes the padding
    invisible to the positions that matter. A row stops once it emits ``eos``.
    Draws use inverse-CDF sampling on one uniform per live row per step, so a
    fixed ``rng`` state gives a fixed output.

    Returns a list of response tuples, plus per-token log-probabilities under
    the temperature-scaled distribution when ``return_logprobs`` is set.
    """
    if temperature <= 0:
        raise DomainError(f"temperature must be > 0, got {temperature}")
    if max_len < 1:
        raise DomainError(f"max_len must be >= 1, got {max_len}")
    contexts = [np.asarray(c, dtype=np.int64) for c in contexts]
    n = len(contexts)
    lengths = np.array([c.size for c in contexts], dtype=np.int64)
    width = int(lengths.max()) + max_len
    if width > model.context_length:
        width = model.context_length
    buf = np.zeros((n, width), dtype=np.int64)
    for i, c in enumerate(contexts):
        buf[i, : c.size] = c
    cur = lengths.copy()
    alive = np.ones(n, dtype=bool)
    responses = [[] for _ in range(n)]
    logps = [[] for _ in range(n)]

    for _ in range(max_len):
        idx = np.flatnonzero(alive & (cur < width))
        if idx.size == 0:
            break
        upto = int(cur[idx].max())
        logits = model.forward_logits(buf[idx, :upto])
        last = logits[np.arange(idx.size), cur[idx] - 1]
        lp = log_softmax(last / temperature)
        cdf = np.cumsum(np.exp(lp), axis=-1)
        u = rng.random(idx.size) * cdf[:, -1]
        tok = np.minimum((cdf < u[:, None]).sum(axis=-1), lp.shape[-1] - 1)
        for j, row in enumerate(idx):
            t = int(tok[j])
            buf[row, cur[row]] = t
            cur[row] += 1
            responses[row].append(t)
            logps[row].append(float(lp[j, t]))
            if eos is not None and t == eos:
                alive[row] = False
    out = [tuple(r) for r in responses]
    if return_logprobs:
        return out, [np.array(l) for l in logps]
    return out


def greedy_batch(model, contexts, max_len: int, eos: int | None = None):
    """Deterministic argmax decoding with the same stopping rule as ``sample_batch``."""
    contexts = [np.asarray(c, dtype=np.int64) for c in contexts]
    n = len(contexts)
    lengths = np.array([c.size for c in contexts], dtype=np.int64)
    width = min(int(lengths.max()) + max_len, model.context_length)
    buf = np.zeros((n, width), dtype=np.int64)
    for i, c in enumerate(contexts):
        buf[i, : c.size] = c
    cur = lengths.copy()
    alive = np.ones(n, dtype=bool)
    responses = [[] for _ in range(n)]
    for _ in range(max_len):
        idx = np.flatnonzero(alive & (cur < width))
        if idx.size == 0:
            break
        logits = model.forward_logits(buf[idx, : int(cur[idx].max())])
        tok = np.argmax(logits[np.arange(idx.size), cur[idx] - 1], axis=-1)
        for j, row in enumerate(idx):
            t = int(tok[j])
            buf[row, cur[row]] = t
            cur[row] += 1
            responses[row].append(t)
            if eos is not None and t == eos:
                alive[row] = False
    return [tuple(r) for r in responses]
