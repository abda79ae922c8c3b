"""Exact enumeration over small response spaces.

Used to check the KL-regularized closed forms numerically: Gibbs optima,
stage composition, soft-Q values and the token-level indicator approximation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .exceptions import DomainError
from .model.tabular import TabularPolicy
from .numerics import log_sum_exp, total_variation

MAX_VOCAB = 6
MAX_HORIZON = 6
MAX_SEQUENCES = 50_000


def count_completions(vocab_size: int, horizon: int) -> int:
    """Responses that stop at EOS or at the horizon, whichever comes first."""
    free = vocab_size - 1
    return sum(free ** (l - 1) for l in range(1, horizon)) + free ** (horizon - 1) * vocab_size


@dataclass
class EnumerableTask:
    vocab_size: int
    eos: int
    prompt: tuple[int, ...]
    horizon: int
    reward_fn: Callable[[tuple[int, ...]], float]
    _sequences: list = field(default=None, init=False, repr=False)
    _rewards: np.ndarray = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.prompt = tuple(int(t) for t in self.prompt)
        if not 2 <= self.vocab_size <= MAX_VOCAB:
            raise DomainError(f"vocabulary size must lie in [2, {MAX_VOCAB}], got {self.vocab_size}")
        if not 1 <= self.horizon <= MAX_HORIZON:
            raise DomainError(f"horizon must lie in [1, {MAX_HORIZON}], got {self.horizon}")
        if not 0 <= self.eos < self.vocab_size:
            raise DomainError("eos id outside vocabulary")

    def is_complete(self, response) -> bool:
        return len(response) == self.horizon or (len(response) > 0 and response[-1] == self.eos)

    def check_prefix(self, prefix) -> tuple[int, ...]:
        prefix = tuple(int(t) for t in prefix)
        if any(not 0 <= t < self.vocab_size for t in prefix):
            raise DomainError(f"prefix {prefix} has tokens outside the vocabulary")
        if len(prefix) > self.horizon or any(t == self.eos for t in prefix[:-1]):
            raise DomainError(f"prefix {prefix} extends past a completed response")
        return prefix

    @property
    def sequences(self) -> list[tuple[int, ...]]:
        if self._sequences is None:
            self._sequences = enumerate_sequences(self)
        return self._sequences

    @property
    def rewards(self) -> np.ndarray:
        if self._rewards is None:
            r = np.array([float(self.reward_fn(s)) for s in self.sequences])
            if not np.all(np.isfinite(r)):
                raise DomainError("reward must be finite for every sequence")
            self._rewards = r
        return self._rewards


@dataclass
class SequenceDistribution:
    """Explicit distribution over a task's enumerated responses (same order)."""

    sequences: list[tuple[int, ...]]
    log_probs: np.ndarray
    log_partition: float = 0.0

    @property
    def probabilities(self) -> np.ndarray:
        return np.exp(self.log_probs)

    @property
    def partition_value(self) -> float:
        return float(np.exp(self.log_partition))

    def conditional(self, prefix, vocab_size: int) -> np.ndarray:
        """Next-token distribution implied by the joint at ``prefix``."""
        prefix = tuple(prefix)
        n = len(prefix)
        mass = np.zeros(vocab_size)
        p = self.probabilities
        for seq, pr in zip(self.sequences, p):
            if len(seq) > n and seq[:n] == prefix:
                mass[seq[n]] += pr
        total = mass.sum()
        if total <= 0:
            raise DomainError(f"prefix {prefix} has zero mass")
        return mass / total


def enumerate_sequences(task: EnumerableTask) -> list[tuple[int, ...]]:
    """All complete responses in lexicographic token order."""
    n = count_completions(task.vocab_size, task.horizon)
    if n > MAX_SEQUENCES:
        raise DomainError(f"task has {n} completions, above the cap of {MAX_SEQUENCES}")
    out = []

    def walk(prefix):
        for v in range(task.vocab_size):
            seq = prefix + (v,)
            if task.is_complete(seq):
                out.append(seq)
            else:
                walk(seq)

    walk(())
    return out


class _PrefixCache:
    """Memoised next-token log-probabilities of a policy under a task prompt."""

    def __init__(self, policy, task: EnumerableTask):
        self.policy = policy
        self.task = task
        self._memo: dict[tuple, np.ndarray] = {}

    def __call__(self, prefix: tuple) -> np.ndarray:
        lp = self._memo.get(prefix)
        if lp is None:
            lp = np.asarray(self.policy.next_token_logprobs(self.task.prompt + prefix), dtype=np.float64)
            if lp.shape != (self.task.vocab_size,):
                raise DomainError("policy vocabulary does not match the task")
            self._memo[prefix] = lp
        return lp


def sequence_logprobs(policy, task: EnumerableTask) -> np.ndarray:
    nxt = _PrefixCache(policy, task)
    return np.array([sum(nxt(seq[:t])[seq[t]] for t in range(len(seq))) for seq in task.sequences])


def as_distribution(ref, task: EnumerableTask) -> SequenceDistribution:
    if isinstance(ref, SequenceDistribution):
        return ref
    return SequenceDistribution(task.sequences, sequence_logprobs(ref, task), 0.0)


def gibbs_policy(ref_policy, task: EnumerableTask, temp: float) -> SequenceDistribution:
    """``ref(y) * exp(temp * R(y)) / Z`` over all responses; ``log Z`` is kept."""
    if temp < 0:
        raise DomainError(f"temperature coefficient must be >= 0, got {temp}")
    ref = as_distribution(ref_policy, task)
    if np.any(~np.isfinite(ref.log_probs)):
        bad = int(np.flatnonzero(~np.isfinite(ref.log_probs))[0])
        raise DomainError(f"reference assigns zero mass to sequence {ref.sequences[bad]}")
    logw = ref.log_probs + temp * task.rewards
    log_z = log_sum_exp(logw)
    return SequenceDistribution(task.sequences, logw - log_z, float(log_z))


def _objective(log_pi, ref_log, rewards, eta):
    pi = np.exp(log_pi)
    with np.errstate(invalid="ignore"):
        kl = np.sum(np.where(pi > 0, pi * (log_pi - ref_log), 0.0), axis=-1)
    return pi @ rewards - kl / eta


def kl_rl_objective(pi, ref, task: EnumerableTask, eta: float) -> float:
    """``E_pi[R] - KL(pi || ref) / eta`` by exact summation."""
    if eta <= 0:
        raise DomainError("eta must be > 0")
    pi, ref = as_distribution(pi, task), as_distribution(ref, task)
    p = pi.probabilities
    bad = np.flatnonzero((p > 0) & ~np.isfinite(ref.log_probs))
    if bad.size:
        raise DomainError(f"support violation at sequence {pi.sequences[int(bad[0])]}")
    return float(_objective(pi.log_probs, ref.log_probs, task.rewards, eta))


@dataclass
class CheckResult:
    check: str
    max_error: float
    passed: bool
    detail: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"check": self.check, "max_error": self.max_error, "pass": bool(self.passed)})


def verify_gibbs_optimality(task: EnumerableTask, ref, eta: float, trials: int, rng,
                            tol: float = 1e-9, scales=(0.01, 0.1, 1.0, 3.0)) -> CheckResult:
    """Randomised check that the Gibbs policy maximises the regularised objective.

    Alternatives are ``softmax(log pi* + s * noise)`` with ``s`` cycling through
    ``scales``. Also checks ``J(pi*) = log(Z) / eta``.
    """
    if trials < 1:
        raise DomainError("trials must be >= 1")
    ref = as_distribution(ref, task)
    star = gibbs_policy(ref, task, eta)
    R = task.rewards
    j_star = float(_objective(star.log_probs, ref.log_probs, R, eta))
    identity_err = abs(j_star - star.log_partition / eta)

    s = np.resize(np.asarray(scales, dtype=np.float64), trials)[:, None]
    logits = star.log_probs[None, :] + s * rng.standard_normal((trials, len(R)))
    log_alt = logits - log_sum_exp(logits, axis=-1)[:, None]
    j_alt = _objective(log_alt, ref.log_probs[None, :], R, eta)
    gaps = j_alt - j_star
    worst = int(np.argmax(gaps))
    violation = float(max(gaps[worst], 0.0))
    passed = bool(gaps[worst] <= tol and identity_err <= tol)
    detail = {"j_star": j_star, "log_z_over_eta": star.log_partition / eta,
              "identity_error": identity_err, "max_gap": float(gaps[worst]), "trials": trials}
    if not passed:
        detail["counterexample"] = np.exp(log_alt[worst]).tolist()
    return CheckResult("gibbs_optimality", max(violation, identity_err), passed, detail)


def consistency_check(base, task: EnumerableTask, eta: float, lambda_: float,
                      tol: float = 1e-10) -> CheckResult:
    """Compose a ``beta = eta - lambda_`` Gibbs stage with a ``lambda_`` stage; compare to ``eta``."""
    if not 0 < lambda_ < eta:
        raise DomainError(f"need 0 < lambda_ < eta, got lambda_={lambda_}, eta={eta}")
    ref = as_distribution(base, task)
    stage1 = gibbs_policy(ref, task, eta - lambda_)
    stage2 = gibbs_policy(stage1, task, lambda_)
    glob = gibbs_policy(ref, task, eta)
    tv = total_variation(stage2.probabilities, glob.probabilities)
    return CheckResult("two_stage_consistency", tv, tv <= tol,
                       {"eta": eta, "lambda": lambda_, "beta": eta - lambda_,
                        "stage1": stage1, "stage2": stage2, "global": glob})


class SoftQ:
    """Memoised soft-Q values ``log E_base[exp(beta * R) | prefix]`` for one task."""

    def __init__(self, base, task: EnumerableTask, beta: float):
        self.task = task
        self.beta = float(beta)
        self.next_logprobs = _PrefixCache(base, task)
        self.reward_of = dict(zip(task.sequences, task.rewards))
        self._memo: dict[tuple, float] = {}

    def __call__(self, prefix) -> float:
        prefix = tuple(prefix)
        q = self._memo.get(prefix)
        if q is not None:
            return q
        if self.task.is_complete(prefix):
            q = self.beta * self.reward_of[prefix]
        else:
            lp = self.next_logprobs(prefix)
            q = log_sum_exp(np.array([lp[v] + self(prefix + (v,)) for v in range(self.task.vocab_size)]))
        self._memo[prefix] = q
        return q


def soft_q(base, task: EnumerableTask, prefix, beta: float) -> float:
    return SoftQ(base, task, beta)(task.check_prefix(prefix))


def soft_advantage(base, task: EnumerableTask, prefix, token: int, beta: float) -> float:
    prefix = task.check_prefix(prefix)
    if task.is_complete(prefix):
        raise DomainError("cannot extend a completed response")
    q = SoftQ(base, task, beta)
    return q(prefix + (int(token),)) - q(prefix)


def _token_policy(q: SoftQ, prefix) -> np.ndarray:
    lp = q.next_logprobs(prefix)
    qp = q(prefix)
    logits = np.array([lp[v] + q(prefix + (v,)) - qp for v in range(q.task.vocab_size)])
    return np.exp(logits - log_sum_exp(logits))


def exact_token_policy(base, task: EnumerableTask, prefix, beta: float) -> np.ndarray:
    """``base(.|prefix) * exp(A*)`` normalised, with the exact soft advantage."""
    prefix = task.check_prefix(prefix)
    if task.is_complete(prefix):
        raise DomainError("cannot extend a completed response")
    return _token_policy(SoftQ(base, task, beta), prefix)


def incomplete_prefixes(task: EnumerableTask) -> list[tuple[int, ...]]:
    seen = {}
    for seq in task.sequences:
        for t in range(len(seq)):
            seen.setdefault(seq[:t], None)
    return list(seen)


def token_exactness_check(base, task: EnumerableTask, beta: float, tol: float = 1e-10) -> CheckResult:
    """Compare the soft-Q token policy with the joint Gibbs conditional at every prefix."""
    q = SoftQ(base, task, beta)
    joint = gibbs_policy(base, task, beta)
    worst = 0.0
    for prefix in incomplete_prefixes(task):
        diff = np.max(np.abs(_token_policy(q, prefix) - joint.conditional(prefix, task.vocab_size)))
        worst = max(worst, float(diff))
    return CheckResult("token_level_exactness", worst, worst <= tol, {"beta": beta})


@dataclass
class AdvantageRow:
    position: int
    oracle_token: int
    oracle_advantage: float
    max_off_advantage: float
    oracle_error: float
    off_error: float


def advantage_gap_report(base, task: EnumerableTask, oracle_seq, beta: float):
    """Exact soft advantages along a rewarded path versus the ``beta * indicator`` approximation.

    Returns ``(rows, max_abs_error)``. The off-path error is the largest
    ``|A*|`` over non-oracle tokens, since the approximation sets them to 0.
    """
    response = tuple(getattr(oracle_seq, "response", oracle_seq))
    response = task.check_prefix(response)
    if not task.is_complete(response) or task.reward_fn(response) != 1:
        raise DomainError("oracle sequence must be a complete response with reward 1")
    q = SoftQ(base, task, beta)
    rows = []
    for t, tok in enumerate(response):
        prefix = response[:t]
        qp = q(prefix)
        adv = np.array([q(prefix + (v,)) - qp for v in range(task.vocab_size)])
        off = np.delete(adv, tok)
        rows.append(AdvantageRow(
            position=t, oracle_token=int(tok), oracle_advantage=float(adv[tok]),
            max_off_advantage=float(off.max()) if off.size else float("nan"),
            oracle_error=float(abs(adv[tok] - beta)),
            off_error=float(np.max(np.abs(off))) if off.size else 0.0,
        ))
    max_err = max(max(r.oracle_error, r.off_error) for r in rows)
    return rows, max_err


# -- random instances used by the suite and the tests ---------------------------------


def random_task(rng, vocab_sizes=(2, 3, 4), horizons=(1, 2, 3), binary: bool = False) -> EnumerableTask:
    V = int(rng.choice(vocab_sizes))
    H = int(rng.choice(horizons))
    prompt = (int(rng.integers(V)),)
    seed = int(rng.integers(2**31))

    def reward(seq, _seed=seed, _binary=binary):
        h = np.random.default_rng([_seed, len(seq), *seq])
        return float(h.integers(2)) if _binary else float(h.normal())

    return EnumerableTask(V, V - 1, prompt, H, reward)


def random_base(task: EnumerableTask, rng, scale: float = 1.5) -> TabularPolicy:
    """Tabular policy whose context covers prompt and full response, so any joint is reachable."""
    order = len(task.prompt) + task.horizon
    return TabularPolicy.random(task.vocab_size, order, rng, scale=scale)


def run_suite(seed: int = 0, n_tasks: int = 20, trials: int = 1000) -> list[CheckResult]:
    """The full battery: optimality, composition, token exactness, semigroup, Q/Z identity."""
    rng = np.random.default_rng(seed)
    tasks = [random_task(rng) for _ in range(n_tasks)]
    bases = [random_base(t, rng) for t in tasks]
    results = []

    opt = [verify_gibbs_optimality(t, b, eta=float(rng.uniform(0.5, 5.0)), trials=trials, rng=rng)
           for t, b in zip(tasks, bases)]
    results.append(CheckResult("gibbs_optimality", max(r.max_error for r in opt), all(r.passed for r in opt)))

    for eta, lam in ((2.0, 0.5), (1.0, 0.9), (5.0, 1.0)):
        res = [consistency_check(b, t, eta, lam) for t, b in zip(tasks, bases)]
        results.append(CheckResult(f"two_stage_consistency[eta={eta},lambda={lam}]",
                                   max(r.max_error for r in res), all(r.passed for r in res)))

    for beta in (0.0, 1.0, 5.0):
        res = [token_exactness_check(b, t, beta) for t, b in zip(tasks, bases)]
        results.append(CheckResult(f"token_level_exactness[beta={beta}]",
                                   max(r.max_error for r in res), all(r.passed for r in res)))

    semi, qz = 0.0, 0.0
    for t, b in zip(tasks, bases):
        a, c = float(rng.uniform(0, 3)), float(rng.uniform(0, 3))
        two = gibbs_policy(gibbs_policy(b, t, a), t, c)
        one = gibbs_policy(b, t, a + c)
        semi = max(semi, total_variation(two.probabilities, one.probabilities))
        qz = max(qz, abs(soft_q(b, t, (), a) - gibbs_policy(b, t, a).log_partition))
    results.append(CheckResult("gibbs_semigroup", semi, semi <= 1e-12))
    results.append(CheckResult("soft_q_equals_log_partition", qz, qz <= 1e-10))
    return results


def sequence_tv(a: SequenceDistribution, b: SequenceDistribution) -> float:
    return total_variation(a.probabilities, b.probabilities)


def restricted_to_argmax(ref: SequenceDistribution, rewards: Sequence[float]) -> np.ndarray:
    """Reference mass restricted to the reward-maximising responses, renormalised."""
    r = np.asarray(rewards)
    keep = r == r.max()
    p = np.where(keep, ref.probabilities, 0.0)
    return p / p.sum()
