"""GRPO-style policy optimisation with a token-level KL anchor to a reference policy."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tasks
from .exceptions import DomainError
from .gift import PackedBatch, pack_batch
from .model.base import TokenSequence, Vocabulary
from .model.optim import OptimizerState, apply_update
from .model.sampling import sample_batch
from .numerics import log_softmax


@dataclass
class RlConfig:
    group_size: int = 8
    clip_ratio: float = 0.2
    learning_rate: float = 1e-4
    # value used at 7B scale; kept for provenance, not read by the trainer
    paper_learning_rate: float = 1e-6
    rollout_temperature: float = 1.0
    kl_coeff: float = 0.05
    epochs: int = 1
    batch_prompts: int = 16
    max_steps: int | None = None
    weight_decay: float = 0.0
    adam_betas: tuple[float, float] = (0.9, 0.95)
    max_new_tokens: int | None = None

    def __post_init__(self):
        if self.group_size < 2:
            raise DomainError("group_size must be >= 2")
        if not 0 < self.clip_ratio < 1:
            raise DomainError("clip_ratio must lie in (0, 1)")
        if self.kl_coeff < 0:
            raise DomainError("kl_coeff must be >= 0")
        if self.rollout_temperature <= 0:
            raise DomainError("rollout_temperature must be > 0")
        self.adam_betas = tuple(self.adam_betas)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d


@dataclass
class RolloutGroup:
    prompt: tuple[int, ...]
    responses: list[tuple[int, ...]]
    rewards: np.ndarray
    old_logprobs: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        if len(self.responses) != self.rewards.size:
            raise DomainError("one reward per response required")


class UpdateRejected(DomainError):
    def __init__(self, message, diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


def group_advantages(rewards) -> np.ndarray:
    """Mean-baseline advantages, no std normalisation."""
    r = np.asarray(rewards, dtype=np.float64)
    return r - r.mean()


def _pack_groups(groups, vocab: Vocabulary):
    seqs = [TokenSequence(g.prompt, resp) for g in groups for resp in g.responses]
    packed = pack_batch(seqs, vocab, mask_prompt=True)
    adv = np.concatenate([group_advantages(g.rewards) for g in groups])
    return packed, adv


def response_logprobs(model, packed: PackedBatch, temperature: float = 1.0) -> np.ndarray:
    """Log-probability of each target token under ``softmax(logits / temperature)``."""
    lp = log_softmax(model.forward_logits(packed.inputs) / temperature)
    return np.take_along_axis(lp, packed.targets[..., None], axis=-1)[..., 0]


def _old_logprob_block(groups, packed):
    old = np.zeros(packed.targets.shape)
    rows = [lp for g in groups for lp in g.old_logprobs]
    if len(rows) != packed.n_sequences:
        raise DomainError("old log-probabilities missing for some responses")
    for b, lp in enumerate(rows):
        pos = np.flatnonzero(packed.response_mask[b])
        if lp.size != pos.size:
            raise DomainError("old log-probabilities do not align with response tokens")
        old[b, pos] = lp
    return old


def grpo_update(model, groups, cfg: RlConfig, ref, vocab: Vocabulary = tasks.VOCAB):
    """Clipped surrogate plus ``kl_coeff * KL(model || ref)`` per response token.

    Returns ``(loss, grads, diagnostics)``. All token terms share one
    token-mean weight across the whole batch.
    """
    packed, adv_seq = _pack_groups(groups, vocab)
    mask = packed.response_mask
    n_tok = mask.sum()
    if n_tok == 0:
        raise DomainError("no response tokens in batch")
    w = mask / n_tok
    T = cfg.rollout_temperature
    eps = cfg.clip_ratio

    logits, cache = model.forward(packed.inputs)
    lp_t = log_softmax(logits / T)
    p_t = np.exp(lp_t)
    new = np.take_along_axis(lp_t, packed.targets[..., None], axis=-1)[..., 0]
    old = _old_logprob_block(groups, packed)
    with np.errstate(over="ignore"):
        ratio = np.exp(np.where(mask > 0, new - old, 0.0))
    A = adv_seq[:, None] * mask

    lp = log_softmax(logits)
    p = np.exp(lp)
    ref_lp = log_softmax(ref.forward_logits(packed.inputs))
    kl_tok = np.sum(p * (lp - ref_lp), axis=-1)

    on = mask > 0
    diagnostics = {
        "mean_ratio": float(ratio[on].mean()),
        "clip_frac": float(np.mean((ratio[on] < 1 - eps) | (ratio[on] > 1 + eps))),
        "kl_to_ref": float(kl_tok[on].mean()),
        "entropy": float(-np.sum(p * lp, axis=-1)[on].mean()),
    }
    if not np.all(np.isfinite(ratio[on])):
        diagnostics["rejected"] = True
        raise UpdateRejected("non-finite importance ratios", diagnostics)

    unclipped = ratio * A
    clipped = np.clip(ratio, 1 - eps, 1 + eps) * A
    surrogate = np.minimum(unclipped, clipped)
    active = (unclipped <= clipped) & on
    loss = -float(np.sum(w * surrogate)) + cfg.kl_coeff * float(np.sum(w * kl_tok))

    onehot = np.eye(model.vocab_size)[packed.targets]
    coef = np.where(active, -w * ratio * A, 0.0)
    dlogits = coef[..., None] * (onehot - p_t) / T
    if cfg.kl_coeff:
        dlogits += cfg.kl_coeff * w[..., None] * p * ((lp - ref_lp) - kl_tok[..., None])
    grads = model.backward(cache, dlogits)
    diagnostics["surrogate"] = -float(np.sum(w * surrogate))
    return loss, grads, diagnostics


def collect_rollouts(model, instances, spec: tasks.TaskSpec, cfg: RlConfig, rng,
                     vocab: Vocabulary = tasks.VOCAB) -> list[RolloutGroup]:
    """Sample ``group_size`` responses per prompt and score them with the task verifier."""
    max_new = cfg.max_new_tokens or spec.max_response_len
    prompts = [inst.sequence.prompt if hasattr(inst, "sequence") else tuple(inst) for inst in instances]
    contexts = [(vocab.bos, *p) for p in prompts for _ in range(cfg.group_size)]
    responses = sample_batch(model, contexts, cfg.rollout_temperature, max_new, rng, eos=vocab.eos)
    groups = []
    for i, prompt in enumerate(prompts):
        rs = responses[i * cfg.group_size : (i + 1) * cfg.group_size]
        rewards = [tasks.reward(spec, prompt, r) for r in rs]
        groups.append(RolloutGroup(prompt, rs, rewards))
    # behaviour log-probs from a teacher-forced pass, so the first ratio is exactly 1
    packed, _ = _pack_groups(groups, vocab)
    old = response_logprobs(model, packed, cfg.rollout_temperature)
    b = 0
    for g in groups:
        for _ in g.responses:
            g.old_logprobs.append(old[b, packed.response_mask[b] > 0].copy())
            b += 1
    return groups


def train_rl(init, instances, spec: tasks.TaskSpec, cfg: RlConfig, rng,
             vocab: Vocabulary = tasks.VOCAB, on_step=None):
    """Run GRPO from ``init`` on the RL prompts and return ``(model, metrics)``.

    ``init`` is a model or a checkpoint directory. The reference policy for
    the KL term is a frozen copy of the initial model. ``on_step`` receives
    each metrics dict as it is produced.
    """
    if not hasattr(init, "params"):
        from .model.checkpoint import load_checkpoint

        init, ck_vocab, _ = load_checkpoint(init)
        if ck_vocab is not None and ck_vocab != vocab:
            raise DomainError("checkpoint vocabulary does not match the task vocabulary")
    if init.vocab_size != vocab.size:
        raise DomainError(
            f"checkpoint vocabulary size {init.vocab_size} != task vocabulary size {vocab.size}")
    instances = list(instances)
    if not instances:
        raise DomainError("no RL prompts")
    model = init.copy()
    ref = init.copy()
    opt = OptimizerState(model.n_params, lr=cfg.learning_rate, betas=cfg.adam_betas,
                         weight_decay=cfg.weight_decay)
    per_epoch = int(np.ceil(len(instances) / cfg.batch_prompts))
    steps = cfg.max_steps if cfg.max_steps is not None else cfg.epochs * per_epoch
    metrics = []
    order = np.array([], dtype=np.int64)
    for step in range(steps):
        if order.size < cfg.batch_prompts:
            order = np.concatenate([order, rng.permutation(len(instances))])
        idx, order = order[: cfg.batch_prompts], order[cfg.batch_prompts :]
        groups = collect_rollouts(model, [instances[i] for i in idx], spec, cfg, rng, vocab)
        _, grads, diag = grpo_update(model, groups, cfg, ref, vocab)
        apply_update(model, grads, opt)
        row = {
            "step": step,
            "mean_reward": float(np.mean([g.rewards.mean() for g in groups])),
            "kl_to_ref": diag["kl_to_ref"],
            "entropy": diag["entropy"],
            "clip_frac": diag["clip_frac"],
        }
        metrics.append(row)
        if on_step is not None:
            on_step(row)
    return model, metrics
