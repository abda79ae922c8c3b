"""scikit-learn style wrappers around the SFT-stage trainer and GRPO.

``X`` is a list of sequences (or prompts for RL); the frozen base or the
starting policy is passed to ``fit`` because it is data, not a hyperparameter.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import tasks
from ._validation import check_policy, check_prompts, check_random_state, check_sequences
from .gift import pack_batch
from .model.base import Vocabulary
from .model.sampling import greedy_batch
from .rl import RlConfig, train_rl
from .training import SFTConfig, train_sft, validation_nll


class _PolicyEstimator(BaseEstimator):
    vocab: Vocabulary

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted yet")

    def predict(self, X, max_len: int = 16):
        """Greedy responses for each prompt in ``X``."""
        self._check_fitted()
        prompts = check_prompts(X, self.vocab)
        return greedy_batch(self.model_, [(self.vocab.bos, *p) for p in prompts], max_len, self.vocab.eos)

    def score(self, X, y=None) -> float:
        """Mean per-token log-likelihood of the responses in ``X`` (higher is better)."""
        self._check_fitted()
        packed = pack_batch(check_sequences(X, self.vocab), self.vocab, mask_prompt=True)
        return -validation_nll(self.model_, packed)


class SoftTargetFineTuner(_PolicyEstimator):
    """Fine-tune a copy of ``init`` (default: the base) with one SFT-stage method.

    ``method`` is one of ``sft``, ``gift``, ``entropy``, ``label-smoothing`` or ``kd``.
    """

    def __init__(self, method="gift", beta=5.0, eps=0.01, lambda_h=0.01, alpha=0.1, epochs=8, lr=1e-3,
                 batch_size=64, weight_decay=0.01, normalize="token", select_epoch="min_val",
                 vocab=tasks.VOCAB, random_state=None):
        self.method = method
        self.beta = beta
        self.eps = eps
        self.lambda_h = lambda_h
        self.alpha = alpha
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.normalize = normalize
        self.select_epoch = select_epoch
        self.vocab = vocab
        self.random_state = random_state

    def _config(self) -> SFTConfig:
        return SFTConfig(method=self.method, beta=self.beta, eps=self.eps, lambda_h=self.lambda_h,
                         alpha=self.alpha, epochs=self.epochs, lr=self.lr, batch_size=self.batch_size,
                         weight_decay=self.weight_decay, normalize=self.normalize,
                         select_epoch=self.select_epoch)

    def fit(self, X, y=None, *, base, init=None, X_val=None):
        cfg = self._config()
        seqs = check_sequences(X, self.vocab)
        val = check_sequences(X_val, self.vocab) if X_val is not None else None
        base = check_policy(base, self.vocab, "base")
        start = check_policy(init, self.vocab, "init") if init is not None else base
        model = start.copy()
        params, self.history_ = train_sft(model, seqs, self.vocab, cfg, check_random_state(self.random_state),
                                          base=base, val_seqs=val)
        model.params[:] = params
        self.model_ = model
        return self


class GRPOFineTuner(_PolicyEstimator):
    """GRPO from ``init`` on the prompts in ``X``, scored by ``task``'s verifier."""

    def __init__(self, task=None, group_size=8, clip_ratio=0.2, learning_rate=1e-4, rollout_temperature=1.0,
                 kl_coeff=0.05, epochs=1, batch_prompts=16, max_steps=None, vocab=tasks.VOCAB,
                 random_state=None):
        self.task = task
        self.group_size = group_size
        self.clip_ratio = clip_ratio
        self.learning_rate = learning_rate
        self.rollout_temperature = rollout_temperature
        self.kl_coeff = kl_coeff
        self.epochs = epochs
        self.batch_prompts = batch_prompts
        self.max_steps = max_steps
        self.vocab = vocab
        self.random_state = random_state

    def fit(self, X, y=None, *, init):
        cfg = RlConfig(group_size=self.group_size, clip_ratio=self.clip_ratio, learning_rate=self.learning_rate,
                       rollout_temperature=self.rollout_temperature, kl_coeff=self.kl_coeff, epochs=self.epochs,
                       batch_prompts=self.batch_prompts, max_steps=self.max_steps)
        task = self.task if self.task is not None else tasks.TaskSpec()
        prompts = check_prompts(X, self.vocab)
        if not isinstance(init, (str, bytes)) and not hasattr(init, "__fspath__"):
            check_policy(init, self.vocab, "init")
        self.model_, self.metrics_ = train_rl(init, prompts, task, cfg, check_random_state(self.random_state),
                                              self.vocab)
        return self

    @property
    def mean_reward_curve_(self) -> np.ndarray:
        self._check_fitted()
        return np.array([m["mean_reward"] for m in self.metrics_])
