"""Minibatch loops for base pre-training and the SFT-stage objectives."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import gift
from .exceptions import DomainError
from .model.base import Vocabulary
from .model.optim import OptimizerState, apply_update
from .numerics import log_softmax

SFT_METHODS = ("sft", "gift", "entropy", "label-smoothing", "kd", "none")
METHOD_FIELDS = {
    "gift": ("beta",),
    "label-smoothing": ("eps",),
    "entropy": ("lambda_h",),
    "kd": ("alpha",),
    "sft": (),
    "none": (),
}


@dataclass
class SFTConfig:
    method: str = "gift"
    beta: float = 5.0
    eps: float = 0.01
    lambda_h: float = 0.01
    alpha: float = 0.1
    epochs: int = 8
    lr: float = 1e-3
    # value used at 7B scale; kept for provenance, not read by the trainer
    paper_lr: float = 1e-5
    batch_size: int = 64
    weight_decay: float = 0.01
    adam_betas: tuple[float, float] = (0.9, 0.95)
    mask_prompt: bool = True
    normalize: str = "token"
    select_epoch: str | int = "min_val"

    def __post_init__(self):
        if self.method not in SFT_METHODS:
            raise DomainError(f"unknown SFT method {self.method!r}; choose from {SFT_METHODS}")
        if self.normalize not in gift.NORMALIZATIONS:
            raise DomainError(f"normalize must be one of {gift.NORMALIZATIONS}")
        if not (self.select_epoch in ("min_val", "last") or
                (isinstance(self.select_epoch, int) and self.select_epoch >= 1)):
            raise DomainError("select_epoch must be 'min_val', 'last' or a positive epoch number")
        self.adam_betas = tuple(self.adam_betas)

    def to_dict(self) -> dict:
        """Serialised form carrying only the selected method's own hyperparameter."""
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        for m, fields in METHOD_FIELDS.items():
            if m != self.method:
                for f in fields:
                    d.pop(f, None)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SFTConfig":
        method = d.get("method", cls.method)
        if method not in METHOD_FIELDS:
            raise DomainError(f"unknown SFT method {method!r}")
        foreign = [f for m, fs in METHOD_FIELDS.items() if m != method for f in fs if f in d]
        if foreign:
            raise DomainError(f"fields {foreign} do not apply to method {method!r}")
        return cls(**d)


@dataclass
class PretrainConfig:
    corpus_size: int = 20000
    steps: int = 1500
    lr: float = 3e-3
    batch_size: int = 64
    noise_permille: int = 500
    weight_decay: float = 0.0


def _minibatches(n, batch_size, rng):
    perm = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield perm[s : s + batch_size]


def pretrain(model, corpus, vocab: Vocabulary, cfg: PretrainConfig, rng, on_step=None):
    """Next-token training on whole sequences (prompt included)."""
    packed = gift.pack_batch(corpus, vocab, mask_prompt=False)
    onehot_V = model.vocab_size
    opt = OptimizerState(model.n_params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    order = np.array([], dtype=np.int64)
    history = []
    for step in range(cfg.steps):
        if order.size < cfg.batch_size:
            order = np.concatenate([order, rng.permutation(packed.n_sequences)])
        idx, order = order[: cfg.batch_size], order[cfg.batch_size :]
        sub = packed.take(idx)
        loss, grads = gift.soft_target_loss(model, sub, np.eye(onehot_V)[sub.targets])
        apply_update(model, grads, opt)
        row = {"step": step, "loss": loss}
        history.append(row)
        if on_step is not None:
            on_step(row)
    return model, history


class _MethodLoss:
    """Per-method loss over a packed dataset with constant pieces cached up front."""

    def __init__(self, cfg: SFTConfig, packed: gift.PackedBatch, base, vocab_size: int):
        self.cfg = cfg
        self.packed = packed
        self.base_lp = None
        if cfg.method in ("gift", "kd"):
            if base is None:
                raise DomainError(f"method {cfg.method!r} needs a base model")
            if base.vocab_size != vocab_size:
                raise DomainError("model and base must share a vocabulary")
            self.base_lp = gift.base_logprobs(base, packed)
        self.gift_cfg = gift.GiftConfig(cfg.beta, cfg.mask_prompt, cfg.normalize) if cfg.method == "gift" else None

    def __call__(self, model, idx):
        cfg = self.cfg
        sub = self.packed.take(idx)
        T = sub.inputs.shape[1]
        cached = None if self.base_lp is None else self.base_lp[idx, :T]
        if cfg.method == "sft":
            return gift.sft_loss(model, sub, normalize=cfg.normalize)
        if cfg.method == "gift":
            return gift.gift_loss(model, None, sub, self.gift_cfg, cached_base_logprobs=cached)
        if cfg.method == "entropy":
            return gift.entropy_reg_loss(model, sub, cfg.lambda_h, normalize=cfg.normalize)
        if cfg.method == "label-smoothing":
            return gift.label_smoothing_loss(model, sub, cfg.eps, normalize=cfg.normalize)
        if cfg.method == "kd":
            return gift.kd_loss(model, None, sub, cfg.alpha, normalize=cfg.normalize,
                                cached_base_logprobs=cached)
        raise DomainError(f"method {cfg.method!r} has no loss")


def validation_nll(model, packed: gift.PackedBatch, chunk: int = 256) -> float:
    """Token-mean negative log-likelihood of the demonstrations."""
    total, count = 0.0, 0.0
    for s in range(0, packed.n_sequences, chunk):
        sub = packed.take(np.arange(s, min(s + chunk, packed.n_sequences)))
        lp = log_softmax(model.forward_logits(sub.inputs))
        tok = np.take_along_axis(lp, sub.targets[..., None], axis=-1)[..., 0]
        total += float(-(tok * sub.mask).sum())
        count += float(sub.mask.sum())
    return total / count


def train_sft(model, train_seqs, vocab: Vocabulary, cfg: SFTConfig, rng, base=None,
              val_seqs=None, on_epoch=None):
    """Fine-tune ``model`` in place with the configured method.

    Returns ``(selected_params, history)``; ``history`` has one row per epoch
    with mean train loss and validation NLL. ``selected_params`` follows
    ``cfg.select_epoch``.
    """
    if cfg.method == "none":
        return model.params.copy(), []
    packed = gift.pack_batch(train_seqs, vocab, cfg.mask_prompt)
    loss_fn = _MethodLoss(cfg, packed, base, model.vocab_size)
    val_packed = gift.pack_batch(val_seqs, vocab, True) if val_seqs else None
    opt = OptimizerState(model.n_params, lr=cfg.lr, betas=cfg.adam_betas, weight_decay=cfg.weight_decay)
    history, snapshots = [], []
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for idx in _minibatches(packed.n_sequences, cfg.batch_size, rng):
            loss, grads = loss_fn(model, idx)
            apply_update(model, grads, opt)
            losses.append(loss)
        row = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if val_packed is not None:
            row["val_nll"] = validation_nll(model, val_packed)
        history.append(row)
        snapshots.append(model.params.copy())
        if on_epoch is not None:
            on_epoch(row)
    if not snapshots:
        return model.params.copy(), history
    if cfg.select_epoch == "last" or val_packed is None and cfg.select_epoch == "min_val":
        pick = len(snapshots)
    elif cfg.select_epoch == "min_val":
        pick = 1 + int(np.argmin([h["val_nll"] for h in history]))
    else:
        pick = min(int(cfg.select_epoch), len(snapshots))
    for h in history:
        h["selected"] = h["epoch"] == pick
    return snapshots[pick - 1], history
