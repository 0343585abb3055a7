"""Losses, the decoupled-weight-decay optimizer, and the frozen-backbone
training loop with its freeze ledger."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .backbone import Backbone, tokenize
from .prompts import PromptState, trainable_parameters
from .tensor import ShapeError, Tensor, bce_with_logits, power, reduce_sum, sigmoid, zero_grads


class FreezeViolationError(RuntimeError):
    """A frozen backbone parameter changed during training."""


@dataclass
class LossConfig:
    lambda_dice: float = 1.0
    lambda_ce: float = 0.2
    smooth: float = 1.0


@dataclass
class TrainRunConfig:
    steps: int = 200
    micro_batch: int = 4
    grad_accum: int = 8          # effective batch = micro_batch * grad_accum
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 0
    eval_every: int = 50
    threshold: float = 0.5
    augment: bool = False
    loss: LossConfig = field(default_factory=LossConfig)

    @property
    def effective_batch(self) -> int:
        return self.micro_batch * self.grad_accum


@dataclass
class TrainedArtifacts:
    metrics: list[dict]
    checkpoint_arrays: dict[str, np.ndarray]
    checkpoint_path: str | None = None
    metrics_path: str | None = None
    final_train_dice: float = float("nan")
    final_val_dice: float = float("nan")


def _check_mask(logits: Tensor, mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != logits.shape:
        raise ShapeError(f"mask shape {mask.shape} does not match logits {logits.shape}")
    return mask


def dice_loss(logits: Tensor, mask: np.ndarray, smooth: float = 1.0) -> Tensor:
    """Smoothed soft dice on sigmoid probabilities: 1 - (2*sum(p*g)+s)/(sum(p^2)+sum(g^2)+s)."""
    mask = _check_mask(logits, mask)
    p = sigmoid(logits)
    num = reduce_sum(p * mask) * 2.0 + smooth
    den = reduce_sum(p * p) + float((mask * mask).sum()) + smooth
    return 1.0 - num * power(den, -1.0)


def bce_loss(logits: Tensor, mask: np.ndarray) -> Tensor:
    """Pixel-mean binary cross entropy in the numerically stable logit form."""
    mask = _check_mask(logits, mask)
    return bce_with_logits(logits, mask)


def combined_loss(logits: Tensor, mask: np.ndarray, cfg: LossConfig) -> Tensor:
    return dice_loss(logits, mask, cfg.smooth) * cfg.lambda_dice + bce_loss(
        logits, mask
    ) * cfg.lambda_ce


def dice_score(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """2|P∩G| / (|P|+|G|); 1.0 when both masks are empty."""
    pred = np.asarray(pred_mask, dtype=bool)
    gt = np.asarray(gt_mask, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    denom = pred.sum() + gt.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(pred, gt).sum() / denom)


class AdamW:
    """Adam with bias correction and decoupled weight decay applied to the
    parameters directly, not folded into the gradient."""

    def __init__(self, named_params, learning_rate: float, weight_decay: float = 0.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.named_params = list(named_params)
        self.lr = learning_rate
        self.wd = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(t.data) for name, t in self.named_params}
        self.v = {name: np.zeros_like(t.data) for name, t in self.named_params}

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in self.named_params:
            if name not in self.m:
                raise KeyError(f"no moment buffers for parameter {name}")
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            mhat = m / bc1
            vhat = v / bc2
            p.data = p.data - self.lr * (mhat / (np.sqrt(vhat) + self.eps) + self.wd * p.data)

    def zero_grad(self) -> None:
        zero_grads(t for _, t in self.named_params)


def evaluate(model: Backbone, state: PromptState | None, samples,
             threshold: float = 0.5) -> float:
    """Mean dice over samples at the given probability threshold."""
    if not samples:
        return float("nan")
    scores = []
    for s in samples:
        logits = model.forward(s.image, tokenize(s.phrase, model.cfg.max_text_len), state)
        prob = 1.0 / (1.0 + np.exp(-logits.data))
        scores.append(dice_score(prob > threshold, s.mask))
    return float(np.mean(scores))


def train(model: Backbone, state: PromptState, dataset: dict,
          run_cfg: TrainRunConfig, out_dir=None, on_step=None) -> TrainedArtifacts:
    """Run the deterministic prompt-tuning loop.

    Only tensors reported by ``trainable_parameters`` are updated; the frozen
    backbone is checksummed before and after, and any drift is fatal.
    """
    from .dataio import augment as augment_sample

    params = trainable_parameters(state, model)
    opt = AdamW(params, run_cfg.learning_rate, run_cfg.weight_decay)
    pre_checksum = model.frozen_checksum()
    rng = np.random.default_rng(run_cfg.seed)

    train_samples = list(dataset["train"])
    val_samples = list(dataset.get("val", []))
    token_cache: dict[str, np.ndarray] = {}

    def tok(phrase: str) -> np.ndarray:
        if phrase not in token_cache:
            token_cache[phrase] = tokenize(phrase, model.cfg.max_text_len)
        return token_cache[phrase]

    order: list[int] = []

    def next_sample():
        nonlocal order
        if not order:
            order = list(rng.permutation(len(train_samples)))
        return train_samples[order.pop()]

    metrics: list[dict] = []
    loss_cfg = run_cfg.loss
    for step in range(1, run_cfg.steps + 1):
        opt.zero_grad()
        step_loss = 0.0
        for _ in range(run_cfg.grad_accum):
            batch = [next_sample() for _ in range(run_cfg.micro_batch)]
            losses = []
            for s in batch:
                if run_cfg.augment:
                    s = augment_sample(s, rng)
                logits = model.forward(s.image, tok(s.phrase), state, rng=rng)
                losses.append(combined_loss(logits, s.mask, loss_cfg))
            micro = losses[0]
            for extra in losses[1:]:
                micro = micro + extra
            micro = micro * (1.0 / (len(losses) * run_cfg.grad_accum))
            micro.backward()
            step_loss += micro.item()
        opt.step()
        record = None
        if step % run_cfg.eval_every == 0 or step == run_cfg.steps:
            val_dice = evaluate(model, state, val_samples, run_cfg.threshold)
            record = {"step": step, "loss": step_loss, "dice": val_dice,
                      "lr": run_cfg.learning_rate}
            metrics.append(record)
        else:
            metrics.append({"step": step, "loss": step_loss, "dice": None,
                            "lr": run_cfg.learning_rate})
        if on_step is not None:
            on_step(step, model, state)

    post_checksum = model.frozen_checksum()
    if post_checksum != pre_checksum:
        raise FreezeViolationError(
            "frozen backbone parameters changed during training "
            f"({pre_checksum[:12]} -> {post_checksum[:12]})"
        )

    arrays = {name: t.data.copy() for name, t in params}
    artifacts = TrainedArtifacts(
        metrics=metrics,
        checkpoint_arrays=arrays,
        final_train_dice=evaluate(model, state, train_samples, run_cfg.threshold),
        final_val_dice=evaluate(model, state, val_samples, run_cfg.threshold),
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ckpt = out / "prompts.ckpt"
        checkpoint.save_arrays(ckpt, arrays)
        mpath = out / "metrics.jsonl"
        with open(mpath, "w") as f:
            for rec in metrics:
                f.write(json.dumps(rec) + "\n")
        artifacts.checkpoint_path = str(ckpt)
        artifacts.metrics_path = str(mpath)
    return artifacts
