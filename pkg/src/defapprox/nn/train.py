"""Minibatch SGD training and accuracy/confidence evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from ..errors import ContractError, UnsupportedPolicyError
from .model import cross_entropy_grad, backprop, confidences, fast_forward_inputs, forward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SGDConfig:
    lr: float = 0.05
    batch: int = 64
    epochs: int = 20
    momentum: float = 0.9
    seed: int = 0


def train_sgd(model, images, labels, cfg=SGDConfig(), callback=None):
    """Train with minibatch SGD (+ momentum) on cross-entropy; returns a new model.

    Runs in float32 on the exact BLAS path. Shuffling uses a generator
    seeded by ``cfg.seed``, so a fixed seed gives a fixed result.
    """
    if not model.is_all_exact():
        raise UnsupportedPolicyError("training requires an all-exact policy")
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels)
    if len(images) == 0:
        raise ContractError("cannot train on an empty dataset")
    if len(images) != len(labels):
        raise ContractError("image and label counts differ")
    weights = {k: v.astype(np.float32).copy() for k, v in model.weights.items()}
    trained = replace(model, weights=weights)
    if cfg.lr == 0:
        return trained
    velocity = {k: np.zeros_like(v) for k, v in weights.items()}
    rng = np.random.default_rng(cfg.seed)
    lr = np.float32(cfg.lr)
    mom = np.float32(cfg.momentum)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(images))
        total = 0.0
        for start in range(0, len(order), cfg.batch):
            idx = order[start : start + cfg.batch]
            inputs, logits = fast_forward_inputs(trained, images[idx], dtype=np.float32)
            dlogits = (cross_entropy_grad(logits, labels[idx]) / len(idx)).astype(np.float32)
            _, grads = backprop(trained, inputs, dlogits, need_params=True, dtype=np.float32)
            for key, g in grads.items():
                v = velocity[key]
                v *= mom
                v += g.astype(np.float32)
                weights[key] -= lr * v
            lp = logits.astype(np.float64)
            lp -= lp.max(axis=1, keepdims=True)
            total += float((np.log(np.exp(lp).sum(axis=1)) - lp[np.arange(len(idx)), labels[idx]]).sum())
        log.info("epoch %d loss %.4f", epoch + 1, total / len(images))
        if callback is not None:
            callback(epoch, total / len(images))
    return trained


@dataclass
class EvalResult:
    accuracy: float
    mean_confidence: float
    per_class: list  # (class, count, correct, accuracy)
    predictions: np.ndarray
    confidences: np.ndarray
    probs: np.ndarray


def evaluate(model, images, labels, workers=1):
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels)
    if len(images) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    res = forward(model, images, workers=workers)
    preds = np.argmax(res.logits, axis=1)
    conf = confidences(res.probs, labels)
    per_class = []
    for c in range(model.num_classes):
        mask = labels == c
        n = int(mask.sum())
        correct = int((preds[mask] == c).sum())
        per_class.append((c, n, correct, correct / n if n else float("nan")))
    return EvalResult(
        accuracy=float(np.mean(preds == labels)),
        mean_confidence=float(conf.mean()),
        per_class=per_class,
        predictions=preds,
        confidences=conf,
        probs=res.probs,
    )
