"""FGSM/PGD adversarial examples and the transfer, black-box and white-box protocols.

Every image owns an RNG substream seeded by ``(cfg.seed, image_index)``, so
batched, chunked and parallel runs produce identical examples.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, UnsupportedPolicyError
from .nn.model import (
    ModelSpec,
    backprop,
    bpda_gradient,
    cross_entropy,
    cross_entropy_grad,
    fast_forward_inputs,
    finite_difference_gradient,
    forward,
    init_weights,
    input_gradient,
    predict,
)
from .nn.train import SGDConfig, evaluate, train_sgd

log = logging.getLogger(__name__)


class AttackKind(enum.Enum):
    FGSM = "fgsm"
    PGD = "pgd"


class GradKind(enum.Enum):
    EXACT_BACKWARD = "exact"
    BPDA = "bpda"
    FINITE_DIFF = "fd"


@dataclass(frozen=True)
class GradMode:
    kind: GradKind = GradKind.EXACT_BACKWARD
    h: float = 1e-3

    @classmethod
    def parse(cls, text):
        """``exact``, ``bpda``, ``fd`` or ``fd:<h>``."""
        name, _, h = text.partition(":")
        kind = GradKind(name)
        if h and kind is not GradKind.FINITE_DIFF:
            raise ContractError(f"grad mode {name!r} takes no step")
        return cls(kind, float(h)) if h else cls(kind)

    def __str__(self):
        if self.kind is GradKind.FINITE_DIFF:
            return f"fd:{self.h!r}"
        return self.kind.value


EXACT_BACKWARD = GradMode(GradKind.EXACT_BACKWARD)
BPDA = GradMode(GradKind.BPDA)


def finite_diff(h=1e-3):
    return GradMode(GradKind.FINITE_DIFF, h)


@dataclass(frozen=True)
class AttackConfig:
    kind: AttackKind = AttackKind.PGD
    epsilon: float = 0.3
    step_size: float | None = None  # None: 2.5 * epsilon / iterations
    iterations: int = 40
    random_start: bool = True
    grad_mode: GradMode = EXACT_BACKWARD
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ContractError(f"epsilon {self.epsilon} outside [0, 1]")
        if self.iterations < 1:
            raise ContractError("iterations must be at least 1")
        # a zero step is only meaningful for the degenerate zero budget
        if self.kind is AttackKind.PGD and self.step <= 0 and self.epsilon > 0:
            raise ContractError("PGD needs a positive step size")

    @property
    def step(self):
        if self.step_size is not None:
            return self.step_size
        return 2.5 * self.epsilon / self.iterations

    @property
    def label(self):
        return self.kind.value

    def describe(self):
        return {
            "kind": self.kind.value,
            "epsilon": self.epsilon,
            "step_size": self.step,
            "iterations": self.iterations if self.kind is AttackKind.PGD else 1,
            "random_start": self.random_start if self.kind is AttackKind.PGD else False,
            "grad_mode": str(self.grad_mode),
            "seed": self.seed,
        }


@dataclass
class AdvExample:
    original: np.ndarray
    perturbed: np.ndarray
    true_label: int
    l2: float
    linf: float


def _adv_example(x, adv, label):
    diff = adv.astype(np.float64) - x.astype(np.float64)
    return AdvExample(x, adv, int(label), float(np.sqrt((diff**2).sum())), float(np.abs(diff).max(initial=0.0)))


# ---------------------------------------------------------------------------
# gradients


def _check_mode(model, mode):
    if mode.kind is GradKind.EXACT_BACKWARD and not model.is_all_exact():
        raise UnsupportedPolicyError("ExactBackward needs an all-exact policy; use BPDA or FiniteDiff")


def gradient_for(model, x, label, grad_mode=EXACT_BACKWARD):
    """Input gradient of the cross-entropy loss under the chosen mode."""
    _check_mode(model, grad_mode)
    if grad_mode.kind is GradKind.EXACT_BACKWARD:
        return input_gradient(model, x, label)
    if grad_mode.kind is GradKind.BPDA:
        return bpda_gradient(model, x, label)
    return finite_difference_gradient(model, x, label, h=grad_mode.h)


def _loss_and_grad(model, x, labels, mode):
    """Per-image loss at ``x`` (as seen by the mode's forward) and the gradient."""
    if mode.kind is GradKind.EXACT_BACKWARD:
        inputs, logits = fast_forward_inputs(model, x)
        dx, _ = backprop(model, inputs, cross_entropy_grad(logits, labels))
        return cross_entropy(logits, labels), dx
    if mode.kind is GradKind.BPDA:
        res = forward(model, x, capture=True)
        inputs = [res.activations[f"{i}.{type(layer).__name__}"] for i, layer in enumerate(model.layers)]
        logits = res.logits.astype(np.float64)
        dx, _ = backprop(model, inputs, cross_entropy_grad(logits, labels))
        return cross_entropy(logits, labels), dx
    losses = cross_entropy(forward(model, x).logits, labels)
    return losses, finite_difference_gradient(model, x, labels, h=mode.h)


def _loss(model, x, labels, mode):
    if mode.kind is GradKind.EXACT_BACKWARD:
        return cross_entropy(fast_forward_inputs(model, x)[1], labels)
    return cross_entropy(forward(model, x).logits, labels)


# ---------------------------------------------------------------------------
# attacks


def _fgsm_batch(model, x, labels, cfg):
    eps = np.float32(cfg.epsilon)
    _, g = _loss_and_grad(model, x, labels, cfg.grad_mode)
    return np.clip(x + eps * np.sign(g).astype(np.float32), np.float32(0), np.float32(1))


def _pgd_batch(model, x, labels, indices, cfg):
    eps = np.float32(cfg.epsilon)
    alpha = np.float32(cfg.step)
    lo = np.clip(x - eps, np.float32(0), np.float32(1))
    hi = np.clip(x + eps, np.float32(0), np.float32(1))
    cur = x.copy()
    if cfg.random_start and eps > 0:
        for row, idx in enumerate(indices):
            rng = np.random.default_rng([cfg.seed, int(idx)])
            noise = rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape[1:]).astype(np.float32)
            cur[row] = np.clip(x[row] + noise, lo[row], hi[row])
    best = cur.copy()
    best_loss = np.full(len(x), -np.inf)
    for t in range(cfg.iterations):
        losses, g = _loss_and_grad(model, cur, labels, cfg.grad_mode)
        if t > 0:
            # losses belong to the previous iterate x_t
            better = losses > best_loss
            best[better], best_loss[better] = cur[better], losses[better]
        cur = np.clip(cur + alpha * np.sign(g).astype(np.float32), lo, hi)
    losses = _loss(model, cur, labels, cfg.grad_mode)
    better = losses > best_loss
    best[better] = cur[better]
    return best


def _attack_chunk(model, x, labels, indices, cfg):
    if cfg.kind is AttackKind.FGSM:
        return _fgsm_batch(model, x, labels, cfg)
    return _pgd_batch(model, x, labels, indices, cfg)


def attack_batch(model, images, labels, cfg, indices=None, workers=1, chunk=50):
    """Attack a batch; returns one AdvExample per image.

    ``indices`` are the images' dataset positions (used to seed random
    starts); they default to ``0..n-1``.
    """
    _check_mode(model, cfg.grad_mode)
    x = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels)
    if x.ndim != len(model.input_shape) + 1:
        raise ContractError(f"expected a batch of {model.input_shape} images, got {x.shape}")
    if x.size and (x.min() < 0 or x.max() > 1):
        raise ContractError("images must lie in [0, 1]")
    indices = np.arange(len(x)) if indices is None else np.asarray(indices)
    spans = [slice(i, i + chunk) for i in range(0, len(x), chunk)]
    args = [(x[s], labels[s], indices[s]) for s in spans]
    if workers > 1 and len(args) > 1:
        from joblib import Parallel, delayed

        outs = Parallel(n_jobs=workers)(delayed(_attack_chunk)(model, *a, cfg) for a in args)
    else:
        outs = [_attack_chunk(model, *a, cfg) for a in args]
    adv = np.concatenate(outs) if outs else x.copy()
    return [_adv_example(x[i], adv[i], labels[i]) for i in range(len(x))]


def fgsm(model, x, label, cfg, index=0):
    """clip(x + eps * sign(grad), 0, 1) for one image."""
    if cfg.kind is not AttackKind.FGSM:
        cfg = _replace_kind(cfg, AttackKind.FGSM)
    return attack_batch(model, np.asarray(x)[None], [label], cfg, [index])[0]


def pgd(model, x, label, cfg, index=0):
    """Projected sign-gradient ascent; returns the highest-loss iterate."""
    if cfg.kind is not AttackKind.PGD:
        cfg = _replace_kind(cfg, AttackKind.PGD)
    return attack_batch(model, np.asarray(x)[None], [label], cfg, [index])[0]


def _replace_kind(cfg, kind):
    from dataclasses import replace

    return replace(cfg, kind=kind)


# ---------------------------------------------------------------------------
# evaluation protocols


@dataclass
class AttackRow:
    attack: str
    epsilon: float
    n: int
    source_success: int
    target_transfer: int
    mean_l2: float
    mean_linf: float

    @property
    def success_rate(self):
        return self.source_success / self.n if self.n else float("nan")

    @property
    def transfer_rate(self):
        return self.target_transfer / self.source_success if self.source_success else float("nan")

    def to_dict(self):
        return {
            "attack": self.attack,
            "epsilon": self.epsilon,
            "n": self.n,
            "source_success": self.source_success,
            "target_transfer": self.target_transfer,
            "success_rate_on_source": _finite(self.success_rate),
            "transfer_rate_on_target": _finite(self.transfer_rate),
            "mean_l2": _finite(self.mean_l2),
            "mean_linf": _finite(self.mean_linf),
        }


def _finite(v):
    return None if v is None or (isinstance(v, float) and math.isnan(v)) else v


@dataclass
class EvalReport:
    """Pooled rates over all attack rows; ``rows`` holds the per-attack split."""

    n: int
    rows: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def kept(self):
        return sum(r.source_success for r in self.rows)

    @property
    def no_kept(self):
        return self.kept == 0

    @property
    def success_rate_on_source(self):
        total = sum(r.n for r in self.rows)
        return self.kept / total if total else float("nan")

    @property
    def transfer_rate_on_target(self):
        return sum(r.target_transfer for r in self.rows) / self.kept if self.kept else float("nan")

    def _weighted(self, attr):
        if not self.kept:
            return float("nan")
        return sum(getattr(r, attr) * r.source_success for r in self.rows if r.source_success) / self.kept

    @property
    def mean_l2(self):
        return self._weighted("mean_l2")

    @property
    def mean_linf(self):
        return self._weighted("mean_linf")

    def to_dict(self):
        return {
            "n": self.n,
            "kept": self.kept,
            "no_kept": self.no_kept,
            "success_rate_on_source": _finite(self.success_rate_on_source),
            "transfer_rate_on_target": _finite(self.transfer_rate_on_target),
            "mean_l2": _finite(self.mean_l2),
            "mean_linf": _finite(self.mean_linf),
            "rows": [r.to_dict() for r in self.rows],
            **self.extra,
        }


def _filter_correct(models, images, labels, workers=1):
    keep = np.ones(len(labels), dtype=bool)
    for m in models:
        keep &= predict(m, images, workers=workers) == labels
    return np.flatnonzero(keep)


def transfer_eval(source, target, attack_cfgs, images, labels, workers=1, indices=None):
    """Craft examples on ``source``; report how many that fool it also fool ``target``.

    Only images both models classify correctly are attacked.
    """
    if source.input_shape != target.input_shape:
        raise ContractError("source and target models take different input shapes")
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels)
    indices = np.arange(len(labels)) if indices is None else np.asarray(indices)
    keep = _filter_correct([source] if source is target else [source, target], images, labels, workers)
    if len(keep) == 0:
        raise ContractError("no image is classified correctly by both models")
    x, y, idx = images[keep], labels[keep], indices[keep]
    report = EvalReport(n=len(keep))
    for cfg in attack_cfgs:
        advs = attack_batch(source, x, y, cfg, idx, workers=workers)
        adv = np.stack([a.perturbed for a in advs])
        fooled = predict(source, adv, workers=workers) != y
        hit = np.flatnonzero(fooled)
        transfer = 0
        if len(hit):
            transfer = int((predict(target, adv[hit], workers=workers) != y[hit]).sum())
        l2 = np.array([advs[i].l2 for i in hit])
        linf = np.array([advs[i].linf for i in hit])
        report.rows.append(
            AttackRow(
                attack=cfg.label,
                epsilon=cfg.epsilon,
                n=len(keep),
                source_success=len(hit),
                target_transfer=transfer,
                mean_l2=float(l2.mean()) if len(hit) else float("nan"),
                mean_linf=float(linf.mean()) if len(hit) else float("nan"),
            )
        )
        log.info("%s eps=%g: %d/%d fool source, %d transfer", cfg.label, cfg.epsilon, len(hit), len(keep), transfer)
    return report


def blackbox_eval(victim, substitute, query_images, attack_cfgs, images, labels, train_cfg=SGDConfig(), workers=1):
    """Train a substitute on victim-labelled queries, then transfer attacks onto the victim.

    ``substitute`` is a layer tuple (weights initialised from ``train_cfg.seed``)
    or a ModelSpec to start training from.
    """
    query_labels = predict(victim, query_images, workers=workers)
    if not isinstance(substitute, ModelSpec):
        weights = init_weights(substitute, victim.input_shape, train_cfg.seed)
        substitute = ModelSpec(substitute, weights, input_shape=victim.input_shape)
    losses = []
    substitute = train_sgd(substitute, query_images, query_labels, train_cfg, callback=lambda e, l: losses.append(l))
    diverged = not all(np.isfinite(losses)) or not all(np.isfinite(w).all() for w in substitute.weights.values())
    extra = {"substitute_train_loss": losses, "diverged": diverged, "queries": int(len(query_labels))}
    if diverged:
        log.warning("substitute training diverged; no attacks run")
        return EvalReport(n=0, extra=extra), substitute
    extra["substitute_accuracy"] = evaluate(substitute, images, labels, workers=workers).accuracy
    report = transfer_eval(substitute, victim, attack_cfgs, images, labels, workers=workers)
    report.extra.update(extra)
    return report, substitute


@dataclass
class WhiteboxRow:
    attack: str
    epsilon: float
    n: int
    accuracy: float
    mean_l2_successful: float

    def to_dict(self):
        return {
            "attack": self.attack,
            "epsilon": self.epsilon,
            "n": self.n,
            "accuracy": self.accuracy,
            "mean_l2_successful": _finite(self.mean_l2_successful),
        }


def whitebox_eval(model, attack_cfgs, epsilons, images, labels, workers=1):
    """Accuracy of ``model`` on its own adversarial examples at each budget."""
    from dataclasses import replace

    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels)
    rows = []
    for cfg in attack_cfgs:
        if cfg.grad_mode.kind is GradKind.EXACT_BACKWARD:
            raise ContractError("white-box evaluation takes BPDA or FiniteDiff gradients")
        _check_mode(model, cfg.grad_mode)
        for eps in epsilons:
            run = replace(cfg, epsilon=float(eps))
            advs = attack_batch(model, images, labels, run, workers=workers)
            adv = np.stack([a.perturbed for a in advs])
            correct = predict(model, adv, workers=workers) == labels
            wrong = np.flatnonzero(~correct)
            l2 = float(np.mean([advs[i].l2 for i in wrong])) if len(wrong) else float("nan")
            rows.append(WhiteboxRow(cfg.label, float(eps), len(labels), float(correct.mean()), l2))
            log.info("%s eps=%g: accuracy %.4f", cfg.label, eps, correct.mean())
    return rows
