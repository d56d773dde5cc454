"""Per-batch training objectives.

Each loss returns a :class:`BatchLoss` holding the mean loss and exact
parameter gradients. Passing ``adv`` (and ``kappa`` for GAIRAT) freezes the
inner maximisation, which is how the finite-difference checks pin the outer
gradient.

In divergence terms ``soft_cross_entropy(target, probs)`` takes the clean
prediction as target and gradients flow through both branches.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attacks import AttackConfig, _onehot, _rng, pgd
from .backend import MODE_NONE, kernels
from .nn import LOG_FLOOR, Gradients, Network, backward, forward, softmax

KINDS = ("standard", "pgd_at", "trades", "mart", "gairat")


@dataclass
class ObjectiveConfig:
    kind: str = "pgd_at"
    # weight on the divergence term; 6.0 is the recommended TRADES value
    lam: float = 6.0
    gairat_lambda: float = 0.0
    attack: AttackConfig = field(default_factory=AttackConfig)

    def validate(self, prefix: str = "objective") -> "ObjectiveConfig":
        if self.kind not in KINDS:
            raise ValueError(f"{prefix}.kind: must be one of {', '.join(KINDS)}, got {self.kind!r}")
        if not self.lam >= 0:
            raise ValueError(f"{prefix}.lam: must be nonnegative")
        if not np.isfinite(self.gairat_lambda):
            raise ValueError(f"{prefix}.gairat_lambda: must be finite")
        self.attack.validate(f"{prefix}.attack")
        return self


@dataclass
class BatchLoss:
    loss: float
    grads: Gradients
    per_example: np.ndarray
    adv: np.ndarray | None = None
    kappa: np.ndarray | None = None
    # prediction on the point the model was trained on is the true label
    robust_correct: np.ndarray | None = None


def _grads(net: Network, X, G):
    grads, _ = backward(net, X, G)
    return grads


def _stacked_grads(net: Network, X, G, Xa, Ga):
    return _grads(net, np.vstack([X, Xa]), np.vstack([G, Ga]))


def _softmax_vjp(p, a):
    """Pull ``dL/dp = a`` back through softmax to the logits."""
    return p * (a - (p * a).sum(axis=1, keepdims=True))


def _ce_head(net: Network, X, Y, weights=None):
    logits = forward(net, X)
    P = softmax(logits)
    onehot = _onehot(Y, net.class_count)
    ce = -np.log(np.maximum(P[np.arange(len(Y)), Y], LOG_FLOOR))
    w = np.ones(len(Y)) if weights is None else weights
    G = w[:, None] * (P - onehot) / len(Y)
    return ce, G, logits


def standard_loss(net: Network, X, Y) -> BatchLoss:
    """Mean clean cross-entropy."""
    Y = np.asarray(Y, dtype=np.int64)
    ce, G, logits = _ce_head(net, X, Y)
    return BatchLoss(float(ce.mean()), _grads(net, X, G), ce,
                     robust_correct=logits.argmax(axis=1) == Y)


def _attack(net, X, Y, cfg: ObjectiveConfig, seed):
    out = pgd(net, X, Y, cfg.attack, seed)
    return out.adv, out.kappa


def pgd_at_loss(net: Network, X, Y, cfg: ObjectiveConfig, seed=0, adv=None) -> BatchLoss:
    Y = np.asarray(Y, dtype=np.int64)
    kappa = None
    if adv is None:
        adv, kappa = _attack(net, X, Y, cfg, seed)
    ce, G, logits = _ce_head(net, adv, Y)
    return BatchLoss(float(ce.mean()), _grads(net, adv, G), ce, adv, kappa,
                     logits.argmax(axis=1) == Y)


def trades_inner(net: Network, X, cfg: AttackConfig, seed=0):
    """Maximise ``soft_cross_entropy(f(x), f(x'))`` over the ball.

    The divergence has zero gradient at ``x' = x``; without a uniform random
    start the search begins from ``x + 0.001 N(0, 1)``.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    eps = float(cfg.epsilon)
    lo = np.maximum(X - eps, 0.0)
    hi = np.minimum(X + eps, 1.0)
    rng = _rng(seed)
    if cfg.random_start:
        noise = rng.uniform(-eps, eps, size=X.shape)
    else:
        noise = 0.001 * rng.standard_normal(X.shape)
    start = np.minimum(np.maximum(X + noise, lo), hi)
    P = softmax(forward(net, X))
    labels = np.zeros(len(X), dtype=np.int64)
    adv, _, _, _ = kernels.pgd_loop(net.weights, net.biases, X, P, labels, MODE_NONE,
                                    start, lo, hi, float(cfg.step_size),
                                    int(cfg.iterations), 1.0, False)
    return adv


def trades_loss(net: Network, X, Y, cfg: ObjectiveConfig, seed=0, adv=None) -> BatchLoss:
    """``CE(f(x), y) + lam * SCE(f(x), f(x'))``."""
    Y = np.asarray(Y, dtype=np.int64)
    X = np.asarray(X, dtype=np.float64)
    if adv is None:
        adv = trades_inner(net, X, cfg.attack, seed)
    n = len(Y)
    lam = cfg.lam
    P = softmax(forward(net, X))
    Qa = softmax(forward(net, adv))
    onehot = _onehot(Y, net.class_count)
    neg_log_q = -np.log(np.maximum(Qa, LOG_FLOOR))
    ce = -np.log(np.maximum(P[np.arange(n), Y], LOG_FLOOR))
    div = (P * neg_log_q).sum(axis=1)
    per = ce + lam * div
    G = ((P - onehot) + lam * _softmax_vjp(P, neg_log_q)) / n
    Ga = lam * (Qa - P) / n
    grads = _stacked_grads(net, X, G, adv, Ga)
    return BatchLoss(float(per.mean()), grads, per, adv, None, Qa.argmax(axis=1) == Y)


def mart_loss(net: Network, X, Y, cfg: ObjectiveConfig, seed=0, adv=None) -> BatchLoss:
    """``CE(f(x'), y) + lam * SCE(f(x), f(x')) * (1 - f_y(x))``."""
    Y = np.asarray(Y, dtype=np.int64)
    X = np.asarray(X, dtype=np.float64)
    kappa = None
    if adv is None:
        adv, kappa = _attack(net, X, Y, cfg, seed)
    n = len(Y)
    lam = cfg.lam
    rows = np.arange(n)
    P = softmax(forward(net, X))
    Qa = softmax(forward(net, adv))
    onehot = _onehot(Y, net.class_count)
    neg_log_q = -np.log(np.maximum(Qa, LOG_FLOOR))
    ce_adv = -np.log(np.maximum(Qa[rows, Y], LOG_FLOOR))
    div = (P * neg_log_q).sum(axis=1)
    miss = 1.0 - P[rows, Y]
    per = ce_adv + lam * div * miss
    Ga = ((Qa - onehot) + lam * miss[:, None] * (Qa - P)) / n
    dP = lam * (miss[:, None] * neg_log_q - div[:, None] * onehot)
    G = _softmax_vjp(P, dP) / n
    grads = _stacked_grads(net, X, G, adv, Ga)
    return BatchLoss(float(per.mean()), grads, per, adv, kappa, Qa.argmax(axis=1) == Y)


def gairat_raw_weights(kappas, K: int, gairat_lambda: float = 0.0):
    k = np.asarray(kappas, dtype=np.float64)
    return (1.0 + np.tanh(gairat_lambda + 5.0 * (1.0 - 2.0 * k / K))) / 2.0


def gairat_weights(kappas, K: int, gairat_lambda: float = 0.0):
    """Geometry-aware weights normalised to mean 1 over the batch."""
    k = np.asarray(kappas)
    if k.size == 0:
        raise ValueError("gairat_weights needs a nonempty batch")
    if np.any(k < 0) or np.any(k > K):
        raise ValueError(f"kappa values must lie in [0, {K}]")
    raw = gairat_raw_weights(k, K, gairat_lambda)
    mean = raw.mean()
    if mean == 0.0:
        return np.ones_like(raw)
    return raw / mean


def gairat_loss(net: Network, X, Y, cfg: ObjectiveConfig, seed=0, adv=None, kappa=None) -> BatchLoss:
    """Adversarial cross-entropy weighted by :func:`gairat_weights`."""
    Y = np.asarray(Y, dtype=np.int64)
    if adv is None:
        adv, kappa = _attack(net, X, Y, cfg, seed)
    elif kappa is None:
        raise ValueError("a frozen perturbation needs its kappa values")
    w = gairat_weights(kappa, cfg.attack.iterations, cfg.gairat_lambda)
    ce, G, logits = _ce_head(net, adv, Y, weights=w)
    per = w * ce
    return BatchLoss(float(per.mean()), _grads(net, adv, G), per, adv, kappa,
                     logits.argmax(axis=1) == Y)


def objective_loss(net: Network, X, Y, cfg: ObjectiveConfig, seed=0) -> BatchLoss:
    if cfg.kind == "standard":
        return standard_loss(net, X, Y)
    return {
        "pgd_at": pgd_at_loss,
        "trades": trades_loss,
        "mart": mart_loss,
        "gairat": gairat_loss,
    }[cfg.kind](net, X, Y, cfg, seed)
