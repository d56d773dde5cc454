"""L-infinity adversaries: FGSM, PGD, restarts, minimum perturbation,
a gradient-free patch search and surrogate transfer.

Every attack takes a single example ``(x, y)`` or a batch ``(X, Y)``; batch
inputs give array-valued outcomes. A model is a :class:`~advquality.nn.Network`
or any object with ``logits(X)`` and ``loss_input_grad(X, Q)``.

Candidates always include the clean point, so an untargeted attack never
turns a mistake into a correct prediction. Among candidates the winner is
the one that fools the model, then the one with the highest loss.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import _pykernels
from .backend import MODE_TARGETED, MODE_UNTARGETED, kernels
from .nn import DimensionError, Network


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 8 / 255
    step_size: float = 2 / 255
    iterations: int = 10
    restarts: int = 1
    random_start: bool = True
    target_class: int | None = None

    def validate(self, prefix: str = "attack") -> "AttackConfig":
        if not 0 <= self.epsilon <= 1:
            raise ValueError(f"{prefix}.epsilon: must lie in [0, 1], got {self.epsilon}")
        if not self.step_size > 0:
            raise ValueError(f"{prefix}.step_size: must be positive")
        if self.epsilon > 0 and self.step_size > 2 * self.epsilon:
            raise ValueError(f"{prefix}.step_size: {self.step_size} exceeds 2 * epsilon")
        if int(self.iterations) != self.iterations or self.iterations < 1:
            raise ValueError(f"{prefix}.iterations: must be a positive integer")
        if int(self.restarts) != self.restarts or self.restarts < 1:
            raise ValueError(f"{prefix}.restarts: must be a positive integer")
        if self.target_class is not None and (int(self.target_class) != self.target_class
                                              or self.target_class < 0):
            raise ValueError(f"{prefix}.target_class: must be a class index")
        return self


@dataclass
class AttackOutcome:
    adv: np.ndarray
    success: np.ndarray
    kappa: np.ndarray
    loss: np.ndarray | None = None
    queries: np.ndarray | None = None

    def _single(self):
        return AttackOutcome(
            self.adv[0], bool(self.success[0]), int(self.kappa[0]),
            None if self.loss is None else float(self.loss[0]),
            None if self.queries is None else int(self.queries[0]))


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _batch(x, y):
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    X = np.ascontiguousarray(np.atleast_2d(X))
    Y = np.atleast_1d(np.asarray(y)).astype(np.int64)
    if len(Y) == 1 and len(X) > 1:
        Y = np.full(len(X), Y[0])
    if len(Y) != len(X):
        raise DimensionError(f"{len(X)} inputs but {len(Y)} labels")
    return X, Y, single


def _onehot(labels, classes):
    Q = np.zeros((len(labels), classes))
    Q[np.arange(len(labels)), labels] = 1.0
    return Q


def _finish(out: AttackOutcome, single: bool):
    return out._single() if single else out


def _loop(model, X, Q, labels, mode, start, lo, hi, step, K, direction, start_is_clean):
    if isinstance(model, Network):
        return kernels.pgd_loop(model.weights, model.biases, X, Q, labels, mode, start,
                                lo, hi, float(step), int(K), float(direction),
                                bool(start_is_clean))
    return _pykernels.generic_pgd_loop(
        lambda Z: model.loss_input_grad(Z, Q), X, labels, mode, start, lo, hi,
        step, K, direction, start_is_clean)


def fgsm(model, x, y, epsilon: float) -> AttackOutcome:
    """One signed-gradient step of size ``epsilon``.

    The step point is kept unless it neither fools the model nor raises the
    loss, in which case the clean point is returned.
    """
    X, Y, single = _batch(x, y)
    Q = _onehot(Y, model.class_count)
    logits0, loss0, grad = model.loss_input_grad(X, Q)
    adv = X + epsilon * np.sign(grad)
    adv = np.minimum(np.maximum(adv, 0.0), 1.0)
    logits1, loss1, _ = model.loss_input_grad(adv, Q)
    fooled0 = logits0.argmax(axis=1) != Y
    fooled1 = logits1.argmax(axis=1) != Y
    keep = (fooled1 & ~fooled0) | ((fooled1 == fooled0) & (loss1 > loss0))
    out = AttackOutcome(
        adv=np.where(keep[:, None], adv, X),
        success=fooled0 | fooled1,
        kappa=np.where(fooled0, 0, 1).astype(np.int64),
        loss=np.where(keep, loss1, loss0),
    )
    return _finish(out, single)


def pgd(model, x, y, cfg: AttackConfig, seed=0) -> AttackOutcome:
    """Projected signed-gradient attack with best-iterate return.

    Untargeted runs ascend the cross-entropy of the true label; with
    ``cfg.target_class`` set they descend the cross-entropy of the target.
    ``kappa`` is the index of the first iterate that fools the model
    (``iterations`` if none of the first ``iterations`` iterates does).
    """
    X, Y, single = _batch(x, y)
    eps = float(cfg.epsilon)
    lo = np.maximum(X - eps, 0.0)
    hi = np.minimum(X + eps, 1.0)
    classes = model.class_count
    if cfg.target_class is not None:
        if not cfg.target_class < classes:
            raise ValueError(f"target class {cfg.target_class} out of range")
        labels = np.full(len(X), int(cfg.target_class), dtype=np.int64)
        mode, direction = MODE_TARGETED, -1.0
    else:
        labels, mode, direction = Y, MODE_UNTARGETED, 1.0
    Q = _onehot(labels, classes)
    if cfg.random_start:
        noise = _rng(seed).uniform(-eps, eps, size=X.shape)
        start = np.minimum(np.maximum(X + noise, lo), hi)
    else:
        start = X
    adv, loss, fooled, kappa = _loop(model, X, Q, labels, mode, start, lo, hi,
                                     cfg.step_size, cfg.iterations, direction,
                                     not cfg.random_start)
    return _finish(AttackOutcome(adv, np.asarray(fooled, dtype=bool), kappa, loss), single)


def _better(a: AttackOutcome, b: AttackOutcome, direction: float):
    """Rows where ``b`` beats ``a``."""
    return (b.success & ~a.success) | ((b.success == a.success) & (direction * b.loss > direction * a.loss))


def pgd_multi_restart(model, x, y, cfg: AttackConfig, seed=0) -> AttackOutcome:
    """Worst case over ``cfg.restarts`` random restarts.

    Restart 0 draws the same start as :func:`pgd` with the same seed, so the
    result is never weaker than a single run.
    """
    X, Y, single = _batch(x, y)
    rng = _rng(seed)
    restarts = cfg.restarts if cfg.random_start else 1
    direction = -1.0 if cfg.target_class is not None else 1.0
    best = pgd(model, X, Y, cfg, rng)
    for _ in range(restarts - 1):
        nxt = pgd(model, X, Y, cfg, rng)
        take = _better(best, nxt, direction)
        best = AttackOutcome(
            adv=np.where(take[:, None], nxt.adv, best.adv),
            success=best.success | nxt.success,
            kappa=np.minimum(best.kappa, nxt.kappa),
            loss=np.where(take, nxt.loss, best.loss),
        )
    return _finish(best, single)


def min_perturbation(model, x, y, step: float = 1 / 255, eps_max: float = 32 / 255):
    """Smallest radius on the grid ``step, 2 step, ..., eps_max`` at which
    iterative FGSM (``ceil(eps / step)`` steps of size ``step``) flips the
    prediction.

    A radius-``k step`` run never reaches its ball boundary within ``k``
    steps, so all grid radii share one trajectory; the answer is ``step``
    times the index of its first fooling iterate. Returns
    ``(epsilon_star, found)``, arrays for batch input.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    if not 0 < eps_max <= 1:
        raise ValueError("eps_max must lie in (0, 1]")
    X, Y, single = _batch(x, y)
    K = int(math.floor(eps_max / step + 1e-9))
    if K < 1:
        raise ValueError("eps_max is smaller than one grid step")
    Q = _onehot(Y, model.class_count)
    lo = np.maximum(X - K * step, 0.0)
    hi = np.minimum(X + K * step, 1.0)
    _, _, fooled, kappa = _loop(model, X, Q, Y, MODE_UNTARGETED, X, lo, hi, step, K, 1.0, True)
    found = np.asarray(fooled, dtype=bool)
    eps_star = np.where(found, kappa * step, eps_max)
    if single:
        return float(eps_star[0]), bool(found[0])
    return eps_star, found


def margin(logits, labels):
    """``logit_y - max_{c != y} logit_c`` per row."""
    rows = np.arange(len(labels))
    true = logits[rows, labels]
    other = logits.copy()
    other[rows, labels] = -np.inf
    return true - other.max(axis=1)


def _window_fraction(q, budget, p_init):
    # halving schedule at fixed fractions of the budget
    marks = np.array([10, 50, 200, 500, 1000, 2000, 4000, 6000, 8000]) / 10000 * budget
    return p_init * 0.5 ** int(np.sum(q > marks))


def square_patch_attack(model, x, y, epsilon: float, query_budget: int, seed=0,
                        p_init: float = 0.3) -> AttackOutcome:
    """Random search over contiguous coordinate windows set to +-epsilon.

    Only ``model.logits`` is called. A proposal replaces one window of the
    current perturbation with fresh random-sign values and is kept iff the
    margin loss drops. The clean evaluation counts as the first query; rows
    stop once fooled or out of budget. ``kappa`` is the number of queries
    spent.
    """
    if query_budget < 1:
        raise ValueError("query_budget must be at least 1")
    X, Y, single = _batch(x, y)
    rng = _rng(seed)
    n, d = X.shape
    queries = np.ones(n, dtype=np.int64)
    logits = np.asarray(model.logits(X))
    cur_margin = margin(logits, Y)
    fooled = logits.argmax(axis=1) != Y
    delta = np.zeros_like(X)
    adv = X.copy()
    while True:
        active = ~fooled & (queries < query_budget)
        if not active.any():
            break
        rows = np.flatnonzero(active)
        q = queries[rows[0]]
        if q == 1:
            proposal = epsilon * rng.choice([-1.0, 1.0], size=(len(rows), d))
        else:
            h = max(1, min(d, int(round(_window_fraction(q, query_budget, p_init) * d))))
            starts = rng.integers(0, d - h + 1, size=len(rows))
            signs = epsilon * rng.choice([-1.0, 1.0], size=(len(rows), h))
            proposal = delta[rows].copy()
            cols = starts[:, None] + np.arange(h)
            proposal[np.arange(len(rows))[:, None], cols] = signs
        cand = np.clip(X[rows] + proposal, 0.0, 1.0)
        cand_logits = np.asarray(model.logits(cand))
        queries[rows] += 1
        cand_margin = margin(cand_logits, Y[rows])
        accept = cand_margin < cur_margin[rows]
        acc_rows = rows[accept]
        delta[acc_rows] = proposal[accept]
        adv[acc_rows] = cand[accept]
        cur_margin[acc_rows] = cand_margin[accept]
        fooled[acc_rows] = cand_logits[accept].argmax(axis=1) != Y[acc_rows]
    out = AttackOutcome(adv=adv, success=fooled, kappa=queries.copy(),
                        loss=-cur_margin, queries=queries)
    return _finish(out, single)


def transfer_attack(surrogate: Network, target: Network, x, y, cfg: AttackConfig, seed=0) -> AttackOutcome:
    """Craft on ``surrogate`` with restarted PGD, score on ``target``."""
    if surrogate.input_dim != target.input_dim or surrogate.class_count != target.class_count:
        raise DimensionError(
            f"surrogate {surrogate.input_dim}->{surrogate.class_count} does not match "
            f"target {target.input_dim}->{target.class_count}")
    X, Y, single = _batch(x, y)
    crafted = pgd_multi_restart(surrogate, X, Y, cfg, seed)
    clean_wrong = target.logits(X).argmax(axis=1) != Y
    adv_wrong = target.logits(crafted.adv).argmax(axis=1) != Y
    adv = np.where(clean_wrong[:, None] & ~adv_wrong[:, None], X, crafted.adv)
    out = AttackOutcome(adv=adv, success=clean_wrong | adv_wrong, kappa=crafted.kappa,
                        loss=crafted.loss)
    return _finish(out, single)


def robust_accuracy(outcome: AttackOutcome) -> float:
    # count survivors directly so the value matches a clean accuracy bit for bit
    return float(np.mean(~np.asarray(outcome.success, dtype=bool)))


def with_epsilon(cfg: AttackConfig, epsilon: float) -> AttackConfig:
    return replace(cfg, epsilon=epsilon)
