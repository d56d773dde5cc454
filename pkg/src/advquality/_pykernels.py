"""Pure-numpy kernels for the dense ReLU network.

Reference implementation of the hot loops. ``_ckernels`` mirrors every
function here with the same signature; ``advquality.backend`` picks one
at import time.

Weights are stored ``(out, in)``; activations are row-major ``(n, width)``.
``acts[0]`` is the input and ``acts[-1]`` the raw logits; hidden entries
are post-ReLU.
"""
import numpy as np

LOG_FLOOR = 1e-300

MODE_UNTARGETED = 0
MODE_TARGETED = 1
MODE_NONE = 2


def forward(weights, biases, X):
    acts = [X]
    h = X
    last = len(weights) - 1
    for i, (W, b) in enumerate(zip(weights, biases)):
        z = h @ W.T
        z += b
        if i < last:
            np.maximum(z, 0.0, out=z)
        acts.append(z)
        h = z
    return acts


def backward(weights, acts, G, need_params=True):
    """Return ``(dWs, dbs, dX)`` for upstream logit gradient ``G``."""
    L = len(weights)
    dWs = [None] * L
    dbs = [None] * L
    g = G
    for i in range(L - 1, -1, -1):
        h = acts[i]
        if need_params:
            dWs[i] = g.T @ h
            dbs[i] = g.sum(axis=0)
        g = g @ weights[i]
        if i > 0:
            # ReLU subgradient at 0 is 0; h > 0 iff the pre-activation was > 0
            g *= h > 0
    return dWs, dbs, g


def softmax_rows(Z):
    Z = Z - Z.max(axis=1, keepdims=True)
    E = np.exp(Z)
    return E / E.sum(axis=1, keepdims=True)


def _fooled(logits, labels, mode):
    if mode == MODE_NONE:
        return np.zeros(len(labels), dtype=bool)
    pred = logits.argmax(axis=1)
    if mode == MODE_TARGETED:
        return pred == labels
    return pred != labels


def loss_input_grad(weights, biases, X, Q):
    """Soft cross-entropy ``-sum Q log softmax(f(X))`` and its input gradient.

    Returns ``(logits, loss, dX)`` with ``loss`` per row.
    """
    acts = forward(weights, biases, X)
    logits = acts[-1]
    P = softmax_rows(logits)
    loss = -(Q * np.log(np.maximum(P, LOG_FLOOR))).sum(axis=1)
    _, _, dX = backward(weights, acts, P - Q, need_params=False)
    return logits, loss, dX


def pgd_loop(weights, biases, X, Q, labels, mode, start, lo, hi, step, K,
             direction, start_is_clean):
    """Signed-gradient iterations inside the box ``[lo, hi]``.

    ``direction`` is +1 to ascend the loss, -1 to descend it. Candidates are
    the clean input, the start point and every iterate; the winner per row
    maximises ``(fooled, direction * loss)`` lexicographically.

    Returns ``(best_adv, best_loss, best_fooled, kappa)``.
    """
    return generic_pgd_loop(
        lambda Z: loss_input_grad(weights, biases, Z, Q),
        X, labels, mode, start, lo, hi, step, K, direction, start_is_clean,
    )


def generic_pgd_loop(grad_fn, X, labels, mode, start, lo, hi, step, K,
                     direction, start_is_clean):
    n = X.shape[0]
    kappa = np.zeros(n, dtype=np.int64)
    if start_is_clean:
        best_adv = X.copy()
        best_obj = np.full(n, -np.inf)
        best_fooled = np.zeros(n, dtype=bool)
        alive = np.ones(n, dtype=bool)
    else:
        logits, loss, _ = grad_fn(X)
        best_adv = X.copy()
        best_obj = direction * loss
        best_fooled = _fooled(logits, labels, mode)
        alive = ~best_fooled
    cur = start.copy()
    for k in range(K + 1):
        logits, loss, grad = grad_fn(cur)
        fooled = _fooled(logits, labels, mode)
        obj = direction * loss
        better = (fooled & ~best_fooled) | (
            (fooled == best_fooled) & (obj > best_obj))
        best_adv[better] = cur[better]
        best_obj = np.where(better, obj, best_obj)
        best_fooled = best_fooled | fooled
        if k == K:
            break
        alive &= ~fooled
        kappa += alive
        cur = cur + (direction * step) * np.sign(grad)
        cur = np.minimum(np.maximum(cur, lo), hi)
    return best_adv, direction * best_obj, best_fooled, kappa
