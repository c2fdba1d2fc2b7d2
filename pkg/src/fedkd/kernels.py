"""Hot numeric kernels with a numba path and a pure-numpy fallback.

Each kernel exists as ``<name>_numpy`` and ``<name>_numba``; the public
``<name>`` is bound to one of them depending on :data:`fedkd._accel.USE_NUMBA`.
Both variants are importable regardless of the flag so that tests and the
benchmark can compare them directly.

``kahan_weighted_sum``, ``adamw_update`` and the parameter update of
``adamw_prox_update`` perform the same IEEE operations in the same order in
both variants and are bit-identical. ``bce_dice`` and the proximal penalty
returned by ``adamw_prox_update`` reduce in a different order and agree to
rounding only.
"""

import numpy as np

from fedkd._accel import USE_NUMBA, njit

__all__ = [
    "kahan_weighted_sum",
    "adamw_update",
    "adamw_prox_update",
    "bce_dice",
    "KERNELS",
]


# --------------------------------------------------------------------------
# compensated weighted sum (aggregation)


def kahan_weighted_sum_numpy(stack, weights):
    """Return ``sum_i weights[i] * stack[i]`` per column, Kahan-compensated.

    ``stack`` is ``(k, n)``; accumulation runs in float64 in row order.
    """
    k, n = stack.shape
    total = np.zeros(n, dtype=np.float64)
    comp = np.zeros(n, dtype=np.float64)
    for i in range(k):
        y = weights[i] * stack[i].astype(np.float64) - comp
        t = total + y
        comp = (t - total) - y
        total = t
    return total


@njit
def kahan_weighted_sum_numba(stack, weights):
    k, n = stack.shape
    total = np.zeros(n, dtype=np.float64)
    comp = np.zeros(n, dtype=np.float64)
    # rows outer, columns inner: each column sees the same operation order, and the inner loop vectorizes
    for i in range(k):
        w = weights[i]
        for j in range(n):
            y = w * np.float64(stack[i, j]) - comp[j]
            t = total[j] + y
            comp[j] = (t - total[j]) - y
            total[j] = t
    return total


# --------------------------------------------------------------------------
# fused AdamW update (in place)


def _adamw_coefs(dtype, lr, beta1, beta2, eps, weight_decay, step):
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step
    return np.array(
        [1.0 - lr * weight_decay, beta1, 1.0 - beta1, beta2, 1.0 - beta2, bc2, eps, lr / bc1],
        dtype=dtype,
    )


def adamw_update_numpy(p, g, m, v, coefs):
    decay, b1, c1, b2, c2, bc2, eps, step_size = coefs
    p *= decay
    m *= b1
    m += c1 * g
    v *= b2
    v += (c2 * g) * g
    denom = np.sqrt(v / bc2) + eps
    p -= (step_size * m) / denom


@njit
def adamw_update_numba(p, g, m, v, coefs):
    decay = coefs[0]
    b1 = coefs[1]
    c1 = coefs[2]
    b2 = coefs[3]
    c2 = coefs[4]
    bc2 = coefs[5]
    eps = coefs[6]
    step_size = coefs[7]
    for i in range(p.shape[0]):
        pi = p[i] * decay
        mi = m[i] * b1
        mi = mi + c1 * g[i]
        vi = v[i] * b2
        vi = vi + (c2 * g[i]) * g[i]
        denom = np.sqrt(vi / bc2) + eps
        p[i] = pi - (step_size * mi) / denom
        m[i] = mi
        v[i] = vi


def adamw_prox_update_numpy(p, g, m, v, anchor, coefs):
    """AdamW on ``g + mu * (p - anchor)``; returns ``sum((p - anchor)**2)`` before the step.

    ``coefs`` is the AdamW vector with ``mu`` appended.
    """
    d = p - anchor
    d64 = d.astype(np.float64)
    sq = float(np.dot(d64, d64))
    adamw_update_numpy(p, g + coefs[8] * d, m, v, coefs[:8])
    return sq


@njit
def adamw_prox_update_numba(p, g, m, v, anchor, coefs):
    decay = coefs[0]
    b1 = coefs[1]
    c1 = coefs[2]
    b2 = coefs[3]
    c2 = coefs[4]
    bc2 = coefs[5]
    eps = coefs[6]
    step_size = coefs[7]
    mu = coefs[8]
    n = p.shape[0]
    # penalty first, in four interleaved partial sums; the update loop below then vectorizes
    s0 = s1 = s2 = s3 = 0.0
    i = 0
    while i + 4 <= n:
        d0 = np.float64(p[i] - anchor[i])
        d1 = np.float64(p[i + 1] - anchor[i + 1])
        d2 = np.float64(p[i + 2] - anchor[i + 2])
        d3 = np.float64(p[i + 3] - anchor[i + 3])
        s0 += d0 * d0
        s1 += d1 * d1
        s2 += d2 * d2
        s3 += d3 * d3
        i += 4
    while i < n:
        d0 = np.float64(p[i] - anchor[i])
        s0 += d0 * d0
        i += 1
    for j in range(n):
        gi = g[j] + mu * (p[j] - anchor[j])
        pj = p[j] * decay
        mj = m[j] * b1
        mj = mj + c1 * gi
        vj = v[j] * b2
        vj = vj + (c2 * gi) * gi
        denom = np.sqrt(vj / bc2) + eps
        p[j] = pj - (step_size * mj) / denom
        m[j] = mj
        v[j] = vj
    return (s0 + s1) + (s2 + s3)


# --------------------------------------------------------------------------
# sigmoid-probability binary cross entropy + soft Dice, value and gradient


def bce_dice_numpy(p, t, ce_weight, dice_weight, smooth, eps):
    """Composite loss on probabilities ``p`` against soft targets ``t``.

    Both arrays are ``(B, C, N)`` float64. Returns ``(ce, dice, grad)`` where
    ``ce`` is the mean binary cross entropy, ``dice`` the mean soft Dice over
    (sample, channel) pairs and ``grad`` the gradient of
    ``ce_weight * ce + dice_weight * (1 - dice)`` with respect to ``p``.
    """
    b, c, n = p.shape
    total = b * c * n
    pc = np.clip(p, eps, 1.0 - eps)
    ce_terms = -(t * np.log(pc) + (1.0 - t) * np.log1p(-pc))
    ce = ce_terms.sum() / total
    inside = (p > eps) & (p < 1.0 - eps)
    g_ce = np.where(inside, (pc - t) / (pc * (1.0 - pc)), 0.0) / total

    inter = (p * t).sum(axis=-1)
    denom = p.sum(axis=-1) + t.sum(axis=-1) + smooth
    numer = 2.0 * inter + smooth
    dice_bc = numer / denom
    dice = dice_bc.sum() / (b * c)
    g_dice = -(2.0 * t * denom[..., None] - numer[..., None]) / (denom * denom)[..., None] / (b * c)
    return ce, dice, ce_weight * g_ce + dice_weight * g_dice


@njit
def bce_dice_numba(p, t, ce_weight, dice_weight, smooth, eps):
    b, c, n = p.shape
    total = b * c * n
    grad = np.empty_like(p)
    ce = 0.0
    dice = 0.0
    hi = 1.0 - eps
    for i in range(b):
        for k in range(c):
            inter = 0.0
            psum = 0.0
            tsum = 0.0
            for j in range(n):
                pv = p[i, k, j]
                tv = t[i, k, j]
                inter += pv * tv
                psum += pv
                tsum += tv
                pc = min(max(pv, eps), hi)
                ce -= tv * np.log(pc) + (1.0 - tv) * np.log1p(-pc)
                if pv > eps and pv < hi:
                    grad[i, k, j] = ce_weight * ((pc - tv) / (pc * (1.0 - pc))) / total
                else:
                    grad[i, k, j] = 0.0
            denom = psum + tsum + smooth
            numer = 2.0 * inter + smooth
            dice += numer / denom
            scale = dice_weight / (denom * denom) / (b * c)
            for j in range(n):
                grad[i, k, j] -= (2.0 * t[i, k, j] * denom - numer) * scale
    return ce / total, dice / (b * c), grad


if USE_NUMBA:
    kahan_weighted_sum = kahan_weighted_sum_numba
    _adamw_kernel = adamw_update_numba
    _adamw_prox_kernel = adamw_prox_update_numba
    bce_dice = bce_dice_numba
else:
    kahan_weighted_sum = kahan_weighted_sum_numpy
    _adamw_kernel = adamw_update_numpy
    _adamw_prox_kernel = adamw_prox_update_numpy
    bce_dice = bce_dice_numpy


def adamw_update(p, g, m, v, *, lr, beta1, beta2, eps, weight_decay, step):
    """Decoupled-weight-decay Adam step on 1-D views, in place.

    ``step`` is the 1-based step index used for bias correction. All four
    arrays must share one floating dtype; scalars are cast to it so the
    arithmetic stays in that precision.
    """
    coefs = _adamw_coefs(p.dtype, lr, beta1, beta2, eps, weight_decay, step)
    _adamw_kernel(p, g, m, v, coefs)


def adamw_prox_update(p, g, m, v, anchor, *, mu, lr, beta1, beta2, eps, weight_decay, step) -> float:
    """:func:`adamw_update` with a FedProx term ``mu/2 * |p - anchor|^2`` folded into the gradient.

    Returns the squared distance to ``anchor`` before the step, in float64.
    """
    coefs = _adamw_coefs(p.dtype, lr, beta1, beta2, eps, weight_decay, step)
    coefs = np.append(coefs, np.array([mu], dtype=p.dtype))
    return float(_adamw_prox_kernel(p, g, m, v, anchor, coefs))


KERNELS = {
    "kahan_weighted_sum": (kahan_weighted_sum_numpy, kahan_weighted_sum_numba),
    "adamw_update": (adamw_update_numpy, adamw_update_numba),
    "adamw_prox_update": (adamw_prox_update_numpy, adamw_prox_update_numba),
    "bce_dice": (bce_dice_numpy, bce_dice_numba),
}
