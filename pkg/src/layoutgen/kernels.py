"""Hot numeric kernels with numba-jitted and pure-numpy implementations.

The jitted path is used when numba imports cleanly and the environment
variable ``LAYOUTGEN_NUMBA`` is not set to ``0``/``false``/``off``.  Both
paths implement identical math; ``set_backend`` switches at runtime (used by
the equivalence tests and the benchmark script).

All kernels are pure: randomness comes in as pre-drawn uniforms, so results
are reproducible for a fixed numpy Generator regardless of backend.

Conventions: states are per-modality locals where ``K`` ordinary states
(tokens plus PAD) are 0..K-1 and MASK is K.  Mixture parameters follow the
mask-and-replace family: ``a`` keep, ``b`` per-state replace, ``g`` mask
mass, suffixed ``_s`` for the step transition, ``_p`` for the cumulative
product up to the earlier timestep and ``_n`` for the later one.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    _HAVE_NUMBA = False

_env = os.environ.get("LAYOUTGEN_NUMBA", "1").lower()
_backend = "numba" if (_HAVE_NUMBA and _env not in ("0", "false", "off", "no")) else "numpy"


def active_backend() -> str:
    return _backend


def set_backend(name: str) -> None:
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not _HAVE_NUMBA:
        raise ValueError("numba is not available")
    _backend = name


# ---------------------------------------------------------------------------
# pure numpy implementations
# ---------------------------------------------------------------------------

def _corrupt_np(z0, kprime, a_bar, b_bar, g_bar, u_out, u_tok):
    mask_state = kprime
    replace = np.floor(u_tok * kprime).astype(z0.dtype)
    zt = np.where(u_out < g_bar, mask_state,
                  np.where(u_out < g_bar + kprime * b_bar, replace, z0))
    return zt


def _mixture_np(p0, zt, a_s, b_s, g_s, a_p, b_p, g_p, a_n, b_n, g_n):
    n, K = p0.shape
    is_mask = zt == K
    # w_m = p0_m / q(z_t | z0 = m)
    denom = np.where(is_mask[:, None], g_n[:, None],
                     b_n[:, None] + np.where(zt[:, None] == np.arange(K)[None, :],
                                             a_n[:, None], 0.0))
    w = p0 / denom
    W = w.sum(axis=1)
    mixed = a_p[:, None] * w + (b_p * W)[:, None]  # (Q_bar_prev @ w) on ordinary states
    out = np.empty((n, K + 1))
    # z_t ordinary: T[j, k] = b_s + a_s * (k == j), no MASK mass
    tj = b_s[:, None] + np.where(zt[:, None] == np.arange(K)[None, :], a_s[:, None], 0.0)
    out[:, :K] = np.where(is_mask[:, None], g_s[:, None] * mixed, tj * mixed)
    out[:, K] = np.where(is_mask, g_p * W, 0.0)
    return out


def _categorical_np(probs, u):
    cdf = np.cumsum(probs, axis=1)
    total = cdf[:, -1]
    idx = np.sum(cdf < (u * total)[:, None], axis=1)
    return np.minimum(idx, probs.shape[1] - 1).astype(np.int64)


def _nucleus_np(probs, top_p):
    order = np.argsort(-probs, axis=1, kind="stable")
    sorted_p = np.take_along_axis(probs, order, axis=1)
    cum = np.cumsum(sorted_p, axis=1)
    # keep the smallest prefix whose mass reaches top_p * total
    need = top_p * cum[:, -1:]
    keep_sorted = (cum - sorted_p) < need
    keep = np.zeros_like(probs, dtype=bool)
    np.put_along_axis(keep, order, keep_sorted, axis=1)
    out = np.where(keep, probs, 0.0)
    return out / out.sum(axis=1, keepdims=True)


def _pairwise_iou_np(a, b):
    ax0 = a[:, 0] - a[:, 2] / 2
    ax1 = a[:, 0] + a[:, 2] / 2
    ay0 = a[:, 1] - a[:, 3] / 2
    ay1 = a[:, 1] + a[:, 3] / 2
    bx0 = b[:, 0] - b[:, 2] / 2
    bx1 = b[:, 0] + b[:, 2] / 2
    by0 = b[:, 1] - b[:, 3] / 2
    by1 = b[:, 1] + b[:, 3] / 2
    iw = np.maximum(np.minimum(ax1[:, None], bx1[None, :])
                    - np.maximum(ax0[:, None], bx0[None, :]), 0.0)
    ih = np.maximum(np.minimum(ay1[:, None], by1[None, :])
                    - np.maximum(ay0[:, None], by0[None, :]), 0.0)
    inter = iw * ih
    area_a = (a[:, 2] * a[:, 3])[:, None]
    area_b = (b[:, 2] * b[:, 3])[None, :]
    union = area_a + area_b - inter
    return np.where(union > 0, inter / union, 0.0)


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if _HAVE_NUMBA:

    @numba.njit(cache=True)
    def _corrupt_nb(z0, kprime, a_bar, b_bar, g_bar, u_out, u_tok):
        n = z0.shape[0]
        out = np.empty_like(z0)
        for i in range(n):
            if u_out[i] < g_bar[i]:
                out[i] = kprime
            elif u_out[i] < g_bar[i] + kprime * b_bar[i]:
                out[i] = np.int64(u_tok[i] * kprime)
            else:
                out[i] = z0[i]
        return out

    @numba.njit(cache=True)
    def _mixture_nb(p0, zt, a_s, b_s, g_s, a_p, b_p, g_p, a_n, b_n, g_n):
        n, K = p0.shape
        out = np.empty((n, K + 1))
        for i in range(n):
            j = zt[i]
            W = 0.0
            if j == K:
                for m in range(K):
                    W += p0[i, m] / g_n[i]
                for k in range(K):
                    w_k = p0[i, k] / g_n[i]
                    out[i, k] = g_s[i] * (a_p[i] * w_k + b_p[i] * W)
                out[i, K] = g_p[i] * W
            else:
                for m in range(K):
                    d = b_n[i] + (a_n[i] if m == j else 0.0)
                    W += p0[i, m] / d
                for k in range(K):
                    d = b_n[i] + (a_n[i] if k == j else 0.0)
                    w_k = p0[i, k] / d
                    t = b_s[i] + (a_s[i] if k == j else 0.0)
                    out[i, k] = t * (a_p[i] * w_k + b_p[i] * W)
                out[i, K] = 0.0
        return out

    @numba.njit(cache=True)
    def _categorical_nb(probs, u):
        n, S = probs.shape
        out = np.empty(n, dtype=np.int64)
        for i in range(n):
            total = 0.0
            for k in range(S):
                total += probs[i, k]
            target = u[i] * total
            acc = 0.0
            pick = S - 1
            for k in range(S):
                acc += probs[i, k]
                if acc > target:
                    pick = k
                    break
            out[i] = pick
        return out

    @numba.njit(cache=True)
    def _nucleus_nb(probs, top_p):
        n, S = probs.shape
        out = np.zeros((n, S))
        for i in range(n):
            order = np.argsort(-probs[i], kind="mergesort")
            total = 0.0
            for k in range(S):
                total += probs[i, k]
            need = top_p * total
            acc = 0.0
            kept = 0.0
            for r in range(S):
                k = order[r]
                if acc < need:
                    out[i, k] = probs[i, k]
                    kept += probs[i, k]
                    acc += probs[i, k]
                else:
                    break
            for k in range(S):
                out[i, k] /= kept
        return out

    @numba.njit(cache=True)
    def _pairwise_iou_nb(a, b):
        n, m = a.shape[0], b.shape[0]
        out = np.empty((n, m))
        for i in range(n):
            ax0 = a[i, 0] - a[i, 2] / 2
            ax1 = a[i, 0] + a[i, 2] / 2
            ay0 = a[i, 1] - a[i, 3] / 2
            ay1 = a[i, 1] + a[i, 3] / 2
            area_a = a[i, 2] * a[i, 3]
            for j in range(m):
                iw = min(ax1, b[j, 0] + b[j, 2] / 2) - max(ax0, b[j, 0] - b[j, 2] / 2)
                ih = min(ay1, b[j, 1] + b[j, 3] / 2) - max(ay0, b[j, 1] - b[j, 3] / 2)
                inter = max(iw, 0.0) * max(ih, 0.0)
                union = area_a + b[j, 2] * b[j, 3] - inter
                out[i, j] = inter / union if union > 0 else 0.0
        return out


# ---------------------------------------------------------------------------
# dispatching wrappers
# ---------------------------------------------------------------------------

def corrupt_states(z0, kprime, a_bar, b_bar, g_bar, u_out, u_tok):
    """Sample z_t locals from the cumulative mask-and-replace column of z_0."""
    args = (np.ascontiguousarray(z0), kprime, np.ascontiguousarray(a_bar),
            np.ascontiguousarray(b_bar), np.ascontiguousarray(g_bar),
            np.ascontiguousarray(u_out), np.ascontiguousarray(u_tok))
    if _backend == "numba":
        return _corrupt_nb(*args)
    return _corrupt_np(*args)


def reverse_mixture(p0, zt, a_s, b_s, g_s, a_p, b_p, g_p, a_n, b_n, g_n):
    """Mixture over clean-state predictions of exact step posteriors.

    p0 is (n, K) of normalized clean-state probabilities, zt the observed
    local states; returns (n, K+1) probabilities over the earlier states.
    """
    args = tuple(np.ascontiguousarray(x) for x in
                 (p0, zt, a_s, b_s, g_s, a_p, b_p, g_p, a_n, b_n, g_n))
    if _backend == "numba":
        return _mixture_nb(*args)
    return _mixture_np(*args)


def categorical_sample(probs, u):
    """Inverse-CDF draw per row; u are uniforms in [0, 1)."""
    probs = np.ascontiguousarray(probs)
    u = np.ascontiguousarray(u)
    if _backend == "numba":
        return _categorical_nb(probs, u)
    return _categorical_np(probs, u)


def nucleus_truncate(probs, top_p):
    """Keep the smallest top-mass set reaching ``top_p``; renormalize.

    With ``top_p >= 1`` the input is returned unchanged (no-op contract).
    """
    if top_p >= 1.0:
        return probs
    probs = np.ascontiguousarray(probs)
    if _backend == "numba":
        return _nucleus_nb(probs, top_p)
    return _nucleus_np(probs, top_p)


def pairwise_iou(a, b):
    """IoU matrix between two (n, 4) / (m, 4) sets of (cx, cy, w, h) boxes."""
    a = np.ascontiguousarray(np.asarray(a, dtype=float))
    b = np.ascontiguousarray(np.asarray(b, dtype=float))
    if a.size == 0 or b.size == 0:
        return np.zeros((a.shape[0], b.shape[0]))
    if _backend == "numba":
        return _pairwise_iou_nb(a, b)
    return _pairwise_iou_np(a, b)
