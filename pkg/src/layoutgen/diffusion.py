"""Discrete mask-and-replace diffusion over modality-wise token chains.

Each modality runs its own absorbing-state chain: ``K'`` ordinary states
(the modality's tokens plus PAD) and one absorbing MASK state.  A step
keeps a token with probability ``alpha_t``, replaces it with a uniformly
chosen ordinary state with total probability ``K' * beta_t``, or absorbs it
into MASK with probability ``gamma_t``.  Products of such matrices stay in
the same family, so cumulative transitions have a three-parameter closed
form; the dense matrices are kept only as test oracles and for inspection.

The schedule is parameterized by its cumulative endpoints: the cumulative
keep mass decays linearly to ``alpha_bar_T`` and the cumulative mask mass
grows linearly to ``gamma_bar_T``; per-step rates are recovered as ratios.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import DataError, NumericError
from .vocab import MODALITIES, Vocabulary

ALPHA_BAR_T = 1e-5
GAMMA_BAR_T = 0.9999


@dataclass(frozen=True)
class DiffusionSchedule:
    timesteps: int
    alpha_bar: np.ndarray = field(repr=False)  # (T+1,), alpha_bar[0] == 1
    gamma_bar: np.ndarray = field(repr=False)  # (T+1,), gamma_bar[0] == 0
    kprime: dict = field(default_factory=dict)  # modality -> ordinary states

    def step_params(self, t: int, modality: str, delta: int = 1):
        """(a, b, g) of the composed transition covering (t - delta, t]."""
        if not (1 <= t <= self.timesteps and 1 <= delta <= t):
            raise DataError("OUT_OF_RANGE", f"bad step (t={t}, delta={delta})")
        k = self.kprime[modality]
        a = self.alpha_bar[t] / self.alpha_bar[t - delta]
        g = 1.0 - (1.0 - self.gamma_bar[t]) / (1.0 - self.gamma_bar[t - delta])
        b = (1.0 - a - g) / k
        return a, b, g

    def cumulative_params(self, t: int, modality: str):
        """(a_bar, b_bar, g_bar) of the cumulative transition up to ``t``."""
        if not (0 <= t <= self.timesteps):
            raise DataError("OUT_OF_RANGE", f"t={t} outside [0, T]")
        k = self.kprime[modality]
        a = self.alpha_bar[t]
        g = self.gamma_bar[t]
        return a, (1.0 - a - g) / k, g

    def states(self, modality: str) -> int:
        return self.kprime[modality] + 1


def build_schedule(timesteps: int, kprime: dict, alpha_bar_T: float = ALPHA_BAR_T,
                   gamma_bar_T: float = GAMMA_BAR_T) -> DiffusionSchedule:
    """Linear-cumulative schedule; raises if any per-step rate is infeasible."""
    if timesteps < 1:
        raise DataError("OUT_OF_RANGE", "need at least one timestep")
    frac = np.arange(timesteps + 1) / timesteps
    alpha_bar = 1.0 + (alpha_bar_T - 1.0) * frac
    gamma_bar = gamma_bar_T * frac
    sched = DiffusionSchedule(timesteps, alpha_bar, gamma_bar, dict(kprime))
    for mod in kprime:
        for t in range(1, timesteps + 1):
            a, b, g = sched.step_params(t, mod)
            if b < -1e-12 or a < 0 or g < 0:
                raise NumericError("INFEASIBLE_SCHEDULE",
                                   f"negative rate at t={t} for {mod}")
    return sched


def schedule_for_vocab(timesteps: int, vocab: Vocabulary, **kw) -> DiffusionSchedule:
    return build_schedule(timesteps,
                          {m: vocab.ordinary_count(m) for m in MODALITIES}, **kw)


def _dense(a: float, b: float, g: float, k: int) -> np.ndarray:
    q = np.full((k + 1, k + 1), b)
    np.fill_diagonal(q, a + b)
    q[k, :] = g
    q[:, k] = 0.0
    q[k, k] = 1.0
    return q


def transition_matrix(sched: DiffusionSchedule, t: int, modality: str,
                      delta: int = 1) -> np.ndarray:
    """Dense column-stochastic transition for (t - delta, t]."""
    a, b, g = sched.step_params(t, modality, delta)
    return _dense(a, b, g, sched.kprime[modality])


def cumulative_matrix(sched: DiffusionSchedule, t: int, modality: str) -> np.ndarray:
    """Dense closed-form cumulative transition up to ``t``."""
    a, b, g = sched.cumulative_params(t, modality)
    return _dense(a, b, g, sched.kprime[modality])


# ---------------------------------------------------------------------------
# forward corruption
# ---------------------------------------------------------------------------

def _modality_positions(length: int):
    for m_idx, mod in enumerate(MODALITIES):
        yield mod, np.arange(m_idx, length, 5)


def corrupt(z0: np.ndarray, t, sched: DiffusionSchedule, vocab: Vocabulary,
            rng: np.random.Generator) -> np.ndarray:
    """Sample z_t from the cumulative corruption of clean tokens z_0.

    ``z0`` is (..., L) of global token ids with no MASK entries; ``t`` is a
    scalar or per-sequence array, 0 meaning identity.
    """
    z0 = np.asarray(z0)
    squeeze = z0.ndim == 1
    z = z0[None, :] if squeeze else z0
    tt = np.broadcast_to(np.asarray(t, dtype=np.int64), (z.shape[0],))
    out = np.empty_like(z)
    u_out = rng.random(z.shape)
    u_tok = rng.random(z.shape)
    for mod, pos in _modality_positions(z.shape[1]):
        loc = vocab.to_local(z[:, pos], mod)
        if np.any(loc == sched.kprime[mod]):
            raise DataError("INVALID_CONDITION", "z0 must not contain MASK")
        a = sched.alpha_bar[tt]
        g = sched.gamma_bar[tt]
        b = (1.0 - a - g) / sched.kprime[mod]
        rep = np.repeat
        npos = len(pos)
        zt_loc = kernels.corrupt_states(
            loc.ravel(), sched.kprime[mod],
            rep(a, npos), rep(b, npos), rep(g, npos),
            u_out[:, pos].ravel(), u_tok[:, pos].ravel())
        out[:, pos] = vocab.to_global(zt_loc.reshape(loc.shape), mod)
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# exact posterior and its mixtures
# ---------------------------------------------------------------------------

def posterior(zt: int, z0: int, t: int, modality: str, sched: DiffusionSchedule,
              delta: int = 1) -> np.ndarray:
    """q(z_{t-delta} | z_t, z_0) over the modality's local states.

    Reference implementation used as the building block of the reverse
    parameterization; ``zt``/``z0`` are local states (MASK = K').
    """
    k = sched.kprime[modality]
    a_s, b_s, g_s = sched.step_params(t, modality, delta)
    a_p, b_p, g_p = sched.cumulative_params(t - delta, modality)
    a_n, b_n, g_n = sched.cumulative_params(t, modality)
    if z0 == k:
        raise DataError("INVALID_CONDITION", "z0 cannot be MASK")
    evidence = g_n if zt == k else (a_n * (zt == z0) + b_n)
    if evidence <= 0.0:
        raise NumericError("ZERO_EVIDENCE", "q(z_t | z_0) is zero")
    states = np.arange(k + 1)
    c_prev = np.where(states == z0, a_p + b_p, b_p)
    c_prev[k] = g_p
    if zt == k:
        t_step = np.full(k + 1, g_s)
        t_step[k] = 1.0
    else:
        t_step = np.where(states == zt, a_s + b_s, b_s)
        t_step[k] = 0.0
    return t_step * c_prev / evidence


def _gather_step_arrays(sched, t, modality, delta, repeat):
    """Per-row (a_s..g_n) parameter arrays for a batch of timesteps."""
    t = np.asarray(t, dtype=np.int64)
    a_s = sched.alpha_bar[t] / sched.alpha_bar[t - delta]
    g_s = 1.0 - (1.0 - sched.gamma_bar[t]) / (1.0 - sched.gamma_bar[t - delta])
    k = sched.kprime[modality]
    b_s = (1.0 - a_s - g_s) / k
    a_p = sched.alpha_bar[t - delta]
    g_p = sched.gamma_bar[t - delta]
    b_p = (1.0 - a_p - g_p) / k
    a_n = sched.alpha_bar[t]
    g_n = sched.gamma_bar[t]
    b_n = (1.0 - a_n - g_n) / k
    out = []
    for arr in (a_s, b_s, g_s, a_p, b_p, g_p, a_n, b_n, g_n):
        arr = np.broadcast_to(np.asarray(arr, dtype=float), t.shape)
        out.append(np.repeat(arr, repeat) if repeat > 1 else arr.astype(float))
    return out


def probs_from_logits(logits: np.ndarray) -> np.ndarray:
    """Stable softmax along the last axis; -inf entries get probability 0."""
    m = np.max(logits, axis=-1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=-1, keepdims=True)


def _local_columns(vocab: Vocabulary, modality: str) -> np.ndarray:
    lo, hi = vocab.range_for(modality)
    return np.concatenate([np.arange(lo, hi), [vocab.pad_id]])


def fast_reverse_distribution(probs0: np.ndarray, zt: np.ndarray, t, delta: int,
                              sched: DiffusionSchedule, vocab: Vocabulary) -> np.ndarray:
    """Per-position distribution of z_{t-delta} given z_t and clean-state
    probabilities ``probs0``.

    ``probs0`` is (..., L, n_tokens) with per-position mass on the position's
    modality range plus PAD (MASK must carry none); ``zt`` is (..., L) global
    ids.  Mixes the exact (t-delta, t] posterior over the predicted clean
    states, which for ``delta == 1`` is the single-step reverse distribution.
    """
    probs0 = np.asarray(probs0, dtype=float)
    zt = np.asarray(zt)
    squeeze = zt.ndim == 1
    if squeeze:
        probs0, zt = probs0[None], zt[None]
    batch, length = zt.shape
    tt = np.broadcast_to(np.asarray(t, dtype=np.int64), (batch,))
    out = np.zeros_like(probs0)
    for mod, pos in _modality_positions(length):
        cols = _local_columns(vocab, mod)
        p0 = probs0[:, pos[:, None], cols].reshape(batch * len(pos), -1)
        zl = vocab.to_local(zt[:, pos], mod).ravel()
        params = _gather_step_arrays(sched, tt, mod, delta, len(pos))
        mix = kernels.reverse_mixture(p0, zl, *params)
        block = mix.reshape(batch, len(pos), -1)
        out[:, pos[:, None], cols] = block[:, :, :-1]
        out[:, pos, vocab.mask_id] = block[:, :, -1]
    return out[0] if squeeze else out


def reverse_distribution(probs0: np.ndarray, zt: np.ndarray, t,
                         sched: DiffusionSchedule, vocab: Vocabulary) -> np.ndarray:
    """Single-step reverse distribution p(z_{t-1} | z_t)."""
    return fast_reverse_distribution(probs0, zt, t, 1, sched, vocab)


# ---------------------------------------------------------------------------
# training loss
# ---------------------------------------------------------------------------

def _posterior_rows(zl, z0l, k, a_s, b_s, g_s, a_p, b_p, g_p, a_n, b_n, g_n):
    """Vectorized exact posteriors q(z_{t-1} | z_t, z_0) as (n, K'+1) rows."""
    n = zl.shape[0]
    states = np.arange(k + 1)[None, :]
    is_mask = (zl == k)[:, None]
    c_prev = np.where(states == z0l[:, None], (a_p + b_p)[:, None], b_p[:, None])
    c_prev[:, k] = g_p
    t_step = np.where(is_mask,
                      np.where(states == k, 1.0, g_s[:, None]),
                      np.where(states == zl[:, None], (a_s + b_s)[:, None], b_s[:, None]))
    t_step[~is_mask[:, 0], k] = 0.0
    evidence = np.where(zl == k, g_n, np.where(zl == z0l, a_n, 0.0) + b_n)
    return t_step * c_prev / evidence[:, None]


def training_loss(logits: np.ndarray, z0: np.ndarray, zt: np.ndarray, t,
                  sched: DiffusionSchedule, vocab: Vocabulary,
                  aux_weight: float = 0.1, with_grad: bool = False):
    """Per-step variational term plus weighted denoising cross-entropy.

    The variational term is the KL between the exact posterior
    q(z_{t-1} | z_t, z_0) and the model's reverse distribution, which at
    t = 1 degenerates to the negative log-likelihood of z_0.  The auxiliary
    term is -log of the predicted clean-state probability of z_0.  Averaged
    over positions; returns the scalar, the (vb, aux) pair, and optionally
    the gradient with respect to ``logits``.
    """
    logits = np.asarray(logits, dtype=float)
    squeeze = logits.ndim == 2
    if squeeze:
        logits, z0, zt = logits[None], np.asarray(z0)[None], np.asarray(zt)[None]
    batch, length, _ = logits.shape
    tt = np.broadcast_to(np.asarray(t, dtype=np.int64), (batch,))
    n_rows = batch * length
    vb_total = 0.0
    aux_total = 0.0
    grad = np.zeros_like(logits) if with_grad else None
    for mod, pos in _modality_positions(length):
        cols = _local_columns(vocab, mod)
        k = sched.kprime[mod]
        sub = logits[:, pos[:, None], cols].reshape(batch * len(pos), k)
        p0 = probs_from_logits(sub)
        zl = vocab.to_local(zt[:, pos], mod).ravel()
        z0l = vocab.to_local(z0[:, pos], mod).ravel()
        if np.any(z0l == k):
            raise DataError("INVALID_CONDITION", "z0 must not contain MASK")
        params = _gather_step_arrays(sched, tt, mod, 1, len(pos))
        q = _posterior_rows(zl, z0l, k, *params)
        p = kernels.reverse_mixture(p0, zl, *params)
        with np.errstate(divide="ignore", invalid="ignore"):
            log_ratio = np.where(q > 0, np.log(q) - np.log(p), 0.0)
        vb_rows = (q * log_ratio).sum(axis=1)
        rows = np.arange(len(z0l))
        p_true = p0[rows, z0l]
        aux_rows = -np.log(p_true)
        vb_total += vb_rows.sum()
        aux_total += aux_rows.sum()
        if with_grad:
            # dL/dp for the KL part, then through the (linear) mixture and softmax
            dldp = -q / np.maximum(p, 1e-300) / n_rows
            a_s, b_s, g_s, a_p, b_p, g_p, a_n, b_n, g_n = params
            states = np.arange(k + 1)[None, :]
            is_mask = (zl == k)[:, None]
            t_step = np.where(is_mask,
                              np.where(states == k, 1.0, g_s[:, None]),
                              np.where(states == zl[:, None],
                                       (a_s + b_s)[:, None], b_s[:, None]))
            t_step[~is_mask[:, 0], k] = 0.0
            r = dldp * t_step
            R = r[:, :k].sum(axis=1)
            r_mask = r[:, k]
            num = a_p[:, None] * r[:, :k] + (b_p * R + g_p * r_mask)[:, None]
            denom = np.where(is_mask, g_n[:, None],
                             np.where(states[:, :k] == zl[:, None], a_n[:, None], 0.0)
                             + b_n[:, None])
            dldp0 = num / denom
            dldp0[rows, z0l] += -aux_weight / p_true / n_rows
            dsub = p0 * (dldp0 - (dldp0 * p0).sum(axis=1, keepdims=True))
            grad[:, pos[:, None], cols] = dsub.reshape(batch, len(pos), k)
    vb = vb_total / n_rows
    aux = aux_total / n_rows
    loss = vb + aux_weight * aux
    if not np.isfinite(loss):
        raise NumericError("NONFINITE_LOSS", "training loss is not finite")
    if with_grad:
        return loss, (vb, aux), (grad[0] if squeeze else grad)
    return loss, (vb, aux)
