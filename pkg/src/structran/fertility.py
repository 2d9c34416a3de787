"""Latent-fertility dynamic programs.

Each source token i draws a copy count f_i from a categorical over 0..d.
With dummy boundary tokens f_0 = f_{n+1} = 0, the forward table gives
P(f_0 + .. + f_i = h) by discrete convolution, the backward table the
suffix analogue, and conditioning the total on an output length l yields
the marginal copy-alignment tensor

    F[i][j][u] = P(output slot j is the u-th copy of input i | total = l).

The DP runs in the linear probability domain.  Rows are rescaled by their
maxima (a constant per-row factor that cancels in every ratio below), which
keeps the dominant mass near 1; a guard still detects underflow of the
conditioned normalizer and recomputes that case in log space.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DomainError, Node

UNDERFLOW_GUARD = 1e-280
ROW_SUM_TOL = 1e-9


class InfeasibleLengthError(ValueError):
    """Requested output length has zero probability under the table."""

    def __init__(self, length: int, support: list[int]):
        self.length = length
        self.support = support
        super().__init__(
            f"output length {length} has zero probability; feasible lengths: {support}")


@dataclass
class FertilityTable:
    """Per-token fertility distributions: probs[i][r] = P(f_i = r), r in 0..d."""

    probs: Node

    def __post_init__(self):
        v = self.probs.value
        if v.ndim != 2 or v.shape[1] < 2:
            raise DomainError(f"fertility table must be (n, d+1) with d >= 1, got {v.shape}")
        if np.any(v < 0.0):
            raise DomainError("fertility probabilities must be nonnegative")
        if np.any(np.abs(v.sum(axis=1) - 1.0) > ROW_SUM_TOL):
            raise DomainError("fertility rows must sum to 1")

    @property
    def n(self) -> int:
        return self.probs.value.shape[0]

    @property
    def d(self) -> int:
        return self.probs.value.shape[1] - 1

    @property
    def max_length(self) -> int:
        return self.n * self.d


@dataclass
class LengthTables:
    """Prefix/suffix total-count tables, rows 0..n+1 over totals 0..n*d."""

    forward: Node
    backward: Node


@dataclass
class MarginalFertility:
    """tensor[i][j][u] = P(slot j+1 is copy u+1 of token i+1 | total = length)."""

    tensor: Node
    length: int


class _OpCounter:
    __slots__ = ("enabled", "count")

    def __init__(self):
        self.enabled = False
        self.count = 0


counter = _OpCounter()


@contextlib.contextmanager
def count_marginal_ops():
    """Count inner multiply-add span lengths of the marginal computation."""
    counter.enabled, counter.count = True, 0
    try:
        yield counter
    finally:
        counter.enabled = False


# ---------------------------------------------------------------------------
# rescaled linear-domain sweeps

def _rescale(p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    r = p.max(axis=1)
    if np.any(r <= 0.0):
        raise DomainError("fertility row with no positive mass")
    return p / r[:, None], r


def _sweeps(phat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n, dp1 = phat.shape
    big = n * (dp1 - 1)
    f = np.zeros((n + 2, big + 1))
    f[0, 0] = 1.0
    for i in range(1, n + 1):
        row = phat[i - 1]
        for r in range(dp1):
            if row[r] != 0.0:
                f[i, r:] += row[r] * f[i - 1, :big + 1 - r]
    f[n + 1] = f[n]
    b = np.zeros((n + 2, big + 1))
    b[n + 1, 0] = 1.0
    for i in range(n, 0, -1):
        row = phat[i - 1]
        for r in range(dp1):
            if row[r] != 0.0:
                b[i, r:] += row[r] * b[i + 1, :big + 1 - r]
    b[0] = b[1]
    return f, b


def _sweep_adjoint_forward(df: np.ndarray, f: np.ndarray, phat: np.ndarray) -> np.ndarray:
    """Adjoint of the f recursion; df is consumed in place, returns dphat."""
    n, dp1 = phat.shape
    big = f.shape[1] - 1
    dphat = np.zeros_like(phat)
    for i in range(n, 0, -1):
        for r in range(dp1):
            seg = df[i, r:]
            dphat[i - 1, r] += float(seg @ f[i - 1, :big + 1 - r])
            if phat[i - 1, r] != 0.0:
                df[i - 1, :big + 1 - r] += phat[i - 1, r] * seg
    return dphat


def _sweep_adjoint_backward(db: np.ndarray, b: np.ndarray, phat: np.ndarray) -> np.ndarray:
    n, dp1 = phat.shape
    big = b.shape[1] - 1
    dphat = np.zeros_like(phat)
    for i in range(1, n + 1):
        for r in range(dp1):
            seg = db[i, r:]
            dphat[i - 1, r] += float(seg @ b[i + 1, :big + 1 - r])
            if phat[i - 1, r] != 0.0:
                db[i + 1, :big + 1 - r] += phat[i - 1, r] * seg
    return dphat


def _numerators(phat: np.ndarray, f: np.ndarray, b: np.ndarray, length: int) -> np.ndarray:
    n, dp1 = phat.shape
    d = dp1 - 1
    num = np.zeros((n, length, d))
    for i in range(1, n + 1):
        for u in range(1, d + 1):
            for v in range(0, d - u + 1):
                w = u + v
                jlo, jhi = u, min(length, length - v)
                if jhi < jlo or phat[i - 1, w] == 0.0:
                    continue
                if counter.enabled:
                    counter.count += jhi - jlo + 1
                a = f[i - 1, jlo - u:jhi - u + 1]
                bb = b[i + 1, length - jhi - v:length - jlo - v + 1][::-1]
                num[i - 1, jlo - 1:jhi, u - 1] += phat[i - 1, w] * a * bb
    return num


def _support(f: np.ndarray) -> list[int]:
    return [h for h in range(1, f.shape[1]) if f[-1, h] > 0.0]


# ---------------------------------------------------------------------------
# log-space fallback (underflowed normalizers)

def _log_lse(cols: np.ndarray) -> np.ndarray:
    m = cols.max(axis=0)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.exp(cols - safe).sum(axis=0)) + safe
    return np.where(np.isfinite(m), out, -np.inf)


def _log_sweeps(logp: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n, dp1 = logp.shape
    big = n * (dp1 - 1)
    neg = -np.inf
    lf = np.full((n + 2, big + 1), neg)
    lf[0, 0] = 0.0
    buf = np.empty((dp1, big + 1))
    for i in range(1, n + 1):
        buf.fill(neg)
        for r in range(dp1):
            buf[r, r:] = logp[i - 1, r] + lf[i - 1, :big + 1 - r]
        lf[i] = _log_lse(buf)
    lf[n + 1] = lf[n]
    lb = np.full((n + 2, big + 1), neg)
    lb[n + 1, 0] = 0.0
    for i in range(n, 0, -1):
        buf.fill(neg)
        for r in range(dp1):
            buf[r, r:] = logp[i - 1, r] + lb[i + 1, :big + 1 - r]
        lb[i] = _log_lse(buf)
    lb[0] = lb[1]
    return lf, lb


def _log_sweep_adjoint_forward(dlf: np.ndarray, lf: np.ndarray, logp: np.ndarray) -> np.ndarray:
    """Adjoint of the log-space f recursion: weights are softmax terms in [0,1]."""
    n, dp1 = logp.shape
    big = lf.shape[1] - 1
    dlogp = np.zeros_like(logp)
    for i in range(n, 0, -1):
        cur = lf[i]
        for r in range(dp1):
            if not np.isfinite(logp[i - 1, r]):
                continue
            prev = lf[i - 1, :big + 1 - r]
            with np.errstate(invalid="ignore"):
                w = np.exp(logp[i - 1, r] + prev - cur[r:])
            w = np.where(np.isfinite(prev) & np.isfinite(cur[r:]), w, 0.0)
            seg = dlf[i, r:] * w
            dlogp[i - 1, r] += float(seg.sum())
            dlf[i - 1, :big + 1 - r] += seg
    return dlogp


def _log_sweep_adjoint_backward(dlb: np.ndarray, lb: np.ndarray, logp: np.ndarray) -> np.ndarray:
    n, dp1 = logp.shape
    big = lb.shape[1] - 1
    dlogp = np.zeros_like(logp)
    for i in range(1, n + 1):
        cur = lb[i]
        for r in range(dp1):
            if not np.isfinite(logp[i - 1, r]):
                continue
            nxt = lb[i + 1, :big + 1 - r]
            with np.errstate(invalid="ignore"):
                w = np.exp(logp[i - 1, r] + nxt - cur[r:])
            w = np.where(np.isfinite(nxt) & np.isfinite(cur[r:]), w, 0.0)
            seg = dlb[i, r:] * w
            dlogp[i - 1, r] += float(seg.sum())
            dlb[i + 1, :big + 1 - r] += seg
    return dlogp


def _marginal_log_space(p: np.ndarray, length: int):
    """Values plus a backward closure for the underflowed regime."""
    n, dp1 = p.shape
    d = dp1 - 1
    with np.errstate(divide="ignore"):
        logp = np.log(p)
    lf, lb = _log_sweeps(logp)
    logz = lf[n, length]
    if not np.isfinite(logz):
        raise InfeasibleLengthError(length, [h for h in range(1, lf.shape[1])
                                             if np.isfinite(lf[n, h])])
    parts = np.full((d, n, length, d), -np.inf)  # indexed [v][i][j][u]
    for i in range(1, n + 1):
        for u in range(1, d + 1):
            for v in range(0, d - u + 1):
                w = u + v
                jlo, jhi = u, length - v
                if jhi < jlo or not np.isfinite(logp[i - 1, w]):
                    continue
                a = lf[i - 1, jlo - u:jhi - u + 1]
                bb = lb[i + 1, length - jhi - v:length - jlo - v + 1][::-1]
                parts[v, i - 1, jlo - 1:jhi, u - 1] = logp[i - 1, w] + a + bb
    lognum = _log_lse(parts.reshape(d, -1)).reshape(n, length, d)
    marg = np.exp(np.where(np.isfinite(lognum), lognum - logz, -np.inf))

    def backward_into(gmarg: np.ndarray) -> np.ndarray:
        dlognum = gmarg * marg
        dlogz = -float(dlognum.sum())
        dlf = np.zeros_like(lf)
        dlb = np.zeros_like(lb)
        dlogp = np.zeros_like(logp)
        dlf[n, length] += dlogz
        with np.errstate(invalid="ignore"):
            wparts = np.exp(parts - lognum[None])
        wparts = np.where(np.isfinite(parts), wparts, 0.0)
        for i in range(1, n + 1):
            for u in range(1, d + 1):
                for v in range(0, d - u + 1):
                    w = u + v
                    jlo, jhi = u, length - v
                    if jhi < jlo or not np.isfinite(logp[i - 1, w]):
                        continue
                    seg = dlognum[i - 1, jlo - 1:jhi, u - 1] * wparts[v, i - 1, jlo - 1:jhi, u - 1]
                    dlogp[i - 1, w] += float(seg.sum())
                    dlf[i - 1, jlo - u:jhi - u + 1] += seg
                    dlb[i + 1, length - jhi - v:length - jlo - v + 1] += seg[::-1]
        dlogp += _log_sweep_adjoint_forward(dlf, lf, logp)
        dlogp += _log_sweep_adjoint_backward(dlb, lb, logp)
        return np.where(p > 0.0, dlogp / np.where(p > 0.0, p, 1.0), 0.0)

    return marg, backward_into


# ---------------------------------------------------------------------------
# public ops

def length_tables(ft: FertilityTable) -> LengthTables:
    """Forward and backward total-count tables at true probability scale."""
    p = ft.probs.value
    n = ft.n
    phat, r = _rescale(p)
    f, b = _sweeps(phat)
    fscale = np.concatenate([np.cumprod(np.concatenate([[1.0], r])), [np.prod(r)]])
    bscale = np.concatenate([[np.prod(r)],
                             np.cumprod(np.concatenate([[1.0], r[::-1]]))[::-1]])
    ftrue = f * fscale[:, None]
    btrue = b * bscale[:, None]

    def bw_f(g):
        df = g * fscale[:, None]
        df[n] += df[n + 1]
        dphat = _sweep_adjoint_forward(df, f, phat)
        ad._acc(ft.probs, dphat / r[:, None])

    def bw_b(g):
        db = g * bscale[:, None]
        db[1] += db[0]
        dphat = _sweep_adjoint_backward(db, b, phat)
        ad._acc(ft.probs, dphat / r[:, None])

    fnode = ad.make_node(ftrue, (ft.probs,), bw_f)
    bnode = ad.make_node(btrue, (ft.probs,), bw_b)
    return LengthTables(forward=fnode, backward=bnode)


def length_distribution(ft: FertilityTable) -> Node:
    """P(total output length = h) for h in 0..n*d; sums to 1."""
    p = ft.probs.value
    n = ft.n
    phat, r = _rescale(p)
    f, _ = _sweeps(phat)
    scale = float(np.prod(r))
    dist = f[n + 1] * scale

    def bw(g):
        df = np.zeros_like(f)
        df[n] = g * scale
        dphat = _sweep_adjoint_forward(df, f, phat)
        ad._acc(ft.probs, dphat / r[:, None])

    return ad.make_node(dist, (ft.probs,), bw)


def log_length_probability(ft: FertilityTable, length: int) -> Node:
    """log P(total = length), stable even when the linear value underflows."""
    p = ft.probs.value
    n, d = ft.n, ft.d
    if length < 1 or length > n * d:
        raise InfeasibleLengthError(length, list(range(1, n * d + 1)))
    phat, r = _rescale(p)
    f, _ = _sweeps(phat)
    zhat = f[n, length]
    if zhat == 0.0:
        raise InfeasibleLengthError(length, _support(f))
    if zhat >= UNDERFLOW_GUARD:
        value = np.asarray(np.log(zhat) + np.log(r).sum())

        def bw(g):
            df = np.zeros_like(f)
            df[n, length] = float(g) / zhat
            dphat = _sweep_adjoint_forward(df, f, phat)
            ad._acc(ft.probs, dphat / r[:, None])

        return ad.make_node(value, (ft.probs,), bw)

    with np.errstate(divide="ignore"):
        logp = np.log(p)
    lf, _ = _log_sweeps(logp)
    value = np.asarray(lf[n, length])

    def bw_log(g):
        dlf = np.zeros_like(lf)
        dlf[n, length] = float(g)
        dlogp = _log_sweep_adjoint_forward(dlf, lf, logp)
        ad._acc(ft.probs, np.where(p > 0.0, dlogp / np.where(p > 0.0, p, 1.0), 0.0))

    return ad.make_node(value, (ft.probs,), bw_log)


def marginal_fertility(ft: FertilityTable, length: int) -> MarginalFertility:
    """Marginal copy-alignment tensor conditioned on the output length.

    tensor[i][j][u] (0-based) is the posterior probability that output slot
    j+1 is the (u+1)-th copy of input token i+1 given total length.  Columns
    are distributions: sum_{i,u} tensor[i][j][u] = 1 for every j.
    """
    p = ft.probs.value
    n, d = ft.n, ft.d
    if length < 1 or length > n * d:
        raise InfeasibleLengthError(length, list(range(1, n * d + 1)))
    phat, r = _rescale(p)
    f, b = _sweeps(phat)
    zhat = f[n + 1, length]
    if zhat == 0.0:
        raise InfeasibleLengthError(length, _support(f))

    if zhat < UNDERFLOW_GUARD:
        marg, backward_into = _marginal_log_space(p, length)

        def bw_fallback(g):
            ad._acc(ft.probs, backward_into(g))

        return MarginalFertility(ad.make_node(marg, (ft.probs,), bw_fallback), length)

    num = _numerators(phat, f, b, length)
    marg = num / zhat

    def bw(g):
        dnum = g / zhat
        dz = -float((g * num).sum()) / (zhat * zhat)
        df = np.zeros_like(f)
        db = np.zeros_like(b)
        dphat = np.zeros_like(phat)
        df[n, length] += dz
        for i in range(1, n + 1):
            for u in range(1, d + 1):
                for v in range(0, d - u + 1):
                    w = u + v
                    jlo, jhi = u, length - v
                    if jhi < jlo or phat[i - 1, w] == 0.0:
                        continue
                    a = f[i - 1, jlo - u:jhi - u + 1]
                    bb = b[i + 1, length - jhi - v:length - jlo - v + 1][::-1]
                    seg = dnum[i - 1, jlo - 1:jhi, u - 1]
                    dphat[i - 1, w] += float(seg @ (a * bb))
                    df[i - 1, jlo - u:jhi - u + 1] += seg * phat[i - 1, w] * bb
                    db[i + 1, length - jhi - v:length - jlo - v + 1] += \
                        (seg * phat[i - 1, w] * a)[::-1]
        dphat += _sweep_adjoint_forward(df, f, phat)
        dphat += _sweep_adjoint_backward(db, b, phat)
        ad._acc(ft.probs, dphat / r[:, None])

    return MarginalFertility(ad.make_node(marg, (ft.probs,), bw), length)


def expected_fertilities(mf: MarginalFertility) -> Node:
    """E[f_i | total = length] per token; sums to the length."""
    return ad.sum_(ad.sum_(mf.tensor, axis=2), axis=1)
