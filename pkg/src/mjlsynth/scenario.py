"""Sampling-based probability intervals for abstract transitions.

For a target point ``d`` the noiseless successor is ``d`` itself, so the
``W`` successor samples are ``d + w_i``. For every region ``j`` the number
of samples falling outside ``j`` (the out-count) is turned into a
confidence interval on the probability of landing in ``j``.
"""

import csv
from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple

import numpy as np
from scipy.special import betainc

from ._validation import check_positive_int, check_probability
from .geometry import label_state
from .model import draw_noise

BISECTION_TOL = 1e-9


class ProbInterval(NamedTuple):
    low: float
    high: float


@dataclass(frozen=True, eq=False)
class OutcomeCounts:
    """Per-region hit counts for one (mode, action); the last entry is absorbing."""

    counts: np.ndarray

    @property
    def total(self):
        return int(self.counts.sum())

    @property
    def absorbing(self):
        return int(self.counts[-1])


def count_outcomes(partition, d, samples):
    """Label the successors ``d + w`` and count hits per region."""
    regions = label_state(partition, np.asarray(d, dtype=float)[None, :] + np.asarray(samples, dtype=float))
    return OutcomeCounts(np.bincount(regions, minlength=partition.n_regions + 1))


def _bisect(fun, target, increasing, n_items):
    """Vectorised bisection of ``fun(p) = target`` over ``p`` in [0, 1].

    ``fun`` is compared to ``target`` in log space so tiny tail masses stay
    resolvable.
    """
    lo = np.zeros(n_items)
    hi = np.ones(n_items)
    log_target = np.log(target)
    with np.errstate(divide="ignore"):
        while np.max(hi - lo) > BISECTION_TOL * 1e-3:
            mid = 0.5 * (lo + hi)
            above = np.log(fun(mid)) > log_target
            if increasing:
                hi = np.where(above, mid, hi)
                lo = np.where(above, lo, mid)
            else:
                lo = np.where(above, mid, lo)
                hi = np.where(above, hi, mid)
    return 0.5 * (lo + hi)


def pac_bounds(W, n_out, beta):
    """Vectorised interval endpoints for out-counts ``n_out`` out of ``W`` samples.

    The lower bound solves ``beta / 2W = P[Bin(W, 1 - p) <= n_out]`` and the
    upper bound solves ``beta / 2W = P[Bin(W, 1 - p) >= n_out]``; both
    binomial tails are regularised incomplete beta functions. The lower
    bound is 0 when every sample is out and the upper bound is 1 when none
    is.
    """
    W = check_positive_int(W, "W")
    beta = check_probability(beta, "beta")
    n_out = np.atleast_1d(np.asarray(n_out))
    if np.any(n_out < 0) or np.any(n_out > W) or not np.issubdtype(n_out.dtype, np.integer):
        raise ValueError(f"out-counts must be integers in [0, {W}]")
    target = beta / (2 * W)
    low = np.zeros(n_out.shape)
    high = np.ones(n_out.shape)

    inner = n_out < W
    if inner.any():
        k = n_out[inner].astype(float)
        # P[Bin(W, 1-p) <= k] = I_p(W - k, k + 1), increasing in p
        low[inner] = _bisect(lambda p: betainc(W - k, k + 1, p), target, True, k.size)
    some = n_out > 0
    if some.any():
        k = n_out[some].astype(float)
        # P[Bin(W, 1-p) >= k] = I_{1-p}(k, W - k + 1), decreasing in p
        high[some] = _bisect(lambda p: betainc(k, W - k + 1, 1.0 - p), target, False, k.size)
    return low, high


@lru_cache(maxsize=64)
def pac_table(W, beta):
    """Interval endpoints for every out-count ``0..W`` (cached)."""
    low, high = pac_bounds(W, np.arange(W + 1), beta)
    low.setflags(write=False)
    high.setflags(write=False)
    return low, high


def pac_interval(W, n_out, beta):
    """Probability interval for a transition whose target was missed ``n_out`` times."""
    if isinstance(n_out, bool) or int(n_out) != n_out:
        raise ValueError("n_out must be an integer")
    low, high = pac_table(check_positive_int(W, "W"), check_probability(beta, "beta"))
    if not 0 <= n_out <= W:
        raise ValueError(f"n_out must lie in [0, {W}], got {n_out}")
    return ProbInterval(float(low[int(n_out)]), float(high[int(n_out)]))


def action_seed(seed, mode, action):
    """Independent stream per (mode, action), derived from the master seed."""
    return np.random.SeedSequence([int(seed), int(mode), int(action)])


@dataclass(frozen=True, eq=False)
class TransitionTable:
    """Sparse successor intervals per action of one mode.

    Action ``actions[k]`` owns entries ``ptr[k]:ptr[k+1]`` of ``succ``,
    ``count``, ``low`` and ``high``. Every action lists the regions hit at
    least once followed by the absorbing region, whose interval also covers
    the mass of every region that was never hit.
    """

    actions: np.ndarray
    ptr: np.ndarray
    succ: np.ndarray
    count: np.ndarray
    low: np.ndarray
    high: np.ndarray
    n_samples: int

    def lookup(self, action):
        k = int(np.searchsorted(self.actions, action))
        if k >= len(self.actions) or self.actions[k] != action:
            raise KeyError(f"action {action} has no transition data")
        sl = slice(self.ptr[k], self.ptr[k + 1])
        return self.succ[sl], self.low[sl], self.high[sl]

    @property
    def n_entries(self):
        return int(self.ptr[-1])

    def write_csv(self, fh, mode):
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["mode", "action", "successor", "count", "low", "high"])
        for k, a in enumerate(self.actions):
            for e in range(self.ptr[k], self.ptr[k + 1]):
                writer.writerow([mode, int(a), int(self.succ[e]), int(self.count[e]),
                                 repr(float(self.low[e])), repr(float(self.high[e]))])


def table_from_counts(actions, counts_list, n_samples, beta):
    """Assemble a :class:`TransitionTable` from per-action hit counts."""
    low_tab, high_tab = pac_table(n_samples, beta)
    ptr = [0]
    succ, count = [], []
    for counts in counts_list:
        absorbing = len(counts) - 1
        hit = np.flatnonzero(counts[:absorbing])
        s = np.append(hit, absorbing)
        succ.append(s)
        count.append(counts[s])
        ptr.append(ptr[-1] + len(s))
    succ = np.concatenate(succ) if succ else np.zeros(0, dtype=np.int64)
    count = np.concatenate(count) if count else np.zeros(0, dtype=np.int64)
    n_out = n_samples - count
    return TransitionTable(
        actions=np.asarray(actions, dtype=np.int64),
        ptr=np.asarray(ptr, dtype=np.int64),
        succ=succ.astype(np.int64),
        count=count.astype(np.int64),
        low=np.asarray(low_tab)[n_out],
        high=np.asarray(high_tab)[n_out],
        n_samples=n_samples,
    )


def build_mode_transitions(spec, partition, targets, mode, W, beta, seed, actions=None):
    """Sample ``W`` noise vectors per action and turn hit counts into intervals.

    ``actions`` defaults to every target index. Each action draws from its
    own stream derived from ``(seed, mode, action)``, so the table does not
    depend on which other actions are requested.
    """
    W = check_positive_int(W, "W")
    beta = check_probability(beta, "beta")
    targets = np.asarray(targets, dtype=float)
    if actions is None:
        actions = np.arange(targets.shape[0])
    actions = np.unique(np.asarray(actions, dtype=np.int64))
    counts_list = []
    for a in actions:
        rng = np.random.default_rng(action_seed(seed, mode, a))
        samples = draw_noise(spec, mode, W, rng)
        counts_list.append(count_outcomes(partition, targets[a], samples).counts)
    return table_from_counts(actions, counts_list, W, beta)
