"""Pseudo-validation masks, output-variance trackers and the stop automaton."""

import math
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _rng
from ._validation import image_array, same_shape
from .exceptions import BadFraction, BadK, BadParams, EmptyMask


@dataclass(frozen=True, eq=False)
class MaskSet:
    train_mask: np.ndarray
    val_mask: np.ndarray
    fraction: float
    seed: int
    fold_index: int = None


def _round_half_up(x):
    return int(math.floor(x + 0.5))


def make_random_mask(rows, cols, fraction=0.05, seed=0):
    """Hold out exactly round(fraction * rows * cols) pixels, sampled without replacement."""
    if not 0.0 < fraction < 0.5:
        raise BadFraction(f"fraction must lie in (0, 0.5), got {fraction}")
    n = rows * cols
    n_val = _round_half_up(fraction * n)
    pick = _rng.stream(seed, _rng.MASK).permutation(n)[:n_val]
    val = np.zeros(n, dtype=bool)
    val[pick] = True
    val = val.reshape(rows, cols)
    return MaskSet(~val, val, fraction, seed)


def make_kfold_masks(rows, cols, k=8, seed=0):
    """Partition the pixels into ``k`` folds whose sizes differ by at most one."""
    n = rows * cols
    if not isinstance(k, (int, np.integer)) or k < 2 or k > n:
        raise BadK(f"k must be an integer in [2, {n}], got {k!r}")
    perm = _rng.stream(seed, _rng.KFOLD).permutation(n)
    out = []
    for i, fold in enumerate(np.array_split(perm, k)):
        val = np.zeros(n, dtype=bool)
        val[fold] = True
        val = val.reshape(rows, cols)
        out.append(MaskSet(~val, val, 1.0 / k, seed, fold_index=i))
    return out


def pseudo_val_loss(out, target, mask):
    """Mean squared error restricted to the held-out pixels."""
    o, t = image_array(out), image_array(target)
    same_shape(o, t)
    val = mask.val_mask if isinstance(mask, MaskSet) else np.asarray(mask, dtype=bool)
    if not val.any():
        raise EmptyMask("validation mask is empty")
    d = o[val] - t[val]
    return float(np.mean(d * d))


# variance trackers --------------------------------------------------------------


class VarianceTracker:
    """Running estimate of how much successive network outputs move.

    ``emv`` keeps an exponentially weighted average ``A`` of past outputs
    (``A <- (1 - 1/W) A + out / W``) and reports ``mean((out - A_prev)^2)``.
    ``wmv`` keeps the last ``W`` outputs and reports the pixel-averaged
    sample variance (ddof=1) across them.
    """

    def __init__(self, mode="emv", window=100):
        if mode not in ("emv", "wmv"):
            raise BadParams(f"mode must be 'emv' or 'wmv', got {mode!r}")
        if window < 1:
            raise BadParams("window must be >= 1")
        self.mode = mode
        self.window = int(window)
        self.average = None
        self.buffer = deque(maxlen=self.window)
        self.last = float("nan")

    def update(self, output):
        out = np.array(image_array(output))
        if self.mode == "emv":
            if self.average is None:
                self.average = out.copy()
                est = 0.0
            else:
                d = out - self.average
                est = float(np.mean(d * d))
                self.average += d / self.window
        else:
            self.buffer.append(out)
            if len(self.buffer) < 2:
                est = 0.0
            else:
                # shifting by one stored output keeps a constant stream exactly at zero
                stack = np.stack(self.buffer)
                est = float(np.mean(np.var(stack - stack[0], axis=0, ddof=1)))
        self.last = est
        return est


# stop automaton -------------------------------------------------------------------


@dataclass(frozen=True)
class ESConfig:
    enabled: bool = True
    mode: str = "emv"
    window: int = 100
    patience: int = 50
    rel_improvement: float = 1e-4
    rule: str = "and"

    def __post_init__(self):
        if self.mode not in ("emv", "wmv"):
            raise BadParams(f"unknown variance mode {self.mode!r}")
        if self.rule not in ("and", "or"):
            raise BadParams(f"rule must be 'and' or 'or', got {self.rule!r}")
        if self.patience < 1 or self.window < 1:
            raise BadParams("patience and window must be >= 1")


@dataclass
class StopReport:
    best_iter: int
    stop_iter: int
    trigger: str
    emv_peak_iter: int
    best_pvl: float
    max_var: float
    relative_gap: float

    def to_dict(self):
        return asdict(self)


@dataclass
class StopState:
    """Patience counters over the (variance, pseudo-validation loss) trace.

    Counters saturate at ``patience``; the hybrid rule fires when both are
    saturated (``rule='and'``) or either is (``rule='or'``).
    """

    patience: int = 50
    rel_improvement: float = 1e-4
    rule: str = "and"
    max_iters: int = None
    max_var: float = -math.inf
    best_pvl: float = math.inf
    best_iter: int = None
    emv_peak_iter: int = None
    var_counter: int = 0
    pvl_counter: int = 0
    last_iter: int = None
    stopped: bool = False
    trigger: str = "none"
    history: list = field(default_factory=list)

    @classmethod
    def from_config(cls, es, max_iters=None):
        return cls(patience=es.patience, rel_improvement=es.rel_improvement, rule=es.rule, max_iters=max_iters)


def patience_step(state, variance, pvl, iteration):
    """Feed one evaluation; returns ``(decision, improved)``.

    ``decision`` is ``'stop'`` or ``'continue'``; ``improved`` is True when the
    pseudo-validation loss reached a new best (the caller snapshots then).
    """
    state.history.append((iteration, variance, pvl))
    state.last_iter = iteration
    if variance > state.max_var:
        state.max_var = variance
        state.emv_peak_iter = iteration
        state.var_counter = 0
    else:
        state.var_counter = min(state.var_counter + 1, state.patience)

    improved = pvl < state.best_pvl * (1.0 - state.rel_improvement) or state.best_iter is None
    if improved:
        state.best_pvl = pvl
        state.best_iter = iteration
        state.pvl_counter = 0
    else:
        state.pvl_counter = min(state.pvl_counter + 1, state.patience)

    pvl_stale = state.pvl_counter >= state.patience
    var_stale = state.emv_peak_iter is not None and state.var_counter >= state.patience
    fire = (pvl_stale and var_stale) if state.rule == "and" else (pvl_stale or var_stale)
    if fire:
        state.stopped, state.trigger = True, "hybrid" if state.rule == "and" else ("pvl" if pvl_stale else "variance")
    elif state.max_iters is not None and iteration >= state.max_iters:
        state.stopped, state.trigger = True, "max_iters"
    return ("stop" if state.stopped else "continue"), improved


def hybrid_decision(state):
    if state.best_iter is None:
        raise BadParams("no evaluation has been recorded")
    gap = abs(state.best_iter - state.emv_peak_iter) / max(state.best_iter, 1)
    return StopReport(
        best_iter=state.best_iter,
        stop_iter=state.last_iter,
        trigger=state.trigger,
        emv_peak_iter=state.emv_peak_iter,
        best_pvl=state.best_pvl,
        max_var=state.max_var,
        relative_gap=gap,
    )


def replay(trace, es=ESConfig(), max_iters=None):
    """Run the automaton over ``(iteration, variance, pvl)`` triples; stops at the first firing."""
    state = StopState.from_config(es, max_iters)
    for it, var, pvl in trace:
        decision, _ = patience_step(state, var, pvl, it)
        if decision == "stop" and es.enabled:
            break
    return hybrid_decision(state)
