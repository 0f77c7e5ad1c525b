"""Autofocus policies sharing one loop: observe a frame, return the next focus command.

Every controller implements ``reset(...)`` and
``observe(image, prev_focus_dpt, roi=None) -> ControllerDecision``. Search
baselines score frames with the masked Tenengrad over ``roi`` (the ground-truth
mask handed to them by the harness); the learned controller sees pixels only.
"""
from dataclasses import dataclass, field
import math

import numpy as np

from .metrics import tenengrad
from .model.network import ModelParams, RecurrentState, forward_step
from .optics import LensConfig

CONTROLLER_NAMES = ("fibonacci", "hillclimb", "learned")


@dataclass
class ControllerDecision:
    next_focus_dpt: float
    terminated: bool = False
    debug: dict = field(default_factory=dict)


def fibonacci_numbers(limit):
    """F_1 = F_2 = 1, ... up to the first value >= ``limit``."""
    fib = [1, 1]
    while fib[-1] < limit:
        fib.append(fib[-1] + fib[-2])
    return fib


def fib(k):
    a, b = 1, 1
    for _ in range(k - 1):
        a, b = b, a + b
    return a


def min_fib_index(n):
    """Smallest k with F_k >= n."""
    k = 1
    while fib(k) < n:
        k += 1
    return k


@dataclass(frozen=True)
class FibonacciPlan:
    n_positions: int
    probe_count: int        # minimal k with F_k >= n_positions: evaluation bound
    bracket_index: int      # j with F_j >= n_positions - 1: bracket length used
    max_evaluations: int
    truncated: bool


def fibonacci_plan(n_positions, budget=None):
    """Evaluation plan for a Fibonacci search over ``n_positions`` indices.

    The two end frames are probed first; the interior search then runs on a
    bracket of length F_j covering [0, n-1] with virtual -inf padding, which
    costs j - 2 more evaluations (j >= 4) or one (j == 3).
    """
    if n_positions < 2:
        raise ValueError("need at least 2 positions")
    k = min_fib_index(n_positions)
    j = min_fib_index(n_positions - 1)
    need = 2 + (max(j - 2, 0) if j >= 4 else (1 if j == 3 else 0))
    if budget is not None and budget < need:
        return FibonacciPlan(n_positions, k, j, budget, True)
    return FibonacciPlan(n_positions, k, j, need, False)


class FibonacciSearch:
    """Index-space Fibonacci search for the maximum of a unimodal sequence.

    Drive it with ``next_probe()`` / ``report(index, value)`` until
    ``next_probe()`` returns None; ``best()`` then holds the result.
    """

    def __init__(self, n_positions, budget=None):
        self.plan = fibonacci_plan(n_positions, budget)
        self.n = n_positions
        self.values = {}
        self._endpoints = [0, n_positions - 1]
        self.lo = 0
        self.hi = fib(self.plan.bracket_index)   # open bracket (lo, hi)
        self.x1 = self.x2 = None
        self.phase = "endpoints"

    @property
    def evaluations(self):
        return len(self.values)

    def _value(self, i):
        if i >= self.n:
            return -math.inf
        return self.values.get(i)

    def interval(self):
        return self.lo, min(self.hi, self.n - 1)

    def _advance(self):
        """Move the bracket using cached values; return the next index to evaluate or None."""
        while True:
            if self.phase == "endpoints":
                for e in self._endpoints:
                    if e not in self.values:
                        return e
                self.phase = "search"
            if self.phase == "converged":
                return None
            if self.plan.truncated and self.evaluations >= self.plan.max_evaluations:
                self.phase = "converged"
                return None
            length = self.hi - self.lo
            if length <= 1:
                self.phase = "converged"
                return None
            if length == 2:
                mid = self.lo + 1
                if self._value(mid) is None:
                    return mid
                self.phase = "converged"
                return None
            if self.x1 is None:
                self.x1 = self.lo + fib_prev(length, 2)
                self.x2 = self.lo + fib_prev(length, 1)
            for x in (self.x1, self.x2):
                if self._value(x) is None:
                    return x
            v1, v2 = self._value(self.x1), self._value(self.x2)
            if v1 >= v2:
                self.hi = self.x2
                self.x2 = self.x1
                new_len = self.hi - self.lo
                self.x1 = self.lo + fib_prev(new_len, 2) if new_len > 2 else None
                if self.x1 is None:
                    self.x2 = None
            else:
                self.lo = self.x1
                self.x1 = self.x2
                new_len = self.hi - self.lo
                self.x2 = self.lo + fib_prev(new_len, 1) if new_len > 2 else None
                if self.x2 is None:
                    self.x1 = None

    def next_probe(self):
        return self._advance()

    def report(self, index, value):
        self.values[int(index)] = float(value)

    def best(self):
        """Best evaluated index; ties go to the lower index."""
        if not self.values:
            return None
        return max(sorted(self.values), key=lambda i: self.values[i])

    @property
    def converged(self):
        return self.phase == "converged"


def fib_prev(length, back):
    """For a Fibonacci ``length`` = F_j, return F_{j-back}."""
    seq = fibonacci_numbers(length)
    j = len(seq) - 1
    while seq[j] != length:
        j -= 1
    return seq[j - back]


def fibonacci_maximize(values, budget=None):
    """Run the search on a given sequence; returns (best index, search object)."""
    s = FibonacciSearch(len(values), budget)
    while True:
        i = s.next_probe()
        if i is None:
            return s.best(), s
        s.report(i, values[i])


class FibonacciController:
    """Fibonacci search over the stack positions, blind to object motion.

    The first observation (at whatever focus the episode starts) is not used;
    the search then probes the two end positions and narrows toward the peak.
    Once converged it repeats its final command.
    """

    name = "fibonacci"

    def __init__(self, positions_dpt, roi=None, input_shape=None, budget=None):
        self.positions = np.asarray(positions_dpt, dtype=np.float64)
        self.roi = roi
        self.input_shape = input_shape
        self.budget = budget
        self.reset()

    def reset(self, **_):
        self.search = FibonacciSearch(len(self.positions), self.budget)
        self.pending = None
        self.final = None

    def observe(self, image, prev_focus_dpt, roi=None):
        _check_shape(self, image)
        roi = self.roi if roi is None else roi
        if self.final is not None:
            return ControllerDecision(self.final, True, {"index": self.search.best()})
        if self.pending is not None:
            self.search.report(self.pending, tenengrad(image, roi))
        nxt = self.search.next_probe()
        if nxt is None:
            best = self.search.best()
            self.final = float(self.positions[best])
            self.pending = None
            return ControllerDecision(self.final, True, {"index": best, "evaluations": self.search.evaluations})
        self.pending = nxt
        return ControllerDecision(float(self.positions[nxt]), False,
                                  {"interval": self.search.interval(), "probe": nxt})


class HillClimbController:
    """Step along the focus axis while sharpness rises; reverse and halve on a drop."""

    name = "hillclimb"

    def __init__(self, step_dpt=0.5, spacing_dpt=5.0 / 79, lens=None, roi=None, input_shape=None):
        if not step_dpt > 0:
            raise ValueError("step_dpt must be > 0")
        self.step0 = step_dpt
        self.spacing = spacing_dpt
        self.lens = lens or LensConfig()
        self.roi = roi
        self.input_shape = input_shape
        self.reset()

    def reset(self, **_):
        self.step = self.step0
        self.direction = 1.0
        self.best = None        # (focus, value)
        self.done = False

    def observe(self, image, prev_focus_dpt, roi=None):
        _check_shape(self, image)
        roi = self.roi if roi is None else roi
        if self.done:
            return ControllerDecision(self.best[0], True)
        v = tenengrad(image, roi)
        f = self.lens.clamp(prev_focus_dpt)
        if self.best is None or v > self.best[1]:
            self.best = (f, v)
        else:
            self.direction = -self.direction
            self.step /= 2.0
        if self.step < self.spacing / 2.0:
            self.done = True
            return ControllerDecision(self.best[0], True)
        nxt = self.lens.clamp(self.best[0] + self.direction * self.step)
        if nxt == self.best[0]:
            # pinned against a range limit: turn around
            self.direction = -self.direction
            nxt = self.lens.clamp(self.best[0] + self.direction * self.step)
        return ControllerDecision(nxt, False, {"step": self.step})


class LearnedController:
    """Focus-step network in the loop: next = clamp(prev + delta_f)."""

    name = "learned"

    def __init__(self, params, lens=None):
        if not isinstance(params, ModelParams):
            raise TypeError("params must be ModelParams")
        self.params = params
        self.lens = lens or LensConfig()
        w, h = params.config.input_size
        self.input_shape = (h, w)
        self.reset()

    def reset(self, **_):
        self.state = RecurrentState.zeros(self.params.config, 1)

    def observe(self, image, prev_focus_dpt, roi=None):
        _check_shape(self, image)
        act = forward_step(self.params, image, self.state, keep_cache=False)
        self.state = act.state
        step = float(act.delta_f[0])
        return ControllerDecision(self.lens.clamp(prev_focus_dpt + step), False, {"delta_f": step})


class OracleController:
    """Commands the best reachable focus of the live episode (upper bound for tests)."""

    name = "oracle"

    def __init__(self):
        self.episode = None
        self.input_shape = None

    def reset(self, episode=None, **_):
        self.episode = episode

    def bind(self, episode):
        """Track the live episode state (the harness calls this after each capture)."""
        self.episode = episode

    def observe(self, image, prev_focus_dpt, roi=None):
        return ControllerDecision(self.episode.best_focus_dpt(), False)


def _check_shape(ctrl, image):
    shape = np.shape(image)
    if len(shape) != 2:
        raise ValueError("controllers observe single 2-D frames")
    if ctrl.input_shape is not None and tuple(shape) != tuple(ctrl.input_shape):
        raise ValueError(f"frame shape {shape} does not match configured input {tuple(ctrl.input_shape)}")


def make_controller(name, stack=None, lens=None, params=None, **kwargs):
    """Build a controller by its bench name."""
    lens = lens or LensConfig()
    shape = None if stack is None else stack.shape
    if name == "fibonacci":
        return FibonacciController(stack.focus_positions_dpt, stack.object_mask, shape, kwargs.get("budget"))
    if name == "hillclimb":
        return HillClimbController(kwargs.get("step_dpt", 0.5), stack.spacing_dpt, lens,
                                   stack.object_mask, shape)
    if name == "learned":
        if params is None:
            raise ValueError("the learned controller needs model parameters")
        return LearnedController(params, lens)
    if name == "oracle":
        return OracleController()
    raise ValueError(f"unknown controller {name!r}; expected one of {CONTROLLER_NAMES}")
