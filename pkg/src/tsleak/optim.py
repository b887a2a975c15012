"""Optimizers over raw numpy parameter arrays.

The graph engine stays out of here: callers evaluate losses/gradients via
closures and these classes only shape the update. Both optimizers are
deterministic given identical inputs.
"""

from __future__ import annotations

import math
from collections import deque
from typing import Callable, Sequence

import numpy as np

Closure = Callable[[list[np.ndarray]], tuple[float, list[np.ndarray]]]


class LineSearchError(RuntimeError):
    """L-BFGS could not find a step that decreases the objective."""


class Adam:
    """Adam with optional cosine decay of the learning rate.

    When ``lr_end`` and ``total_steps`` are set the step size follows
    lr_end + 0.5*(lr-lr_end)*(1+cos(pi*t/total_steps)).
    """

    def __init__(
        self,
        lr: float = 0.01,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        lr_end: float | None = None,
        total_steps: int | None = None,
    ):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.lr_end = lr_end
        self.total_steps = total_steps
        self.t = 0
        self._m: list[np.ndarray] | None = None
        self._v: list[np.ndarray] | None = None

    def current_lr(self) -> float:
        if self.lr_end is None or not self.total_steps:
            return self.lr
        frac = min(self.t / max(self.total_steps, 1), 1.0)
        return self.lr_end + 0.5 * (self.lr - self.lr_end) * (1.0 + math.cos(math.pi * frac))

    def step(self, values: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> list[np.ndarray]:
        if self._m is None:
            self._m = [np.zeros_like(v) for v in values]
            self._v = [np.zeros_like(v) for v in values]
        lr = self.current_lr()
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        out = []
        for i, (v, g) in enumerate(zip(values, grads)):
            self._m[i] = b1 * self._m[i] + (1 - b1) * g
            self._v[i] = b2 * self._v[i] + (1 - b2) * g * g
            m_hat = self._m[i] / bias1
            v_hat = self._v[i] / bias2
            out.append(v - lr * m_hat / (np.sqrt(v_hat) + self.eps))
        return out


class LBFGS:
    """Limited-memory BFGS with backtracking (Armijo) line search.

    ``step`` performs one outer iteration; each call costs one gradient
    evaluation plus one function evaluation per backtrack. Raises
    :class:`LineSearchError` when backtracking exhausts its budget, so the
    caller can switch strategies.
    """

    def __init__(
        self,
        history: int = 10,
        lr: float = 1.0,
        c1: float = 1e-4,
        max_backtracks: int = 25,
    ):
        self.history = history
        self.lr = lr
        self.c1 = c1
        self.max_backtracks = max_backtracks
        self._s: deque[np.ndarray] = deque(maxlen=history)
        self._y: deque[np.ndarray] = deque(maxlen=history)
        self._prev_x: np.ndarray | None = None
        self._prev_g: np.ndarray | None = None
        self.n_evals = 0

    @staticmethod
    def _flatten(arrays: Sequence[np.ndarray]) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for a in arrays])

    @staticmethod
    def _unflatten(flat: np.ndarray, like: Sequence[np.ndarray]) -> list[np.ndarray]:
        out, i = [], 0
        for a in like:
            out.append(flat[i : i + a.size].reshape(a.shape))
            i += a.size
        return out

    def _direction(self, g: np.ndarray) -> np.ndarray:
        q = g.copy()
        alphas = []
        for s, y in zip(reversed(self._s), reversed(self._y)):
            rho = 1.0 / float(y @ s)
            a = rho * float(s @ q)
            alphas.append((a, rho, s, y))
            q -= a * y
        if self._s:
            s, y = self._s[-1], self._y[-1]
            q *= float(s @ y) / float(y @ y)
        for a, rho, s, y in reversed(alphas):
            b = rho * float(y @ q)
            q += (a - b) * s
        return -q

    def step(self, values: Sequence[np.ndarray], closure: Closure) -> tuple[list[np.ndarray], float]:
        """Advance one iteration; returns (new values, loss at entry)."""
        x0 = self._flatten(values)
        f0, grads = closure(list(values))
        self.n_evals += 1
        g0 = self._flatten(grads)

        if self._prev_x is not None:
            s = x0 - self._prev_x
            y = g0 - self._prev_g
            if float(s @ y) > 1e-10:
                self._s.append(s)
                self._y.append(y)
        self._prev_x, self._prev_g = x0, g0

        d = self._direction(g0)
        slope = float(g0 @ d)
        if not np.isfinite(slope) or slope >= 0:
            self._s.clear()
            self._y.clear()
            d = -g0
            slope = -float(g0 @ g0)
        if slope == 0.0:
            return list(values), f0  # stationary point

        alpha = self.lr
        for _ in range(self.max_backtracks):
            x1 = x0 + alpha * d
            f1, _ = closure(self._unflatten(x1, values))
            self.n_evals += 1
            if np.isfinite(f1) and f1 <= f0 + self.c1 * alpha * slope:
                return self._unflatten(x1, values), f0
            alpha *= 0.5
        raise LineSearchError(f"no acceptable step along search direction (f0={f0:.3e})")
