"""Parameter containers and optimizers: gradient extraction, AdamW, L-BFGS.

ParameterStore is the single home for every trainable array in a network.
Iteration order is always lexicographic in the parameter name, which is what
makes optimizer runs and checkpoints reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import NonFiniteError, Tensor


class ParameterStore:
    """Ordered name -> Tensor map with per-parameter optimizer state."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.state: dict[str, dict] = {}

    def add(self, name: str, data, requires_grad: bool = True) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name: {name}")
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        for name in self.names():
            yield name, self._params[name]

    def zero_grads(self):
        for _, t in self.items():
            t.grad = None

    def copy_values(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.items()}

    def load_values(self, values: dict[str, np.ndarray]):
        for name, t in self.items():
            src = values[name]
            if src.shape != t.data.shape:
                raise ValueError(f"shape mismatch loading {name}: "
                                 f"{src.shape} vs {t.data.shape}")
            t.data = np.array(src, dtype=np.float64)


def grad(loss: Tensor, params: ParameterStore) -> dict[str, np.ndarray]:
    """Gradient of a scalar loss w.r.t. every requires-grad parameter.

    Parameters that do not participate in the loss map to zero arrays of the
    matching shape.
    """
    if loss.data.size != 1:
        raise ValueError("loss must be a scalar tensor")
    params.zero_grads()
    loss.backward()
    out = {}
    for name, t in params.items():
        if not t.requires_grad:
            continue
        out[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
    return out


def adamw_step(params: ParameterStore, grads: dict[str, np.ndarray], lr: float,
               weight_decay: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8
               ) -> ParameterStore:
    """One AdamW update with decoupled weight decay; moments live in the store."""
    b1, b2 = betas
    for name, t in params.items():
        if not t.requires_grad:
            continue
        g = grads[name]
        if g.shape != t.data.shape:
            raise ValueError(f"gradient shape mismatch for {name}: "
                             f"{g.shape} vs {t.data.shape}")
        st = params.state.setdefault(name, {
            "m": np.zeros_like(t.data),
            "v": np.zeros_like(t.data),
            "step": 0,
        })
        st["step"] += 1
        st["m"] = b1 * st["m"] + (1.0 - b1) * g
        st["v"] = b2 * st["v"] + (1.0 - b2) * g * g
        m_hat = st["m"] / (1.0 - b1 ** st["step"])
        v_hat = st["v"] / (1.0 - b2 ** st["step"])
        t.data = t.data - lr * m_hat / (np.sqrt(v_hat) + eps) - lr * weight_decay * t.data
    return params


def cosine_restart_lr(base_lr: float, epoch: int, restart_period: int = 10,
                      t_mult: int = 2) -> float:
    """Cosine-decayed learning rate with warm restarts.

    The restart period starts at ``restart_period`` epochs and is multiplied
    by ``t_mult`` after each restart.
    """
    period = restart_period
    e = epoch
    while e >= period:
        e -= period
        period *= t_mult
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * e / period))


@dataclass
class LbfgsResult:
    x: np.ndarray
    fx: float
    iterations: int
    converged: bool
    line_search_failed: bool


def lbfgs_minimize(f, x0: np.ndarray, max_iters: int = 100, history_size: int = 10,
                   tolerance: float = 1e-8) -> LbfgsResult:
    """L-BFGS with two-loop recursion and Armijo backtracking line search.

    ``f`` maps a flat vector to ``(value, gradient)``.  Stops when the
    gradient 2-norm drops to ``tolerance`` or after ``max_iters`` iterations.
    A failed line search returns the best point so far with a flag set.
    """
    c1 = 1e-4           # sufficient decrease
    contraction = 0.5
    max_backtracks = 40

    x = np.array(x0, dtype=np.float64).ravel()
    fx, g = f(x)
    if not (np.isfinite(fx) and np.all(np.isfinite(g))):
        raise NonFiniteError("objective is non-finite at the starting point")

    best_x, best_f = x.copy(), fx

    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    rho_hist: list[float] = []

    for it in range(max_iters):
        gnorm = float(np.linalg.norm(g))
        if gnorm <= tolerance:
            if best_f < fx:
                x, fx = best_x, best_f
            return LbfgsResult(x, fx, it, True, False)

        # two-loop recursion
        q = g.copy()
        alphas = []
        for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
            a = rho * s.dot(q)
            alphas.append(a)
            q -= a * y
        if s_hist:
            gamma = s_hist[-1].dot(y_hist[-1]) / y_hist[-1].dot(y_hist[-1])
            q *= gamma
        for (s, y, rho), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
            b = rho * y.dot(q)
            q += (a - b) * s
        d = -q

        dg = d.dot(g)
        if dg >= 0.0:       # not a descent direction; restart from steepest descent
            d = -g
            dg = -g.dot(g)
            s_hist, y_hist, rho_hist = [], [], []

        # Armijo with a machine-precision slack so the search does not stall
        # once true decreases drop below float64 resolution of the objective.
        slack = 4e-16 * max(1.0, abs(fx))

        def armijo(s, fv):
            return np.isfinite(fv) and fv <= fx + c1 * s * dg + slack

        step = 1.0
        x_new = x + step * d
        fx_new, g_new = f(x_new)
        accepted = armijo(step, fx_new)

        # One secant refinement of the step from the probe's gradient; exact
        # for quadratics, which is what makes the 2n-iteration bound hold.
        denom = float(d.dot(g_new) - dg)
        if denom > 0.0:
            alt = min(-dg / denom * step, 10.0 * step)
            if alt > 0.0:
                x_alt = x + alt * d
                fx_alt, g_alt = f(x_alt)
                if armijo(alt, fx_alt) and (not accepted or fx_alt < fx_new):
                    step, x_new, fx_new, g_new = alt, x_alt, fx_alt, g_alt
                    accepted = True

        if not accepted:
            for _ in range(max_backtracks):
                step *= contraction
                x_new = x + step * d
                fx_new, g_new = f(x_new)
                if armijo(step, fx_new):
                    accepted = True
                    break
        if not accepted:
            if best_f < fx:
                x, fx = best_x, best_f
            return LbfgsResult(x, fx, it, False, True)
        if fx_new < best_f:
            best_x, best_f = x_new.copy(), fx_new

        s = x_new - x
        y = g_new - g
        x, fx, g = x_new, fx_new, g_new
        sy = s.dot(y)
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            s_hist.append(s)
            y_hist.append(y)
            rho_hist.append(1.0 / sy)
            if len(s_hist) > history_size:
                s_hist.pop(0)
                y_hist.pop(0)
                rho_hist.pop(0)
        else:
            # Negative or vanishing curvature: the quadratic model is invalid
            # in this region, so start over rather than keep stale pairs.
            s_hist, y_hist, rho_hist = [], [], []

    converged = float(np.linalg.norm(g)) <= tolerance
    if best_f < fx:
        x, fx = best_x, best_f
    return LbfgsResult(x, fx, max_iters, converged, False)
