"""Equilibrium prompt cell: fixed-point forward solve, implicit backward.

The cell body is a single pre-activation layer f(z) = sigma(W z + U x + b)
whose state weight is rescaled to operator norm <= kappa < 1, so f is a
contraction and the fixed point z* = f(z*) exists and is unique. The
forward pass finds z* by damped Picard iteration or Anderson acceleration;
the backward pass never unrolls the solver — it solves the small adjoint
fixed point o = J^T o + y at z* and then takes one ordinary backward step
of the cell body seeded with o.

Solvers run on flat float64 arrays internally. A batch of inputs is solved
as one stacked fixed-point problem (rows evolve independently), with the
Frobenius residual under the same tolerance, so a converged batch solve
certifies every row's residual individually.

`unrolled_vjp` is a deliberately brute-force reference implementation
(backpropagation through a fixed number of recorded Picard steps) kept for
gradient cross-checks; it shares no solver machinery with `deq_vjp`.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .errors import DivergenceError, ShapeMismatchError
from .numerics import Tensor

ACTIVATIONS = ("tanh", "identity")


@dataclass(frozen=True)
class DeqCell:
    """Parameters of one equilibrium cell f(z) = sigma(W z + U x + b).

    `W` is stored post-projection: `spectral_normalize` returns a cell whose
    stored state weight already has operator norm <= kappa, and every other
    operation uses it verbatim. Gradients are taken with respect to the
    stored (projected) weight; training re-projects after each step.
    """

    W: Tensor
    U: Tensor
    b: Tensor
    kappa: float = 0.9
    activation: str = "tanh"

    def __post_init__(self):
        h = self.W.shape[0] if self.W.rank == 2 else -1
        if self.W.rank != 2 or self.W.shape != (h, h):
            raise ShapeMismatchError(f"W must be square rank-2, got {self.W.shape}")
        if self.U.rank != 2 or self.U.shape[0] != h:
            raise ShapeMismatchError(f"U must be {h}x*, got {self.U.shape}")
        if self.b.shape != (h,):
            raise ShapeMismatchError(f"b must have shape ({h},), got {self.b.shape}")
        if not 0.0 < self.kappa < 1.0:
            raise ValueError(f"kappa must lie in (0,1), got {self.kappa}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def state_dim(self) -> int:
        return self.W.shape[0]

    @property
    def input_dim(self) -> int:
        return self.U.shape[1]


@dataclass(frozen=True)
class SolverConfig:
    """Fixed-point solver settings; `anderson_depth=0` selects plain Picard."""

    tol: float = 1e-8
    max_iters: int = 500
    anderson_depth: int = 5
    damping: float = 1.0

    def __post_init__(self):
        if self.tol <= 0.0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.anderson_depth < 0:
            raise ValueError(f"anderson_depth must be >= 0, got {self.anderson_depth}")
        if not 0.0 < self.damping <= 1.0:
            raise ValueError(f"damping must lie in (0,1], got {self.damping}")


@dataclass(frozen=True)
class SolveReport:
    z_star: Tensor
    iterations: int
    residual: float
    converged: bool


@dataclass(frozen=True)
class CellGrads:
    """Gradients for one cell's parameters, summed over the seeding batch."""

    W: Tensor
    U: Tensor
    b: Tensor


def _act(a: np.ndarray, kind: str) -> np.ndarray:
    return np.tanh(a) if kind == "tanh" else a


def _act_deriv(a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        t = np.tanh(a)
        return 1.0 - t * t
    return np.ones_like(a)


# --- spectral projection ---------------------------------------------------

def estimate_spectral_norm(w, iters: int = 100) -> float:
    """Largest singular value of a matrix, by power iteration on W^T W.

    Deterministic: runs from an all-ones start and from one fixed
    pseudo-random start, returning the larger Rayleigh estimate. The
    estimate is exactly scale-equivariant (the normalized iterate sequence
    ignores scale), which is what makes the rescale-then-re-estimate
    invariant in `spectral_normalize` hold to rounding error.
    """
    wa = w.array if isinstance(w, Tensor) else np.asarray(w, dtype=np.float64)
    if wa.ndim != 2:
        raise ShapeMismatchError(f"spectral norm needs a matrix, got shape {wa.shape}")
    if not np.any(wa):
        return 0.0
    n = wa.shape[1]
    starts = [np.ones(n)]
    gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(0x5EED)))
    starts.append(gen.standard_normal(n))
    best = 0.0
    for v in starts:
        v = v / np.linalg.norm(v)
        sigma = 0.0
        for _ in range(iters):
            u = wa @ v
            sigma = float(np.linalg.norm(u))
            if sigma == 0.0:
                break
            v = wa.T @ u
            nv = float(np.linalg.norm(v))
            if nv == 0.0:
                break
            v = v / nv
        best = max(best, sigma)
    return best


def spectral_normalize(cell: DeqCell, power_iters: int = 100) -> DeqCell:
    """Project the state weight onto operator norm <= kappa.

    Returns a cell with W <- W * min(1, kappa / sigma_max(W)); a weight
    already inside the ball (or identically zero) is returned unchanged.
    Idempotent up to power-iteration rounding.
    """
    if power_iters < 10:
        raise ValueError(f"power_iters must be >= 10, got {power_iters}")
    sigma = estimate_spectral_norm(cell.W, iters=power_iters)
    if sigma <= cell.kappa:
        return cell
    return replace(cell, W=Tensor(cell.W.array * (cell.kappa / sigma)))


# --- forward ---------------------------------------------------------------

def cell_forward(cell: DeqCell, z: Tensor, x: Tensor) -> Tensor:
    """One application of the cell body at state z and input x."""
    if z.shape != (cell.state_dim,):
        raise ShapeMismatchError(f"state shape {z.shape} != ({cell.state_dim},)")
    if x.shape != (cell.input_dim,):
        raise ShapeMismatchError(f"input shape {x.shape} != ({cell.input_dim},)")
    a = cell.W.array @ z.array + cell.U.array @ x.array + cell.b.array
    return Tensor(_act(a, cell.activation))


def _solve(g: Callable[[np.ndarray], np.ndarray], v0: np.ndarray,
           cfg: SolverConfig) -> tuple[np.ndarray, int, float, bool]:
    """Generic fixed-point driver on flat arrays.

    Returns (point, evaluations, residual-at-point, converged); the residual
    always belongs to the returned point, so `converged` iff it is <= tol.
    Anderson mixing (type II) extrapolates over the last `anderson_depth`
    residuals via a least-squares combination, falling back to the damped
    Picard step while the history is shorter than two entries.
    """
    v = np.array(v0, dtype=np.float64)
    beta = cfg.damping
    depth = cfg.anderson_depth
    hist_v: list[np.ndarray] = []
    hist_g: list[np.ndarray] = []
    for k in range(1, cfg.max_iters + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            gv = g(v)
        if not np.all(np.isfinite(gv)):
            raise DivergenceError(f"non-finite iterate at evaluation {k}")
        r = gv - v
        resid = float(np.linalg.norm(r))
        if resid <= cfg.tol:
            return v, k, resid, True
        if k == cfg.max_iters:
            return v, k, resid, False
        if depth == 0:
            v = v + beta * r
            continue
        hist_v.append(v)
        hist_g.append(gv)
        if len(hist_v) > depth:
            hist_v.pop(0)
            hist_g.pop(0)
        if len(hist_v) == 1:
            v = v + beta * r
            continue
        res = np.stack([gi - vi for vi, gi in zip(hist_v, hist_g)], axis=1)
        d_res = res[:, 1:] - res[:, :-1]
        gamma, *_ = np.linalg.lstsq(d_res, res[:, -1], rcond=None)
        vs = np.stack(hist_v, axis=1)
        gs = np.stack(hist_g, axis=1)
        v_bar = v - (vs[:, 1:] - vs[:, :-1]) @ gamma
        g_bar = gv - (gs[:, 1:] - gs[:, :-1]) @ gamma
        v = (1.0 - beta) * v_bar + beta * g_bar
    raise AssertionError("unreachable")


def solve_forward(cell: DeqCell, x: Tensor, cfg: SolverConfig | None = None,
                  z0: Tensor | None = None) -> SolveReport:
    """Find z* = f(z*) for one input; cell is assumed spectrally normalized."""
    cfg = cfg or SolverConfig()
    if x.shape != (cell.input_dim,):
        raise ShapeMismatchError(f"input shape {x.shape} != ({cell.input_dim},)")
    start = np.zeros(cell.state_dim) if z0 is None else z0.array
    if start.shape != (cell.state_dim,):
        raise ShapeMismatchError(f"z0 shape {start.shape} != ({cell.state_dim},)")
    wa, kind = cell.W.array, cell.activation
    c = cell.U.array @ x.array + cell.b.array
    v, iters, resid, ok = _solve(lambda z: _act(wa @ z + c, kind), start, cfg)
    return SolveReport(Tensor(v), iters, resid, ok)


def solve_forward_batch(cell: DeqCell, x_rows: np.ndarray, cfg: SolverConfig | None = None,
                        z0_rows: np.ndarray | None = None) -> SolveReport:
    """Solve a batch of inputs (rows) as one stacked fixed-point problem.

    The report's `z_star` is rank-2 with one state per row, and `residual`
    is the Frobenius norm of the stacked residual; converged therefore
    implies every individual row residual is within tol.
    """
    cfg = cfg or SolverConfig()
    x_rows = np.asarray(x_rows, dtype=np.float64)
    n = x_rows.shape[0]
    if x_rows.ndim != 2 or x_rows.shape[1] != cell.input_dim:
        raise ShapeMismatchError(f"inputs shape {x_rows.shape} != (n, {cell.input_dim})")
    h = cell.state_dim
    start = np.zeros((n, h)) if z0_rows is None else np.asarray(z0_rows, dtype=np.float64)
    if start.shape != (n, h):
        raise ShapeMismatchError(f"z0 shape {start.shape} != ({n}, {h})")
    wa, kind = cell.W.array, cell.activation
    c = x_rows @ cell.U.array.T + cell.b.array

    def g(flat: np.ndarray) -> np.ndarray:
        z = flat.reshape(n, h)
        return _act(z @ wa.T + c, kind).reshape(-1)

    v, iters, resid, ok = _solve(g, start.reshape(-1), cfg)
    return SolveReport(Tensor(v.reshape(n, h)), iters, resid, ok)


# --- backward --------------------------------------------------------------

def solve_adjoint(cell: DeqCell, z_star: Tensor, x: Tensor, y: Tensor,
                  cfg: SolverConfig | None = None) -> Tensor:
    """Solve the adjoint fixed point o = J^T o + y at a converged z*.

    J is the state Jacobian of the cell body at (z*, x); for this body
    J^T o = W^T (sigma'(a*) * o). Non-convergence raises, carrying the
    last residual: unlike the forward solve there is no useful partial
    answer for a gradient.
    """
    cfg = cfg or SolverConfig()
    a = cell.W.array @ z_star.array + cell.U.array @ x.array + cell.b.array
    s = _act_deriv(a, cell.activation)
    wt, ya = cell.W.array.T, y.array
    v, _, resid, ok = _solve(lambda o: wt @ (s * o) + ya, np.zeros_like(ya), cfg)
    if not ok:
        raise DivergenceError(
            f"adjoint solve stalled at residual {resid:.3e} (tol {cfg.tol:.1e})",
            residual=resid)
    return Tensor(v)


def solve_adjoint_batch(cell: DeqCell, z_rows: np.ndarray, x_rows: np.ndarray,
                        y_rows: np.ndarray, cfg: SolverConfig | None = None) -> np.ndarray:
    """Row-wise adjoint solves, stacked into one fixed-point problem."""
    cfg = cfg or SolverConfig()
    n, h = z_rows.shape
    a = z_rows @ cell.W.array.T + x_rows @ cell.U.array.T + cell.b.array
    s = _act_deriv(a, cell.activation)
    wa = cell.W.array

    def g(flat: np.ndarray) -> np.ndarray:
        o = flat.reshape(n, h)
        return ((s * o) @ wa + y_rows).reshape(-1)

    v, _, resid, ok = _solve(g, np.zeros(n * h), cfg)
    if not ok:
        raise DivergenceError(
            f"adjoint batch solve stalled at residual {resid:.3e} (tol {cfg.tol:.1e})",
            residual=resid)
    return v.reshape(n, h)


def deq_vjp(cell: DeqCell, z_star: Tensor, x: Tensor, y: Tensor,
            cfg: SolverConfig | None = None) -> tuple[Tensor, CellGrads]:
    """Pull the cotangent y on z* back to the input and cell parameters.

    Implicit-function route: solve the adjoint fixed point for o, then take
    a single backward pass of the cell body seeded with o. Returns
    (grad_x, grads for W, U, b).
    """
    o = solve_adjoint(cell, z_star, x, y, cfg)
    a = cell.W.array @ z_star.array + cell.U.array @ x.array + cell.b.array
    t = _act_deriv(a, cell.activation) * o.array
    grads = CellGrads(W=Tensor(np.outer(t, z_star.array)),
                      U=Tensor(np.outer(t, x.array)),
                      b=Tensor(t))
    return Tensor(cell.U.array.T @ t), grads


def deq_vjp_batch(cell: DeqCell, z_rows: np.ndarray, x_rows: np.ndarray,
                  y_rows: np.ndarray, cfg: SolverConfig | None = None
                  ) -> tuple[np.ndarray, CellGrads]:
    """Batch form of `deq_vjp`; parameter gradients are summed over rows."""
    o = solve_adjoint_batch(cell, z_rows, x_rows, y_rows, cfg)
    a = z_rows @ cell.W.array.T + x_rows @ cell.U.array.T + cell.b.array
    t = _act_deriv(a, cell.activation) * o
    grads = CellGrads(W=Tensor(t.T @ z_rows),
                      U=Tensor(t.T @ x_rows),
                      b=Tensor(np.sum(t, axis=0)))
    return t @ cell.U.array, grads


def unrolled_vjp(cell: DeqCell, x: Tensor, y: Tensor, n_iters: int = 500
                 ) -> tuple[Tensor, CellGrads]:
    """Brute-force reference gradient: backprop through recorded Picard steps.

    Runs n_iters plain Picard iterations from z0 = 0, keeps every iterate,
    and reverse-accumulates y^T z_K through the whole chain. Exists to
    cross-check `deq_vjp`; quadratic in depth memory-wise and never used
    in the training path.
    """
    wa, ua, ba = cell.W.array, cell.U.array, cell.b.array
    kind = cell.activation
    c = ua @ x.array + ba
    zs = [np.zeros(cell.state_dim)]
    for _ in range(n_iters):
        zs.append(_act(wa @ zs[-1] + c, kind))
    grad_w = np.zeros_like(wa)
    grad_u = np.zeros_like(ua)
    grad_b = np.zeros_like(ba)
    grad_x = np.zeros(cell.input_dim)
    zbar = y.array.copy()
    for k in range(n_iters - 1, -1, -1):
        a = wa @ zs[k] + c
        t = _act_deriv(a, kind) * zbar
        grad_w += np.outer(t, zs[k])
        grad_u += np.outer(t, x.array)
        grad_b += t
        grad_x += ua.T @ t
        zbar = wa.T @ t
    return Tensor(grad_x), CellGrads(W=Tensor(grad_w), U=Tensor(grad_u), b=Tensor(grad_b))
