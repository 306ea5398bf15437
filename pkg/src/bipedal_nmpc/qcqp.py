"""QCQP representation and an SQP solver built on a dense active-set QP.

Problems have the form::

    min  x' G x + g' x
    s.t. x' V_j x + v_j' x + s_j <= 0      (quadratic rows)
         A_in x <= b_in,  A_eq x = b_eq     (linear rows)

Quadratic rows are stored in factored form ``V_j = sum_r sym(l_jr r_jr')`` so
that the NMPC's rank-2 ZMP constraints never materialise 161x161 matrices.
Dense ``V_j`` are accepted through :meth:`QuadraticConstraints.from_dense`.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Iterator, Sequence, TextIO

import numpy as np
import quadprog
from scipy.linalg import solve_triangular

log = logging.getLogger(__name__)


class DimensionMismatch(ValueError):
    pass


class Infeasible(RuntimeError):
    pass


class IterationLimit(RuntimeError):
    pass


@dataclass(frozen=True)
class QuadraticConstraints:
    """Stack of quadratic rows ``(l.x)(r.x) summed over rank + v.x + sigma``.

    Shapes: ``left``/``right`` ``(n_c, rank, n)``, ``v`` ``(n_c, n)``,
    ``sigma`` ``(n_c,)``.
    """

    left: np.ndarray
    right: np.ndarray
    v: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        n_c = self.sigma.shape[0]
        if self.left.shape != self.right.shape or self.left.ndim != 3:
            raise DimensionMismatch("left/right factor shapes differ")
        if self.left.shape[0] != n_c or self.v.shape[0] != n_c:
            raise DimensionMismatch("inconsistent constraint count")
        if self.v.shape[1] != self.left.shape[2]:
            raise DimensionMismatch("inconsistent variable count")

    @classmethod
    def empty(cls, n: int) -> "QuadraticConstraints":
        return cls(np.zeros((0, 1, n)), np.zeros((0, 1, n)), np.zeros((0, n)), np.zeros(0))

    @classmethod
    def from_dense(cls, V: Sequence[np.ndarray], v: Sequence[np.ndarray], sigma: Sequence[float]):
        """Factor dense (symmetrised) ``V_j`` by eigendecomposition."""
        if len(V) == 0:
            n = len(v[0]) if len(v) else 0
            return cls.empty(n)
        n = np.asarray(V[0]).shape[0]
        lefts, rights = [], []
        for Vj in V:
            Vj = np.asarray(Vj, dtype=float)
            if Vj.shape != (n, n):
                raise DimensionMismatch(f"V_j must be {n}x{n}, got {Vj.shape}")
            w, Q = np.linalg.eigh(0.5 * (Vj + Vj.T))
            keep = np.abs(w) > 1e-14 * max(1.0, np.abs(w).max(initial=0.0))
            lefts.append((Q[:, keep] * w[keep]).T)
            rights.append(Q[:, keep].T)
        rank = max(1, max(len(l) for l in lefts))
        L = np.zeros((len(V), rank, n))
        R = np.zeros((len(V), rank, n))
        for j, (l, r) in enumerate(zip(lefts, rights)):
            L[j, : len(l)] = l
            R[j, : len(r)] = r
        return cls(L, R, np.asarray(v, dtype=float).reshape(len(V), n), np.asarray(sigma, dtype=float))

    @property
    def n_constraints(self) -> int:
        return self.sigma.shape[0]

    @property
    def n_vars(self) -> int:
        return self.v.shape[1]

    def dense_V(self, j: int) -> np.ndarray:
        M = self.left[j].T @ self.right[j]
        return 0.5 * (M + M.T)

    def values(self, x: np.ndarray) -> np.ndarray:
        lx = self.left @ x
        rx = self.right @ x
        return np.einsum("jr,jr->j", lx, rx) + self.v @ x + self.sigma

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        """Rows ``2 V_j x + v_j``."""
        lx = self.left @ x
        rx = self.right @ x
        return np.einsum("jr,jrn->jn", rx, self.left) + np.einsum("jr,jrn->jn", lx, self.right) + self.v

    def concat(self, other: "QuadraticConstraints") -> "QuadraticConstraints":
        rank = max(self.left.shape[1], other.left.shape[1])

        def pad(a):
            out = np.zeros((a.shape[0], rank, a.shape[2]))
            out[:, : a.shape[1]] = a
            return out

        return QuadraticConstraints(
            np.concatenate([pad(self.left), pad(other.left)]),
            np.concatenate([pad(self.right), pad(other.right)]),
            np.concatenate([self.v, other.v]),
            np.concatenate([self.sigma, other.sigma]),
        )


@dataclass(frozen=True)
class QcqpProblem:
    """Objective ``x'Gx + g'x`` with quadratic, linear inequality and equality rows."""

    G: np.ndarray
    g: np.ndarray
    quad: QuadraticConstraints
    A_in: np.ndarray
    b_in: np.ndarray
    A_eq: np.ndarray
    b_eq: np.ndarray
    labels: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        n = self.g.shape[0]
        object.__setattr__(self, "G", 0.5 * (self.G + self.G.T))
        if self.G.shape != (n, n):
            raise DimensionMismatch(f"G must be {n}x{n}")
        if self.quad.n_vars != n and self.quad.n_constraints:
            raise DimensionMismatch("quadratic rows have wrong width")
        for A, b, kind in ((self.A_in, self.b_in, "inequality"), (self.A_eq, self.b_eq, "equality")):
            if A.ndim != 2 or A.shape[1] != n or A.shape[0] != b.shape[0]:
                raise DimensionMismatch(f"{kind} rows have shape {A.shape}, rhs {b.shape}, n={n}")

    @classmethod
    def build(cls, G, g, quad=None, lin_ineq=None, lin_eq=None) -> "QcqpProblem":
        """Convenience constructor; ``lin_*`` are ``(A, b)`` pairs or ``None``."""
        G = np.atleast_2d(np.asarray(G, dtype=float))
        g = np.asarray(g, dtype=float).ravel()
        n = g.shape[0]
        if quad is None:
            quad = QuadraticConstraints.empty(n)
        elif not isinstance(quad, QuadraticConstraints):
            V, v, s = zip(*quad) if len(quad) else ((), (), ())
            quad = QuadraticConstraints.from_dense(V, v, s) if V else QuadraticConstraints.empty(n)

        def rows(pair):
            if pair is None:
                return np.zeros((0, n)), np.zeros(0)
            A, b = (np.asarray(a, dtype=float) for a in pair)
            A = A.reshape(0, n) if A.size == 0 else np.atleast_2d(A)
            return A, b.ravel()

        A_in, b_in = rows(lin_ineq)
        A_eq, b_eq = rows(lin_eq)
        return cls(G, g, quad, A_in, b_in, A_eq, b_eq)

    @property
    def n_vars(self) -> int:
        return self.g.shape[0]

    @property
    def quad_constraints(self) -> Iterator[tuple[np.ndarray, np.ndarray, float]]:
        """Dense ``(V_j, v_j, sigma_j)`` triples (materialised on demand)."""
        for j in range(self.quad.n_constraints):
            yield self.quad.dense_V(j), self.quad.v[j], float(self.quad.sigma[j])

    def objective(self, x: np.ndarray) -> float:
        return float(x @ self.G @ x + self.g @ x)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return 2.0 * self.G @ x + self.g

    def max_violation(self, x: np.ndarray) -> float:
        parts = [0.0]
        if self.quad.n_constraints:
            parts.append(self.quad.values(x).max())
        if len(self.b_in):
            parts.append((self.A_in @ x - self.b_in).max())
        if len(self.b_eq):
            parts.append(np.abs(self.A_eq @ x - self.b_eq).max())
        return float(max(parts))

    def dump(self, fh: TextIO) -> None:
        """Write a self-describing text dump (see README for the layout)."""

        def mat(name, M):
            M = np.atleast_2d(M)
            fh.write(f"{name} {M.shape[0]} {M.shape[1]}\n")
            for row in M:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")

        fh.write(f"QCQP n_vars={self.n_vars} n_quad={self.quad.n_constraints} "
                 f"n_ineq={len(self.b_in)} n_eq={len(self.b_eq)}\n")
        mat("G", self.G)
        mat("g", self.g[None, :])
        for j, (V, v, s) in enumerate(self.quad_constraints):
            mat(f"V[{j}]", V)
            mat(f"v[{j}]", v[None, :])
            mat(f"sigma[{j}]", np.array([[s]]))
        mat("A_in", self.A_in.reshape(-1, self.n_vars))
        mat("b_in", self.b_in[None, :])
        mat("A_eq", self.A_eq.reshape(-1, self.n_vars))
        mat("b_eq", self.b_eq[None, :])


@dataclass(frozen=True)
class LinearizedQP:
    """Local QP in the increment: ``min 1/2 d'Hd + grad'd`` s.t. rows."""

    H: np.ndarray
    grad: np.ndarray
    A_in: np.ndarray
    b_in: np.ndarray
    A_eq: np.ndarray
    b_eq: np.ndarray
    n_quad: int  # leading rows of A_in that come from quadratic constraints


def linearize(problem: QcqpProblem, x: np.ndarray) -> LinearizedQP:
    """First-order model of ``problem`` around ``x``.

    Hessian ``2G``, gradient ``2Gx + g``; each quadratic row becomes
    ``(2 V_j x + v_j)' d + h_j(x) <= 0``.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (problem.n_vars,):
        raise DimensionMismatch(f"expected x of length {problem.n_vars}, got {x.shape}")
    quad = problem.quad
    if quad.n_constraints:
        J = quad.jacobian(x)
        h = quad.values(x)
    else:
        J = np.zeros((0, problem.n_vars))
        h = np.zeros(0)
    return LinearizedQP(
        H=2.0 * problem.G,
        grad=problem.gradient(x),
        A_in=np.vstack([J, problem.A_in]),
        b_in=np.concatenate([-h, problem.b_in - problem.A_in @ x]),
        A_eq=problem.A_eq,
        b_eq=problem.b_eq - problem.A_eq @ x,
        n_quad=quad.n_constraints,
    )


@dataclass
class QpResult:
    x: np.ndarray
    active: np.ndarray
    iterations: int
    status: str = "optimal"


_FACTORS: dict = {}


def _inverse_factor(H: np.ndarray) -> np.ndarray:
    """``R^-1`` with ``R'R = H`` (regularized when singular), cached by content.

    The SQP Hessian is the same matrix on every iteration and every tick.
    """
    key = (H.shape, hash(H.tobytes()))
    hit = _FACTORS.get(key)
    if hit is not None and np.array_equal(hit[0], H):
        return hit[1]
    n = H.shape[0]
    try:
        L = np.linalg.cholesky(H)
        if np.min(np.diag(L)) ** 2 < 1e-12:
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        lam = max(1e-10 * np.trace(H) / n, 1e-12)
        L = np.linalg.cholesky(H + lam * np.eye(n))
    R_inv = solve_triangular(L.T, np.eye(n))
    if len(_FACTORS) >= 16:
        _FACTORS.clear()
    _FACTORS[key] = (H.copy(), R_inv)
    return R_inv


def solve_qp(H, grad, A_in=None, b_in=None, A_eq=None, b_eq=None, max_iter: int | None = None) -> QpResult:
    """Dense active-set QP ``min 1/2 d'Hd + grad'd`` s.t. ``A_in d <= b_in``, ``A_eq d = b_eq``.

    Uses the Goldfarb-Idnani dual method. ``active`` holds indices into the
    stacked ``[A_eq; A_in]`` row list of the final working set.

    Raises:
        Infeasible: the constraints admit no point.
        IterationLimit: more than ``max_iter`` active-set changes were needed.
    """
    H = np.atleast_2d(np.asarray(H, dtype=float))
    grad = np.asarray(grad, dtype=float).ravel()
    n = grad.shape[0]
    A_in = np.zeros((0, n)) if A_in is None else np.atleast_2d(np.asarray(A_in, dtype=float)).reshape(-1, n)
    b_in = np.zeros(0) if b_in is None else np.asarray(b_in, dtype=float).ravel()
    A_eq = np.zeros((0, n)) if A_eq is None else np.atleast_2d(np.asarray(A_eq, dtype=float)).reshape(-1, n)
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=float).ravel()
    if H.shape != (n, n):
        raise DimensionMismatch("Hessian/gradient size mismatch")

    H = 0.5 * (H + H.T)
    # equality rows touching a single variable fix it; substitute them out
    nz = A_eq != 0.0
    unit = np.flatnonzero(nz.sum(axis=1) == 1)
    fixed_col = nz[unit].argmax(axis=1)
    fixed_val = b_eq[unit] / A_eq[unit, fixed_col]
    x_full = np.zeros(n)
    x_full[fixed_col] = fixed_val
    if unit.size and np.abs(A_eq[unit] @ x_full - b_eq[unit]).max() > 1e-9 * (1.0 + np.abs(b_eq[unit]).max()):
        raise Infeasible("conflicting fixed-variable equalities")
    free = np.setdiff1d(np.arange(n), fixed_col)
    rest = np.setdiff1d(np.arange(A_eq.shape[0]), unit)
    grad_r = grad[free] + H[np.ix_(free, fixed_col)] @ fixed_val
    Aeq_r, beq_r = A_eq[np.ix_(rest, free)], b_eq[rest] - A_eq[rest] @ x_full
    Ain_r, bin_r = A_in[:, free], b_in - A_in @ x_full
    H_r = H[np.ix_(free, free)]

    # quadprog: min 1/2 x'Gx - a'x  s.t. C'x >= b, first meq rows equalities.
    # Rows are scaled to unit norm; prediction rows span many decades.
    C = np.vstack([Aeq_r, -Ain_r])
    b = np.concatenate([beq_r, -bin_r])
    norms = np.linalg.norm(C, axis=1)
    norms[norms == 0.0] = 1.0
    C = (C / norms[:, None]).T
    b = b / norms
    try:
        if free.size == 0:
            if np.any(bin_r < -1e-9) or np.any(np.abs(beq_r) > 1e-9):
                raise Infeasible("constraints are inconsistent")
            x_r, iters, active_r = np.zeros(0), (0, 0), np.zeros(0, dtype=int)
        elif C.shape[1] == 0:
            R_inv = _inverse_factor(H_r)
            x_r, iters, active_r = -R_inv @ (R_inv.T @ grad_r), (0, 0), np.zeros(0, dtype=int)
        else:
            x_r, _, _, iters, _, active_r = quadprog.solve_qp(_inverse_factor(H_r), -grad_r, C, b, len(rest),
                                                             factorized=True)
    except ValueError as exc:
        msg = str(exc)
        if "inconsistent" in msg:
            raise Infeasible(msg) from exc
        raise
    n_iter = int(iters[0])
    if max_iter is not None and n_iter > max_iter:
        raise IterationLimit(f"active-set needed {n_iter} iterations (cap {max_iter})")
    x_full[free] = x_r
    # report in the stacked [A_eq; A_in] numbering of the caller
    active_r = np.asarray(active_r, dtype=int)
    active_r = active_r[active_r > 0] - 1
    row_ids = np.concatenate([rest, A_eq.shape[0] + np.arange(A_in.shape[0])])
    active = np.sort(np.concatenate([unit, row_ids[active_r]]).astype(int))
    return QpResult(x_full, active, n_iter)


@dataclass(frozen=True)
class SqpSettings:
    """SQP termination: stop when ``min(F^m) <= eps`` or after ``n_s`` QPs."""

    eps: float = 5e-8
    n_s: int = 3
    qp_max_iter: int = 10_000
    relax_weight: float = 1e6

    def __post_init__(self):
        if not self.eps >= 0:
            raise ValueError("eps must be non-negative")
        if self.n_s < 1:
            raise ValueError("n_s must be >= 1")


@dataclass
class SqpReport:
    iterations: int = 0
    increments: list = field(default_factory=list)  # per-iteration F^m vectors
    converged: bool = False
    qp_status: list = field(default_factory=list)
    relaxed: bool = False
    violations: list = field(default_factory=list)  # max constraint violation after each iterate
    solve_time: float = 0.0

    @property
    def final_increment(self) -> float:
        """``min(F^m)`` of the last iteration."""
        return float(np.min(self.increments[-1])) if self.increments else float("nan")


def solve_relaxed(qp: LinearizedQP, weight: float, max_iter: int | None = None) -> QpResult:
    """Re-solve ``qp`` with L1 slack on its quadratic-constraint rows."""
    n = qp.grad.shape[0]
    k = qp.n_quad
    H = np.zeros((n + k, n + k))
    H[:n, :n] = qp.H
    H[n:, n:] = 1e-6 * np.eye(k)
    grad = np.concatenate([qp.grad, weight * np.ones(k)])
    A_in = np.zeros((qp.A_in.shape[0] + k, n + k))
    A_in[: qp.A_in.shape[0], :n] = qp.A_in
    A_in[:k, n:] = -np.eye(k)
    A_in[qp.A_in.shape[0]:, n:] = -np.eye(k)
    b_in = np.concatenate([qp.b_in, np.zeros(k)])
    A_eq = np.hstack([qp.A_eq, np.zeros((qp.A_eq.shape[0], k))])
    res = solve_qp(H, grad, A_in, b_in, A_eq, qp.b_eq, max_iter)
    res.x = res.x[:n]
    res.status = "relaxed"
    return res


def channel_increments(delta: np.ndarray, channels: Sequence[slice] | None) -> np.ndarray:
    """``F^m``: per-channel maximum absolute increment."""
    if channels is None:
        channels = [slice(0, delta.shape[0])]
    return np.array([np.max(np.abs(delta[c])) if delta[c].size else 0.0 for c in channels])


def solve_sqp(
    problem: QcqpProblem,
    x0: np.ndarray,
    settings: SqpSettings = SqpSettings(),
    channels: Sequence[slice] | None = None,
    relax: bool = True,
) -> tuple[np.ndarray, SqpReport]:
    """Full-step SQP on ``problem`` starting from ``x0``.

    ``channels`` partitions the increment for the ``min(F^m) <= eps`` test.
    When a local QP is infeasible and ``relax`` is set, the quadratic rows are
    softened with an L1 penalty once per iteration and the report is flagged.

    Raises:
        Infeasible: if a local QP has no solution even after relaxation.
    """
    x = np.array(x0, dtype=float)
    if x.shape != (problem.n_vars,):
        raise DimensionMismatch(f"expected x0 of length {problem.n_vars}, got {x.shape}")
    report = SqpReport()
    t0 = time.perf_counter()
    while report.iterations < settings.n_s:
        qp = linearize(problem, x)
        try:
            res = solve_qp(qp.H, qp.grad, qp.A_in, qp.b_in, qp.A_eq, qp.b_eq, settings.qp_max_iter)
        except Infeasible:
            if not relax or qp.n_quad == 0:
                raise
            log.debug("local QP infeasible at iteration %d, relaxing", report.iterations + 1)
            res = solve_relaxed(qp, settings.relax_weight, settings.qp_max_iter)
            report.relaxed = True
        x = x + res.x
        report.iterations += 1
        report.qp_status.append(res.status)
        fm = channel_increments(res.x, channels)
        report.increments.append(fm)
        report.violations.append(problem.max_violation(x))
        if np.min(fm) <= settings.eps:
            report.converged = True
            break
    report.solve_time = time.perf_counter() - t0
    return x, report
