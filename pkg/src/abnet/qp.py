"""Dense convex QP solver with a differentiable optimum.

Solves  min_u 0.5 u'Qu + c'u  s.t.  Gu <= h  with Q symmetric positive
definite, via a primal-dual interior-point method (Mehrotra-style
predictor-corrector, dense Cholesky on the reduced normal system).
Problems here are tiny (a handful of variables, tens of rows), so a dense
method is both robust and cheap.

`solve_backward` differentiates the optimum with respect to every problem
parameter by solving one regularized KKT system at the solution
(implicit function theorem on stationarity + complementarity).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EPS_PD = 1e-8       # smallest admissible eigenvalue of Q
SYM_TOL = 1e-12     # |Q - Q'| tolerance
KKT_DELTA = 1e-10   # Tikhonov regularization of the backward KKT system


class QpError(Exception):
    pass


class IllConditioned(QpError):
    """Q failed the symmetric positive-definite check."""


class Infeasible(QpError):
    """No u satisfies Gu <= h within tolerance."""

    def __init__(self, max_violation: float):
        super().__init__(f"constraints infeasible, max violation {max_violation:.3e}")
        self.max_violation = max_violation


class SingularKkt(QpError):
    """KKT matrix rank-deficient even after regularization (degenerate active set)."""


@dataclass(frozen=True)
class SolverOptions:
    tol: float = 1e-8          # duality-gap target
    max_iter: int = 60
    feas_tol: float = 1e-6     # violation above which infeasibility is declared
    check_problem: bool = True


@dataclass
class QpProblem:
    """minimize 0.5 u'Qu + c'u  subject to  Gu <= h."""

    Q: np.ndarray
    c: np.ndarray
    G: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=np.float64)
        self.c = np.asarray(self.c, dtype=np.float64).ravel()
        q = self.c.shape[0]
        self.G = np.asarray(self.G, dtype=np.float64).reshape(-1, q)
        self.h = np.asarray(self.h, dtype=np.float64).ravel()
        if self.Q.shape != (q, q):
            raise IllConditioned(f"Q shape {self.Q.shape} does not match c length {q}")
        if self.G.shape[0] != self.h.shape[0]:
            raise IllConditioned("G row count does not match h length")

    @property
    def dim(self) -> int:
        return self.c.shape[0]

    @property
    def n_ineq(self) -> int:
        return self.h.shape[0]

    def validate(self):
        if not (np.all(np.isfinite(self.Q)) and np.all(np.isfinite(self.c))
                and np.all(np.isfinite(self.G)) and np.all(np.isfinite(self.h))):
            raise IllConditioned("non-finite entries in problem data")
        if self.Q.size and np.max(np.abs(self.Q - self.Q.T)) > SYM_TOL * max(1.0, np.max(np.abs(self.Q))):
            raise IllConditioned("Q is not symmetric")
        try:
            np.linalg.cholesky(self.Q - EPS_PD * np.eye(self.dim) * 0.999)
        except np.linalg.LinAlgError:
            lam_min = float(np.linalg.eigvalsh(self.Q)[0])
            raise IllConditioned(f"Q not positive definite enough (lambda_min={lam_min:.3e})") from None


@dataclass
class QpSolution:
    u_star: np.ndarray
    lambda_star: np.ndarray
    status: str                      # "optimal" | "max_iter"
    kkt_residual: float
    iterations: int = 0


@dataclass
class QpGradients:
    """Sensitivities of a downstream scalar loss through u_star."""

    dQ: np.ndarray
    dc: np.ndarray
    dG: np.ndarray
    dh: np.ndarray


def kkt_residual(prob: QpProblem, u: np.ndarray, lam: np.ndarray) -> float:
    """Max-norm over stationarity, primal violation, and complementarity."""
    stat = prob.Q @ u + prob.c
    if prob.n_ineq:
        stat = stat + prob.G.T @ lam
        viol = np.maximum(prob.G @ u - prob.h, 0.0)
        comp = np.abs(lam * (prob.G @ u - prob.h))
        return float(max(np.max(np.abs(stat)), np.max(viol), np.max(comp)))
    return float(np.max(np.abs(stat))) if stat.size else 0.0


def _chol_solve(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    y = np.linalg.solve(L, b)
    return np.linalg.solve(L.T, y)


def _reduced_solve(Q, G, s, lam, r_d, r_p, r_c):
    """One Newton solve of the IPM system, eliminating (ds, dlam)."""
    d = lam / s
    M = Q + (G.T * d) @ G
    M[np.diag_indices_from(M)] += 1e-14
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        M[np.diag_indices_from(M)] += 1e-10 * (1.0 + np.trace(M))
        L = np.linalg.cholesky(M)
    rhs = -r_d + G.T @ ((r_c - lam * r_p) / s)
    du = _chol_solve(L, rhs)
    ds = -r_p - G @ du
    dlam = -(r_c + lam * ds) / s
    return du, ds, dlam


def _max_step(v: np.ndarray, dv: np.ndarray) -> float:
    """Largest alpha <= 1 with v + alpha*dv >= 0."""
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return min(1.0, float(np.min(-v[neg] / dv[neg])))


def solve(prob: QpProblem, opts: SolverOptions = SolverOptions()) -> QpSolution:
    """Solve the QP; deterministic for identical inputs.

    Raises Infeasible when a slack-minimization certificate shows the
    constraint set is empty (max violation > opts.feas_tol); returns
    status "max_iter" with the best iterate when the iteration cap is hit
    on a feasible problem.
    """
    if opts.check_problem:
        prob.validate()
    q, n = prob.dim, prob.n_ineq
    Q, c, G, h = prob.Q, prob.c, prob.G, prob.h

    Lq = np.linalg.cholesky(Q)
    u_unc = _chol_solve(Lq, -c)
    if n == 0:
        return QpSolution(u_unc, np.zeros(0), "optimal", kkt_residual(prob, u_unc, np.zeros(0)))
    # unconstrained optimum already feasible: it is the exact solution
    if np.all(G @ u_unc <= h):
        lam = np.zeros(n)
        return QpSolution(u_unc, lam, "optimal", kkt_residual(prob, u_unc, lam))

    scale = 1.0 + max(float(np.max(np.abs(c))), float(np.max(np.abs(h))))
    u = u_unc.copy()
    s = np.maximum(h - G @ u, 1.0)
    lam = np.ones(n)

    status = "max_iter"
    iters = 0
    for iters in range(1, opts.max_iter + 1):
        r_d = Q @ u + c + G.T @ lam
        r_p = G @ u + s - h
        mu = float(lam @ s) / n
        if (mu <= opts.tol
                and np.max(np.abs(r_p)) <= opts.tol * scale
                and np.max(np.abs(r_d)) <= opts.tol * scale):
            status = "optimal"
            break
        # infeasible problems drive slacks to zero against a stuck primal
        # residual; bail out to the certificate check instead of overflowing
        if not np.all(np.isfinite(u)) or np.min(s) < 1e-14 or np.max(lam) > 1e14:
            break

        # predictor (affine scaling) step
        _, ds_a, dlam_a = _reduced_solve(Q, G, s, lam, r_d, r_p, lam * s)
        alpha_a = min(_max_step(s, ds_a), _max_step(lam, dlam_a))
        mu_a = float((lam + alpha_a * dlam_a) @ (s + alpha_a * ds_a)) / n
        sigma = (mu_a / mu) ** 3 if mu > 0 else 0.0

        # corrector step with centering
        r_c = lam * s - sigma * mu + ds_a * dlam_a
        du, ds, dlam = _reduced_solve(Q, G, s, lam, r_d, r_p, r_c)
        alpha = 0.99 * min(_max_step(s, ds), _max_step(lam, dlam))
        u = u + alpha * du
        s = s + alpha * ds
        lam = lam + alpha * dlam

    if status != "optimal":
        viol = _infeasibility_certificate(G, h)
        if viol > opts.feas_tol:
            raise Infeasible(viol)
    return QpSolution(u, lam, status, kkt_residual(prob, u, lam), iters)


def _infeasibility_certificate(G: np.ndarray, h: np.ndarray) -> float:
    """Minimum achievable max-violation of Gu <= h, via an always-feasible slack QP."""
    q = G.shape[1]
    n = G.shape[0]
    # variables (u, w): min eps*|u|^2/2 + |w|^2/2  s.t.  Gu - w <= h, -w <= 0
    Q2 = np.zeros((q + n, q + n))
    Q2[:q, :q] = EPS_PD * np.eye(q)
    Q2[q:, q:] = np.eye(n)
    G2 = np.zeros((2 * n, q + n))
    G2[:n, :q] = G
    G2[:n, q:] = -np.eye(n)
    G2[n:, q:] = -np.eye(n)
    h2 = np.concatenate([h, np.zeros(n)])
    prob2 = QpProblem(Q2, np.zeros(q + n), G2, h2)
    sol2 = solve(prob2, SolverOptions(tol=1e-9, max_iter=100, feas_tol=np.inf, check_problem=False))
    u = sol2.u_star[:q]
    return float(np.max(np.maximum(G @ u - h, 0.0), initial=0.0))


def solve_backward(prob: QpProblem, sol: QpSolution, grad_u: np.ndarray,
                   delta: float = KKT_DELTA) -> QpGradients:
    """Backpropagate a loss gradient on u_star to all QP parameters.

    Solves the transposed differential KKT system

        [Q + dI   G' diag(lam)] [d_u  ]   [-grad_u]
        [G        -S - dI     ] [d_lam] = [0      ]

    with S = diag(h - Gu*); the Tikhonov term dI handles degenerate
    (weakly active) constraint sets.
    """
    if sol.status != "optimal":
        raise QpError("backward pass requires an optimal solution")
    grad_u = np.asarray(grad_u, dtype=np.float64).ravel()
    q, n = prob.dim, prob.n_ineq
    u, lam = sol.u_star, sol.lambda_star

    if n == 0:
        d_u = np.linalg.solve(prob.Q + delta * np.eye(q), -grad_u)
        dQ = 0.5 * (np.outer(d_u, u) + np.outer(u, d_u))
        return QpGradients(dQ, d_u, np.zeros((0, q)), np.zeros(0))

    s = prob.h - prob.G @ u
    K = np.zeros((q + n, q + n))
    K[:q, :q] = prob.Q + delta * np.eye(q)
    K[:q, q:] = prob.G.T * lam
    K[q:, :q] = prob.G
    K[q:, q:] = -np.diag(s) - delta * np.eye(n)
    rhs = np.concatenate([-grad_u, np.zeros(n)])
    try:
        d = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularKkt(str(exc)) from None
    if not np.all(np.isfinite(d)):
        raise SingularKkt("non-finite solution of the regularized KKT system")
    resid = np.max(np.abs(K @ d - rhs))
    if resid > 1e-6 * (1.0 + np.max(np.abs(rhs))):
        raise SingularKkt(f"KKT solve residual {resid:.3e}")

    d_u, d_lam = d[:q], d[q:]
    dQ = 0.5 * (np.outer(d_u, u) + np.outer(u, d_u))
    dc = d_u
    dG = np.outer(lam * d_lam, u) + np.outer(lam, d_u)
    dh = -lam * d_lam
    return QpGradients(dQ, dc, dG, dh)
