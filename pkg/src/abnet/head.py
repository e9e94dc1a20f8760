"""One barrier-constrained control head.

The backbone maps an observation to a reference control u_ref, a diagonal
quadratic cost, and this head's own barrier penalty.  The head then solves

    min_u 0.5 u' diag(H) u - (diag(H) u_ref)' u
    s.t.  barrier rows from the safety cascades, control box bounds

so the unconstrained optimum is exactly u_ref and the barrier rows only
bend the output where safety requires it.  With a tape attached the QP is
recorded as a differentiable node: loss gradients flow back into H, u_ref
and both penalties through the KKT system of the solved program.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import hocbf, qp

H_FLOOR = 1e-6
ROW_SLACK = 1e-6


def softplus_np(x):
    return np.logaddexp(0.0, x)


@dataclass
class HeadParams:
    """Backbone plus observation handling for one head."""

    backbone: ad.Mlp
    name: str = "head0"
    observation_mask: np.ndarray | None = None   # elementwise mask over z
    train_noise: float = 0.0                     # per-head observation noise (training only)

    def masked(self, z: np.ndarray) -> np.ndarray:
        if self.observation_mask is None:
            return z
        return z * self.observation_mask


@dataclass
class HeadOutput:
    u: np.ndarray
    u_ref: np.ndarray
    H_diag: np.ndarray
    p1: float
    pm: float
    prob: qp.QpProblem
    sol: qp.QpSolution
    rows: list = field(default_factory=list)     # ConstraintRow, cascade rows only
    flags: list = field(default_factory=list)
    u_var: ad.Var | None = None
    u_ref_var: ad.Var | None = None


def box_rows(sys):
    """Control bounds as QP rows: u_i <= hi and -u_i <= -lo."""
    q = sys.q
    G = np.vstack([np.eye(q), -np.eye(q)])
    h = np.concatenate([sys.control_bounds[:, 1], -sys.control_bounds[:, 0]])
    return G, h


def fallback_control(sys) -> np.ndarray:
    """Smallest-norm control inside the bounds (safe deceleration default)."""
    G, h = box_rows(sys)
    sol = qp.solve(qp.QpProblem(np.eye(sys.q), np.zeros(sys.q), G, h))
    return sol.u_star


def _assemble_numeric(task_sys, cascades, x, p1: float, pm: float):
    """Cascade rows (may drop degenerate ones) plus box rows."""
    rows, flags = [], []
    for cascade in cascades:
        try:
            rows.append(hocbf.assemble_row(cascade, task_sys, x, p1, pm))
        except hocbf.DegenerateRow:
            flags.append(f"degenerate_row:{cascade.constraint_id}")
    Gb, hb = box_rows(task_sys)
    G = np.vstack([np.array([r.as_qp_row()[0] for r in rows]).reshape(-1, task_sys.q), Gb])
    h = np.concatenate([np.array([r.as_qp_row()[1] for r in rows]), hb])
    return rows, flags, G, h


def head_forward(head: HeadParams, x, z, cascades, sys, tape: ad.Tape | None = None,
                 p1=None, solver_opts: qp.SolverOptions = qp.SolverOptions()) -> HeadOutput:
    """Run one head at state x under observation z.

    `p1` is the shared lower-order penalty: a float in inference mode, or a
    shape-(1,) tape Var during training (produced by the cross-connection
    network).  Raises qp.Infeasible when the barrier rows contradict the
    control bounds; callers decide whether to skip (training) or fall back
    (closed loop).
    """
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    q = sys.q
    z_k = head.masked(z)

    if tape is None:
        raw = head.backbone.forward_numpy(z_k)
        u_ref = raw[:q]
        H_diag = softplus_np(raw[q:2 * q]) + H_FLOOR
        pm = float(softplus_np(raw[2 * q]))
        p1_val = float(p1)
        rows, flags, G, h = _assemble_numeric(sys, cascades, x, p1_val, pm)
        prob = qp.QpProblem(np.diag(H_diag), -H_diag * u_ref, G, h)
        try:
            sol = qp.solve(prob, solver_opts)
        except qp.Infeasible as exc:
            exc.state = x
            raise
        out = HeadOutput(sol.u_star, u_ref, H_diag, p1_val, pm, prob, sol, rows, flags)
        _check_rows(out)
        return out

    # training path: record everything needed for gradients on the tape
    z_var = tape.leaf(z_k)
    raw = head.backbone.forward(tape, z_var, prefix=f"{head.name}/backbone")
    u_ref_var = ad.vslice(tape, raw, 0, q)
    H_var = ad.add_const(tape, ad.softplus(tape, ad.vslice(tape, raw, q, 2 * q)), H_FLOOR)
    pm_var = ad.softplus(tape, ad.vslice(tape, raw, 2 * q, 2 * q + 1))
    if not isinstance(p1, ad.Var):
        p1 = tape.leaf(np.array([float(p1)]))
    p1_val = float(p1.value[0])
    pm = float(pm_var.value[0])

    row_cascades, rows, flags = [], [], []
    for cascade in cascades:
        try:
            rows.append(hocbf.assemble_row(cascade, sys, x, p1_val, pm))
            row_cascades.append(cascade)
        except hocbf.DegenerateRow:
            flags.append(f"degenerate_row:{cascade.constraint_id}")
    Gb, hb = box_rows(sys)
    G = np.vstack([np.array([r.as_qp_row()[0] for r in rows]).reshape(-1, q), Gb])
    h = np.concatenate([np.array([r.as_qp_row()[1] for r in rows]), hb])

    H_diag = H_var.value
    u_ref = u_ref_var.value
    prob = qp.QpProblem(np.diag(H_diag), -H_diag * u_ref, G, h)
    try:
        sol = qp.solve(prob, solver_opts)
    except qp.Infeasible as exc:
        exc.state = x
        raise

    def qp_vjp(g):
        grads = qp.solve_backward(prob, sol, g)
        dH = np.diag(grads.dQ) - grads.dc * u_ref
        du_ref = -grads.dc * H_diag
        # penalty sensitivities enter through the cascade rows of h; the
        # QP stores h_row = -rhs, hence the sign flip on row_gradients
        dp1 = 0.0
        dpm = 0.0
        for r, cascade in enumerate(row_cascades):
            d_rhs_p1, d_rhs_pm = hocbf.row_gradients(cascade, sys, x, p1_val, pm)
            dp1 -= grads.dh[r] * d_rhs_p1
            dpm -= grads.dh[r] * d_rhs_pm
        return dH, du_ref, np.array([dp1]), np.array([dpm])

    u_var = tape.custom(sol.u_star, (H_var, u_ref_var, p1, pm_var), qp_vjp)

    out = HeadOutput(sol.u_star, u_ref, H_diag, p1_val, pm, prob, sol, rows, flags,
                     u_var=u_var, u_ref_var=u_ref_var)
    _check_rows(out)
    return out


def _check_rows(out: HeadOutput):
    """Every optimal solve must satisfy its cascade rows to tolerance."""
    if out.sol.status != "optimal" or not out.rows:
        return
    for row in out.rows:
        resid = float(row.a @ out.u) - row.rhs
        if resid < -ROW_SLACK:
            raise RuntimeError(f"barrier row violated by optimal solve: {resid:.3e}")


def head_loss(tape: ad.Tape, out: HeadOutput, label: np.ndarray,
              lambda_ref: float = 0.5) -> ad.Var:
    """MSE on the head output plus a weighted MSE on the reference control."""
    loss = ad.mse(tape, out.u_var, label)
    if lambda_ref:
        loss = ad.add(tape, loss, ad.scale(tape, lambda_ref, ad.mse(tape, out.u_ref_var, label)))
    return loss
