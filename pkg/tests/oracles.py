"""Independent reference implementations used to cross-check the package.

Nothing in here may call into the code paths it is used to verify: the QP
oracle enumerates active sets directly, gradients come from central finite
differences, and flow derivatives come from high-order integration of the
raw vector fields.
"""

import itertools

import numpy as np

from abnet import qp


def active_set_qp(Q, c, G, h, dual_tol=1e-9, feas_tol=1e-8):
    """Globally solve min .5u'Qu+c'u s.t. Gu<=h by enumerating active sets.

    For a strictly convex QP any KKT point is the unique optimum, so the
    first candidate set whose equality-constrained solution is primal
    feasible with nonnegative multipliers wins.  Active sets larger than
    dim(u) never need to be considered (a multiplier supported on a
    linearly independent subset always exists).

    Returns (u, lam) or None when no candidate is feasible.
    """
    Q = np.asarray(Q, float)
    c = np.asarray(c, float)
    G = np.asarray(G, float).reshape(-1, c.size)
    h = np.asarray(h, float)
    q, n = c.size, h.size
    for size in range(0, min(q, n) + 1):
        for active in itertools.combinations(range(n), size):
            A = G[list(active)]
            K = np.zeros((q + size, q + size))
            K[:q, :q] = Q
            K[:q, q:] = A.T
            K[q:, :q] = A
            rhs = np.concatenate([-c, h[list(active)]])
            try:
                sol = np.linalg.solve(K, rhs)
            except np.linalg.LinAlgError:
                continue
            u, mu = sol[:q], sol[q:]
            if np.any(mu < -dual_tol):
                continue
            if n and np.max(G @ u - h) > feas_tol:
                continue
            lam = np.zeros(n)
            lam[list(active)] = np.maximum(mu, 0.0)
            return u, lam
    return None


def random_qp(rng, q_max=6, rows_max=12, feasible=True):
    """Random strictly convex QP with Q = A'A + I."""
    q = int(rng.integers(1, q_max + 1))
    n = int(rng.integers(1, rows_max + 1))
    A = rng.normal(size=(q, q))
    Q = A.T @ A + np.eye(q)
    c = rng.normal(size=q)
    G = rng.normal(size=(n, q))
    if feasible:
        # h chosen so a known interior point exists
        u0 = rng.normal(size=q)
        h = G @ u0 + rng.uniform(0.1, 2.0, size=n)
    else:
        h = rng.normal(size=n)
    return qp.QpProblem(Q, c, G, h)


def fd_qp_gradients(prob, grad_u, step=1e-5):
    """Central-difference gradients of grad_u . u*(theta) for every block.

    Off-diagonal Q entries are perturbed in symmetric pairs; the resulting
    directional derivative equals dQ_ij + dQ_ji for the symmetrized
    analytic gradient, so the comparison halves the off-diagonal FD value.
    """
    opts = qp.SolverOptions(tol=1e-12, max_iter=200)

    def value(p):
        return float(np.dot(grad_u, qp.solve(p, opts).u_star))

    q, n = prob.dim, prob.n_ineq
    dQ = np.zeros((q, q))
    for i in range(q):
        for j in range(i, q):
            E = np.zeros((q, q))
            E[i, j] += 1.0
            E[j, i] += 1.0 if i != j else 0.0
            hi = qp.QpProblem(prob.Q + step * E, prob.c, prob.G, prob.h)
            lo = qp.QpProblem(prob.Q - step * E, prob.c, prob.G, prob.h)
            g = (value(hi) - value(lo)) / (2 * step)
            if i == j:
                dQ[i, i] = g
            else:
                dQ[i, j] = dQ[j, i] = g / 2.0
    dc = np.zeros(q)
    for i in range(q):
        e = np.zeros(q)
        e[i] = step
        dc[i] = (value(qp.QpProblem(prob.Q, prob.c + e, prob.G, prob.h))
                 - value(qp.QpProblem(prob.Q, prob.c - e, prob.G, prob.h))) / (2 * step)
    dG = np.zeros((n, q))
    for r in range(n):
        for j in range(q):
            E = np.zeros((n, q))
            E[r, j] = step
            dG[r, j] = (value(qp.QpProblem(prob.Q, prob.c, prob.G + E, prob.h))
                        - value(qp.QpProblem(prob.Q, prob.c, prob.G - E, prob.h))) / (2 * step)
    dh = np.zeros(n)
    for r in range(n):
        e = np.zeros(n)
        e[r] = step
        dh[r] = (value(qp.QpProblem(prob.Q, prob.c, prob.G, prob.h + e))
                 - value(qp.QpProblem(prob.Q, prob.c, prob.G, prob.h - e))) / (2 * step)
    return qp.QpGradients(dQ, dc, dG, dh)


def nondegenerate_random_qp(rng, margin=1e-3):
    """Random QP whose solution has a strictly complementary active set."""
    while True:
        prob = random_qp(rng, q_max=5, rows_max=8)
        try:
            sol = qp.solve(prob, qp.SolverOptions(tol=1e-12, max_iter=200))
        except qp.QpError:
            continue
        if sol.status != "optimal":
            continue
        s = prob.h - prob.G @ sol.u_star
        active = sol.lambda_star > margin
        inactive = s > margin
        if np.all(active | inactive) and not np.any(active & inactive):
            return prob, sol


def rk4_step(f, x, dt):
    k1 = f(x)
    k2 = f(x + 0.5 * dt * k1)
    k3 = f(x + 0.5 * dt * k2)
    k4 = f(x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def flow(f, x, t, n_steps=8):
    """Integrate xdot = f(x) for time t (possibly negative) with RK4."""
    dt = t / n_steps
    y = np.array(x, dtype=float)
    for _ in range(n_steps):
        y = rk4_step(f, y, dt)
    return y


def flow_b_derivatives(f_ctrl, b, x, eps=1e-4):
    """(b, db/dt, d2b/dt2) along xdot = f_ctrl(x) via central differences of the flow."""
    b0 = b(x)
    bp = b(flow(f_ctrl, x, eps))
    bm = b(flow(f_ctrl, x, -eps))
    d1 = (bp - bm) / (2 * eps)
    d2 = (bp - 2 * b0 + bm) / (eps * eps)
    return b0, d1, d2


def central_diff(fun, x, step=1e-5):
    """Dense central-difference gradient of scalar fun at flat array x."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    flat = g.ravel()
    xf = x.ravel()
    for i in range(xf.size):
        old = xf[i]
        xf[i] = old + step
        fp = fun(x)
        xf[i] = old - step
        fm = fun(x)
        xf[i] = old
        flat[i] = (fp - fm) / (2 * step)
    return g
