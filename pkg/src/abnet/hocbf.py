"""Barrier-function cascades and their linear-in-control constraint rows.

A safety function b(x) >= 0 of relative degree m induces the recursion

    psi_0 = b,    psi_i = psi_{i-1}_dot + p_i * alpha_i(psi_{i-1})

with class-K functions alpha_i and nonnegative penalties p_i.  With linear
alpha and m = 2 the final condition psi_2 >= 0 is affine in u:

    LgLf_b . u  >=  -(Lf2_b + (p1 + pm) Lf_b + p1 pm b)

which is exactly the inequality row handed to the QP.  The observation
(and hence the penalties) is held piecewise constant within a control
interval, so penalty time-derivatives do not appear.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEGENERATE_TOL = 1e-12


class DegenerateRow(Exception):
    """Control coefficients vanished (singular set); the row carries no information."""


@dataclass(frozen=True)
class ClassK:
    """Linear class-K function alpha(s) = slope * s, slope > 0."""

    slope: float = 1.0

    def __post_init__(self):
        if not self.slope > 0:
            raise ValueError("class-K slope must be strictly positive")

    def __call__(self, s: float) -> float:
        return self.slope * s


@dataclass
class HocbfCascade:
    """One safety constraint's recursion: identifies b on a system plus alphas."""

    constraint_id: str
    rel_degree: int = 2
    alphas: list = field(default_factory=lambda: [ClassK(), ClassK()])

    def __post_init__(self):
        if len(self.alphas) != self.rel_degree:
            raise ValueError("need one class-K function per cascade level")


@dataclass
class ConstraintRow:
    """a . u >= rhs; flips to -a . u <= -rhs when placed into a QP."""

    a: np.ndarray
    rhs: float

    def as_qp_row(self):
        return -self.a, -self.rhs


def psi_values(cascade: HocbfCascade, sys, x, penalties) -> np.ndarray:
    """(psi_0, ..., psi_{m-1}) at x given penalties p_1..p_{m-1}.

    Only the derivative depth supported by the system's analytic callbacks
    (relative degree 2) is computable.
    """
    m = cascade.rel_degree
    penalties = np.atleast_1d(np.asarray(penalties, dtype=np.float64))
    if penalties.shape[0] < m - 1:
        raise ValueError(f"need {m - 1} penalties, got {penalties.shape[0]}")
    if m > 2:
        raise NotImplementedError("analytic callbacks cover relative degree <= 2")
    b, lf_b, _, _ = sys.lie_derivatives(cascade.constraint_id, x)
    out = np.empty(m)
    out[0] = b
    if m == 2:
        out[1] = lf_b + penalties[0] * cascade.alphas[0](b)
    return out


def assemble_row(cascade: HocbfCascade, sys, x, p1: float, pm: float) -> ConstraintRow:
    """Constraint row at x for shared penalty p1 and head penalty pm (m = 2)."""
    if cascade.rel_degree != 2:
        raise NotImplementedError("row assembly implemented for relative degree 2")
    b, lf_b, lf2_b, lglf_b = sys.lie_derivatives(cascade.constraint_id, x)
    if np.max(np.abs(lglf_b)) < DEGENERATE_TOL:
        raise DegenerateRow(f"{cascade.constraint_id}: |LgLf b| < {DEGENERATE_TOL}")
    k1 = cascade.alphas[0].slope
    k2 = cascade.alphas[1].slope
    rhs = -(lf2_b + (p1 * k1 + pm * k2) * lf_b + p1 * pm * k1 * k2 * b)
    return ConstraintRow(np.asarray(lglf_b, dtype=np.float64), float(rhs))


def row_gradients(cascade: HocbfCascade, sys, x, p1: float, pm: float):
    """(d rhs/d p1, d rhs/d pm); the coefficient vector does not depend on p."""
    if cascade.rel_degree != 2:
        raise NotImplementedError
    b, lf_b, _, _ = sys.lie_derivatives(cascade.constraint_id, x)
    k1 = cascade.alphas[0].slope
    k2 = cascade.alphas[1].slope
    d_p1 = -(k1 * lf_b + pm * k1 * k2 * b)
    d_pm = -(k2 * lf_b + p1 * k1 * k2 * b)
    return float(d_p1), float(d_pm)
