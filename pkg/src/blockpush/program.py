"""Multi-stage NLP container produced by the transcription, consumed by the solver.

The program is the standard multi-stage template: stage-separable cost,
state-transition equalities linking consecutive stages through a constant
selector E, stage-local (linear) equality rows, two-sided stage inequality
rows, and simple variable bounds.  Complementarity products enter as
inequality rows whose bounds depend on the relaxation parameter delta, so the
homotopy only moves bounds and never rebuilds evaluators.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass
class StageEval:
    """One stage's evaluation: cost, defect, inequalities (+ derivatives).

    Evaluation orders: 0 residuals only, 1 adds first derivatives, 2 adds the
    per-row Hessians of the inequality rows (exact for the product rows, which
    carry the complementarity curvature the cost Hessian cannot see).
    """

    f: float
    g: np.ndarray | None
    c: np.ndarray | None  # state transition output, empty at the last stage
    c_jac: np.ndarray | None
    h: np.ndarray
    h_jac: np.ndarray | None
    h_hess: np.ndarray | None = None  # (n_h, n_z, n_z)


@dataclass
class MultistageNlp:
    """Dimensions, evaluators, and bounds of the assembled program."""

    n_stages: int
    n_z: int
    n_x: int  # defect row count (state dimension)
    stage_eval: Callable[[int, np.ndarray, int], StageEval]
    cost_hessian: Callable[[int], np.ndarray]
    transition_selector: np.ndarray  # E: (n_x, n_z), constant across stages
    eq_matrix: list[np.ndarray]  # per stage, (m_e, n_z), possibly 0 rows
    eq_rhs: list[np.ndarray]
    z_lower: np.ndarray  # (n_stages, n_z)
    z_upper: np.ndarray
    h_lower_base: np.ndarray  # (n_stages, n_h); -inf for one-sided rows
    h_upper_base: np.ndarray
    h_relax_lower: np.ndarray  # bool (n_h,): lower bound is -delta
    h_relax_upper: np.ndarray  # bool (n_h,): upper bound is +delta
    h_labels: list[str]
    meta: dict = field(default_factory=dict)

    @property
    def n_h(self) -> int:
        return len(self.h_labels)

    def ineq_bounds(self, delta: float) -> tuple[np.ndarray, np.ndarray]:
        """Stage inequality bounds at relaxation delta."""
        hl = self.h_lower_base.copy()
        hu = self.h_upper_base.copy()
        hl[:, self.h_relax_lower] = -delta
        hu[:, self.h_relax_upper] = delta
        return hl, hu

    def describe(self) -> dict:
        """Dimensions and sparsity summary (for --dump-nlp)."""
        m_eq = sum(g.shape[0] for g in self.eq_matrix)
        m_defect = self.n_x * (self.n_stages - 1)
        finite_l = np.isfinite(self.h_lower_base) | self.h_relax_lower
        finite_u = np.isfinite(self.h_upper_base) | self.h_relax_upper
        m_ineq_rows = int(finite_l.sum() + finite_u.sum())
        bound_rows = int(
            np.isfinite(self.z_lower).sum() + np.isfinite(self.z_upper).sum()
        )
        return {
            "n_stages": self.n_stages,
            "n_z": self.n_z,
            "n_x": self.n_x,
            "total_variables": self.n_stages * self.n_z,
            "defect_equalities": m_defect,
            "boundary_and_stage_equalities": m_eq,
            "total_equalities": m_defect + m_eq,
            "stage_inequality_rows": self.n_h,
            "one_sided_inequalities": m_ineq_rows,
            "variable_bound_sides": bound_rows,
            "h_labels": self.h_labels,
            "stage_coupling": "block-tridiagonal (row k touches z_k and z_{k+1} only)",
            "meta": self.meta,
        }
