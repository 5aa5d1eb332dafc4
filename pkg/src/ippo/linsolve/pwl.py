"""Epigraph expansion of separable convex piecewise-linear objective terms."""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .model import GE, LinearProgram, MixedIntegerModel, ModelError, SeparablePWLTerm


def quadratic_pwl(var: int, lo: float, hi: float, segments: int = 64, weight: float = 1.0,
                  center: float = 0.0) -> SeparablePWLTerm:
    """Interpolate ``weight * (x - center)**2`` at uniform breakpoints on [lo, hi].

    The interpolant overestimates by at most ``weight * (delta / 2)**2`` where
    ``delta = (hi - lo) / segments``. ``center`` is added as a breakpoint when it
    falls strictly inside the range so the minimum is represented exactly.
    """
    if not (np.isfinite(lo) and np.isfinite(hi)) or hi <= lo:
        raise ModelError("quadratic PWL term needs a finite, nonempty range")
    bp = np.linspace(lo, hi, int(segments) + 1)
    if lo < center < hi and not np.any(np.isclose(bp, center, rtol=0, atol=1e-12)):
        bp = np.sort(np.append(bp, center))
    return SeparablePWLTerm(var, bp, weight * (bp - center) ** 2)


def quadratic_pwl_error(lo: float, hi: float, segments: int, weight: float = 1.0) -> float:
    delta = (hi - lo) / segments
    return weight * (delta / 2.0) ** 2


def _merged_segments(term: SeparablePWLTerm):
    """(slope, intercept) for each maximal run of equal slopes."""
    bp, vals = term.breakpoints, term.values
    slopes = term.slopes
    scale = max(1.0, float(np.max(np.abs(slopes))))
    cuts = []
    for k, s in enumerate(slopes):
        if cuts and abs(s - cuts[-1][0]) <= 1e-12 * scale:
            continue
        cuts.append((float(s), float(vals[k] - s * bp[k])))
    return cuts


def pwl_expand(m: MixedIntegerModel) -> MixedIntegerModel:
    """Replace every PWL term with an epigraph variable and one cut per segment.

    Epigraph variables are appended after the existing columns in term order
    and carry objective coefficient 1; cut rows are appended after the existing
    rows, so all original indices stay valid. No binaries are introduced.
    """
    if not m.pwl_terms:
        return m
    lp = m.base
    n, nr = lp.n_vars, lp.n_rows
    lo, hi, c = lp.lo.copy(), lp.hi.copy(), lp.c.copy()
    new_lo, new_c = [], []
    ri, ci, vals, rhs = [], [], [], []
    names = list(lp.var_names) if lp.var_names else [f"x{j}" for j in range(n)]
    rnames = list(lp.row_names) if lp.row_names else [f"r{i}" for i in range(nr)]
    row = 0
    for k, term in enumerate(m.pwl_terms):
        j = term.variable_ref
        lo[j] = max(lo[j], term.breakpoints[0])
        hi[j] = min(hi[j], term.breakpoints[-1])
        if lo[j] > hi[j]:
            raise ModelError(f"PWL range of variable {j} does not meet its bounds")
        t = n + k
        new_lo.append(float(np.min(term.values)))
        new_c.append(1.0)
        names.append(f"pwl{k}")
        for s, b0 in _merged_segments(term):
            # t - s x >= b0
            ri += [row, row] if s != 0.0 else [row]
            ci += [t, j] if s != 0.0 else [t]
            vals += [1.0, -s] if s != 0.0 else [1.0]
            rhs.append(b0)
            rnames.append(f"pwl{k}_cut{row}")
            row += 1
    k_terms = len(m.pwl_terms)
    cuts = sp.csr_matrix((vals, (ri, ci)), shape=(row, n + k_terms))
    A = sp.vstack([sp.hstack([lp.A, sp.csr_matrix((nr, k_terms))]), cuts]).tocsr()
    expanded = LinearProgram(
        np.concatenate([c, new_c]), A, lp.senses + (GE,) * row,
        np.concatenate([lp.rhs, rhs]),
        np.concatenate([lo, new_lo]), np.concatenate([hi, np.full(k_terms, np.inf)]),
        tuple(names), tuple(rnames),
    )
    return MixedIntegerModel(expanded, m.binaries, m.comp_pairs, ())
