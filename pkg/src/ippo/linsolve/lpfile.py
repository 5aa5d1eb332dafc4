"""Export models in the LP text format read by most external MILP solvers.

PWL terms are written through their epigraph expansion. Each complementarity
pair becomes an explicit nonnegative slack column plus an SOS1 set with the
multiplier, which keeps the file free of big-M constants.
"""
from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .model import EQ, GE, LE, LinearProgram, MixedIntegerModel
from .pwl import pwl_expand

_SENSE = {LE: "<=", GE: ">=", EQ: "="}


def fmt(v: float) -> str:
    return f"{float(v):.17g}"


def _clean(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.]", "_", name)


def _terms(coefs, names) -> str:
    parts = []
    for a, nm in zip(coefs, names):
        if a == 0.0:
            continue
        sign = "-" if a < 0 else "+"
        parts.append(f"{sign} {fmt(abs(a))} {nm}")
    if not parts:
        return "0 " + names[0] if names else "0"
    out = " ".join(parts)
    return out[2:] if out.startswith("+ ") else "-" + out[1:]


def lp_text(model: MixedIntegerModel | LinearProgram) -> str:
    if isinstance(model, LinearProgram):
        model = MixedIntegerModel(model)
    model = pwl_expand(model)
    lp = model.base
    n = lp.n_vars
    vnames = [_clean(v) for v in lp.var_names] if lp.var_names else [f"x{j}" for j in range(n)]
    rnames = [_clean(r) for r in lp.row_names] if lp.row_names else [f"r{i}" for i in range(lp.n_rows)]
    slack_of = {p.slack_ref: f"slk_{rnames[p.slack_ref]}" for p in model.comp_pairs}
    A = lp.A.tocsr()

    lines = ["\\ exported by ippo.linsolve", "Minimize"]
    nz = np.flatnonzero(lp.c)
    lines.append(" obj: " + (_terms(lp.c[nz], [vnames[j] for j in nz]) if nz.size else f"0 {vnames[0]}"))
    lines.append("Subject To")
    for i in range(lp.n_rows):
        lo, hi = A.indptr[i], A.indptr[i + 1]
        cols, vals = A.indices[lo:hi], A.data[lo:hi]
        names = [vnames[j] for j in cols]
        coefs = list(vals)
        sense = lp.senses[i]
        if i in slack_of:
            # LE: a x + s = b ; GE: a x - s = b
            names.append(slack_of[i])
            coefs.append(1.0 if sense == LE else -1.0)
            sense = EQ
        lines.append(f" {rnames[i]}: {_terms(coefs, names)} {_SENSE[sense]} {fmt(lp.rhs[i])}")
    lines.append("Bounds")
    bin_set = set(model.binaries)
    for j in range(n):
        if j in bin_set:
            continue
        lo, hi = lp.lo[j], lp.hi[j]
        if np.isinf(lo) and np.isinf(hi):
            lines.append(f" {vnames[j]} free")
        elif lo == hi:
            lines.append(f" {vnames[j]} = {fmt(lo)}")
        else:
            lo_s = "-inf" if np.isinf(lo) else fmt(lo)
            hi_s = "+inf" if np.isinf(hi) else fmt(hi)
            lines.append(f" {lo_s} <= {vnames[j]} <= {hi_s}")
    if model.binaries:
        lines.append("Binaries")
        lines.extend(f" {vnames[j]}" for j in model.binaries)
    if model.comp_pairs:
        lines.append("SOS")
        for k, p in enumerate(model.comp_pairs):
            lines.append(f" cp{k}: S1:: {slack_of[p.slack_ref]}:1 {vnames[p.dual_ref]}:2")
    lines.append("End")
    return "\n".join(lines) + "\n"


def write_lp(model, path) -> Path:
    path = Path(path)
    path.write_text(lp_text(model))
    return path
