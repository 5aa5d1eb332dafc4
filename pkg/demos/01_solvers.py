"""The hand-written LP and complementarity MILP solvers on toy models.

Run: python3 demos/01_solvers.py
"""
import numpy as np

from ippo.linsolve import LE, ModelBuilder, certificate_residuals, lp_text, solve_lp, solve_milp

# A production plan: two products, three shared resources, maximize profit.
b = ModelBuilder()
x = b.add_vars(2, obj=[-3.0, -5.0], name="make")
b.add_row([x[0]], [1.0], LE, 4.0, name="plant1")
b.add_row([x[1]], [2.0], LE, 12.0, name="plant2")
b.add_row(x, [3.0, 2.0], LE, 18.0, name="plant3")
lp = b.build_lp()
sol = solve_lp(lp)
print("status", sol.status.value, "profit", -sol.objective_value, "plan", sol.primal)
print("shadow prices", sol.duals)
print("certificate", certificate_residuals(lp, sol))

# Complementarity: a row's slack and a paired variable may not both be positive.
b = ModelBuilder()
y = b.add_vars(2, hi=10.0, obj=[-1.0, -1.0], name="y")
r = b.add_row(y, [1.0, 2.0], LE, 8.0)
b.add_pair(r, int(y[0]))
m = b.build()
print(lp_text(m))
res = solve_milp(m)
print("MILP", res.status.value, res.objective_value, res.primal[:2], "nodes", res.nodes)
assert np.isclose(res.objective_value, -8.0)
