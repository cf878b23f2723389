"""A tour of the transport solvers on instances small enough to stare at.

Covers: a balanced plan and its marginals, what the unbalanced solver
does when the masses disagree, and how the unbalanced cost approaches
the balanced one as the marginal penalty grows.

Run:  python3 demos/solver_tour.py
"""

import numpy as np

from uotdl.transport import SinkhornConfig, solve_balanced, solve_unbalanced

np.set_printoptions(precision=4, suppress=True)

grid = np.array([0.0, 1.0, 2.0, 3.0])
C = (grid[:, None] - grid[None, :]) ** 2

print("support:", grid)
print("cost matrix:\n", C)

# --- balanced: equal masses, marginals matched exactly ------------------
mu = np.array([0.1, 0.4, 0.3, 0.2])
nu = np.array([0.25, 0.25, 0.25, 0.25])
res = solve_balanced(mu, nu, C, SinkhornConfig(epsilon=0.1))
print("\nbalanced plan (eps=0.1):\n", res.plan)
print("row sums vs mu:", res.plan.sum(axis=1), mu)
print("col sums vs nu:", res.plan.sum(axis=0), nu)
print(f"objective {res.cost:.4f} after {res.iterations} iterations")

# --- unbalanced: mass can be created and destroyed ----------------------
heavy = np.array([0.6, 0.6, 0.0, 0.0])
light = np.array([0.0, 0.0, 0.3, 0.3])
for tau in (0.1, 1.0, 10.0):
    res = solve_unbalanced(
        heavy, light, C, SinkhornConfig(epsilon=0.05, tau=tau)
    )
    moved = res.plan.sum()
    print(
        f"tau={tau:5}: transported mass {moved:.3f} "
        f"(sources hold {heavy.sum()}, targets want {light.sum()}), "
        f"objective {res.cost:.4f}"
    )
print("small tau destroys mass rather than paying transport;")
print("large tau forces the marginals and pays for it.")

# --- the large-tau limit is the balanced problem ------------------------
mu = np.array([0.7, 0.3])
nu = np.array([0.4, 0.6])
C2 = np.array([[0.0, 1.0], [1.0, 0.0]])
bal = solve_balanced(mu, nu, C2, SinkhornConfig(epsilon=0.05))
print("\nbalanced reference value (product-relative form):", f"{bal.cost_kl:.6f}")
for tau in (1e2, 1e4, 1e6):
    ub = solve_unbalanced(
        mu, nu, C2, SinkhornConfig(epsilon=0.05, tau=tau, max_iters=200000)
    )
    print(f"tau={tau:8.0e}: unbalanced value {ub.cost:.6f} "
          f"(gap {abs(ub.cost - bal.cost_kl):.2e})")
