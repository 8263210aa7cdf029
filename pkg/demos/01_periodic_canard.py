# %% [markdown]
# # A periodic canard in a three-dimensional slow-fast system
#
# The system has two slow variables and one fast one:
#
#     x1' = -a x2 + y/3,   x2' = x1 + 1,   eps y' = x1 + y^2 + x2 y.
#
# Its slow surface folds along a line.  One reduced trajectory runs down the
# attracting sheet, another runs up the repelling sheet, and where their
# projections cross, a periodic orbit that follows the repelling sheet for an
# O(1) time can exist.

# %%
import numpy as np

from canardkit.canard import build_section_chart, locate_periodic_canard, prepare_geometry
from canardkit.slowgeom import certify_nondegeneracy, find_critical_points
from canardkit.sysdef import builtin_system

sys_ = builtin_system("paper3d", {"a": 3, "eps": 0.1})

# %% [markdown]
# ## The turning point
# The fold carries a single non-degenerate turning point at the origin.

# %%
cp = find_critical_points(sys_)[0]
rep = certify_nondegeneracy(sys_, cp)
print("turning point", np.round(cp.w, 12), "residual", cp.residual)
print({k: round(v, 6) for k, v in rep.values.items()})

# %% [markdown]
# ## The two reduced branches and their crossing

# %%
geom = prepare_geometry(sys_)
rec = geom.records[0]
print(f"first crossing: tau = {rec.tau:.4f}, sigma = {rec.sigma:.4f}, A = {rec.A:.4f}")

# %% [markdown]
# ## Winding certificate and refinement
# The winding of id - W around the parallelogram must equal sgn(A); the
# fixed point inside is then polished by two-sided shooting.

# %%
chart = build_section_chart(sys_, rec, (geom.ga, geom.gr))
pc = locate_periodic_canard(sys_, chart)
print("winding", pc.winding.degree, "sgn(A)", chart.sgnA)
print(f"period {pc.T_min:.5f}  (sigma - tau = {chart.sigma - chart.tau:.5f})")
print(f"closure {pc.closure:.1e}")
print(f"time spent near the repelling sheet: {100 * pc.certificate['fraction_in_repulsive_tube']:.0f}%")
