# %% [markdown]
# # Chaotic canards with two crossings
#
# A twisted variant of the three-dimensional example has a repelling branch
# that crosses the attracting one several times.  Two well-separated
# crossings give two rectangle charts, and the return map between them
# satisfies all four covering relations at eps = 0.01.
#
# This run takes a few minutes.

# %%
from canardkit.canard import prepare_geometry
from canardkit.chaos import (
    build_multi_chart, entropy_lower_bound, realize_slowfast_itineraries, verify_slowfast_coverings,
)
from canardkit.sysdef import builtin_system

sys_ = builtin_system("paper3d_twist", {"a": 3, "b": -1, "eps": 0.01})
geom = prepare_geometry(sys_)
picked = [geom.records[0], geom.records[3]]
for r in picked:
    print(f"crossing sigma = {r.sigma:.4f}, A = {r.A:+.3f}")

# %%
charts = build_multi_chart(sys_, picked, branches=(geom.ga, geom.gr))
print("common alpha", charts[0].alpha)
cm = verify_slowfast_coverings(sys_, charts, progress=lambda i, j, rep: print(f"  covering {i + 1} -> {j + 1}: {rep.passed}"))
ent = entropy_lower_bound(2, cm)
print("all coverings pass:", cm.all_pass, "| entropy", ent.value, "|", ent.evidence)

# %%
its = realize_slowfast_itineraries(sys_, charts, 6)
print(len(its.results), "words of length 6, worst residual", its.max_residual)
