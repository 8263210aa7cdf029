# %% [markdown]
# # Shrinking epsilon
#
# As eps decreases the canard approaches the singular cycle made of the two
# reduced branches and the vertical jump between them.  Each step reuses the
# previous fixed point as its Newton guess.

# %%
from canardkit.canard import build_section_chart, epsilon_continuation, prepare_geometry
from canardkit.sysdef import builtin_system

sys_ = builtin_system("paper3d", {"a": 3, "eps": 0.1})
geom = prepare_geometry(sys_)
chart = build_section_chart(sys_, geom.records[0], (geom.ga, geom.gr))

# %%
rows = epsilon_continuation(sys_, chart, [0.1, 0.05, 0.025, 0.0125])
print(f"sigma - tau = {chart.sigma - chart.tau:.5f}")
for r in rows:
    print(f"eps {r.epsilon:<7g} period {r.canard.T_min:.5f}  distance to singular cycle {r.hausdorff:.4f}")

# %% [markdown]
# The distance roughly halves with eps, and the period tends to sigma - tau.
