# %% [markdown]
# # Planar canards of prescribed size
#
# For x' = y, eps y' = -x + F(y + a) the cycles born at a = 0 grow explosively
# as a moves through an exponentially thin window.  Bisection on a, driven by
# the mismatch of the forward and backward orbits through (alpha, 0), picks out
# the cycle whose rightmost point on y = 0 is alpha.
#
# With F(y) = y^2 the flow at a = 0 is reversible under (t, y) -> (-t, -y), so
# the whole family sits at a = 0 exactly and bisection lands on it.

# %%
from canardkit import planar
from canardkit.sysdef import builtin_system

sys_ = builtin_system("lienard", {"F": "y**2", "eps": 0.01})
gate = planar.gate_bracket(sys_, -0.2, 0.2)
print("det", gate.lo.det, gate.hi.det, "trace product", gate.trace_product)

# %%
for alpha in (0.25, 0.5, 0.75):
    r = planar.magnitude_continuation(sys_, alpha, a_bracket=(-0.2, 0.2), n_samples=5)
    print(f"alpha {alpha}: a_eps = {r.a_eps:+.3e}, achieved {r.achieved:.6f}, closure {r.closure:.1e}")

# %% [markdown]
# A cubic term breaks the symmetry, and a_eps then moves monotonically with alpha.

# %%
cubic = builtin_system("lienard", {"F": "y**2 + y**3/3", "eps": 0.1})
for alpha in (0.2, 0.5, 0.8):
    r = planar.magnitude_continuation(cubic, alpha, a_bracket=(-0.2, 0.2), n_samples=3)
    print(f"alpha {alpha}: a_eps = {r.a_eps:+.6f}")
