# %% [markdown]
# # Delayed loss of stability in a predator-prey model
#
# With eps = 1e-3 the predator population y collapses onto the axis y = 0 and
# stays there long after the axis has turned repelling.  The exit point is
# predicted by the root xi0 > q/r of xi^q exp(-r xi) = x0^q exp(-r x0).

# %%
from canardkit import planar
from canardkit.sysdef import builtin_system

sys_ = builtin_system("predator_prey", {"eps": 1e-3})
geo = planar.geometry_of(sys_)
print(f"turning point y* = {geo.y_star}, a* = {geo.a_star}, x* = {geo.x_star:.6f}")

# %%
res = planar.simulate_delayed_loss(sys_, x0=0.5, y0=0.3)
print(f"predicted xi0 = {res.xi0:.6f}, simulated jump at x = {res.x_jump:.6f} ({100 * res.rel_error:.2f}% off)")
print(f"smallest y on the way: {res.min_y:.2e}; near-axis invariant drift {res.invariant_drift:.1e}")
