# %% [markdown]
# # Covering relations on an affine horseshoe
#
# Two boxes on the x-axis; each branch stretches its box by 3 across both
# boxes and contracts y by 3.  Every one of the four coverings holds, so any
# symbol sequence is realized by an orbit.

# %%
import itertools

import numpy as np

from canardkit.chaos import AffineHorseshoe, entropy_lower_bound, parse_symbols, realize_itinerary

hs = AffineHorseshoe()
cm = hs.covering_matrix()
print("coverings:\n", cm.verdicts)

# %%
words = list(itertools.product(range(2), repeat=6))
res = [realize_itinerary(hs, hs.boxes, w) for w in words]
print(len(res), "itineraries, worst residual", max(r.max_residual for r in res))

# %% [markdown]
# Periodic words give periodic points; "12" alternates between the boxes.

# %%
p = realize_itinerary(hs, hs.boxes, parse_symbols("12"), periodic=True).point
print("period-2 point", p, "closed form", hs.periodic_point((0, 1)))
print("entropy bound", entropy_lower_bound(2, cm).value, "=", np.log(2))
