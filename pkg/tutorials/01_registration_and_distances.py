# %% [markdown]
# # Registration and the three hand-made distances
#
# A live view and the first frame of a demonstration are compared through
# dense correspondences. Every masked demo pixel with a valid flow vector
# becomes a pair of 3-D points, one per view. A rigid fit between the two
# clouds gives the motion that would align the camera with the demo, and
# its leftovers say how well the two views agree.

# %%
import numpy as np
from scipy.spatial.transform import Rotation

from condserv.registration import PointCloudPair, kabsch, register
from condserv.scoring import color_quality, point_quality

rng = np.random.default_rng(0)

# %% [markdown]
# ## A rigid fit on synthetic clouds
#
# Noise-free clouds are recovered to machine precision.

# %%
n = 120
demo_pts = rng.normal(scale=0.05, size=(n, 3))
R = Rotation.from_euler("z", 20, degrees=True).as_matrix()
t = np.array([0.01, -0.02, 0.005])
colors = rng.random((n, 3))
fit = kabsch(PointCloudPair(demo_pts, demo_pts @ R.T + t, colors, colors))
print("rotation error", np.abs(fit.R - R).max(), "translation error", np.abs(fit.t - t).max())

# %% [markdown]
# ## Outliers and the point distance
#
# Shift a tenth of the live points by 5 cm. `register` fits once, drops
# every pair whose residual exceeds 5 mm, and fits again on what is left.
# The point distance is then the mean residual over the kept pairs.

# %%
live_pts = demo_pts @ R.T + t + rng.normal(scale=0.001, size=(n, 3))
live_pts[:12] += [0.05, 0.0, 0.0]
pair = PointCloudPair(demo_pts, live_pts, colors, colors)
reg = register(pair)
print("kept", len(reg.inliers), "of", n)
print(f"point distance {point_quality(reg, pair) * 1000:.3f} mm "
      f"(about 1.6 x the 1 mm noise, as expected for 3-D Gaussian residuals)")

# %% [markdown]
# The colour distance uses the same kept pairs. Identical colours give zero;
# tinting the live view raises it.

# %%
print("colour distance, same colours:", color_quality(reg, pair))
tinted = PointCloudPair(demo_pts, live_pts, colors, np.clip(colors + [0.2, 0, 0], 0, 1))
print("colour distance, red tint:   ", round(color_quality(register(tinted), tinted), 4))
