"""
Colour handling, preprocessing and tiling
=========================================

Patches are read as 8-bit RGB. In grayscale mode the luma is computed
with BT.601 weights and copied into three channels so that networks
expecting colour input can consume it unchanged.
"""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from path24.dataset import (
    PreprocessConfig,
    preprocess_array,
    replicate_channels,
    tile_grid_shape,
    tile_wsi,
    to_grayscale,
)

# %%
# Pure primaries map to their luma weights times 255.
for name, rgb in [("red", (255, 0, 0)), ("green", (0, 255, 0)), ("blue", (0, 0, 255))]:
    y = to_grayscale(np.array(rgb, dtype=np.uint8).reshape(1, 1, 3))[0, 0, 0]
    print(f"{name:5s} -> {y:.3f}")

# a gray image survives replicate then convert unchanged
gray = np.random.default_rng(0).uniform(0, 255, (8, 8, 1))
print("round trip error:", np.abs(to_grayscale(replicate_channels(gray)) - gray).max())

# %%
# Preprocessing resizes to the network input, rescales to [0, 1] and
# normalizes with the ImageNet channel statistics.
rng = np.random.default_rng(1)
patch = rng.integers(0, 256, (300, 300, 3), dtype=np.uint8)
x = preprocess_array(patch, PreprocessConfig("grayscale", 224))
print("preprocessed:", x.shape, x.dtype, "channels equal:", np.allclose(x[..., 0] * 0.229 + 0.485,
                                                                       x[..., 1] * 0.224 + 0.456))

# %%
# Large images are cut into full windows on a stride grid. Windows
# overlapping an exclusion mask, or nearly white, are dropped.
h, w, p, s = 700, 1000, 200, 150
image = np.full((h, w), 120, dtype=np.uint8)
image[:, 800:] = 250  # bright background strip
mask = np.zeros((h, w), dtype=bool)
mask[300:420, 300:500] = True

rows, cols = tile_grid_shape(h, w, p, s)
kept = tile_wsi(image, p, s, exclusion_mask=mask, white_threshold=230)
print(f"grid {rows} x {cols} = {rows * cols} windows, kept {len(kept)}")

fig, ax = plt.subplots(figsize=(6, 4))
ax.imshow(image, cmap="gray", vmin=0, vmax=255)
ax.imshow(np.ma.masked_where(~mask, mask), cmap="autumn", alpha=0.6)
for t in kept:
    ax.add_patch(plt.Rectangle((t.x, t.y), p, p, fill=False, edgecolor="tab:blue"))
ax.set_title("kept tiles")
fig.savefig("tiles.png", dpi=80)
