"""The four deterministic filter controls and the canonical stack.

Runs edge, gradient, blob and segmentation filters over one phantom and shows
the fixed channel layout that the filter-stack adapter consumes.
"""

import numpy as np

from steerdiff.filters import CONTROL_KINDS, canny, log_filter, segmentation_map, sobel, stack_controls
from steerdiff.phantom import PhantomSpec, generate_sample
from steerdiff.pngio import save_image

from _util import outdir, tile

out = outdir("03_filter_controls")
s = generate_sample(PhantomSpec(), "streak", seed=11)

maps = [
    canny(s.image, 0.1, 0.3),
    sobel(s.image),
    log_filter(s.image, sigma=2.0),
    segmentation_map(s.lung_mask.grid),
]
for m in maps:
    print(f"{m.kind:13s} nonzero={float((m.grid > 0).mean()):.3f} max={m.grid.max():.3f}")

stack = stack_controls(maps)
print("stack channels:", CONTROL_KINDS)
print("present:", stack.present, "(absent kinds are all-zero channels)")

save_image(out / "image.png", s.image)
save_image(out / "stack.png", tile([stack.channels[i] for i in range(6)], cols=6))
print(f"wrote {out}/image.png and stack.png (channel order: {', '.join(CONTROL_KINDS)})")
