"""From raw fixations to attention heatmaps and binary masks.

Parses a fixation CSV, splats duration-weighted Gaussians, then sweeps the
threshold to show how the mask shrinks as lambda rises.
"""

import io

import numpy as np

from steerdiff.gaze import compute_hva, parse_fixations, threshold_hva
from steerdiff.phantom import PhantomSpec, generate_sample
from steerdiff.pngio import save_image

from _util import outdir, tile

out = outdir("02_gaze_to_attention")

csv_text = "x,y,duration_ms\n20,30,400\n22,31,250\n45,40,120\n70,20,90\n"
seq, warnings = parse_fixations(io.StringIO(csv_text), 64, 64)
print(f"parsed {len(seq)} fixations ({warnings} clamped); "
      f"total dwell {seq.total_duration():.0f} ms")

v = compute_hva(seq, 64, 64, sigma=3.2)
print(f"attention peak at {np.unravel_index(v.grid.argmax(), v.grid.shape)} "
      f"(value {v.grid.max():.2f})")

panels = [v.grid]
for lam in (0.2, 0.4, 0.6, 0.8):
    mask = threshold_hva(v, lam)
    panels.append(mask.grid / 255.0)
    print(f"lambda={lam:.1f}: {int(mask.as_bool().sum())} mask pixels")
save_image(out / "heatmap_and_masks.png", tile(panels, cols=5))

# and the same machinery on a synthetic phantom's gaze
s = generate_sample(PhantomSpec(), "focal", seed=3)
v2 = compute_hva(s.gaze, 64, 64, sigma=3.2)
m2 = threshold_hva(v2, 0.6)
save_image(out / "phantom_attention.png",
           tile([s.image, v2.grid, m2.grid / 255.0], cols=3))
print(f"wrote {out}/heatmap_and_masks.png and phantom_attention.png")
