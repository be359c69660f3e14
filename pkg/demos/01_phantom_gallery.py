"""A tour of the phantom domain: images, lung masks, lesion geometry, gaze.

Generates a small gallery per class and saves image/mask grids plus a gaze
overlay, so you can see what every later stage trains on.
"""

import numpy as np

from steerdiff.phantom import PhantomSpec, generate_sample
from steerdiff.pngio import save_image

from _util import outdir, tile

out = outdir("01_phantom_gallery")
spec = PhantomSpec()

images, masks, overlays = [], [], []
for label in spec.class_names():
    for seed in range(4):
        s = generate_sample(spec, label, seed)
        images.append(s.image)
        masks.append(s.lung_mask.as_bool().astype(float))
        overlay = s.image.copy()
        for f in s.gaze.fixations:
            overlay[int(round(f.y)), int(round(f.x))] = 1.0
        overlays.append(overlay)
        if seed == 0:
            print(f"{label:11s} lesions={len(s.lesion_regions)} "
                  f"gaze_fixations={len(s.gaze)} "
                  f"lung_area={s.lung_mask.as_bool().mean():.2f}")

save_image(out / "images.png", tile(images, cols=4))
save_image(out / "lung_masks.png", tile(masks, cols=4))
save_image(out / "gaze_overlay.png", tile(overlays, cols=4))
print(f"wrote {out}/images.png, lung_masks.png, gaze_overlay.png")
print("rows are classes (no_finding, focal, streak), columns are seeds")
