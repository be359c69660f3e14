"""Gaze-guided hypothesis selection.

Builds per-class image bags, masks every same-class candidate with a gaze
mask, scores each against the bag in embedding space, and keeps the best.
A quickly trained classifier provides the embedding.
"""

import numpy as np

from steerdiff.classifier import FeatureExtractor, train_classifier
from steerdiff.gaze import compute_hva, threshold_hva
from steerdiff.hypotheses import DiseaseBag, apply_mask, select_best
from steerdiff.phantom import PhantomSpec, generate_sample
from steerdiff.pngio import save_image
from steerdiff.seeds import derive_seed

from _util import outdir, tile

out = outdir("04_hypothesis_selection")
spec = PhantomSpec()
names = spec.class_names()

print("training a small feature extractor (a minute or so)...")
imgs, labels = [], []
for ci, name in enumerate(names):
    for i in range(24):
        imgs.append(generate_sample(spec, name, derive_seed(0, "demo4", name, i)).image)
        labels.append(ci)
clf, _ = train_classifier(np.stack(imgs)[:, None], np.array(labels), names,
                          seed=0, epochs=12)
extractor = FeatureExtractor(clf)

bag = DiseaseBag({
    name: [generate_sample(spec, name, derive_seed(1, "bag", name, i)).image
           for i in range(6)]
    for name in names if name != "no_finding"
})

query = generate_sample(spec, "focal", seed=123)
mask = threshold_hva(compute_hva(query.gaze, 64, 64, sigma=3.2), 0.6)
best = select_best(mask, bag, "focal", extractor)
print(f"best hypothesis: bag index {best.source_index}, score {best.score:.4f}")

candidates = [apply_mask(im, mask) for im in bag.images("focal")]
save_image(out / "candidates.png", tile(candidates, cols=6))
save_image(out / "query_mask_best.png",
           tile([query.image, mask.grid / 255.0, best.image], cols=3))
print(f"wrote {out}/candidates.png and query_mask_best.png")
