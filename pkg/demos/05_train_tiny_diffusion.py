"""Train a tiny denoising backbone from scratch and sample from it.

Runs a few hundred noise-prediction steps on 16x16 phantoms (enough to see
the loss fall and lung-like blobs appear), then runs the reverse chain.
"""

import numpy as np

from steerdiff import diffusion
from steerdiff.diffusion import make_schedule, sample
from steerdiff.phantom import PhantomSpec, generate_sample
from steerdiff.pngio import save_image
from steerdiff.seeds import derive_seed
from steerdiff.unet import NetworkSpec, UNet

from _util import outdir, tile

out = outdir("05_train_tiny_diffusion")
spec = PhantomSpec(resolution=16, levels=2)
names = spec.class_names()

images, labels = [], []
for ci, name in enumerate(names):
    for i in range(30):
        images.append(generate_sample(spec, name, derive_seed(0, "demo5", name, i)).image)
        labels.append(ci)
images = np.stack(images)[:, None]
labels = np.array(labels)

schedule = make_schedule(60, 1e-3, 0.12)
net = UNet(NetworkSpec(levels=2, channels=(16, 32), time_width=32, token_width=16,
                       token_count=len(names), t_max=60),
           np.random.default_rng(0))
provider = diffusion.make_provider(images, labels, schedule)

print("training 600 steps...")
history = diffusion.fit(net, schedule, provider, steps=600, seed=0, lr=2e-3,
                        batch_size=8, progress_every=200)
print(f"loss: first-50 mean {np.mean(history[:50]):.3f} -> "
      f"last-50 mean {np.mean(history[-50:]):.3f}")

grids = []
for token, name in enumerate(names):
    x = sample(net, schedule, tokens=token, shape=(4, 1, 16, 16), seed=7 + token)
    grids.extend((x[:, 0] + 1.0) / 2.0)
save_image(out / "samples_by_class.png", tile(grids, cols=4))
print(f"wrote {out}/samples_by_class.png (rows: {', '.join(names)})")
print("600 steps is a sketch; the acceptance experiments train 10k.")
