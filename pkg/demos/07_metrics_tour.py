"""What each metric measures, on inputs where the right answer is obvious."""

import numpy as np

from steerdiff.metrics import FeatureCloud, fid, miou, psnr, ssim
from steerdiff.phantom import PhantomSpec, generate_sample

rng = np.random.default_rng(0)
spec = PhantomSpec()
a = generate_sample(spec, "focal", 1).image
b = generate_sample(spec, "focal", 2).image

print("structural similarity")
print(f"  identical images      : {ssim(a, a):+.4f}")
print(f"  same class, new seed  : {ssim(a, b):+.4f}")
print(f"  one-pixel shift       : {ssim(a, np.roll(a, 1, axis=1)):+.4f}")
print(f"  inverted              : {ssim(a, 1 - a):+.4f}")

print("peak signal-to-noise ratio")
print(f"  identical             : {psnr(a, a):.1f} dB (capped sentinel)")
print(f"  +0.1 everywhere       : {psnr(a, np.clip(a + 0.1, 0, 1)):.2f} dB")
print(f"  different sample      : {psnr(a, b):.2f} dB")

m1 = generate_sample(spec, "focal", 1).lung_mask.as_bool()
m2 = generate_sample(spec, "focal", 2).lung_mask.as_bool()
print("mask overlap (mean IoU over foreground/background)")
print(f"  identical masks       : {miou(m1, m1):.3f}")
print(f"  two different lungs   : {miou(m1, m2):.3f}")
print(f"  mask vs its complement: {miou(m1, ~m1):.3f}")

print("distribution distance between feature clouds")
base = rng.standard_normal((2000, 8))
shifted = rng.standard_normal((2000, 8)) + np.array([1, 0, 0, 0, 0, 0, 0, 0])
print(f"  cloud vs itself       : {fid(FeatureCloud(base), FeatureCloud(base)):.2e}")
print(f"  unit mean shift       : {fid(FeatureCloud(base), FeatureCloud(shifted)):.3f}"
      f"  (analytic value 1.0)")
print("note: the pipeline's feature space is the toy classifier's penultimate")
print("layer, so absolute values are only comparable within this project.")
