"""The long-tailed rebalancing experiment, miniature edition.

Trains the classifier on a severely imbalanced phantom set, then again with
minority classes topped up, and compares balanced accuracy. To keep this demo
fast the top-up images come straight from the phantom generator (an oracle
generator); the real study plugs in diffusion sampling via the command line's
`lt` subcommand, and the acceptance suite runs that full version.
"""

import numpy as np

from steerdiff.classifier import lt_experiment
from steerdiff.phantom import PhantomSpec, generate_sample
from steerdiff.seeds import derive_rng, derive_seed

spec = PhantomSpec()
names = spec.class_names()


def build(counts, tag):
    imgs, labs = [], []
    for ci, name in enumerate(names):
        for i in range(counts[ci]):
            imgs.append(generate_sample(spec, name, derive_seed(0, tag, name, i)).image)
            labs.append(ci)
    return np.stack(imgs)[:, None], np.array(labs)


print("building imbalanced train set (60/12/4) and balanced test set...")
train_x, train_y = build([60, 12, 4], "lt-train")
test_x, test_y = build([30, 30, 30], "lt-test")


def oracle_generator(label_id, count, rng):
    name = names[label_id]
    return np.stack([
        generate_sample(spec, name, derive_seed(int(rng.integers(2**31)), "aug", name, i)).image
        for i in range(count)])[:, None]


out = lt_experiment(train_x, train_y, test_x, test_y, names, target=30, seed=0,
                    generator=oracle_generator, epochs=20,
                    grouping={"head": ["no_finding"], "medium": ["focal"],
                              "tail": ["streak"]})

b, a = out["baseline"], out["augmented"]
print(f"added per class: {out['added']}")
print(f"{'':14s}{'baseline':>10s}{'augmented':>10s}")
print(f"{'balanced acc':14s}{b.balanced_accuracy:>10.3f}{a.balanced_accuracy:>10.3f}")
print(f"{'macro F1':14s}{b.macro_f1:>10.3f}{a.macro_f1:>10.3f}")
for group in ("head", "medium", "tail"):
    print(f"{group+' recall':14s}{b.group_accuracy[group]:>10.3f}"
          f"{a.group_accuracy[group]:>10.3f}")
