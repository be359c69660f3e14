"""Shared fixtures: a small phantom set and a classifier trained on it once."""

import numpy as np
import pytest

from steerdiff.classifier import FeatureExtractor, train_classifier
from steerdiff.phantom import PhantomSpec, generate_sample
from steerdiff.seeds import derive_seed


def phantom_array_set(spec, counts, tag, seed=0):
    """Stack generated samples into (images [N,1,R,R], labels, samples)."""
    names = spec.class_names()
    imgs, labels, samples = [], [], []
    for ci, name in enumerate(names):
        for i in range(counts[ci]):
            s = generate_sample(spec, name, derive_seed(seed, tag, name, i))
            imgs.append(s.image)
            labels.append(ci)
            samples.append(s)
    return np.stack(imgs)[:, None], np.array(labels, dtype=np.int64), samples


@pytest.fixture(scope="session")
def phantom_spec():
    return PhantomSpec()


@pytest.fixture(scope="session")
def toy_train_set(phantom_spec):
    return phantom_array_set(phantom_spec, [36, 36, 36], "fixture-train")


@pytest.fixture(scope="session")
def toy_test_set(phantom_spec):
    return phantom_array_set(phantom_spec, [12, 12, 12], "fixture-test")


@pytest.fixture(scope="session")
def toy_classifier(phantom_spec, toy_train_set):
    images, labels, _ = toy_train_set
    clf, _ = train_classifier(images, labels, phantom_spec.class_names(),
                              seed=0, epochs=15)
    return clf


@pytest.fixture(scope="session")
def toy_extractor(toy_classifier):
    return FeatureExtractor(toy_classifier)
