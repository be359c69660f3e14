"""Small convolutional classifier: feature extractor, evaluation metrics,
and the long-tailed rebalancing experiment.

Four conv blocks with global average pooling give a 64-wide penultimate
feature that doubles as the embedding space for hypothesis selection and the
distribution-distance metric.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from . import nn
from .autodiff import Tensor
from .seeds import derive_rng

FEATURE_DIM = 64


class ClassifierNet(nn.Module):
    def __init__(self, n_classes: int, rng, dtype=np.float32):
        widths = (16, 32, 64, FEATURE_DIM)
        self.conv1 = nn.Conv2d(1, widths[0], 3, rng=rng, dtype=dtype)
        self.norm1 = nn.GroupNorm(widths[0], 8, dtype=dtype)
        self.conv2 = nn.Conv2d(widths[0], widths[1], 3, rng=rng, dtype=dtype)
        self.norm2 = nn.GroupNorm(widths[1], 8, dtype=dtype)
        self.conv3 = nn.Conv2d(widths[1], widths[2], 3, rng=rng, dtype=dtype)
        self.norm3 = nn.GroupNorm(widths[2], 8, dtype=dtype)
        self.conv4 = nn.Conv2d(widths[2], widths[3], 3, rng=rng, dtype=dtype)
        self.norm4 = nn.GroupNorm(widths[3], 8, dtype=dtype)
        self.head = nn.Linear(FEATURE_DIM, n_classes, rng=rng, dtype=dtype)

    def features(self, x: Tensor) -> Tensor:
        h = nn.avg_pool2(ad.silu(self.norm1(self.conv1(x))))
        h = nn.avg_pool2(ad.silu(self.norm2(self.conv2(h))))
        h = nn.avg_pool2(ad.silu(self.norm3(self.conv3(h))))
        h = nn.avg_pool2(ad.silu(self.norm4(self.conv4(h))))
        # global max pooling: a small attention-masked patch must still move
        # the embedding, which mean pooling would dilute away
        return nn.global_max_pool(h)

    def __call__(self, x: Tensor) -> Tensor:
        return self.head(self.features(x))


@dataclass
class Classifier:
    """Trained network plus its label vocabulary."""

    net: ClassifierNet
    classes: list
    trained: bool = False

    def _batches(self, images, batch):
        for i in range(0, len(images), batch):
            yield images[i:i + batch]

    def logits(self, images: np.ndarray, batch: int = 256) -> np.ndarray:
        out = []
        with ad.no_grad():
            for chunk in self._batches(images, batch):
                out.append(self.net(Tensor(chunk)).data)
        return np.concatenate(out, axis=0)

    def probabilities(self, images: np.ndarray, batch: int = 256) -> np.ndarray:
        z = self.logits(images, batch)
        z = z - z.max(axis=1, keepdims=True)
        ez = np.exp(z)
        return ez / ez.sum(axis=1, keepdims=True)

    def features(self, images: np.ndarray, batch: int = 256) -> np.ndarray:
        """Raw penultimate activations, [N, FEATURE_DIM]."""
        out = []
        with ad.no_grad():
            for chunk in self._batches(images, batch):
                out.append(self.net.features(Tensor(chunk)).data)
        return np.concatenate(out, axis=0)

    def predict(self, images: np.ndarray) -> np.ndarray:
        return self.logits(images).argmax(axis=1)

    def save(self, stem):
        ckpt.save_module(stem, self.net, meta={
            "kind": "classifier", "classes": list(self.classes), "trained": self.trained})

    @classmethod
    def load(cls, stem) -> "Classifier":
        tensors, meta = ckpt.load_checkpoint(stem)
        if meta.get("kind") != "classifier":
            raise ValueError(f"checkpoint {stem} is not a classifier (kind={meta.get('kind')!r})")
        net = ClassifierNet(len(meta["classes"]), np.random.default_rng(0))
        net.load_state_dict(tensors)
        return cls(net, list(meta["classes"]), trained=bool(meta.get("trained", False)))


class FeatureExtractor:
    """Unit-normalized penultimate embeddings of a trained classifier."""

    def __init__(self, clf: Classifier):
        self.clf = clf

    @property
    def trained(self) -> bool:
        return self.clf.trained

    @property
    def dim(self) -> int:
        return FEATURE_DIM

    def embed(self, images: np.ndarray) -> np.ndarray:
        """[N,1,H,W] or [H,W] -> [N, dim] rows with unit L2 norm."""
        if not self.trained:
            raise ValueError("feature extractor is untrained; train or load a classifier first")
        imgs = np.asarray(images, dtype=np.float32)
        if imgs.ndim == 2:
            imgs = imgs[None, None]
        elif imgs.ndim == 3:
            imgs = imgs[:, None]
        feats = self.clf.features(imgs).astype(np.float64)
        norms = np.linalg.norm(feats, axis=1, keepdims=True)
        return feats / np.maximum(norms, 1e-12)

    def features_raw(self, images: np.ndarray) -> np.ndarray:
        if not self.trained:
            raise ValueError("feature extractor is untrained; train or load a classifier first")
        return self.clf.features(np.asarray(images, dtype=np.float32))


def train_classifier(images, labels, classes, seed: int = 0, epochs: int = 40,
                     batch: int = 32, lr: float = 1.5e-3, val_frac: float = 0.1,
                     flip_augment: bool = True, mask_augment: float = 0.0,
                     mask_centers=None, consistency: float = 1.0,
                     curve_path=None) -> tuple:
    """Train on [N,1,H,W] images in [0,1]; returns (Classifier, curves).

    Deterministic per seed: shuffling, init, augmentation and updates all
    derive from it. ``mask_augment`` is the probability of zeroing a sample
    outside a disc drawn around one of its ``mask_centers`` entries
    ([(cx, cy, r), ...] per sample; empty list means anywhere). Keeping the
    disc on a lesion preserves the label, and the ``consistency`` term pulls a
    masked crop's embedding toward its full image's embedding, which is what
    hypothesis scoring relies on. ``curves`` lists (epoch, train_loss,
    val_loss) rows.
    """
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    present = np.unique(labels)
    if len(present) < 2:
        raise ValueError(f"need at least 2 classes present in training data, got {present}")
    if len(images) != len(labels) or len(images) == 0:
        raise ValueError("images/labels length mismatch or empty training set")

    rng = derive_rng(seed, "classifier", "init")
    net = ClassifierNet(len(classes), rng)
    order = derive_rng(seed, "classifier", "split").permutation(len(images))
    n_val = max(1, int(round(val_frac * len(images)))) if len(images) > 10 else 0
    val_idx, train_idx = order[:n_val], order[n_val:]
    opt = nn.Adam(net.parameters(), lr=lr, clip_norm=1.0)

    curves = []
    for epoch in range(epochs):
        erng = derive_rng(seed, "classifier", "epoch", epoch)
        idx = train_idx[erng.permutation(len(train_idx))]
        losses = []
        for i in range(0, len(idx), batch):
            sel = idx[i:i + batch]
            if len(sel) < 2:
                continue
            x = images[sel]
            if flip_augment or mask_augment > 0:
                x = x.copy()
            flips = np.zeros(len(sel), dtype=bool)
            if flip_augment:
                flips = erng.random(len(sel)) < 0.5
                x[flips] = x[flips, :, :, ::-1]
            masked = np.zeros(len(sel), dtype=bool)
            if mask_augment > 0:
                unmasked = x.copy()
                h, w = x.shape[2:]
                ys, xs = np.mgrid[0:h, 0:w]
                for bi, si in enumerate(sel):
                    if erng.random() >= mask_augment:
                        continue
                    centers = mask_centers[si] if mask_centers is not None else []
                    if centers:
                        cx, cy, r = centers[int(erng.integers(len(centers)))]
                        cx = cx + erng.uniform(-0.3, 0.3) * r
                        cy = cy + erng.uniform(-0.3, 0.3) * r
                        rad = r * erng.uniform(0.7, 1.2)
                        if flips[bi]:
                            cx = w - 1 - cx
                    else:
                        cy, cx = erng.uniform(0.25, 0.75, 2) * (h, w)
                        rad = erng.uniform(3.0, 6.0) * h / 64.0
                    keep = (ys - cy) ** 2 + (xs - cx) ** 2 <= rad * rad
                    x[bi, 0] = np.where(keep, x[bi, 0], 0.0)
                    masked[bi] = True
            feats = net.features(Tensor(x))
            loss = ad.softmax_cross_entropy(net.head(feats), labels[sel])
            if masked.any() and consistency > 0:
                # cosine pull of masked-crop embeddings toward their sources
                with ad.no_grad():
                    full = net.features(Tensor(unmasked[masked])).data
                full = full / np.maximum(np.linalg.norm(full, axis=1, keepdims=True), 1e-9)
                targets = np.zeros_like(feats.data)
                targets[masked] = full
                sq = ad.tsum(ad.mul(feats, feats), axis=1, keepdims=True)
                fn = ad.mul(feats, ad.pow_const(ad.add_const(sq, 1e-9), -0.5))
                cos = ad.tsum(ad.mul(fn, Tensor(targets)))
                loss = ad.add(loss, ad.mul_const(cos, -consistency / float(masked.sum())))
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            losses.append(float(loss.data))
        val_loss = float("nan")
        if n_val:
            with ad.no_grad():
                vl = ad.softmax_cross_entropy(net(Tensor(images[val_idx])), labels[val_idx])
            val_loss = float(vl.data)
        curves.append((epoch, float(np.mean(losses)), val_loss))

    if curve_path is not None:
        Path(curve_path).parent.mkdir(parents=True, exist_ok=True)
        with open(curve_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "train_loss", "val_loss"])
            w.writerows(curves)

    clf = Classifier(net, list(classes), trained=True)
    return clf, curves


# ---------------------------------------------------------------------------
# evaluation


def auc_from_scores(y_true, scores) -> float | None:
    """Rank-statistic AUC with tie-averaged ranks; None if one class absent."""
    y_true = np.asarray(y_true, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(y_true.sum())
    n_neg = int((~y_true).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average rank, 1-based
        i = j + 1
    pos_rank_sum = ranks[y_true].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class EvalReport:
    classes: list
    auc: dict                  # class -> float or None (absent from test set)
    macro_f1: float
    balanced_accuracy: float
    group_accuracy: dict       # group -> mean recall over its classes
    confusion: np.ndarray      # [true, predicted]
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "classes": list(self.classes),
            "auc": {k: (None if v is None else float(v)) for k, v in self.auc.items()},
            "macro_f1": float(self.macro_f1),
            "balanced_accuracy": float(self.balanced_accuracy),
            "group_accuracy": {k: float(v) for k, v in self.group_accuracy.items()},
            "confusion": self.confusion.tolist(),
            "notes": list(self.notes),
        }


def report_from_predictions(classes, y_true, y_pred, scores=None, grouping=None) -> EvalReport:
    """Build an EvalReport from integer labels, predictions and [N,K] scores."""
    k = len(classes)
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    confusion = np.zeros((k, k), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        confusion[t, p] += 1

    notes = []
    recalls = {}
    f1s = []
    for c in range(k):
        support = confusion[c].sum()
        tp = confusion[c, c]
        fp = confusion[:, c].sum() - tp
        fn = support - tp
        if support == 0:
            notes.append(f"class {classes[c]} absent from test set; excluded from macro averages")
            continue
        recalls[c] = tp / support
        prec = tp / (tp + fp) if (tp + fp) > 0 else 0.0
        rec = recalls[c]
        f1s.append(0.0 if (prec + rec) == 0 else 2 * prec * rec / (prec + rec))

    bacc = float(np.mean(list(recalls.values()))) if recalls else 0.0
    macro_f1 = float(np.mean(f1s)) if f1s else 0.0

    auc = {}
    for c in range(k):
        if scores is None or confusion[c].sum() == 0:
            auc[classes[c]] = None
        else:
            auc[classes[c]] = auc_from_scores(y_true == c, scores[:, c])

    group_acc = {}
    if grouping:
        name_to_idx = {name: i for i, name in enumerate(classes)}
        covered = [m for members in grouping.values() for m in members]
        if sorted(covered) != sorted(set(covered)) or set(covered) - set(classes):
            raise ValueError(f"grouping {grouping} does not partition the class set {classes}")
        for group, members in grouping.items():
            vals = [recalls[name_to_idx[m]] for m in members if name_to_idx[m] in recalls]
            group_acc[group] = float(np.mean(vals)) if vals else float("nan")

    return EvalReport(list(classes), auc, macro_f1, bacc, group_acc, confusion, notes)


def evaluate(clf: Classifier, images, labels, grouping=None) -> EvalReport:
    """Score a trained classifier; AUC comes from the rank statistic."""
    scores = clf.probabilities(np.asarray(images, dtype=np.float32))
    preds = scores.argmax(axis=1)
    return report_from_predictions(clf.classes, labels, preds, scores, grouping)


# ---------------------------------------------------------------------------
# long-tailed rebalancing


def lt_experiment(train_images, train_labels, test_images, test_labels, classes,
                  target: int, seed: int, generator=None, grouping=None,
                  epochs: int = 25) -> dict:
    """Baseline-vs-augmented paired classifier runs under class imbalance.

    ``generator(label_id, count, rng)`` must return [count,1,H,W] images in
    [0,1]; None means no augmentation (the two runs then match exactly).
    Minority classes are topped up to ``target`` training samples.
    """
    train_images = np.asarray(train_images, dtype=np.float32)
    train_labels = np.asarray(train_labels, dtype=np.int64)

    baseline_clf, _ = train_classifier(train_images, train_labels, classes,
                                       seed=seed, epochs=epochs)
    baseline = evaluate(baseline_clf, test_images, test_labels, grouping)

    added = {}
    aug_images, aug_labels = [train_images], [train_labels]
    if generator is not None:
        for label_id in range(len(classes)):
            have = int((train_labels == label_id).sum())
            need = max(0, target - have)
            if need == 0:
                continue
            rng = derive_rng(seed, "lt-generate", label_id)
            extra = np.asarray(generator(label_id, need, rng), dtype=np.float32)
            if extra.shape[0] != need:
                raise ValueError(f"generator returned {extra.shape[0]} images, wanted {need}")
            aug_images.append(extra)
            aug_labels.append(np.full(need, label_id, dtype=np.int64))
            added[classes[label_id]] = need

    if added:
        imgs = np.concatenate(aug_images, axis=0)
        labs = np.concatenate(aug_labels, axis=0)
        augmented_clf, _ = train_classifier(imgs, labs, classes, seed=seed, epochs=epochs)
        augmented = evaluate(augmented_clf, test_images, test_labels, grouping)
    else:
        augmented = baseline

    return {
        "baseline": baseline,
        "augmented": augmented,
        "added": added,
        "baseline_counts": {classes[c]: int((train_labels == c).sum())
                            for c in range(len(classes))},
    }
