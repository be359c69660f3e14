"""End-to-end orchestration shared by the command-line tool, the demo scripts
and the acceptance experiments: control extraction over datasets, backbone and
adapter training, controlled generation, evaluation tables, and the
long-tailed augmentation study.
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import diffusion, pngio
from .adapters import FusionConfig, load_adapter, make_adapter, make_residual_fn, sample_controlled
from .analysis import bright_region_mask, dominant_blob_centroid
from .classifier import Classifier, FeatureExtractor
from .config import RunConfig
from .diffusion import NoiseSchedule, make_schedule
from .filters import (CONTROL_KINDS, ControlMap, canny, log_filter,
                      segmentation_map, sobel, stack_controls)
from .gaze import compute_hva, threshold_hva
from .hypotheses import DiseaseBag, select_best
from .metrics import FeatureCloud, embedding_score, fid, miou, psnr, ssim
from .phantom import (PhantomSpec, dataset_arrays, default_classes,
                      load_record_gaze, load_record_image, load_record_mask,
                      read_manifest)
from .seeds import derive_rng, derive_seed
from .unet import NetworkSpec, UNet


def phantom_spec_from_config(cfg: RunConfig) -> PhantomSpec:
    classes = default_classes()[:cfg.phantom.n_classes]
    return PhantomSpec(resolution=cfg.phantom.resolution, classes=classes,
                       noise=cfg.phantom.noise, levels=cfg.diffusion.levels)


# ---------------------------------------------------------------------------
# controls over datasets


def radiomic_maps(image: np.ndarray, lung_mask: np.ndarray, cfg: RunConfig):
    """The four deterministic control maps of one sample."""
    f = cfg.filters
    return [
        canny(image, f.canny_low, f.canny_high),
        sobel(image),
        log_filter(image, f.log_sigma),
        segmentation_map(lung_mask),
    ]


def control_stack_for_record(manifest, rec, cfg: RunConfig) -> np.ndarray:
    image = load_record_image(manifest, rec)
    mask = load_record_mask(manifest, rec)
    return stack_controls(radiomic_maps(image, mask, cfg)).array()


def build_control_stacks(manifest, cfg: RunConfig, records=None) -> np.ndarray:
    """[N, 6, H, W] canonical stacks for every manifest record."""
    if records is None:
        records, _ = read_manifest(manifest)
    return np.stack([control_stack_for_record(manifest, r, cfg) for r in records])


def hva_map_for_record(manifest, rec, cfg: RunConfig, resolution: int):
    seq = load_record_gaze(manifest, rec, resolution)
    v = compute_hva(seq, resolution, resolution, cfg.hva_sigma(resolution),
                    duration_weighting=cfg.gaze.duration_weighting)
    mask = threshold_hva(v, cfg.gaze.lam, absolute=cfg.gaze.absolute_lambda)
    return v, mask


def build_bags(manifest, bag_size: int, seed: int) -> DiseaseBag:
    """Per-class image bags drawn from a manifest (seeded choice)."""
    records, meta = read_manifest(manifest)
    by_label = {}
    for r in records:
        by_label.setdefault(r["label"], []).append(r)
    rng = derive_rng(seed, "bags")
    entries = {}
    for label, recs in sorted(by_label.items()):
        take = min(bag_size, len(recs))
        idx = rng.choice(len(recs), size=take, replace=False)
        entries[label] = [load_record_image(manifest, recs[i]) for i in sorted(idx)]
    return DiseaseBag(entries)


def build_hva_controls(manifest, cfg: RunConfig, records=None, extractor=None,
                       bags=None, mode=None):
    """[N, 1, H, W] gaze-derived controls plus the per-record masks.

    Mode "heatmap" uses the attention map itself; "hypothesis" (default from
    config) masks the matching disease bag and keeps the best-scoring
    candidate, which needs a trained extractor and bags.
    """
    if records is None:
        records, _ = read_manifest(manifest)
    _, meta = read_manifest(manifest)
    resolution = meta.get("resolution", cfg.phantom.resolution)
    mode = mode or cfg.adapters.hva_control
    if mode not in ("heatmap", "hypothesis"):
        raise ValueError(f"unknown hva control mode {mode!r}")
    if mode == "hypothesis":
        if extractor is None or bags is None:
            raise ValueError("hypothesis mode needs a trained extractor and disease bags")
        if not extractor.trained:
            raise ValueError("feature extractor is untrained")
    controls, masks = [], []
    for rec in records:
        v, mask = hva_map_for_record(manifest, rec, cfg, resolution)
        if mode == "heatmap":
            controls.append(v.grid[None])
        else:
            best = select_best(mask, bags, rec["label"], extractor)
            controls.append(best.image[None])
        masks.append(mask)
    return np.stack(controls).astype(np.float32), masks


# ---------------------------------------------------------------------------
# backbone + adapter training


def network_spec_from_config(cfg: RunConfig, token_count: int) -> NetworkSpec:
    d = cfg.diffusion
    return NetworkSpec(levels=d.levels, channels=tuple(d.channels),
                       time_width=d.time_width, token_width=d.token_width,
                       token_count=token_count, t_max=d.T)


def schedule_from_config(cfg: RunConfig) -> NoiseSchedule:
    d = cfg.diffusion
    return make_schedule(d.T, d.beta_start, d.beta_end)


def save_backbone(stem, net: UNet, cfg: RunConfig, classes):
    ckpt.save_module(stem, net, meta={
        "kind": "backbone",
        "netspec": net.spec.to_dict(),
        "schedule": {"T": cfg.diffusion.T, "beta_start": cfg.diffusion.beta_start,
                     "beta_end": cfg.diffusion.beta_end},
        "classes": list(classes),
        "trained": net.trained,
    })


def load_backbone(stem):
    """Returns (net, schedule, classes) from a backbone checkpoint."""
    tensors, meta = ckpt.load_checkpoint(stem)
    if meta.get("kind") != "backbone":
        raise ValueError(f"checkpoint {stem} is not a backbone (kind={meta.get('kind')!r})")
    spec = NetworkSpec.from_dict(meta["netspec"])
    net = UNet(spec, np.random.default_rng(0))
    net.load_state_dict(tensors)
    net.trained = bool(meta.get("trained", False))
    sch = meta["schedule"]
    schedule = make_schedule(sch["T"], sch["beta_start"], sch["beta_end"])
    return net, schedule, list(meta["classes"])


def train_backbone(manifest, cfg: RunConfig, run_dir, progress_every: int = 0):
    """Token-conditioned denoiser training over a phantom manifest."""
    run_dir = Path(run_dir)
    images, labels, meta = dataset_arrays(manifest)
    classes = meta["classes"]
    schedule = schedule_from_config(cfg)
    net = UNet(network_spec_from_config(cfg, len(classes)),
               derive_rng(cfg.seed, "backbone-init"))
    provider = diffusion.make_provider(images, labels, schedule)

    stem = run_dir / "backbone"

    def save_intermediate(step):
        save_backbone(stem, net, cfg, classes)

    history = diffusion.fit(net, schedule, provider, steps=cfg.diffusion.steps,
                            seed=derive_seed(cfg.seed, "backbone-train"),
                            lr=cfg.diffusion.lr, batch_size=cfg.diffusion.batch,
                            log_path=run_dir / "backbone_train.csv",
                            ckpt_every=cfg.diffusion.ckpt_every,
                            ckpt_fn=save_intermediate,
                            clip_norm=cfg.diffusion.clip_norm,
                            progress_every=progress_every)
    save_backbone(stem, net, cfg, classes)
    return stem, history


def train_adapter(kind, manifest, backbone_stem, cfg: RunConfig, run_dir,
                  classifier_stem=None, progress_every: int = 0):
    """Train rad_cn (full stack controls) or hva_cn (gaze-derived control)."""
    run_dir = Path(run_dir)
    net, schedule, classes = load_backbone(backbone_stem)
    images, labels, meta = dataset_arrays(manifest)
    records, _ = read_manifest(manifest)

    if kind == "rad_cn":
        controls = build_control_stacks(manifest, cfg, records)
    elif kind == "hva_cn":
        extractor = bags = None
        if cfg.adapters.hva_control == "hypothesis":
            if classifier_stem is None:
                raise ValueError(
                    "hva_cn training in hypothesis mode needs --classifier "
                    "(train one with the classify command first)")
            extractor = FeatureExtractor(Classifier.load(classifier_stem))
            bags = build_bags(manifest, cfg.adapters.bag_size,
                              derive_seed(cfg.seed, "bags"))
        controls, _ = build_hva_controls(manifest, cfg, records,
                                         extractor=extractor, bags=bags)
    else:
        raise ValueError(f"unknown adapter kind {kind!r}")

    adapter = make_adapter(net, kind, seed=derive_seed(cfg.seed, "adapter", kind))
    provider = diffusion.make_provider(images, labels, schedule, controls=controls)
    history = diffusion.fit(net, schedule, provider, steps=cfg.adapters.steps,
                            seed=derive_seed(cfg.seed, "adapter-train", kind),
                            lr=cfg.adapters.lr, batch_size=cfg.adapters.batch,
                            adapter=adapter,
                            log_path=run_dir / f"{kind}_train.csv",
                            clip_norm=cfg.diffusion.clip_norm,
                            progress_every=progress_every)
    stem = run_dir / kind
    adapter.save(stem)
    return stem, history


# ---------------------------------------------------------------------------
# controlled generation over manifest-sourced controls


class GenerationContext:
    """Loaded checkpoints plus the control plumbing for batched generation."""

    def __init__(self, backbone_stem, cfg: RunConfig, rad_stem=None, hva_stem=None,
                 classifier_stem=None):
        self.cfg = cfg
        self.backbone, self.schedule, self.classes = load_backbone(backbone_stem)
        self.rad = load_adapter(rad_stem, self.backbone) if rad_stem else None
        self.hva = load_adapter(hva_stem, self.backbone) if hva_stem else None
        self.extractor = None
        if classifier_stem is not None:
            self.extractor = FeatureExtractor(Classifier.load(classifier_stem))
        self._bags = {}

    def bags_for(self, manifest):
        key = str(manifest)
        if key not in self._bags:
            self._bags[key] = build_bags(manifest, self.cfg.adapters.bag_size,
                                         derive_seed(self.cfg.seed, "bags"))
        return self._bags[key]

    def controls_for_records(self, manifest, records, need_rad=True, need_hva=True):
        """(stack [N,6,H,W] or None, hva [N,1,H,W] or None, masks) for records."""
        stack = build_control_stacks(manifest, self.cfg, records) if need_rad else None
        hva_ctl = masks = None
        if need_hva:
            extractor = bags = None
            if self.cfg.adapters.hva_control == "hypothesis":
                if self.extractor is None:
                    raise ValueError("hypothesis-mode controls need a classifier checkpoint")
                extractor, bags = self.extractor, self.bags_for(manifest)
            hva_ctl, masks = build_hva_controls(manifest, self.cfg, records,
                                                extractor=extractor, bags=bags)
        return stack, hva_ctl, masks

    def generate(self, tokens, seed, steps=None, stack=None, hva_ctl=None,
                 fusion: FusionConfig | None = None, micro_batch: int = 8):
        """Batched controlled sampling; returns images in [0,1]."""
        tokens = np.asarray(tokens).reshape(-1)
        n = len(tokens)
        if stack is not None:
            res = stack.shape[-1]
        elif hva_ctl is not None:
            res = hva_ctl.shape[-1]
        else:
            res = self.cfg.phantom.resolution
        out = []
        for i in range(0, n, micro_batch):
            sl = slice(i, min(n, i + micro_batch))
            count = sl.stop - sl.start
            x = sample_controlled(
                self.backbone, self.schedule, tokens[sl],
                (count, 1, res, res), derive_seed(seed, "gen-chunk", i),
                steps=steps,
                rad=self.rad, hva=self.hva,
                stack=None if stack is None else stack[sl],
                hva_control=None if hva_ctl is None else hva_ctl[sl],
                cfg=fusion)
            out.append((x + 1.0) / 2.0)
        return np.concatenate(out, axis=0)[:, 0]


def fusion_from_mode(cfg: RunConfig, mode: str) -> FusionConfig:
    """Indicator presets: none / rad / hva / fused."""
    if mode == "none":
        controls = []
    elif mode == "rad":
        controls = ["canny", "sobel", "log", "seg"]
    elif mode == "hva":
        controls = ["hva"]
    elif mode == "fused":
        controls = ["canny", "sobel", "log", "seg", "hva"]
    else:
        raise ValueError(f"unknown generator mode {mode!r}")
    return FusionConfig.from_controls(controls, cfg.adapters.weight_rad,
                                      cfg.adapters.weight_hva)


# ---------------------------------------------------------------------------
# evaluation tables (quality + controllability + ablation rows)


EVAL_CONFIGS = ("unconditional", "rad_only", "hva_only", "combined")
_MODE_OF = {"unconditional": "none", "rad_only": "rad", "hva_only": "hva",
            "combined": "fused"}


def evaluate_generation(ctx: GenerationContext, manifest, cfg: RunConfig,
                        configs=EVAL_CONFIGS, n_images=None, steps=None,
                        seed=0) -> dict:
    """Generate under each configuration and score against the real set.

    Rows report the feature-space Frechet distance (toy extractor, not
    comparable to pretrained-feature numbers), mean SSIM/PSNR against each
    control's source image, lung-region mIoU, and the embedding score.
    """
    if ctx.extractor is None:
        raise ValueError("evaluation needs a classifier checkpoint for features")
    records, meta = read_manifest(manifest)
    n = min(n_images or cfg.eval.n_images, len(records))
    records = records[:n]
    steps = steps or (cfg.eval.sample_steps or None)

    real = np.stack([load_record_image(manifest, r) for r in records])
    real_masks = [load_record_mask(manifest, r) for r in records]
    tokens = np.array([r["label_id"] for r in records])
    need_hva = any(_MODE_OF[c] in ("hva", "fused") for c in configs) and ctx.hva is not None
    stack, hva_ctl, _ = ctx.controls_for_records(
        manifest, records, need_rad=ctx.rad is not None, need_hva=need_hva)

    real_cloud = FeatureCloud(ctx.extractor.features_raw(real[:, None]), "real")
    rows = {}
    for config in configs:
        fusion = fusion_from_mode(cfg, _MODE_OF[config])
        gen = ctx.generate(tokens, derive_seed(seed, "eval", config), steps=steps,
                           stack=stack, hva_ctl=hva_ctl, fusion=fusion)
        gen_cloud = FeatureCloud(ctx.extractor.features_raw(gen[:, None]), config)
        ssim_vals = [ssim(g, r) for g, r in zip(gen, real)]
        psnr_vals = [psnr(g, r) for g, r in zip(gen, real)]
        miou_vals = [miou(bright_region_mask(g), m > 0)
                     for g, m in zip(gen, real_masks)]
        rows[config] = {
            "fid": fid(gen_cloud, real_cloud),
            "ssim": float(np.mean(ssim_vals)),
            "psnr": float(np.mean(psnr_vals)),
            "miou": float(np.mean(miou_vals)),
            "embedding_score": embedding_score(gen[:, None], real[:, None], ctx.extractor),
            "n": int(n),
        }
    return rows


def write_eval_report(rows: dict, run_dir):
    run_dir = Path(run_dir)
    with open(run_dir / "report.json", "w") as f:
        json.dump(rows, f, indent=1, sort_keys=True)
    with open(run_dir / "report.csv", "w", newline="") as f:
        w = csv.writer(f)
        cols = ["config", "fid", "ssim", "psnr", "miou", "embedding_score", "n"]
        w.writerow(cols)
        for config, vals in rows.items():
            w.writerow([config] + [vals[c] for c in cols[1:]])
    return run_dir / "report.json"


# ---------------------------------------------------------------------------
# control-adherence experiment (attention placement + segmentation overlap)


def control_adherence_experiment(ctx: GenerationContext, manifest, cfg: RunConfig,
                                 n_trials: int = 100, steps=None, seed: int = 0,
                                 disease: str = "focal") -> dict:
    """Does generation follow the controls?

    Attention: generate with ONLY the gaze adapter active, conditioned on
    held-out samples' attention controls; count how often the dominant
    generated lesion centroid lands inside the control mask, versus the same
    count for unconditioned samples. Segmentation: generate with ONLY the
    segmentation channel active and compare lung-region mIoU against the
    unconditioned baseline.
    """
    records, meta = read_manifest(manifest)
    disease_recs = [r for r in records if r["label"] == disease][:n_trials]
    if len(disease_recs) < n_trials:
        raise ValueError(
            f"need {n_trials} held-out {disease!r} records, manifest has {len(disease_recs)}")
    tokens = np.array([r["label_id"] for r in disease_recs])

    stack, hva_ctl, masks = ctx.controls_for_records(manifest, disease_recs)
    mask_bools = [m.as_bool() for m in masks]

    hva_gen = ctx.generate(tokens, derive_seed(seed, "adh-hva"), steps=steps,
                           stack=None, hva_ctl=hva_ctl,
                           fusion=fusion_from_mode(cfg, "hva"))
    uncond = ctx.generate(tokens, derive_seed(seed, "adh-uncond"), steps=steps,
                          fusion=fusion_from_mode(cfg, "none"))

    def hit_rate(images):
        hits = 0
        for img, mask in zip(images, mask_bools):
            c = dominant_blob_centroid(img)
            if c is not None and mask[min(int(round(c[1])), mask.shape[0] - 1),
                                      min(int(round(c[0])), mask.shape[1] - 1)]:
                hits += 1
        return hits / len(images)

    seg_fusion = FusionConfig.from_controls(["seg"], cfg.adapters.weight_rad,
                                            cfg.adapters.weight_hva)
    seg_gen = ctx.generate(tokens, derive_seed(seed, "adh-seg"), steps=steps,
                           stack=stack, fusion=seg_fusion)
    lung_masks = [load_record_mask(manifest, r) > 0 for r in disease_recs]
    seg_miou = [miou(bright_region_mask(g), m) for g, m in zip(seg_gen, lung_masks)]
    unc_miou = [miou(bright_region_mask(g), m) for g, m in zip(uncond, lung_masks)]

    return {
        "n_trials": len(disease_recs),
        "hva_hit_rate": hit_rate(hva_gen),
        "unconditional_hit_rate": hit_rate(uncond),
        "seg_miou_median": float(np.median(seg_miou)),
        "unconditional_miou_median": float(np.median(unc_miou)),
    }


# ---------------------------------------------------------------------------
# long-tailed rebalancing


def make_lt_generator(ctx: GenerationContext, manifest, cfg: RunConfig, mode: str,
                      steps: int | None, strict_pairing: bool = True):
    """Per-class image generator with controls drawn from real samples.

    Control sources come from same-class records (random pairing across all
    classes when strict_pairing is off, matching the fully random protocol).
    """
    if mode == "none":
        return None
    fusion = fusion_from_mode(cfg, mode)
    records, _ = read_manifest(manifest)
    by_label = {}
    for r in records:
        by_label.setdefault(r["label_id"], []).append(r)

    def generator(label_id, count, rng):
        pool = by_label[label_id] if strict_pairing else records
        picks = [pool[int(rng.integers(len(pool)))] for _ in range(count)]
        need_rad = fusion.rad_enabled() and ctx.rad is not None
        need_hva = fusion.hva_enabled() and ctx.hva is not None
        stack, hva_ctl, _ = ctx.controls_for_records(manifest, picks,
                                                     need_rad=need_rad,
                                                     need_hva=need_hva)
        tokens = np.full(count, label_id)
        imgs = ctx.generate(tokens, int(rng.integers(2 ** 31)), steps=steps,
                            stack=stack, hva_ctl=hva_ctl, fusion=fusion)
        return imgs[:, None]

    return generator


def lt_study(ctx, train_manifest, test_manifest, cfg: RunConfig, run_dir,
             grouping=None) -> dict:
    """Paired baseline/augmented runs over the configured seeds."""
    from .classifier import lt_experiment

    run_dir = Path(run_dir)
    train_images, train_labels, meta = dataset_arrays(train_manifest)
    test_images, test_labels, _ = dataset_arrays(test_manifest)
    classes = meta["classes"]
    generator = None
    if cfg.lt.generator != "none":
        if ctx is None:
            raise ValueError("generator modes other than 'none' need trained checkpoints")
        generator = make_lt_generator(ctx, train_manifest, cfg, cfg.lt.generator,
                                      cfg.lt.sample_steps or None,
                                      cfg.lt.strict_pairing)
    results = []
    for seed in cfg.lt.seeds:
        out = lt_experiment(train_images, train_labels, test_images, test_labels,
                            classes, target=cfg.lt.target, seed=int(seed),
                            generator=generator, grouping=grouping,
                            epochs=cfg.classifier.epochs)
        results.append({
            "seed": int(seed),
            "baseline": out["baseline"].to_dict(),
            "augmented": out["augmented"].to_dict(),
            "added": out["added"],
            "baseline_counts": out["baseline_counts"],
        })
    deltas = [r["augmented"]["balanced_accuracy"] - r["baseline"]["balanced_accuracy"]
              for r in results]
    summary = {
        "seeds": [int(s) for s in cfg.lt.seeds],
        "generator": cfg.lt.generator,
        "target": cfg.lt.target,
        "median_bacc_improvement": float(np.median(deltas)),
        "bacc_improvements": [float(d) for d in deltas],
        "runs": results,
    }
    with open(run_dir / "lt_report.json", "w") as f:
        json.dump(summary, f, indent=1, sort_keys=True)
    with open(run_dir / "lt_report.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["seed", "baseline_bacc", "augmented_bacc", "baseline_macro_f1",
                    "augmented_macro_f1"])
        for r in results:
            w.writerow([r["seed"], r["baseline"]["balanced_accuracy"],
                        r["augmented"]["balanced_accuracy"],
                        r["baseline"]["macro_f1"], r["augmented"]["macro_f1"]])
    return summary


# ---------------------------------------------------------------------------
# control cache (16-bit PNGs keyed by image hash, kind and parameters)


def filter_params(cfg: RunConfig, kind: str) -> dict:
    f = cfg.filters
    return {
        "canny": {"low": f.canny_low, "high": f.canny_high},
        "sobel": {},
        "log": {"sigma": f.log_sigma},
        "segmentation": {},
    }[kind]


def cache_controls(manifest, cfg: RunConfig, cache_dir) -> Path:
    """Write every record's control maps as PNGs plus a JSONL index."""
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    records, _ = read_manifest(manifest)
    index = []
    for rec in records:
        image = load_record_image(manifest, rec)
        mask = load_record_mask(manifest, rec)
        img_hash = hashlib.sha256(image.tobytes()).hexdigest()[:16]
        for m in radiomic_maps(image, mask, cfg):
            params = filter_params(cfg, m.kind)
            key = hashlib.sha256(
                json.dumps([img_hash, m.kind, params], sort_keys=True).encode()
            ).hexdigest()[:20]
            path = cache_dir / f"{key}.png"
            pngio.save_map16(path, m.grid)
            index.append({"record": rec["id"], "kind": m.kind, "params": params,
                          "image_hash": img_hash, "file": path.name})
    with open(cache_dir / "index.jsonl", "w") as f:
        for row in index:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    return cache_dir / "index.jsonl"
