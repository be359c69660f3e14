"""Command-line entry point orchestrating the full pipeline.

Subcommands: phantom, controls, hva, hypothesize, train-backbone, train-radcn,
train-hvacn, sample, eval, classify, lt. Each run writes a directory holding
the resolved config, logs, artifacts and a machine-readable summary; exit
status is 0 only on full success.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import pipeline, pngio
from .classifier import Classifier, FeatureExtractor, evaluate, train_classifier
from .config import load_config, write_config
from .gaze import save_hva, save_mask
from .hypotheses import save_hypothesis, select_best
from .phantom import dataset_arrays, generate_dataset, manifest_checksum, read_manifest
from .seeds import derive_seed


class DependencyError(RuntimeError):
    """A prerequisite artifact (checkpoint, manifest) is missing."""


def _common_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="TOML config file (flags override it)")
    p.add_argument("--out", help="output root directory (default: runs)")
    p.add_argument("--run-dir", help="exact run directory (default: timestamped)")
    p.add_argument("--seed", type=int, help="global seed")
    p.add_argument("--threads", type=int, help="worker cap for data preparation")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key, e.g. --set diffusion.T=100")


def _overrides(args, extra: dict | None = None) -> dict:
    out = {}
    for item in args.set:
        if "=" not in item:
            raise KeyError(f"--set expects KEY=VALUE, got {item!r}")
        key, val = item.split("=", 1)
        out[key.strip()] = val.strip()
    for key in ("seed", "out", "threads"):
        val = getattr(args, key.replace("-", "_"), None)
        if val is not None:
            out[key] = val
    for key, val in (extra or {}).items():
        if val is not None:
            out[key] = val
    return out


def _make_run_dir(cfg, args, command: str) -> Path:
    if args.run_dir:
        run_dir = Path(args.run_dir)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        run_dir = Path(cfg.out) / f"{command}-{stamp}"
    run_dir.mkdir(parents=True, exist_ok=True)
    write_config(cfg, run_dir / "config.toml")
    return run_dir


def _finish(run_dir: Path, summary: dict) -> int:
    summary = {"status": "ok", **summary}
    with open(run_dir / "summary.json", "w") as f:
        json.dump(summary, f, indent=1, sort_keys=True, default=str)
    print(json.dumps(summary, indent=1, sort_keys=True, default=str))
    return 0


def _require(path, what: str, hint: str):
    if path is None:
        raise DependencyError(f"missing {what}; {hint}")
    p = Path(path)
    stem_json = p.with_suffix(".json")
    if not (p.exists() or stem_json.exists()):
        raise DependencyError(f"{what} not found at {path}; {hint}")
    return path


# ---------------------------------------------------------------------------
# subcommand handlers


def cmd_phantom(args) -> int:
    cfg = load_config(args.config, _overrides(args, {
        "phantom.n_classes": args.classes, "phantom.resolution": args.resolution}))
    run_dir = _make_run_dir(cfg, args, "phantom")
    spec = pipeline.phantom_spec_from_config(cfg)
    names = spec.class_names()
    counts = [int(c) for c in args.counts.split(",")]
    if len(counts) != len(names):
        raise DependencyError(
            f"--counts needs {len(names)} entries for classes {names}, got {counts}")
    manifest = generate_dataset(spec, counts, cfg.seed, run_dir / "dataset")
    return _finish(run_dir, {
        "manifest": str(manifest),
        "counts": dict(zip(names, counts)),
        "checksum": manifest_checksum(manifest),
    })


def cmd_controls(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    _require(args.manifest, "dataset manifest", "run the phantom command first")
    run_dir = _make_run_dir(cfg, args, "controls")
    index = pipeline.cache_controls(args.manifest, cfg, run_dir / "controls")
    records, _ = read_manifest(args.manifest)
    return _finish(run_dir, {"index": str(index), "records": len(records)})


def cmd_hva(args) -> int:
    cfg = load_config(args.config, _overrides(args, {
        "gaze.sigma_frac": args.sigma_frac, "gaze.lam": args.lam}))
    _require(args.manifest, "dataset manifest", "run the phantom command first")
    run_dir = _make_run_dir(cfg, args, "hva")
    records, meta = read_manifest(args.manifest)
    out = run_dir / "hva"
    out.mkdir(exist_ok=True)
    for rec in records:
        v, mask = pipeline.hva_map_for_record(args.manifest, rec, cfg,
                                              meta["resolution"])
        save_hva(out / f"{rec['id']}_hva.png", v)
        save_mask(out / f"{rec['id']}_mask.png", mask)
    return _finish(run_dir, {"records": len(records), "dir": str(out)})


def cmd_hypothesize(args) -> int:
    cfg = load_config(args.config, _overrides(args, {
        "adapters.bag_size": args.bag_size}))
    _require(args.manifest, "dataset manifest", "run the phantom command first")
    _require(args.classifier, "classifier checkpoint",
             "train one with the classify command first")
    run_dir = _make_run_dir(cfg, args, "hypothesize")
    records, meta = read_manifest(args.manifest)
    extractor = FeatureExtractor(Classifier.load(args.classifier))
    bags = pipeline.build_bags(args.manifest, cfg.adapters.bag_size,
                               derive_seed(cfg.seed, "bags"))
    out = run_dir / "hypotheses"
    out.mkdir(exist_ok=True)
    scores = []
    for rec in records:
        _, mask = pipeline.hva_map_for_record(args.manifest, rec, cfg,
                                              meta["resolution"])
        best = select_best(mask, bags, rec["label"], extractor)
        save_hypothesis(out / rec["id"], best)
        scores.append(best.score)
    return _finish(run_dir, {"records": len(records), "dir": str(out),
                             "mean_score": float(np.mean(scores)) if scores else None})


def cmd_train_backbone(args) -> int:
    cfg = load_config(args.config, _overrides(args, {
        "diffusion.steps": args.steps, "diffusion.batch": args.batch,
        "diffusion.lr": args.lr, "diffusion.T": args.T}))
    _require(args.manifest, "dataset manifest", "run the phantom command first")
    run_dir = _make_run_dir(cfg, args, "train-backbone")
    stem, history = pipeline.train_backbone(args.manifest, cfg, run_dir,
                                            progress_every=args.progress_every)
    return _finish(run_dir, {
        "checkpoint": str(stem), "steps": len(history),
        "final_loss": float(np.mean(history[-50:])) if history else None,
    })


def _cmd_train_adapter(args, kind: str) -> int:
    cfg = load_config(args.config, _overrides(args, {
        "adapters.steps": args.steps, "adapters.batch": args.batch,
        "adapters.lr": args.lr,
        "adapters.hva_control": getattr(args, "hva_control", None)}))
    _require(args.manifest, "dataset manifest", "run the phantom command first")
    _require(args.backbone, "backbone checkpoint",
             "run train-backbone before training adapters")
    run_dir = _make_run_dir(cfg, args, f"train-{kind.replace('_', '')}")
    classifier_stem = getattr(args, "classifier", None)
    stem, history = pipeline.train_adapter(kind, args.manifest, args.backbone, cfg,
                                           run_dir, classifier_stem=classifier_stem,
                                           progress_every=args.progress_every)
    return _finish(run_dir, {
        "checkpoint": str(stem), "steps": len(history),
        "final_loss": float(np.mean(history[-50:])) if history else None,
    })


def cmd_train_radcn(args) -> int:
    return _cmd_train_adapter(args, "rad_cn")


def cmd_train_hvacn(args) -> int:
    return _cmd_train_adapter(args, "hva_cn")


def cmd_sample(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    _require(args.backbone, "backbone checkpoint", "run train-backbone first")
    controls = [] if args.controls in ("none", "") else args.controls.split(",")
    weights = [float(w) for w in args.weights.split(",")] if args.weights else [1.0, 1.0]
    if len(weights) != 2:
        raise DependencyError("--weights expects two values: rad,hva")
    fusion = pipeline.FusionConfig.from_controls(controls, *weights)
    if fusion.rad_enabled():
        _require(args.rad, "rad_cn checkpoint", "train-radcn first or drop its controls")
    if fusion.hva_enabled():
        _require(args.hva, "hva_cn checkpoint", "train-hvacn first or drop hva")
    run_dir = _make_run_dir(cfg, args, "sample")
    ctx = pipeline.GenerationContext(args.backbone, cfg, rad_stem=args.rad,
                                     hva_stem=args.hva, classifier_stem=args.classifier)

    stack = hva_ctl = None
    if controls:
        _require(args.control_manifest, "control-source manifest",
                 "supply --control-manifest to draw controls from")
        records, _ = read_manifest(args.control_manifest)
        picks = [records[i % len(records)] for i in range(args.n)]
        stack, hva_ctl, _ = ctx.controls_for_records(
            args.control_manifest, picks,
            need_rad=fusion.rad_enabled(), need_hva=fusion.hva_enabled())
        tokens = np.array([r["label_id"] for r in picks])
    else:
        classes = ctx.classes
        token = classes.index(args.token) if args.token in classes else 0
        tokens = np.full(args.n, token)

    steps = args.steps if args.steps else (cfg.eval.sample_steps or None)
    images = ctx.generate(tokens, cfg.seed, steps=steps, stack=stack,
                          hva_ctl=hva_ctl, fusion=fusion)
    out = run_dir / "samples"
    paths = []
    for i, img in enumerate(images):
        path = out / f"sample-{i:04d}.png"
        pngio.save_image(path, img)
        paths.append(str(path))
    return _finish(run_dir, {"n": len(paths), "dir": str(out),
                             "controls": controls, "first": paths[0] if paths else None})


def cmd_eval(args) -> int:
    cfg = load_config(args.config, _overrides(args, {
        "eval.n_images": args.n, "eval.sample_steps": args.steps}))
    _require(args.backbone, "backbone checkpoint", "run train-backbone first")
    _require(args.manifest, "evaluation manifest", "run the phantom command first")
    _require(args.classifier, "classifier checkpoint",
             "train one with the classify command first")
    run_dir = _make_run_dir(cfg, args, "eval")
    ctx = pipeline.GenerationContext(args.backbone, cfg, rad_stem=args.rad,
                                     hva_stem=args.hva, classifier_stem=args.classifier)
    configs = ["unconditional"]
    if ctx.rad is not None:
        configs.append("rad_only")
    if ctx.hva is not None:
        configs.append("hva_only")
    if ctx.rad is not None and ctx.hva is not None:
        configs.append("combined")
    rows = pipeline.evaluate_generation(ctx, args.manifest, cfg, configs=configs,
                                        seed=cfg.seed)
    report = pipeline.write_eval_report(rows, run_dir)
    combined_ok = None
    if "combined" in rows:
        singles = [rows[c]["fid"] for c in ("rad_only", "hva_only") if c in rows]
        if singles:
            combined_ok = rows["combined"]["fid"] <= min(singles)
    return _finish(run_dir, {"report": str(report), "rows": rows,
                             "combined_fid_not_worse": combined_ok})


def cmd_classify(args) -> int:
    cfg = load_config(args.config, _overrides(args, {
        "classifier.epochs": args.epochs}))
    _require(args.train_manifest, "training manifest", "run the phantom command first")
    run_dir = _make_run_dir(cfg, args, "classify")
    images, labels, meta = dataset_arrays(args.train_manifest)
    clf, curves = train_classifier(images, labels, meta["classes"], seed=cfg.seed,
                                   epochs=cfg.classifier.epochs,
                                   batch=cfg.classifier.batch, lr=cfg.classifier.lr,
                                   curve_path=run_dir / "curves.csv")
    stem = run_dir / "classifier"
    clf.save(stem)
    summary = {"checkpoint": str(stem), "final_train_loss": curves[-1][1]}
    if args.test_manifest:
        test_images, test_labels, _ = dataset_arrays(args.test_manifest)
        rep = evaluate(clf, test_images, test_labels)
        with open(run_dir / "eval_report.json", "w") as f:
            json.dump(rep.to_dict(), f, indent=1, sort_keys=True)
        summary["balanced_accuracy"] = rep.balanced_accuracy
        summary["macro_f1"] = rep.macro_f1
    return _finish(run_dir, summary)


def cmd_lt(args) -> int:
    cfg = load_config(args.config, _overrides(args, {
        "lt.target": args.target, "lt.generator": args.generator,
        "lt.seeds": args.seeds, "lt.sample_steps": args.steps}))
    _require(args.train_manifest, "training manifest", "run the phantom command first")
    _require(args.test_manifest, "test manifest", "run the phantom command first")
    ctx = None
    if cfg.lt.generator != "none":
        _require(args.backbone, "backbone checkpoint", "run train-backbone first")
        if cfg.lt.generator in ("rad", "fused"):
            _require(args.rad, "rad_cn checkpoint", "run train-radcn first")
        if cfg.lt.generator in ("hva", "fused"):
            _require(args.hva, "hva_cn checkpoint", "run train-hvacn first")
        ctx = pipeline.GenerationContext(args.backbone, cfg, rad_stem=args.rad,
                                         hva_stem=args.hva,
                                         classifier_stem=args.classifier)
    run_dir = _make_run_dir(cfg, args, "lt")
    grouping = None
    if args.grouping:
        grouping = json.loads(args.grouping)
    summary = pipeline.lt_study(ctx, args.train_manifest, args.test_manifest, cfg,
                                run_dir, grouping=grouping)
    return _finish(run_dir, {
        "report": str(run_dir / "lt_report.json"),
        "median_bacc_improvement": summary["median_bacc_improvement"],
        "bacc_improvements": summary["bacc_improvements"],
    })


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="steerdiff",
        description="Controllable phantom-image diffusion: data, controls, "
                    "training, sampling, evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a phantom dataset")
    _common_flags(p)
    p.add_argument("--classes", type=int, default=None, help="number of classes")
    p.add_argument("--counts", required=True, help="per-class counts, e.g. 50,50,50")
    p.add_argument("--resolution", type=int, default=None)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("controls", help="cache filter control maps for a dataset")
    _common_flags(p)
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_controls)

    p = sub.add_parser("hva", help="compute attention maps and masks")
    _common_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--sigma-frac", type=float, default=None)
    p.add_argument("--lam", type=float, default=None)
    p.set_defaults(func=cmd_hva)

    p = sub.add_parser("hypothesize", help="select best masked bag candidates")
    _common_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--classifier", required=True)
    p.add_argument("--bag-size", type=int, default=None)
    p.set_defaults(func=cmd_hypothesize)

    p = sub.add_parser("train-backbone", help="train the denoising backbone")
    _common_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--T", type=int, default=None)
    p.add_argument("--progress-every", type=int, default=0)
    p.set_defaults(func=cmd_train_backbone)

    for name, func, extra_help in (
            ("train-radcn", cmd_train_radcn, "train the filter-stack adapter"),
            ("train-hvacn", cmd_train_hvacn, "train the gaze-control adapter")):
        p = sub.add_parser(name, help=extra_help)
        _common_flags(p)
        p.add_argument("--manifest", required=True)
        p.add_argument("--backbone", required=False)
        p.add_argument("--steps", type=int, default=None)
        p.add_argument("--batch", type=int, default=None)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--progress-every", type=int, default=0)
        if name == "train-hvacn":
            p.add_argument("--classifier", help="needed for hypothesis-mode controls")
            p.add_argument("--hva-control", choices=["hypothesis", "heatmap"])
        p.set_defaults(func=func)

    p = sub.add_parser("sample", help="generate images from checkpoints")
    _common_flags(p)
    p.add_argument("--backbone", required=False)
    p.add_argument("--rad", help="rad_cn checkpoint")
    p.add_argument("--hva", help="hva_cn checkpoint")
    p.add_argument("--classifier", help="for hypothesis-mode controls")
    p.add_argument("--controls", default="none",
                   help="comma list from canny,sobel,log,seg,hva or 'none'")
    p.add_argument("--weights", default=None, help="rad,hva fusion weights")
    p.add_argument("--control-manifest", help="dataset whose samples supply controls")
    p.add_argument("--token", default="focal", help="class token for generation")
    p.add_argument("-n", type=int, default=4)
    p.add_argument("--steps", type=int, default=None, help="inference steps (default T)")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="quality/controllability tables from checkpoints")
    _common_flags(p)
    p.add_argument("--backbone", required=False)
    p.add_argument("--rad")
    p.add_argument("--hva")
    p.add_argument("--classifier", required=False)
    p.add_argument("--manifest", required=True)
    p.add_argument("-n", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("classify", help="train/evaluate the toy classifier")
    _common_flags(p)
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--test-manifest")
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("lt", help="long-tailed rebalancing experiment")
    _common_flags(p)
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--test-manifest", required=True)
    p.add_argument("--generator", choices=["none", "fused", "rad", "hva"], default=None)
    p.add_argument("--target", type=int, default=None)
    p.add_argument("--seeds", default=None, help="comma list, e.g. 0,1,2")
    p.add_argument("--steps", type=int, default=None, help="generation inference steps")
    p.add_argument("--backbone")
    p.add_argument("--rad")
    p.add_argument("--hva")
    p.add_argument("--classifier")
    p.add_argument("--grouping", help='JSON like {"head":["no_finding"],...}')
    p.set_defaults(func=cmd_lt)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DependencyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (KeyError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
