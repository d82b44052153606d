"""Batch pipeline stages and the ablation harness.

Every stage is a pure function of (inputs on disk, flags, seed) writing into
its own directory, so the composed `pipeline` equals running the stages
one by one. The synthetic benchmark uses scene seeds 0..n-1; per-scene point
sampling derives its seed as seed * 100003 + scene_index.
"""

import json
import os
from concurrent import futures
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .losses import ClassWeights, class_weights
from .manifest import DatasetManifest, load_manifest, save_manifest, split_manifest
from .metrics import miou_micro
from .raster import ClassMask, read_image, read_mask, sobel_edges, write_image, write_mask
from .slic import slic as slic_backend
from .superpixels import (
    SuperpixelConfig,
    compute_hierarchy,
    extract_k,
    load_hierarchy,
    save_hierarchy,
    write_superpixel_map,
)
from .synthetic import NUM_CLASSES, SyntheticSceneSpec, gen_synthetic_scene
from .training import TrainConfig, evaluate, load_checkpoint, save_checkpoint, train
from .toynet import init_params
from .optim import Adam
from .weaklabel import (
    PointSet,
    PropagationConfig,
    coverage,
    load_points,
    load_pseudo_mask,
    propagate,
    sample_points_balanced,
    sample_points_random,
    save_points,
    save_pseudo_mask,
)

POINT_SEED_STRIDE = 100003
SUPERVISION_MODES = ("masked", "background", "full")

# standard benchmark scenes: busy enough that point supervision misses some
# shapes, per-shape color offsets so dense labels genuinely pay off, and
# within-shape shading so superpixels make honest boundary mistakes
BENCHMARK_NOISE_SIGMA = 8.0
BENCHMARK_COLOR_JITTER = 70.0
BENCHMARK_SHADING = 40.0
BENCHMARK_OCCLUSION_PROB = 0.35
BENCHMARK_OCCLUSION_DEPTH = 0.4
BENCHMARK_SHAPE_RANGE = (6, 12)


def benchmark_scene_spec(size: int, noise_sigma: float = BENCHMARK_NOISE_SIGMA,
                         color_jitter: float = BENCHMARK_COLOR_JITTER,
                         shading: float = BENCHMARK_SHADING) -> SyntheticSceneSpec:
    return SyntheticSceneSpec(
        width=size,
        height=size,
        noise_sigma=noise_sigma,
        min_shapes=BENCHMARK_SHAPE_RANGE[0],
        max_shapes=BENCHMARK_SHAPE_RANGE[1],
        shape_color_jitter=color_jitter,
        shape_shading=shading,
        occlusion_prob=BENCHMARK_OCCLUSION_PROB,
        occlusion_depth=BENCHMARK_OCCLUSION_DEPTH,
    )


@dataclass
class PipelineConfig:
    """Defaults mirror the best ablation cells of the reference experiments."""

    points: int = 50
    k: int = 100
    edge: bool = False
    strategy: str = "balanced"
    background_policy: str = "ignore"
    seed: int = 0
    num_classes: int = NUM_CLASSES
    scenes: int = 200
    size: int = 64
    noise_sigma: float = 8.0
    epochs: int = 100
    learning_rate: float = 1e-4
    batch_size: int = 8
    backend: str = "agglomerative"


def scene_name(i: int) -> str:
    return f"scene_{i:04d}"


def worker_count() -> int:
    """Concurrency cap from POINTGROW_THREADS (default 1)."""
    raw = os.environ.get("POINTGROW_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def stage_synth(out_dir, scenes: int, size: int, seed: int,
                noise_sigma: float = BENCHMARK_NOISE_SIGMA,
                color_jitter: float = BENCHMARK_COLOR_JITTER) -> DatasetManifest:
    """Generate the synthetic dataset and its 60/20/20 manifest."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    spec = benchmark_scene_spec(size, noise_sigma, color_jitter)
    pairs = []
    for i in range(scenes):
        img, mask = gen_synthetic_scene(spec, i)
        write_image(img, out / "images" / f"{scene_name(i)}.png")
        write_mask(mask, out / "masks" / f"{scene_name(i)}.png")
        # manifests carry dataset-relative paths so runs are byte-reproducible
        pairs.append((f"images/{scene_name(i)}.png", f"masks/{scene_name(i)}.png"))
    manifest = split_manifest(pairs, seed)
    save_manifest(manifest, out / "manifest.json")
    return load_manifest(out / "manifest.json")


def stage_superpixels(dataset_dir, out_dir, k: int, edge: bool, backend: str = "agglomerative") -> dict:
    """Hierarchy (agglomerative) or direct map (slic) per image, plus id-map PNGs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(Path(dataset_dir) / "manifest.json")
    config = SuperpixelConfig(k=k, edge=edge, backend=backend)
    report = {"k": k, "edge": edge, "backend": backend, "images": []}
    for entry in manifest.entries:
        image = read_image(entry.image)
        stem = Path(entry.image).stem
        if backend == "slic":
            spmap = slic_backend(image, config)
        else:
            edges = sobel_edges(image) if edge else None
            hierarchy = compute_hierarchy(image, config, edges)
            save_hierarchy(hierarchy, out / f"{stem}.sphx")
            spmap = extract_k(hierarchy, min(k, hierarchy.num_pixels), image.width, image.height)
        write_superpixel_map(spmap, out / f"{stem}.k{k}.png")
        report["images"].append({"image": stem, "regions": spmap.k})
    with open(out / "superpixels.json", "w") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    return report


def stage_sample(dataset_dir, out_dir, points: int, strategy: str, seed: int, num_classes: int = NUM_CLASSES) -> None:
    """Per-scene query points as CSV + sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(Path(dataset_dir) / "manifest.json")
    for index, entry in enumerate(manifest.entries):
        gt = read_mask(entry.mask, num_classes)
        point_seed = seed * POINT_SEED_STRIDE + index
        if strategy == "balanced":
            ps = sample_points_balanced(gt, points, point_seed)
        elif strategy == "random":
            ps = sample_points_random(gt, points, point_seed)
        else:
            raise ValueError(f"unknown strategy {strategy!r}")
        stem = Path(entry.image).stem
        save_points(ps, out / f"{stem}.csv", out / f"{stem}.json")


def stage_propagate(dataset_dir, superpixel_dir, points_dir, out_dir, k: int,
                    policy: str = "ignore", num_classes: int = NUM_CLASSES) -> dict:
    """Expand points over superpixels; writes pseudo-mask PNG pairs + coverage report."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(Path(dataset_dir) / "manifest.json")
    config = PropagationConfig(policy)
    report = {"policy": policy, "k": k, "scenes": []}
    for entry in manifest.entries:
        stem = Path(entry.image).stem
        image = read_image(entry.image)
        spmap = _load_map_for(Path(superpixel_dir), stem, k, image.width, image.height)
        pts = load_points(Path(points_dir) / f"{stem}.csv", Path(points_dir) / f"{stem}.json")
        pm = propagate(pts, spmap, config, num_classes)
        save_pseudo_mask(pm, out / stem)
        report["scenes"].append({"scene": stem, "coverage": coverage(pm)})
    report["mean_coverage"] = (
        sum(s["coverage"] for s in report["scenes"]) / len(report["scenes"])
        if report["scenes"]
        else 0.0
    )
    with open(out / "coverage.json", "w") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    return report


def _load_map_for(sp_dir: Path, stem: str, k: int, width: int, height: int):
    from .superpixels import read_superpixel_map

    png = sp_dir / f"{stem}.k{k}.png"
    if png.exists():
        return read_superpixel_map(png)
    hierarchy = load_hierarchy(sp_dir / f"{stem}.sphx")
    return extract_k(hierarchy, k, width, height)


def stage_weights(dataset_dir, pseudo_dir, out_path, num_classes: int = NUM_CLASSES,
                  eps: float = 1e-6, split: str = "train") -> ClassWeights:
    """Class-balance weights over the training split's pseudo-masks."""
    manifest = load_manifest(Path(dataset_dir) / "manifest.json")
    masks = []
    for image_path, _ in manifest.paths(split):
        stem = Path(image_path).stem
        masks.append(load_pseudo_mask(Path(pseudo_dir) / stem, num_classes))
    weights = class_weights(masks, num_classes, eps)
    counts = np.zeros(num_classes, dtype=np.int64)
    for pm in masks:
        counts += np.bincount(
            pm.labels.classes[pm.supervised == 1], minlength=num_classes
        )[:num_classes]
    doc = {
        "weights": weights.weights.tolist(),
        "eps": eps,
        "freqs": (counts / max(counts.sum(), 1)).tolist(),
    }
    with open(out_path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
    return weights


def load_weights(path) -> ClassWeights:
    with open(path) as fh:
        doc = json.load(fh)
    return ClassWeights(np.asarray(doc["weights"]), doc.get("eps", 1e-6))


def _load_split(manifest: DatasetManifest, split: str, num_classes: int):
    from .training import normalize_images

    images, masks = [], []
    for image_path, mask_path in manifest.paths(split):
        images.append(read_image(image_path).pixels)
        masks.append(read_mask(mask_path, num_classes).classes.astype(np.int64))
    if not images:
        return np.empty((0, 3, 0, 0)), np.empty((0, 0, 0), dtype=np.int64)
    return normalize_images(np.stack(images)), np.stack(masks)


def _load_pseudo_split(manifest: DatasetManifest, pseudo_dir, split: str, num_classes: int):
    from .training import normalize_images

    images, labels, supervised = [], [], []
    for image_path, _ in manifest.paths(split):
        stem = Path(image_path).stem
        pm = load_pseudo_mask(Path(pseudo_dir) / stem, num_classes)
        images.append(read_image(image_path).pixels)
        labels.append(pm.labels.classes.astype(np.int64))
        supervised.append(pm.supervised.astype(np.float64))
    return (
        normalize_images(np.stack(images)),
        np.stack(labels),
        np.stack(supervised),
    )


def stage_train(dataset_dir, pseudo_dir, weights: ClassWeights, out_dir,
                config: TrainConfig, num_classes: int = NUM_CLASSES) -> dict:
    """Train on pseudo-masks, validate against ground truth, keep the best net."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(Path(dataset_dir) / "manifest.json")
    X, labels, supervised = _load_pseudo_split(manifest, pseudo_dir, "train", num_classes)
    val_X, val_masks = _load_split(manifest, "val", num_classes)
    net = init_params(num_classes, config.seed)
    result = train(
        net, X, labels, supervised, val_X, val_masks, weights, config,
        log_path=out / "log.jsonl",
    )
    optimizer = Adam(config.learning_rate)
    rng_state = np.random.default_rng(config.seed).bit_generator.state
    save_checkpoint(result.best_net, optimizer, result.best_epoch, rng_state, out / "best.tnck")
    report = {
        "best_val_miou": result.best_val_miou,
        "best_epoch": result.best_epoch,
        "epochs": config.epochs,
        "final_train_loss": result.log[-1]["train_loss"] if result.log else None,
    }
    with open(out / "train_report.json", "w") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    return report


def stage_eval(checkpoint_path, dataset_dir, split, out_path, num_classes: int = NUM_CLASSES) -> dict:
    net, _, _, _ = load_checkpoint(checkpoint_path)
    manifest = load_manifest(Path(dataset_dir) / "manifest.json")
    X, masks = _load_split(manifest, split, num_classes)
    report = evaluate(net, X, masks)
    report["split"] = split
    with open(out_path, "w") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    return report


def run_pipeline(out_dir, cfg: PipelineConfig) -> dict:
    """synth -> superpixels -> sample -> propagate -> weights -> train -> eval."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = out / "dataset"
    stage_synth(dataset, cfg.scenes, cfg.size, cfg.seed, cfg.noise_sigma)
    sp_dir = out / "superpixels"
    stage_superpixels(dataset, sp_dir, cfg.k, cfg.edge, cfg.backend)
    points_dir = out / "points"
    stage_sample(dataset, points_dir, cfg.points, cfg.strategy, cfg.seed, cfg.num_classes)
    pseudo_dir = out / "pseudomasks"
    stage_propagate(dataset, sp_dir, points_dir, pseudo_dir, cfg.k,
                    cfg.background_policy, cfg.num_classes)
    weights = stage_weights(dataset, pseudo_dir, out / "weights.json", cfg.num_classes)
    train_cfg = TrainConfig(
        learning_rate=cfg.learning_rate,
        batch_size=cfg.batch_size,
        epochs=cfg.epochs,
        seed=cfg.seed,
    )
    train_report = stage_train(dataset, pseudo_dir, weights, out / "train", train_cfg, cfg.num_classes)
    eval_report = stage_eval(out / "train" / "best.tnck", dataset, "test",
                             out / "eval.json", cfg.num_classes)
    summary = {
        "config": asdict(cfg),
        "train": train_report,
        "test_miou": eval_report["miou"],
    }
    with open(out / "pipeline.json", "w") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    return summary


# ---------------------------------------------------------------------------
# in-memory benchmark helpers (ablation + acceptance)
# ---------------------------------------------------------------------------


@dataclass
class Benchmark:
    """The standard in-memory benchmark: scenes with exact ground truth."""

    images: list
    masks: list
    manifest_order: np.ndarray  # permutation; first 60% train, then val, test
    num_classes: int = NUM_CLASSES

    @classmethod
    def generate(cls, scenes: int = 200, size: int = 64, seed: int = 0,
                 noise_sigma: float = BENCHMARK_NOISE_SIGMA,
                 color_jitter: float = BENCHMARK_COLOR_JITTER) -> "Benchmark":
        spec = benchmark_scene_spec(size, noise_sigma, color_jitter)
        images, masks = [], []
        for i in range(scenes):
            img, mask = gen_synthetic_scene(spec, i)
            images.append(img)
            masks.append(mask)
        order = np.random.default_rng(seed).permutation(scenes)
        return cls(images, masks, order)

    def split_indices(self, split: str) -> np.ndarray:
        n = len(self.images)
        counts = [int(0.6 * n), int(0.2 * n), int(0.2 * n)]
        for i in range(n - sum(counts)):  # remainders train-first
            counts[i % 3] += 1
        bounds = np.cumsum(counts)
        if split == "train":
            return self.manifest_order[: bounds[0]]
        if split == "val":
            return self.manifest_order[bounds[0] : bounds[1]]
        return self.manifest_order[bounds[1] : bounds[2]]


def pseudo_mask_for(benchmark: Benchmark, index: int, points: int, k: int,
                    edge: bool, policy: str, seed: int,
                    hierarchy=None, strategy: str = "balanced"):
    img = benchmark.images[index]
    gt = benchmark.masks[index]
    if hierarchy is None:
        hierarchy = compute_hierarchy(img, SuperpixelConfig(k=k, edge=edge))
    spmap = extract_k(hierarchy, k, img.width, img.height)
    point_seed = seed * POINT_SEED_STRIDE + index
    if strategy == "balanced":
        pts = sample_points_balanced(gt, points, point_seed)
    else:
        pts = sample_points_random(gt, points, point_seed)
    return propagate(pts, spmap, PropagationConfig(policy), benchmark.num_classes)


def pseudo_quality_miou(pm, gt: ClassMask, num_classes: int = NUM_CLASSES) -> float:
    """mIoU of the pseudo-mask against ground truth, as a full segmentation.

    Point-free regions keep label 0 under the ignore policy; the background
    class earns no intersection credit (ignore_index=0) but unlabeled true
    content still counts against the union, so coverage drives this score
    exactly as it drives a trained model's.
    """
    return miou_micro(pm.labels.classes, gt.classes, num_classes, 0)


# ---------------------------------------------------------------------------
# ablation harness
# ---------------------------------------------------------------------------


def _hierarchies_for(benchmark: Benchmark, edge: bool, cache: dict | None = None) -> list:
    key = bool(edge)
    if cache is not None and key in cache:
        return cache[key]
    out = []
    for img in benchmark.images:
        out.append(compute_hierarchy(img, SuperpixelConfig(edge=edge)))
    if cache is not None:
        cache[key] = out
    return out


def ablate_pseudo_axis(benchmark: Benchmark, axis: str, values, base: PipelineConfig,
                       hierarchy_cache: dict | None = None) -> dict:
    """Sweep one pseudo-mask parameter; cells report mean pseudo-mask quality."""
    cells = []
    for value in values:
        points, k, edge = base.points, base.k, base.edge
        if axis == "points":
            points = int(value)
        elif axis == "k":
            k = int(value)
        elif axis == "edge":
            edge = bool(value)
        else:
            raise ValueError(f"unknown pseudo-mask axis {axis!r}")
        hierarchies = _hierarchies_for(benchmark, edge, hierarchy_cache)
        scores = []
        coverages = []
        for i in range(len(benchmark.images)):
            pm = pseudo_mask_for(
                benchmark, i, points, k, edge, base.background_policy,
                base.seed, hierarchy=hierarchies[i], strategy=base.strategy,
            )
            scores.append(pseudo_quality_miou(pm, benchmark.masks[i]))
            coverages.append(coverage(pm))
        cells.append(
            {
                axis: value,
                "miou": float(np.mean(scores)),
                "coverage": float(np.mean(coverages)),
            }
        )
    return {"axis": axis, "mode": "pseudomask", "cells": cells}


def _train_one_mode(args):
    benchmark, mode, seed, epochs, lr, batch_size, hierarchies, base = args
    return train_supervision_mode(
        benchmark, mode, seed, epochs, lr, batch_size, hierarchies, base
    )


def train_supervision_mode(benchmark: Benchmark, mode: str, seed: int, epochs: int,
                           lr: float, batch_size: int, hierarchies=None,
                           base: PipelineConfig | None = None) -> dict:
    """Train one supervision mode; returns best val and test mIoU.

    Modes: masked (pseudo-masks, unlabeled pixels excluded), background
    (pseudo-masks, unlabeled pixels supervised as background), full (ground
    truth everywhere).
    """
    from .training import normalize_images

    if mode not in SUPERVISION_MODES:
        raise ValueError(f"unknown supervision mode {mode!r}")
    base = base or PipelineConfig()
    c = benchmark.num_classes
    if hierarchies is None and mode != "full":
        hierarchies = _hierarchies_for(benchmark, base.edge)

    train_idx = benchmark.split_indices("train")
    val_idx = benchmark.split_indices("val")
    test_idx = benchmark.split_indices("test")

    def stack_images(idx):
        return normalize_images(np.stack([benchmark.images[i].pixels for i in idx]))

    def stack_masks(idx):
        return np.stack([benchmark.masks[i].classes.astype(np.int64) for i in idx])

    X = stack_images(train_idx)
    if mode == "full":
        labels = stack_masks(train_idx)
        supervised = np.ones(labels.shape, dtype=np.float64)
    else:
        policy = "supervise" if mode == "background" else "ignore"
        label_list, sup_list = [], []
        for i in train_idx:
            pm = pseudo_mask_for(
                benchmark, int(i), base.points, base.k, base.edge, policy,
                seed, hierarchy=hierarchies[int(i)], strategy=base.strategy,
            )
            label_list.append(pm.labels.classes.astype(np.int64))
            sup_list.append(pm.supervised.astype(np.float64))
        labels = np.stack(label_list)
        supervised = np.stack(sup_list)

    counts = np.zeros(c, dtype=np.int64)
    sel = supervised == 1
    counts += np.bincount(labels[sel].ravel(), minlength=c)[:c]
    total = counts.sum()
    weights = ClassWeights(1.0 / np.maximum(counts / max(total, 1), 1e-6))

    config = TrainConfig(
        learning_rate=lr, batch_size=batch_size, epochs=epochs, seed=seed
    )
    net = init_params(c, seed)
    result = train(
        net, X, labels, supervised,
        stack_images(val_idx), stack_masks(val_idx), weights, config,
    )
    test_report = evaluate(result.best_net, stack_images(test_idx), stack_masks(test_idx))
    return {
        "mode": mode,
        "seed": seed,
        "best_val_miou": result.best_val_miou,
        "test_miou": test_report["miou"],
        "coverage": float(np.mean(supervised)),
    }


def ablate_loss_axis(benchmark: Benchmark, modes, seeds, epochs: int, lr: float,
                     batch_size: int, base: PipelineConfig | None = None) -> dict:
    """Training sweep over supervision modes; cells average best val mIoU over seeds."""
    base = base or PipelineConfig()
    hierarchies = None
    if any(m != "full" for m in modes):
        hierarchies = _hierarchies_for(benchmark, base.edge)
    jobs = [
        (benchmark, mode, seed, epochs, lr, batch_size, hierarchies, base)
        for mode in modes
        for seed in seeds
    ]
    workers = min(worker_count(), len(jobs))
    # pin BLAS to one thread for the whole sweep so concurrent runs cannot
    # perturb each other's reduction order; results match the serial path
    with threadpool_limits(limits=1, user_api="blas"):
        if workers > 1:
            with futures.ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(_train_one_mode, jobs))
        else:
            results = [_train_one_mode(job) for job in jobs]
    cells = []
    for mode in modes:
        runs = [r for r in results if r["mode"] == mode]
        cells.append(
            {
                "loss": mode,
                "miou": float(np.mean([r["best_val_miou"] for r in runs])),
                "test_miou": float(np.mean([r["test_miou"] for r in runs])),
                "runs": runs,
            }
        )
    return {"axis": "loss", "mode": "train", "cells": cells}


def run_ablation(out_path, axes: dict, scenes: int = 200, size: int = 64,
                 seed: int = 0, epochs: int = 100, lr: float = 1e-4,
                 batch_size: int = 8, train_seeds=(0, 1, 2),
                 base: PipelineConfig | None = None) -> dict:
    """Sweep requested axes over the standard benchmark; emits a table-shaped report."""
    base = base or PipelineConfig(seed=seed)
    benchmark = Benchmark.generate(scenes, size, seed)
    hierarchy_cache: dict = {}
    tables = []
    for axis, values in axes.items():
        if axis == "loss":
            tables.append(
                ablate_loss_axis(benchmark, values, train_seeds, epochs, lr, batch_size, base)
            )
        else:
            tables.append(ablate_pseudo_axis(benchmark, axis, values, base, hierarchy_cache))
    report = {
        "benchmark": {"scenes": scenes, "size": size, "seed": seed},
        "tables": tables,
    }
    if out_path is not None:
        with open(out_path, "w") as fh:
            json.dump(report, fh, indent=2)
            fh.write("\n")
    return report
