"""Benchmark games for saliency maps: weak localization, insertion/deletion
curves, the pointing game, plus layer-range/blur ablation sweeps and report
plumbing (CSV rows per image, JSON summaries, config hashes).

Datasets are duck-typed: items need ``sample_id``, ``image`` ([C,H,W] in
[0,1]), ``label``, and ``regions`` mapping class -> list of ``Region`` (box +
mask).  Evaluation is embarrassingly parallel across images; records are
sorted by id before aggregation so reports never depend on scheduling.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import multiprocessing
from dataclasses import dataclass, replace

import numpy as np

from .model import LayerSet, Network, SINGLE_LABEL, MULTI_LABEL, forward_arrays
from .perturb import MarginSpec, PerturbConfig, find_perturbation
from .saliency import SaliencyMap, blur_array, build, normalize01, raw_map
from .tensor_core import Tensor, softmax


# ---------------------------------------------------------------------------
# geometry

@dataclass(frozen=True)
class BoundingBox:
    """Half-open pixel box: x is the column axis, y the row axis."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"degenerate box {self}")
        if self.x0 < 0 or self.y0 < 0:
            raise ValueError(f"box {self} extends outside the image")

    @property
    def area(self) -> int:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def as_tuple(self) -> tuple:
        return (self.x0, self.y0, self.x1, self.y1)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes, in [0, 1]."""
    ix = max(0, min(a.x1, b.x1) - max(a.x0, b.x0))
    iy = max(0, min(a.y1, b.y1) - max(a.y0, b.y0))
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union


def bbox_of_mask(mask: np.ndarray) -> BoundingBox | None:
    """Tight box around the True pixels; None for an empty mask."""
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        return None
    return BoundingBox(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


# ---------------------------------------------------------------------------
# thresholding and connected components

_STRATEGY_KINDS = ("value", "percent", "mean_scaled")


@dataclass(frozen=True)
class ThresholdStrategy:
    kind: str
    alpha: float

    def __post_init__(self):
        if self.kind not in _STRATEGY_KINDS:
            raise ValueError(f"unknown threshold strategy {self.kind!r}")
        hi = 10.50 if self.kind == "mean_scaled" else 1.0
        if not 0 < self.alpha <= hi:
            raise ValueError(
                f"{self.kind} threshold needs 0 < alpha <= {hi}, got {self.alpha}"
            )


def _map_values(m) -> np.ndarray:
    if isinstance(m, SaliencyMap):
        return m.array
    if isinstance(m, Tensor):
        return m.array
    return np.asarray(m, dtype=np.float64)


def threshold_mask(m, strategy: ThresholdStrategy) -> np.ndarray:
    """Binary mask of salient pixels.  ``value``: v >= alpha (map expected in
    [0,1]); ``percent``: the ceil(alpha*H*W) most salient pixels with ties in
    row-major order; ``mean_scaled``: v >= alpha * mean(v)."""
    arr = _map_values(m)
    if strategy.kind == "value":
        return arr >= strategy.alpha
    if strategy.kind == "mean_scaled":
        return arr >= strategy.alpha * arr.mean()
    n = math.ceil(strategy.alpha * arr.size)
    order = np.argsort(-arr.reshape(-1), kind="stable")
    mask = np.zeros(arr.size, dtype=bool)
    mask[order[:n]] = True
    return mask.reshape(arr.shape)


def largest_connected_component(mask) -> np.ndarray:
    """Largest 4-connected True region by pixel count.  Ties go to the
    component containing the smallest row-major pixel index; an empty mask
    yields an empty component."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    parent: dict[int, int] = {}

    def find(a: int) -> int:
        root = a
        while parent[root] != root:
            root = parent[root]
        while parent[a] != root:
            parent[a], a = root, parent[a]
        return root

    flat = mask.reshape(-1)
    true_idx = np.nonzero(flat)[0]
    for idx in true_idx:
        idx = int(idx)
        parent[idx] = idx
        x = idx % w
        if x > 0 and flat[idx - 1]:
            ra, rb = find(idx), find(idx - 1)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
        if idx >= w and flat[idx - w]:
            ra, rb = find(idx), find(idx - w)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
    if not parent:
        return np.zeros_like(mask)
    sizes: dict[int, int] = {}
    roots = np.empty(len(true_idx), dtype=np.int64)
    for k, idx in enumerate(true_idx):
        r = find(int(idx))
        roots[k] = r
        sizes[r] = sizes.get(r, 0) + 1
    # roots are the smallest index of their component, so "smallest root"
    # is exactly the declared tie rule
    best = min(sizes, key=lambda r: (-sizes[r], r))
    out = np.zeros(h * w, dtype=bool)
    out[true_idx[roots == best]] = True
    return out.reshape(h, w)


# ---------------------------------------------------------------------------
# insertion / deletion curves

@dataclass(frozen=True)
class Curve:
    fractions: tuple
    scores: tuple

    def __post_init__(self):
        f, s = tuple(self.fractions), tuple(self.scores)
        object.__setattr__(self, "fractions", f)
        object.__setattr__(self, "scores", s)
        if len(f) != len(s):
            raise ValueError("curve fractions and scores differ in length")
        if len(f) < 2 or f[0] != 0.0 or f[-1] != 1.0 or any(
                f[k] >= f[k + 1] for k in range(len(f) - 1)):
            raise ValueError("fractions must ascend from 0 to 1")


def auc(curve: Curve) -> float:
    """Trapezoidal area under the curve over fractions in [0, 1]."""
    return float(np.trapezoid(np.asarray(curve.scores), np.asarray(curve.fractions)))


def _saliency_order(m) -> np.ndarray:
    """Pixel ranking, most salient first, row-major ties."""
    return np.argsort(-_map_values(m).reshape(-1), kind="stable")


def _confidence(net: Network, image: np.ndarray, class_index: int) -> float:
    return float(softmax(forward_arrays(net, image))[class_index])


def deletion_curve(x, m, net: Network, class_index: int, steps: int = 100) -> Curve:
    """Class confidence as the most salient pixels turn mid-gray (0.5)."""
    if steps < 2:
        raise ValueError("steps must be >= 2")
    xa = np.array(x.array if isinstance(x, Tensor) else x, dtype=np.float64)
    order = _saliency_order(m)
    npix = xa.shape[1] * xa.shape[2]
    fractions, scores = [], []
    for k in range(steps + 1):
        f = k / steps
        img = xa.copy()
        n = int(round(f * npix))
        if n:
            img.reshape(xa.shape[0], -1)[:, order[:n]] = 0.5
        fractions.append(f)
        scores.append(_confidence(net, img, class_index))
    return Curve(tuple(fractions), tuple(scores))


def insertion_curve(x, m, net: Network, class_index: int, steps: int = 100,
                    sigma_base: float = 10.0) -> Curve:
    """Class confidence as original pixels return into a blurred baseline."""
    if steps < 2:
        raise ValueError("steps must be >= 2")
    xa = np.array(x.array if isinstance(x, Tensor) else x, dtype=np.float64)
    base = np.stack([blur_array(ch, sigma_base) for ch in xa])
    order = _saliency_order(m)
    npix = xa.shape[1] * xa.shape[2]
    fractions, scores = [], []
    for k in range(steps + 1):
        f = k / steps
        img = base.copy()
        n = int(round(f * npix))
        if n:
            img.reshape(xa.shape[0], -1)[:, order[:n]] = \
                xa.reshape(xa.shape[0], -1)[:, order[:n]]
        fractions.append(f)
        scores.append(_confidence(net, img, class_index))
    return Curve(tuple(fractions), tuple(scores))


# ---------------------------------------------------------------------------
# bilinear resize (pointing game's scaled variant)

def bilinear_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample of a 2-D map or [C,H,W] image (half-pixel centers)."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 3:
        return np.stack([bilinear_resize(ch, out_h, out_w) for ch in arr])
    h, w = arr.shape
    sy = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    sx = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (sy - y0)[:, None]
    wx = (sx - x0)[None, :]
    return ((1 - wy) * (1 - wx) * arr[np.ix_(y0, x0)]
            + (1 - wy) * wx * arr[np.ix_(y0, x1)]
            + wy * (1 - wx) * arr[np.ix_(y1, x0)]
            + wy * wx * arr[np.ix_(y1, x1)])


# ---------------------------------------------------------------------------
# reports

@dataclass
class GameReport:
    game: str
    config: dict
    records: list
    aggregates: dict


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def write_report_csv(report: GameReport, path) -> None:
    """One row per record: image id first, then the config hash, then metrics."""
    chash = report.config.get("config_hash", config_hash(report.config))
    with open(path, "w", newline="") as fh:
        if not report.records:
            fh.write("")
            return
        fields = list(report.records[0].keys())
        writer = csv.writer(fh)
        writer.writerow([fields[0], "config_hash"] + fields[1:])
        for rec in report.records:
            writer.writerow([_csv_cell(rec[fields[0]]), chash]
                            + [_csv_cell(rec[k]) for k in fields[1:]])


def _csv_cell(v):
    if isinstance(v, float):
        return repr(v)
    return v


def write_report_json(report: GameReport, path) -> None:
    payload = {"game": report.game, "config": report.config,
               "aggregates": report.aggregates}
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2, default=str)
        fh.write("\n")


def parallel_map(fn, items, workers: int = 1) -> list:
    """Map preserving order; uses a process pool when workers > 1 (fn and
    items must then be picklable)."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with multiprocessing.Pool(workers) as pool:
        return pool.map(fn, items)


# ---------------------------------------------------------------------------
# saliency drivers (picklable via functools.partial)

def single_label_saliency(sample, net: Network, cfg: PerturbConfig, sigma: float,
                          guided: bool = False, normalize_first: bool = False,
                          class_index: int | None = None) -> SaliencyMap:
    """Perturbation-based map explaining the sample's label (or an explicit
    class) on a single-label network."""
    cls = int(sample.label) if class_index is None else int(class_index)
    x = sample.image.array if isinstance(sample.image, Tensor) else np.asarray(sample.image)
    res = find_perturbation(x, net, MarginSpec(SINGLE_LABEL, cls), cfg,
                            check_classification=False)
    return build(x, res.x_prime, net, cls, sigma, guided=guided,
                 normalize_first=normalize_first, layer_set=cfg.layer_set)


def detector_saliency(image, class_index: int, net: Network, cfg: PerturbConfig,
                      sigma: float) -> SaliencyMap:
    """Perturbation map for one class of a multi-label detector network,
    suppressing every candidate region of that class."""
    x = image.array if isinstance(image, Tensor) else np.asarray(image)
    res = find_perturbation(
        x, net, MarginSpec(MULTI_LABEL, int(class_index), suppress_all_regions=True),
        cfg, check_classification=False)
    return build(x, res.x_prime, net, int(class_index), sigma,
                 layer_set=cfg.layer_set)


# ---------------------------------------------------------------------------
# weak localization

def default_strategy_grid(alpha_step: float = 0.05) -> dict:
    """The full threshold grids: value/percent alphas in (0, 1], mean-scaled
    alphas in (0, 10.50], all at the given step."""
    n1 = int(round(1.0 / alpha_step))
    n2 = int(round(10.50 / alpha_step))
    return {
        "value": [round(alpha_step * k, 10) for k in range(1, n1 + 1)],
        "percent": [round(alpha_step * k, 10) for k in range(1, n1 + 1)],
        "mean_scaled": [round(alpha_step * k, 10) for k in range(1, n2 + 1)],
    }


def _ground_truth_box(sample) -> BoundingBox:
    regions = sample.regions[int(sample.label)]
    return regions[0].box


def localization_iou(smap, gt_box: BoundingBox, strategy: ThresholdStrategy) -> float:
    """IoU between the ground truth and the box around the largest connected
    component of the thresholded map; an empty component scores 0."""
    mask = threshold_mask(smap, strategy)
    comp = largest_connected_component(mask)
    box = bbox_of_mask(comp)
    if box is None:
        return 0.0
    return iou(box, gt_box)


def weak_localization(dataset, saliency_fn, strategy_grid: dict | None = None,
                      workers: int = 1, config: dict | None = None) -> GameReport:
    """For every threshold strategy and alpha, the error rate is the fraction
    of images whose derived box has IoU < 0.5 with the ground truth box.

    ``saliency_fn(sample)`` must return a map already normalized/blurred the
    way the thresholds expect."""
    grid = strategy_grid if strategy_grid is not None else default_strategy_grid()
    samples = sorted(dataset, key=lambda s: s.sample_id)
    maps = parallel_map(saliency_fn, samples, workers)
    records = []
    for sample, smap in zip(samples, maps):
        gt = _ground_truth_box(sample)
        for kind in sorted(grid):
            for alpha in grid[kind]:
                v = localization_iou(smap, gt, ThresholdStrategy(kind, alpha))
                records.append({
                    "image_id": sample.sample_id, "strategy": kind,
                    "alpha": alpha, "iou": v, "hit": int(v >= 0.5),
                })
    records.sort(key=lambda r: (r["image_id"], r["strategy"], r["alpha"]))
    n_images = len(samples)
    error: dict = {kind: {} for kind in sorted(grid)}
    for kind in sorted(grid):
        for alpha in grid[kind]:
            hits = sum(r["hit"] for r in records
                       if r["strategy"] == kind and r["alpha"] == alpha)
            error[kind][str(alpha)] = 1.0 - hits / n_images if n_images else 1.0
    best_per = {kind: min(error[kind].values()) for kind in error if error[kind]}
    aggregates = {
        "images": n_images,
        "error_by_strategy_alpha": error,
        "best_error_per_strategy": best_per,
        "best_error": min(best_per.values()) if best_per else 1.0,
        "best_error_rule": "min over strategies of (min over alphas of error)",
    }
    cfg = dict(config or {})
    cfg.setdefault("config_hash", config_hash(cfg))
    return GameReport("localization", cfg, records, aggregates)


# ---------------------------------------------------------------------------
# insertion / deletion game

def insertion_deletion(dataset, saliency_fn, net: Network, steps: int = 100,
                       sigma_base: float = 10.0, workers: int = 1,
                       config: dict | None = None) -> GameReport:
    """Per-image deletion and insertion AUCs for the sample's label."""
    samples = sorted(dataset, key=lambda s: s.sample_id)
    maps = parallel_map(saliency_fn, samples, workers)
    records = []
    for sample, smap in zip(samples, maps):
        x = sample.image
        cls = int(sample.label)
        d = auc(deletion_curve(x, smap, net, cls, steps))
        i = auc(insertion_curve(x, smap, net, cls, steps, sigma_base))
        records.append({"image_id": sample.sample_id, "deletion_auc": d,
                        "insertion_auc": i})
    records.sort(key=lambda r: r["image_id"])
    n = len(records)
    aggregates = {
        "images": n,
        "mean_deletion_auc": sum(r["deletion_auc"] for r in records) / n if n else float("nan"),
        "mean_insertion_auc": sum(r["insertion_auc"] for r in records) / n if n else float("nan"),
        "steps": steps,
        "sigma_base": sigma_base,
    }
    cfg = dict(config or {})
    cfg.setdefault("config_hash", config_hash(cfg))
    return GameReport("insertion_deletion", cfg, records, aggregates)


# ---------------------------------------------------------------------------
# pointing game

RESIZE_NONE = None
RESIZE_BILINEAR_1_5X = "bilinear_1_5x"


def _point_hits_region(point, regions, tolerance_px: int) -> bool:
    py, px = point
    for region in regions:
        mask = region.mask
        if tolerance_px == 0:
            if mask[py, px]:
                return True
            continue
        y0 = max(0, py - tolerance_px)
        x0 = max(0, px - tolerance_px)
        if mask[y0:py + tolerance_px + 1, x0:px + tolerance_px + 1].any():
            return True
    return False


def pointing_items(dataset) -> list:
    """(sample, class) pairs to point at, sorted for determinism."""
    items = []
    for sample in sorted(dataset, key=lambda s: s.sample_id):
        for cls in sorted(getattr(sample, "label_set", sample.regions.keys())):
            items.append((sample, int(cls)))
    return items


def is_difficult(sample, class_index: int) -> bool:
    """Difficult pointing item: the target class covers less than 25% of the
    image and another (distracting) class is present."""
    regions = sample.regions.get(class_index)
    if not regions:
        return False
    h, w = regions[0].mask.shape
    area = sum(int(r.mask.sum()) for r in regions)
    has_distractor = any(c != class_index for c in sample.regions)
    return area / (h * w) < 0.25 and has_distractor


def pointing_game(dataset, saliency_fn, tolerance_px: int = 15,
                  resize: str | None = RESIZE_NONE, workers: int = 1,
                  config: dict | None = None) -> GameReport:
    """Point at the map argmax for every (image, class) item; a hit lands
    within ``tolerance_px`` (Chebyshev) of the class region.

    ``saliency_fn(image, class_index)`` receives the (possibly upscaled)
    [C,H,W] image; in resize mode the map is scaled back before the argmax.
    Items whose class has no region are skipped and logged in the records.
    """
    if resize not in (RESIZE_NONE, RESIZE_BILINEAR_1_5X):
        raise ValueError(f"unknown resize mode {resize!r}")
    items = pointing_items(dataset)
    args = []
    for sample, cls in items:
        x = sample.image.array if isinstance(sample.image, Tensor) else np.asarray(sample.image)
        args.append((x, cls))

    def job(arg):
        x, cls = arg
        if resize == RESIZE_BILINEAR_1_5X:
            up = bilinear_resize(x, int(round(x.shape[1] * 1.5)), int(round(x.shape[2] * 1.5)))
            m = _map_values(saliency_fn(up, cls))
            return bilinear_resize(m, x.shape[1], x.shape[2])
        return _map_values(saliency_fn(x, cls))

    if workers > 1:
        maps = parallel_map(_PointingJob(saliency_fn, resize), args, workers)
    else:
        maps = [job(a) for a in args]

    records = []
    for (sample, cls), m in zip(items, maps):
        regions = sample.regions.get(cls)
        if not regions:
            records.append({"image_id": sample.sample_id, "class": cls,
                            "skipped": 1, "difficult": 0, "hit": 0,
                            "point_y": -1, "point_x": -1})
            continue
        flat = int(np.argmax(m.reshape(-1)))
        point = (flat // m.shape[1], flat % m.shape[1])
        hit = _point_hits_region(point, regions, tolerance_px)
        records.append({"image_id": sample.sample_id, "class": cls, "skipped": 0,
                        "difficult": int(is_difficult(sample, cls)),
                        "hit": int(hit), "point_y": point[0], "point_x": point[1]})
    records.sort(key=lambda r: (r["image_id"], r["class"]))
    scored = [r for r in records if not r["skipped"]]
    hard = [r for r in scored if r["difficult"]]
    aggregates = {
        "items": len(scored),
        "skipped": len(records) - len(scored),
        "success_rate": (sum(r["hit"] for r in scored) / len(scored)) if scored else float("nan"),
        "difficult_items": len(hard),
        "success_rate_difficult": (sum(r["hit"] for r in hard) / len(hard)) if hard else float("nan"),
        "tolerance_px": tolerance_px,
        "resize": resize,
    }
    cfg = dict(config or {})
    cfg.setdefault("config_hash", config_hash(cfg))
    return GameReport("pointing", cfg, records, aggregates)


class _PointingJob:
    """Picklable pointing worker wrapping a saliency function."""

    def __init__(self, saliency_fn, resize):
        self.saliency_fn = saliency_fn
        self.resize = resize

    def __call__(self, arg):
        x, cls = arg
        if self.resize == RESIZE_BILINEAR_1_5X:
            up = bilinear_resize(x, int(round(x.shape[1] * 1.5)),
                                 int(round(x.shape[2] * 1.5)))
            m = _map_values(self.saliency_fn(up, cls))
            return bilinear_resize(m, x.shape[1], x.shape[2])
        return _map_values(self.saliency_fn(x, cls))


def center_point_baseline(dataset, tolerance_px: int = 15) -> GameReport:
    """Trivial reference: always point at the image center."""
    records = []
    for sample, cls in pointing_items(dataset):
        regions = sample.regions.get(cls)
        if not regions:
            continue
        h, w = regions[0].mask.shape
        point = (h // 2, w // 2)
        records.append({"image_id": sample.sample_id, "class": cls, "skipped": 0,
                        "difficult": int(is_difficult(sample, cls)),
                        "hit": int(_point_hits_region(point, regions, tolerance_px)),
                        "point_y": point[0], "point_x": point[1]})
    hard = [r for r in records if r["difficult"]]
    aggregates = {
        "items": len(records),
        "skipped": 0,
        "success_rate": (sum(r["hit"] for r in records) / len(records)) if records else float("nan"),
        "difficult_items": len(hard),
        "success_rate_difficult": (sum(r["hit"] for r in hard) / len(hard)) if hard else float("nan"),
        "tolerance_px": tolerance_px,
        "resize": None,
    }
    cfg = {"baseline": "center"}
    cfg["config_hash"] = config_hash(cfg)
    return GameReport("pointing", cfg, records, aggregates)


# ---------------------------------------------------------------------------
# ablation sweeps

GAME_HIGHER_BETTER = {"localization": False, "deletion": False,
                      "insertion": True, "pointing": True}


def count_above(values, bar: float, higher_better: bool = True) -> int:
    """Robustness count: how many values beat the bar (above it when higher is
    better, below it otherwise)."""
    if higher_better:
        return int(sum(1 for v in values if v > bar))
    return int(sum(1 for v in values if v < bar))


@dataclass
class AblationCell:
    per_sigma: dict
    best: float
    robust_count: int


@dataclass
class AblationReport:
    game: str
    cells: dict  # (i, j) -> AblationCell
    sigmas: list
    robustness_bar: float
    higher_better: bool
    config: dict


def ablation_sweep(dataset, net: Network, game: str, relu_ranges, sigmas,
                   base_cfg: PerturbConfig, tolerance_px: int = 0,
                   steps: int = 50, sigma_base: float = 10.0,
                   alpha_step: float = 0.05, value_strategy_only: bool = True,
                   robustness_bar: float = 0.82, workers: int = 1,
                   config: dict | None = None) -> AblationReport:
    """Game metric per (ReLU range, sigma) cell.

    A range (i, j) regularizes ordinals {i, ..., j-1}; the diagonal i == j has
    an empty layer set, i.e. the no-perceptual baseline.  One perturbation is
    computed per image per range and reused across sigmas.  Each cell also
    reports its best-over-sigma metric and the count of sigmas beating the
    robustness bar.
    """
    if game not in GAME_HIGHER_BETTER:
        raise ValueError(f"unknown game {game!r} (have {sorted(GAME_HIGHER_BETTER)})")
    higher = GAME_HIGHER_BETTER[game]
    sigmas = [float(s) for s in sigmas]
    if not sigmas or not relu_ranges:
        raise ValueError("ablation needs non-empty sigma and range grids")
    samples = sorted(dataset, key=lambda s: s.sample_id)
    cells = {}
    for (i, j) in relu_ranges:
        if j < i:
            raise ValueError(f"invalid ReLU range ({i}, {j})")
        layer_set = LayerSet.of_range(i, j)
        layer_set.validate_against(net.spec)
        cfg = replace(base_cfg, layer_set=layer_set)
        per_sigma = {}
        if game == "pointing":
            items = pointing_items(samples)
            raws = parallel_map(
                _PointingRawJob(net, cfg), [(s.image.array, c) for s, c in items], workers)
            for sigma in sigmas:
                maps = [blur_array(r, sigma) for r in raws]
                hits = total = 0
                for (sample, cls), m in zip(items, maps):
                    regions = sample.regions.get(cls)
                    if not regions:
                        continue
                    flat = int(np.argmax(m.reshape(-1)))
                    point = (flat // m.shape[1], flat % m.shape[1])
                    hits += int(_point_hits_region(point, regions, tolerance_px))
                    total += 1
                per_sigma[sigma] = hits / total if total else float("nan")
        else:
            raws = parallel_map(_RawMapJob(net, cfg), samples, workers)
            for sigma in sigmas:
                if game == "localization":
                    grid = {"value": default_strategy_grid(alpha_step)["value"]} \
                        if value_strategy_only else default_strategy_grid(alpha_step)
                    errs = []
                    for kind in sorted(grid):
                        for alpha in grid[kind]:
                            strat = ThresholdStrategy(kind, alpha)
                            misses = 0
                            for sample, raw in zip(samples, raws):
                                m = blur_array(normalize01(raw).array, sigma)
                                misses += int(localization_iou(
                                    m, _ground_truth_box(sample), strat) < 0.5)
                            errs.append(misses / len(samples))
                    per_sigma[sigma] = min(errs)
                else:
                    vals = []
                    for sample, raw in zip(samples, raws):
                        m = blur_array(raw, sigma)
                        cls = int(sample.label)
                        if game == "deletion":
                            vals.append(auc(deletion_curve(sample.image, m, net, cls, steps)))
                        else:
                            vals.append(auc(insertion_curve(sample.image, m, net, cls,
                                                            steps, sigma_base)))
                    per_sigma[sigma] = sum(vals) / len(vals)
        metrics = list(per_sigma.values())
        best = max(metrics) if higher else min(metrics)
        cells[(i, j)] = AblationCell(per_sigma=per_sigma, best=best,
                                     robust_count=count_above(metrics, robustness_bar, higher))
    cfg_out = dict(config or {})
    cfg_out.setdefault("config_hash", config_hash(cfg_out))
    return AblationReport(game=game, cells=cells, sigmas=sigmas,
                          robustness_bar=robustness_bar, higher_better=higher,
                          config=cfg_out)


class _RawMapJob:
    """Picklable raw (unblurred) saliency for one sample's own label."""

    def __init__(self, net, cfg):
        self.net = net
        self.cfg = cfg

    def __call__(self, sample):
        x = sample.image.array if isinstance(sample.image, Tensor) else np.asarray(sample.image)
        res = find_perturbation(x, self.net,
                                MarginSpec(SINGLE_LABEL, int(sample.label)),
                                self.cfg, check_classification=False)
        return raw_map(x, res.x_prime).array


class _PointingRawJob:
    """Picklable raw saliency for one (image, class) pointing item."""

    def __init__(self, net, cfg):
        self.net = net
        self.cfg = cfg

    def __call__(self, arg):
        x, cls = arg
        res = find_perturbation(
            x, self.net, MarginSpec(MULTI_LABEL, int(cls), suppress_all_regions=True),
            self.cfg, check_classification=False)
        return raw_map(x, res.x_prime).array


def write_ablation_csv(report: AblationReport, path) -> None:
    """Best-metric matrix with ReLU ordinals as header row and column."""
    ivals = sorted({i for i, _ in report.cells})
    jvals = sorted({j for _, j in report.cells})
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["relu_i\\relu_j"] + [str(j) for j in jvals])
        for i in ivals:
            row = [str(i)]
            for j in jvals:
                cell = report.cells.get((i, j))
                row.append(repr(cell.best) if cell is not None else "")
            writer.writerow(row)


def write_ablation_json(report: AblationReport, path) -> None:
    payload = {
        "game": report.game,
        "config": report.config,
        "sigmas": report.sigmas,
        "robustness_bar": report.robustness_bar,
        "higher_better": report.higher_better,
        "cells": {
            f"{i},{j}": {"per_sigma": {str(s): v for s, v in cell.per_sigma.items()},
                         "best": cell.best, "robust_count": cell.robust_count}
            for (i, j), cell in sorted(report.cells.items())
        },
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
