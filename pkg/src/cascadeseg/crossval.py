"""Two-stage pipeline and k-fold cross-validation harness.

Per fold: stage-1 HNN-I nets (three views) on whole slices, candidate
regions for the test cases, stage-2 HNN-I nets and the axial HNN-B net on
cropped training regions, then the pooled-probability variants, the
superpixel forest (HNN-RF), the superpixel oracle and the regression-forest
box baseline.
"""
from __future__ import annotations

import csv
import io as _io
import logging
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import io as cio
from .aggregation import (THRESHOLD_GRID, calibrate_threshold, label_superpixels, positive_probability,
                          predict_segmentation, proposal_features, train_forest)
from .errors import InvalidArgument, SegError, UndefinedMetric
from .hnn import NetConfig, compute_beta, train
from .localization import bbox_stats, candidate_region
from .metrics import dice, overlap_metrics, summarize, surface_distances, wilcoxon_signed_rank
from .multiview import MEAN_MAX, PoolingMode, pool_views, predict_volume, predict_volume_outputs
from .phantom import split_folds
from .regforest import LocalizerConfig, predict_bbox, train_localizer
from .superpixels import (build_partitions, check_partition, interface_band, optimal_assignment,
                          proposals_first_two_levels)
from .volume import PLANES, BBox3, ViewPlane, Volume, crop, extract_slices, window_rescale

log = logging.getLogger(__name__)

POOLED_VARIANTS = (
    ("single-ax", PoolingMode("single", (ViewPlane.AXIAL,))),
    ("single-co", PoolingMode("single", (ViewPlane.CORONAL,))),
    ("single-sa", PoolingMode("single", (ViewPlane.SAGITTAL,))),
    ("mean-all", PoolingMode("mean_all")),
    ("max-all", PoolingMode("max_all")),
    ("meanmax", MEAN_MAX),
)
VARIANTS = ("candidate",) + tuple(n for n, _ in POOLED_VARIANTS) + ("hnn-rf", "oracle", "regforest")
COLUMNS = ("case_id", "variant", "dsc", "jaccard", "hausdorff_mm", "avgdist_mm", "recall", "volume_reduction")
METRICS = COLUMNS[2:6]
BOUNDARY_SCALES = ("side2", "side3", "fused")


@dataclass(frozen=True)
class PipelineConfig:
    k: int = 4
    seed: int = 0
    stage1: NetConfig = field(default_factory=lambda: NetConfig(channels=(4, 8, 8), epochs=5))
    stage1_slice_step: int = 3
    stage2: NetConfig = field(default_factory=lambda: NetConfig(epochs=10))
    boundary: NetConfig = field(default_factory=lambda: NetConfig(epochs=30))
    candidate_threshold: float = 0.5
    candidate_pad: int = 5
    erode_radius: int = 1
    train_pad: int = 5
    smooth_radius: int = 1
    merge_quantile: float = 25.0
    rf_trees: int = 50
    calibrate: bool = True
    baseline: bool = True
    localizer: LocalizerConfig = field(default_factory=LocalizerConfig)

    def __post_init__(self):
        if self.k < 2:
            raise InvalidArgument("k must be at least 2")
        if self.stage1_slice_step < 1:
            raise InvalidArgument("stage1_slice_step must be >= 1")

    def to_json(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.to_json() if hasattr(v, "to_json") else v
        return out

    @classmethod
    def from_json(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidArgument(f"unknown pipeline option(s): {sorted(unknown)}")
        kw = dict(d)
        for key in ("stage1", "stage2", "boundary"):
            if key in kw:
                base = getattr(cls(), key).to_json()
                base.update(kw[key])
                kw[key] = NetConfig.from_json(base)
        if "localizer" in kw:
            kw["localizer"] = LocalizerConfig.from_json(kw["localizer"])
        return cls(**kw)


def derive_seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0] % (2**31 - 1))


# ---- stage 1 ---------------------------------------------------------------

def stage1_dataset(cases, plane, step: int = 1):
    """Whole-volume slices; with ``step > 1`` every step-th slice, phase shifted per case."""
    data = []
    for i, c in enumerate(cases):
        ims = extract_slices(window_rescale(c.ct), plane)
        gts = extract_slices(c.gt_interior, plane)
        for k in range(i % step, len(ims), step):
            data.append((ims[k], gts[k]))
    return data


def train_stage1(cases, cfg: PipelineConfig, fold: int = 0) -> dict:
    nets = {}
    for j, plane in enumerate(PLANES):
        data = stage1_dataset(cases, plane, cfg.stage1_slice_step)
        beta = compute_beta([g for _, g in data])
        net_cfg = cfg.stage1.replace(seed=derive_seed(cfg.seed, fold, 1, j))
        nets[plane.value] = train(net_cfg, beta, data)
    return nets


def stage1_probability(nets: dict, ct: Volume) -> Volume:
    v = window_rescale(ct)
    return pool_views([predict_volume(nets[p.value], v, p) for p in PLANES], MEAN_MAX)


def localize(nets: dict, ct: Volume, cfg: PipelineConfig):
    prob = stage1_probability(nets, ct)
    return candidate_region(prob, cfg.candidate_threshold, cfg.candidate_pad, cfg.erode_radius)


# ---- stage 2 ---------------------------------------------------------------

def train_box(case, pad: int) -> BBox3:
    return BBox3.of_mask(case.gt_interior.data, pad=pad, source="gt")


def train_stage2(cases, cfg: PipelineConfig, fold: int = 0) -> dict:
    """Interior nets for the three views plus the axial boundary net, on padded gt crops."""
    crops = [(crop(window_rescale(c.ct), train_box(c, cfg.train_pad)),
              crop(c.gt_interior, train_box(c, cfg.train_pad))) for c in cases]
    nets = {}
    for j, plane in enumerate(PLANES):
        data = [pair for v, g in crops for pair in zip(extract_slices(v, plane), extract_slices(g, plane))]
        beta = compute_beta([g for _, g in data])
        nets[plane.value] = train(cfg.stage2.replace(seed=derive_seed(cfg.seed, fold, 2, j)), beta, data)
    data = []
    for v, g in crops:
        band = g.with_data(interface_band(g.data))
        data += list(zip(extract_slices(v, ViewPlane.AXIAL), extract_slices(band, ViewPlane.AXIAL)))
    beta = compute_beta([g for _, g in data])
    nets["boundary"] = train(cfg.boundary.replace(seed=derive_seed(cfg.seed, fold, 3)), beta, data)
    return nets


@dataclass
class CaseMaps:
    box: BBox3
    pooled: dict        # variant -> region-shaped probability Volume
    boundary: Volume    # fused HNN-B map over the region
    level1: object
    level2: object


def stage2_maps(nets: dict, ct: Volume, box: BBox3, cfg: PipelineConfig) -> CaseMaps:
    v = crop(window_rescale(ct), box)
    views = {p: predict_volume(nets[p.value], v, p) for p in PLANES}
    pooled = {}
    for name, mode in POOLED_VARIANTS:
        maps = [views[p] for p in mode.planes] if mode.planes else [views[p] for p in PLANES]
        pooled[name] = pool_views(maps, mode)
    outs = predict_volume_outputs(nets["boundary"], v, ViewPlane.AXIAL, BOUNDARY_SCALES)
    l1, l2 = build_partitions([outs[s] for s in BOUNDARY_SCALES], box, cfg.smooth_radius, cfg.merge_quantile)
    return CaseMaps(box, pooled, outs["fused"], l1, l2)


def full_mask(local, box: BBox3, dims) -> np.ndarray:
    out = np.zeros(tuple(dims), dtype=np.uint8)
    out[box.slices] = local
    return out


def _best_threshold(scores: np.ndarray) -> float:
    # scores: (cases, thresholds); first maximum = lowest threshold
    return float(THRESHOLD_GRID[int(np.argmax(scores.mean(axis=0)))])


@dataclass
class Stage2Model:
    nets: dict
    thresholds: dict
    forest: object
    rf_threshold: float


def fit_stage2(train_cases, cfg: PipelineConfig, fold: int = 0) -> Stage2Model:
    nets = train_stage2(train_cases, cfg, fold)
    grid = np.asarray(THRESHOLD_GRID)
    scores = {name: [] for name, _ in POOLED_VARIANTS}
    X, y, cal_meta = [], [], []
    for c in train_cases:
        box = train_box(c, cfg.train_pad)
        maps = stage2_maps(nets, c.ct, box, cfg)
        g = crop(c.gt_interior, box).data.astype(bool)
        for name, _ in POOLED_VARIANTS:
            p = maps.pooled[name].data
            scores[name].append([dice(p >= t, g) for t in grid])
        props = proposals_first_two_levels(maps.level1, maps.level2)
        vl = [p.voxels for p in props]
        X.append(proposal_features(vl, crop(c.ct, box), maps.pooled["meanmax"], maps.boundary, box))
        y.append(label_superpixels(vl, g, box))
        n1 = sum(1 for p in props if p.level == 1)
        cal_meta.append((vl[:n1], box, c.gt_interior))
    thresholds = {n: (_best_threshold(np.asarray(s)) if cfg.calibrate else 0.5) for n, s in scores.items()}
    Xa, ya = np.vstack(X), np.concatenate(y)
    forest = train_forest(Xa, ya, trees=cfg.rf_trees, seed=derive_seed(cfg.seed, fold, 4))
    rf_threshold = 0.5
    if cfg.calibrate:
        pos = int(np.flatnonzero(forest.classes == 1)[0])
        fallback = positive_probability(forest, Xa)
        oob = np.where(np.isnan(forest.oob_proba[:, pos]), fallback, forest.oob_proba[:, pos])
        cases, start = [], 0
        for (vl1, box, gt), Xi in zip(cal_meta, X):
            cases.append((vl1, oob[start:start + len(vl1)], box, gt))
            start += len(Xi)
        rf_threshold = calibrate_threshold(cases)
    return Stage2Model(nets, thresholds, forest, rf_threshold)


# ---- evaluation --------------------------------------------------------------

def _nan_row(case_id, variant):
    return {"case_id": case_id, "variant": variant, **{k: math.nan for k in COLUMNS[2:]}}


def _score(case_id, variant, pred, gt, spacing, loc, errors):
    row = {"case_id": case_id, "variant": variant}
    row.update(overlap_metrics(pred, gt))
    try:
        row.update(surface_distances(pred, gt, spacing))
    except UndefinedMetric as e:
        row.update(hausdorff_mm=math.nan, avgdist_mm=math.nan)
        errors.append({"case_id": case_id, "variant": variant, "code": e.code, "message": str(e)})
    row.update(loc)
    return row


def evaluate_case(case, stage1_nets, model: Stage2Model, localizer, cfg: PipelineConfig) -> tuple:
    """All report rows for one test case, plus its error records."""
    cid, gt, sp = case.id, case.gt_interior.data, case.ct.spacing
    errors = []
    rows = {}
    mask1, box = localize(stage1_nets, case.ct, cfg)
    loc = bbox_stats(box, gt)
    rows["candidate"] = _score(cid, "candidate", mask1, gt, sp, loc, errors)
    maps = stage2_maps(model.nets, case.ct, box, cfg)
    check_partition(maps.level1)
    check_partition(maps.level2)
    for name, _ in POOLED_VARIANTS:
        local = (maps.pooled[name].data >= model.thresholds[name]).astype(np.uint8)
        rows[name] = _score(cid, name, full_mask(local, box, gt.shape), gt, sp, loc, errors)
    regions = maps.level1.regions()
    vl = list(regions.values())
    feats = proposal_features(vl, crop(case.ct, box), maps.pooled["meanmax"], maps.boundary, box)
    rf = predict_segmentation(model.forest, vl, feats, model.rf_threshold, box, gt.shape, sp)
    rows["hnn-rf"] = _score(cid, "hnn-rf", rf, gt, sp, loc, errors)
    oracle, _ = optimal_assignment(maps.level1, gt)
    rows["oracle"] = _score(cid, "oracle", oracle, gt, sp, loc, errors)
    if localizer is not None:
        try:
            rbox, _ = predict_bbox(localizer, case.ct)
            gbox = BBox3.of_mask(gt)
            a = full_mask(1, rbox, gt.shape)
            b = full_mask(1, gbox, gt.shape)
            row = {"case_id": cid, "variant": "regforest", "dsc": dice(a, b),
                   "jaccard": overlap_metrics(a, b)["jaccard"], "hausdorff_mm": math.nan, "avgdist_mm": math.nan}
            row.update(bbox_stats(rbox, gt))
            rows["regforest"] = row
        except SegError as e:
            rows["regforest"] = _nan_row(cid, "regforest")
            errors.append({"case_id": cid, "variant": "regforest", "code": e.code, "message": str(e)})
    return rows, errors


def crossval_run(cases, cfg: PipelineConfig = PipelineConfig(), out=None) -> dict:
    """Run k-fold CV; returns ``{"rows", "summary"}`` and writes reports under ``out`` if given."""
    cases = list(cases)
    if len(cases) < cfg.k:
        raise InvalidArgument(f"corpus of {len(cases)} cases cannot be split into {cfg.k} folds")
    by_id = {c.id: c for c in cases}
    if len(by_id) != len(cases):
        raise InvalidArgument("case ids must be unique")
    folds = split_folds(sorted(by_id), cfg.k, cfg.seed)
    variants = VARIANTS if cfg.baseline else VARIANTS[:-1]
    rows, errors, fold_info = [], [], []
    for f, test_ids in enumerate(folds):
        t0 = time.perf_counter()
        train_cases = [by_id[i] for i in sorted(by_id) if i not in set(test_ids)]
        info = {"fold": f, "test": list(test_ids)}
        try:
            s1 = train_stage1(train_cases, cfg, f)
            log.info("fold %d: stage-1 trained (%.1fs)", f, time.perf_counter() - t0)
            model = fit_stage2(train_cases, cfg, f)
            log.info("fold %d: stage-2 trained (%.1fs)", f, time.perf_counter() - t0)
            loc = train_localizer(train_cases, cfg.localizer) if cfg.baseline else None
            info.update(thresholds=model.thresholds, rf_threshold=model.rf_threshold,
                        rf_oob_accuracy=model.forest.oob_score)
            if out is not None:
                fold_dir = Path(out) / f"fold{f}"
                for name, net in s1.items():
                    cio.store_hnn(net, fold_dir / f"stage1_{name}.hnn")
                for name, net in model.nets.items():
                    cio.store_hnn(net, fold_dir / f"stage2_{name}.hnn")
                cio.store_forest(model.forest, fold_dir / "superpixel_rf.forest")
                if loc is not None:
                    cio.store_forest(loc.regressor, fold_dir / "localizer_regression.forest")
                    if loc.classifier is not None:
                        cio.store_forest(loc.classifier, fold_dir / "localizer_accept.forest")
        except Exception as e:  # a failed fold turns into error records for its cases
            log.exception("fold %d failed", f)
            code = getattr(e, "code", type(e).__name__)
            for cid in test_ids:
                errors.append({"case_id": cid, "variant": "*", "code": code, "message": str(e)})
                rows += [_nan_row(cid, v) for v in variants]
            info["error"] = str(e)
            fold_info.append(info)
            continue
        for cid in test_ids:
            try:
                case_rows, errs = evaluate_case(by_id[cid], s1, model, loc, cfg)
                rows += [case_rows.get(v, _nan_row(cid, v)) for v in variants]
                errors += errs
            except Exception as e:
                log.warning("case %s failed: %s", cid, e)
                errors.append({"case_id": cid, "variant": "*", "code": getattr(e, "code", type(e).__name__),
                               "message": str(e)})
                rows += [_nan_row(cid, v) for v in variants]
        log.info("fold %d done (%.1fs)", f, time.perf_counter() - t0)
        fold_info.append(info)
    order = {v: i for i, v in enumerate(variants)}
    rows.sort(key=lambda r: (r["case_id"], order[r["variant"]]))
    summary = summarize_report(rows, variants)
    summary.update(config=cfg.to_json(), n_cases=len(cases), folds=fold_info, errors=errors)
    result = {"rows": rows, "summary": summary}
    if out is not None:
        write_report(result, out)
    return result


def _finite(values):
    v = np.asarray(values, dtype=np.float64)
    return v[np.isfinite(v)]


def summarize_report(rows, variants=VARIANTS) -> dict:
    per = {v: [r for r in rows if r["variant"] == v] for v in variants}
    out = {"variants": {}, "localization": {}, "wilcoxon": {}, "oracle_violations": []}
    for v, rs in per.items():
        stats = {}
        for m in METRICS:
            vals = _finite([r[m] for r in rs])
            stats[m] = summarize(vals) if vals.size else None
        out["variants"][v] = stats
    for v in ("candidate", "regforest"):
        if v not in per:
            continue
        rec = _finite([r["recall"] for r in per[v]])
        red = _finite([r["volume_reduction"] for r in per[v]])
        if rec.size:
            out["localization"][v] = {
                "recall": summarize(rec), "volume_reduction": summarize(red),
                "full_recall_fraction": float(np.mean(rec >= 1.0)),
                "below_95": int(np.sum(rec < 0.95)), "below_60": int(np.sum(rec < 0.60)),
            }
    a = {r["case_id"]: r for r in per.get("hnn-rf", [])}
    b = {r["case_id"]: r for r in per.get("meanmax", [])}
    ids = sorted(set(a) & set(b))
    for m in METRICS:
        pairs = [(a[i][m], b[i][m]) for i in ids if np.isfinite(a[i][m]) and np.isfinite(b[i][m])]
        try:
            p = wilcoxon_signed_rank([x for x, _ in pairs], [y for _, y in pairs]) if pairs else None
            out["wilcoxon"][m] = {"p_value": p, "n": len(pairs)}
        except SegError as e:
            out["wilcoxon"][m] = {"p_value": None, "n": len(pairs), "note": str(e)}
    o = {r["case_id"]: r for r in per.get("oracle", [])}
    for i in sorted(set(o) & set(a)):
        if np.isfinite(o[i]["dsc"]) and np.isfinite(a[i]["dsc"]) and o[i]["dsc"] < a[i]["dsc"]:
            out["oracle_violations"].append({"case_id": i, "oracle": o[i]["dsc"], "hnn_rf": a[i]["dsc"]})
    return out


def _fmt(v):
    if isinstance(v, str):
        return v
    return "nan" if not math.isfinite(v) else repr(float(v))


def report_csv(rows) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in COLUMNS])
    return buf.getvalue()


def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, (np.floating, float)):
        return float(o) if math.isfinite(o) else None
    if isinstance(o, np.integer):
        return int(o)
    return o


def write_report(result: dict, out) -> tuple:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "report.csv"
    csv_path.write_text(report_csv(result["rows"]))
    json_path = cio.write_json(_jsonable(result["summary"]), out / "summary.json")
    return csv_path, json_path
