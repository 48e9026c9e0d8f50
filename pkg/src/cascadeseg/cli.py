"""Command-line interface: ``cascadeseg <subcommand> [options]``.

Every subcommand writes its artifacts under ``--out`` together with a
``manifest.json`` of sha256 digests. Failures print a JSON error document
on stderr and exit nonzero.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import io as cio
from .aggregation import predict_segmentation, proposal_features
from .crossval import (BOUNDARY_SCALES, PipelineConfig, crossval_run, full_mask, stage1_dataset, train_box)
from .errors import InvalidArgument, SegError
from .hnn import NetConfig, compute_beta, train
from .localization import candidate_region
from .metrics import overlap_metrics, surface_distances
from .multiview import PoolingMode, pool_views, predict_volume
from .phantom import PhantomConfig, generate_corpus
from .regforest import LocalizerConfig, predict_bbox, train_localizer
from .superpixels import build_partitions, check_partition, interface_band
from .volume import BBox3, ViewPlane, Volume, crop, extract_slices, window_rescale

log = logging.getLogger("cascadeseg")


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, ValueError) as e:
        raise InvalidArgument(f"cannot read config {path}: {e}") from None
    if not isinstance(doc, dict):
        raise InvalidArgument("config must be a JSON object")
    return doc


def _pipeline_config(args, doc) -> PipelineConfig:
    d = dict(doc.get("pipeline", {}))
    d.setdefault("seed", args.seed)
    if getattr(args, "k", None) is not None:
        d["k"] = args.k
    return PipelineConfig.from_json(d)


def _phantom_config(args, doc) -> PhantomConfig:
    return PhantomConfig(**doc.get("phantom", {}))


def _finish(args, files, extra=None):
    out = Path(args.out)
    cio.write_manifest(out, files, out / "manifest.json", extra)
    print(json.dumps({"ok": True, "out": str(out), "files": len(files)}))


# ---- subcommands -------------------------------------------------------------

def cmd_phantom(args, doc):
    cfg = _phantom_config(args, doc)
    cases = generate_corpus(args.n, args.seed, cfg)
    files = []
    for c in cases:
        files += cio.store_case(c, Path(args.out) / "cases" / c.id)
    _finish(args, files, {"phantom": cfg.to_json(), "n": args.n, "seed": args.seed})


def cmd_train_hnn(args, doc):
    cases = cio.load_corpus(args.cases)
    plane = ViewPlane.parse(args.view)
    net_cfg = NetConfig.from_json({**NetConfig().to_json(), **doc.get("net", {}), "seed": args.seed})
    if args.target == "boundary" and plane is not ViewPlane.AXIAL:
        raise InvalidArgument("the boundary network is trained on axial slices only")
    if args.stage == 1:
        if args.target != "interior":
            raise InvalidArgument("stage 1 trains interior networks only")
        data = stage1_dataset(cases, plane, args.slice_step)
    else:
        data = []
        for c in cases:
            box = train_box(c, args.pad)
            v = crop(window_rescale(c.ct), box)
            g = crop(c.gt_interior, box)
            if args.target == "boundary":
                g = g.with_data(interface_band(g.data))
            data += list(zip(extract_slices(v, plane), extract_slices(g, plane)))
    beta = compute_beta([g for _, g in data])
    history = []
    params = train(net_cfg, beta, data, history=history)
    path = cio.store_hnn(params, Path(args.out) / f"{args.name or f'stage{args.stage}_{args.target}_{plane.value}'}.hnn")
    _finish(args, [path], {"beta": beta, "loss_history": history, "net": net_cfg.to_json()})


def _maybe_crop(vol, box_path):
    if box_path is None:
        return vol, None
    box = cio.load_bbox(box_path)
    return crop(vol, box), box


def cmd_infer(args, doc):
    params = cio.load_hnn(args.model)
    ct, box = _maybe_crop(cio.load_volume(args.volume), args.box)
    prob = predict_volume(params, window_rescale(ct), ViewPlane.parse(args.view), output=args.output)
    files = list(cio.store_volume(prob, Path(args.out) / args.name))
    _finish(args, files)


def cmd_fuse(args, doc):
    mode = PoolingMode.parse(args.mode)
    maps = [cio.load_volume(p) for p in args.inputs]
    pooled = pool_views(maps, mode)
    _finish(args, list(cio.store_volume(pooled, Path(args.out) / args.name)), {"mode": mode.label()})


def cmd_localize(args, doc):
    prob = cio.load_volume(args.prob)
    mask, box = candidate_region(prob, args.threshold, args.pad, args.erode_radius)
    out = Path(args.out)
    files = list(cio.store_volume(Volume(mask, prob.spacing), out / "candidate_mask"))
    files.append(cio.store_bbox(box, out / "bbox.json"))
    _finish(args, files)


def cmd_superpixels(args, doc):
    box = cio.load_bbox(args.box)
    maps = [cio.load_volume(p) for p in args.boundary]
    if len(maps) != len(BOUNDARY_SCALES):
        raise InvalidArgument("give the side-2, side-3 and fused boundary maps")
    maps = [m if m.dims == box.shape else crop(m, box) for m in maps]
    l1, l2 = build_partitions(maps, box, args.smooth_radius, args.quantile)
    check_partition(l1)
    check_partition(l2)
    path = Path(args.out) / "superpixels.npz"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, level1=l1.labels, level2=l2.labels, lo=np.array(box.lo), hi=np.array(box.hi))
    _finish(args, [path], {"level1_regions": int(len(np.unique(l1.labels))),
                           "level2_regions": int(len(np.unique(l2.labels)))})


def cmd_segment(args, doc):
    out = Path(args.out)
    if args.variant == "meanmax":
        prob = cio.load_volume(args.prob)
        mask = (prob.data >= args.threshold).astype(np.uint8)
        if args.box is not None and args.dims is not None:
            box = cio.load_bbox(args.box)
            mask = full_mask(mask, box, args.dims)
        seg = Volume(mask, prob.spacing)
    else:
        if not all([args.ct, args.prob, args.box, args.superpixels, args.forest]):
            raise InvalidArgument("hnn-rf needs --ct, --prob, --boundary-fused, --box, --superpixels and --forest")
        ct = cio.load_volume(args.ct)
        box = cio.load_bbox(args.box)
        prob = cio.load_volume(args.prob)
        bnd = cio.load_volume(args.boundary_fused)
        prob = prob if prob.dims == box.shape else crop(prob, box)
        bnd = bnd if bnd.dims == box.shape else crop(bnd, box)
        with np.load(args.superpixels) as z:
            labels = z["level1"]
        flat = labels.ravel()
        order = np.argsort(flat, kind="stable")
        _, starts = np.unique(flat[order], return_index=True)
        vl = np.split(order, starts[1:])
        feats = proposal_features(vl, crop(ct, box), prob, bnd, box)
        seg = predict_segmentation(cio.load_forest(args.forest), vl, feats, args.threshold, box, ct.dims, ct.spacing)
    _finish(args, list(cio.store_volume(seg, out / "segmentation")))


def cmd_evaluate(args, doc):
    pred, gt = cio.load_volume(args.pred), cio.load_volume(args.gt)
    res = dict(overlap_metrics(pred.data, gt.data))
    res.update(surface_distances(pred.data, gt.data, gt.spacing))
    path = cio.write_json(res, Path(args.out) / "metrics.json")
    _finish(args, [path], res)


def cmd_crossval(args, doc):
    cfg = _pipeline_config(args, doc)
    if args.cases:
        cases = cio.load_corpus(args.cases)
    else:
        cases = generate_corpus(args.n, args.seed, _phantom_config(args, doc))
    result = crossval_run(cases, cfg, args.out)
    out = Path(args.out)
    files = [out / "report.csv", out / "summary.json"] + sorted(out.glob("fold*/*"))
    _finish(args, files)
    return 1 if result["summary"]["errors"] else 0


def cmd_baseline_locate(args, doc):
    train_cases = cio.load_corpus(args.cases)
    lcfg = LocalizerConfig.from_json({**doc.get("localizer", {}), "seed": args.seed})
    model = train_localizer(train_cases, lcfg)
    out = Path(args.out)
    files = [cio.store_forest(model.regressor, out / "localizer_regression.forest")]
    if model.classifier is not None:
        files.append(cio.store_forest(model.classifier, out / "localizer_accept.forest"))
    for vp in args.volumes:
        box, diag = predict_bbox(model, cio.load_volume(vp))
        files.append(cio.store_bbox(box, out / f"{Path(vp).stem}_bbox.json", {"diagnostics": diag}))
    _finish(args, files)


# ---- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1, help="torch intra-op threads")
    common.add_argument("--out", default="out")
    common.add_argument("--config", help="JSON document with phantom/net/pipeline/localizer sections")
    common.add_argument("--log-level", default="WARNING")

    p = argparse.ArgumentParser(prog="cascadeseg", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", parents=[common], help="generate a synthetic corpus")
    s.add_argument("--n", type=int, default=100)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("train-hnn", parents=[common], help="train one HNN")
    s.add_argument("--cases", required=True)
    s.add_argument("--view", default="axial")
    s.add_argument("--stage", type=int, choices=(1, 2), default=2)
    s.add_argument("--target", choices=("interior", "boundary"), default="interior")
    s.add_argument("--pad", type=int, default=5)
    s.add_argument("--slice-step", type=int, default=1)
    s.add_argument("--name")
    s.set_defaults(func=cmd_train_hnn)

    s = sub.add_parser("infer", parents=[common], help="per-view probability volume")
    s.add_argument("--model", required=True)
    s.add_argument("--volume", required=True)
    s.add_argument("--view", default="axial")
    s.add_argument("--box")
    s.add_argument("--output", default="fused", help="fused or side<m>")
    s.add_argument("--name", default="prob")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("fuse", parents=[common], help="pool view probability volumes")
    s.add_argument("--mode", default="meanmax")
    s.add_argument("--inputs", nargs="+", required=True)
    s.add_argument("--name", default="pooled")
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("localize", parents=[common], help="stage-1 candidate region")
    s.add_argument("--prob", required=True)
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--pad", type=int, default=5)
    s.add_argument("--erode-radius", type=int, default=1)
    s.set_defaults(func=cmd_localize)

    s = sub.add_parser("superpixels", parents=[common], help="two-level superpixel partitions")
    s.add_argument("--boundary", nargs=3, required=True, metavar=("SIDE2", "SIDE3", "FUSED"))
    s.add_argument("--box", required=True)
    s.add_argument("--smooth-radius", type=int, default=1)
    s.add_argument("--quantile", type=float, default=25.0)
    s.set_defaults(func=cmd_superpixels)

    s = sub.add_parser("segment", parents=[common], help="final mask (meanmax or hnn-rf)")
    s.add_argument("--variant", choices=("meanmax", "hnn-rf"), default="meanmax")
    s.add_argument("--prob", help="pooled HNN-I probability")
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--box")
    s.add_argument("--dims", type=int, nargs=3)
    s.add_argument("--ct")
    s.add_argument("--boundary-fused")
    s.add_argument("--superpixels")
    s.add_argument("--forest")
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("evaluate", parents=[common], help="overlap and surface metrics")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("crossval", parents=[common], help="k-fold cross-validation")
    s.add_argument("--cases", help="corpus directory; generated from --n/--seed when omitted")
    s.add_argument("--n", type=int, default=100)
    s.add_argument("--k", type=int)
    s.set_defaults(func=cmd_crossval)

    s = sub.add_parser("baseline-locate", parents=[common], help="regression-forest box baseline")
    s.add_argument("--cases", required=True, help="training corpus directory")
    s.add_argument("--volumes", nargs="+", required=True)
    s.set_defaults(func=cmd_baseline_locate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        if args.threads < 1:
            raise InvalidArgument("--threads must be >= 1")
        torch.set_num_threads(args.threads)
        doc = _load_config(args.config)
        status = args.func(args, doc)
        return int(status or 0)
    except SegError as e:
        print(json.dumps({"error": e.code, "message": str(e), "offset": getattr(e, "offset", None)}), file=sys.stderr)
        return 2
    except OSError as e:
        print(json.dumps({"error": "io-error", "message": str(e)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
