import json

import numpy as np
import pytest

from cascadeseg import io as cio
from cascadeseg.cli import main
from cascadeseg.volume import Volume

from test_crossval import TINY, TINY_NET


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    assert main(["phantom", "--n", "3", "--seed", "7", "--out", str(out)]) == 0
    return out


def test_phantom_writes_cases_and_manifest(corpus_dir):
    assert sorted(p.name for p in (corpus_dir / "cases").iterdir()) == ["case000", "case001", "case002"]
    man = corpus_dir / "manifest.json"
    assert cio.verify_manifest(man) == []
    doc = json.loads(man.read_text())
    assert doc["n"] == 3 and doc["seed"] == 7 and len(doc["files"]) == 3 * 7


def test_stage_chain(tmp_path, capsys, corpus_dir):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"net": TINY_NET}))
    cases = corpus_dir / "cases"
    ct = cases / "case000" / "ct"
    gt = cases / "case000" / "gt_interior"
    code, out, _ = _run(capsys, "train-hnn", "--cases", cases, "--stage", "1", "--slice-step", 8,
                        "--config", cfg, "--out", tmp_path / "m")
    assert code == 0 and json.loads(out)["ok"]
    model = tmp_path / "m" / "stage1_interior_axial.hnn"
    for view in ("axial", "coronal", "sagittal"):
        assert _run(capsys, "infer", "--model", model, "--volume", ct, "--view", view, "--name", view,
                    "--out", tmp_path / "p")[0] == 0
    views = [tmp_path / "p" / f"{v}.json" for v in ("axial", "coronal", "sagittal")]
    assert _run(capsys, "fuse", "--inputs", *views, "--out", tmp_path / "f")[0] == 0
    pooled = cio.load_volume(tmp_path / "f" / "pooled")
    assert pooled.dims == (64, 64, 64)
    # a perfect stage-1 map makes the rest of the chain predictable
    cio.store_volume(Volume(cio.load_volume(gt).data.astype(np.float32)), tmp_path / "f" / "perfect")
    assert _run(capsys, "localize", "--prob", tmp_path / "f" / "perfect.json", "--out", tmp_path / "l")[0] == 0
    box = cio.load_bbox(tmp_path / "l" / "bbox.json")
    assert box.source == "hnn-candidate"
    code, _, _ = _run(capsys, "superpixels", "--boundary", *(views[:1] * 3), "--box", tmp_path / "l" / "bbox.json",
                      "--out", tmp_path / "s")
    assert code == 0
    with np.load(tmp_path / "s" / "superpixels.npz") as z:
        assert z["level1"].shape == box.shape and z["level1"].min() >= 1
    assert _run(capsys, "segment", "--prob", tmp_path / "f" / "perfect.json", "--out", tmp_path / "g")[0] == 0
    code, out, _ = _run(capsys, "evaluate", "--pred", tmp_path / "g" / "segmentation.json", "--gt", gt,
                        "--out", tmp_path / "e")
    assert code == 0
    metrics = json.loads((tmp_path / "e" / "metrics.json").read_text())
    assert metrics["dsc"] == 1.0 and metrics["hausdorff_mm"] == 0.0


def test_errors_are_json_with_exit_2(tmp_path, capsys):
    code, _, err = _run(capsys, "evaluate", "--pred", tmp_path / "missing", "--gt", tmp_path / "missing",
                        "--out", tmp_path)
    assert code == 2
    doc = json.loads(err)
    assert doc["error"] == "format-error" and "offset" in doc
    bad = tmp_path / "bad.json"
    bad.write_text("[1, 2]")
    code, _, err = _run(capsys, "phantom", "--n", 1, "--config", bad, "--out", tmp_path)
    assert code == 2 and json.loads(err)["error"] == "invalid-argument"
    code, _, err = _run(capsys, "phantom", "--n", 1, "--threads", 0, "--out", tmp_path)
    assert code == 2


def test_crossval_subcommand(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"pipeline": {**TINY, "k": 2, "baseline": False}}))
    code, _, _ = _run(capsys, "crossval", "--n", 4, "--seed", 3, "--config", cfg, "--out", tmp_path / "cv")
    summary = json.loads((tmp_path / "cv" / "summary.json").read_text())
    assert code == (1 if summary["errors"] else 0)
    rows = (tmp_path / "cv" / "report.csv").read_text().splitlines()
    assert len(rows) == 1 + 4 * 9
    assert cio.verify_manifest(tmp_path / "cv" / "manifest.json") == []
