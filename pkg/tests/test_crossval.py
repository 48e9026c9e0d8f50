import csv
import io

import numpy as np
import pytest

from cascadeseg.crossval import COLUMNS, VARIANTS, PipelineConfig, crossval_run, derive_seed, summarize_report
from cascadeseg.errors import InvalidArgument
from cascadeseg.phantom import generate_corpus

TINY_NET = {"channels": [2, 2, 2], "depths": [1, 1, 1], "epochs": 1, "batch_size": 8}
TINY = {
    "k": 4,
    "stage1": TINY_NET,
    "stage1_slice_step": 8,
    "stage2": TINY_NET,
    "boundary": TINY_NET,
    "rf_trees": 5,
    "localizer": {"samples_per_case": 40, "trees": 3, "accept_trees": 3, "max_depth": 6},
}


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    cases = generate_corpus(8, seed=21)
    cfg = PipelineConfig.from_json(TINY)
    a = tmp_path_factory.mktemp("a")
    b = tmp_path_factory.mktemp("b")
    return cases, cfg, crossval_run(cases, cfg, a), a, b


def test_config_round_trip_and_validation():
    cfg = PipelineConfig.from_json(TINY)
    assert PipelineConfig.from_json(cfg.to_json()) == cfg
    assert cfg.stage1.channels == (2, 2, 2) and cfg.stage1.learning_rate == PipelineConfig().stage1.learning_rate
    with pytest.raises(InvalidArgument):
        PipelineConfig.from_json({"bogus": 1})
    with pytest.raises(InvalidArgument):
        PipelineConfig(k=1)
    with pytest.raises(InvalidArgument):
        crossval_run(generate_corpus(2, seed=0), cfg)


def test_derive_seed_stable():
    assert derive_seed(0, 1, 1, 0) == derive_seed(0, 1, 1, 0)
    assert derive_seed(0, 1, 1, 0) != derive_seed(0, 1, 1, 1)
    assert 0 <= derive_seed(5, 3) < 2**31 - 1


def test_every_case_once_per_variant(toy):
    cases, _, result, out, _ = toy
    rows = list(csv.DictReader(io.StringIO((out / "report.csv").read_text())))
    assert tuple(rows[0]) == COLUMNS
    for v in VARIANTS:
        ids = [r["case_id"] for r in rows if r["variant"] == v]
        assert sorted(ids) == sorted(c.id for c in cases)
    folds = [set(f["test"]) for f in result["summary"]["folds"]]
    assert len(folds) == 4 and set().union(*folds) == {c.id for c in cases}
    assert sum(len(f) for f in folds) == len(cases)
    for r in result["rows"]:
        if np.isfinite(r["hausdorff_mm"]):
            assert r["hausdorff_mm"] >= r["avgdist_mm"] >= 0
        if np.isfinite(r["jaccard"]):
            assert abs(r["dsc"] - 2 * r["jaccard"] / (1 + r["jaccard"])) <= 1e-12
    assert (out / "summary.json").exists() and (out / "fold0" / "superpixel_rf.forest").exists()


def test_rerun_is_byte_identical(toy):
    cases, cfg, _, a, b = toy
    crossval_run(cases, cfg, b)
    assert (a / "report.csv").read_bytes() == (b / "report.csv").read_bytes()
    assert (a / "summary.json").read_bytes() == (b / "summary.json").read_bytes()


def test_summary_oracle_violations_and_localization():
    rows = []
    for cid, o, h in (("c0", 0.9, 0.8), ("c1", 0.7, 0.75)):
        for v, d in (("oracle", o), ("hnn-rf", h), ("meanmax", h - 0.01)):
            rows.append({"case_id": cid, "variant": v, "dsc": d, "jaccard": d / (2 - d), "hausdorff_mm": 1.0,
                         "avgdist_mm": 0.5, "recall": float("nan"), "volume_reduction": float("nan")})
        rows.append({"case_id": cid, "variant": "candidate", "dsc": float("nan"), "jaccard": float("nan"),
                     "hausdorff_mm": float("nan"), "avgdist_mm": float("nan"), "recall": 1.0 if cid == "c0" else 0.5,
                     "volume_reduction": 0.8})
    s = summarize_report(rows, ("candidate", "meanmax", "hnn-rf", "oracle"))
    assert [v["case_id"] for v in s["oracle_violations"]] == ["c1"]
    loc = s["localization"]["candidate"]
    assert loc["full_recall_fraction"] == 0.5 and loc["below_95"] == 1 and loc["below_60"] == 1
