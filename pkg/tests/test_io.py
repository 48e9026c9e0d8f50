import json
import random

import numpy as np
import pytest
import torch

from cascadeseg import io as cio
from cascadeseg.errors import FormatError
from cascadeseg.forest import train_forest, train_regression_forest
from cascadeseg.hnn import NetConfig, init_params
from cascadeseg.phantom import generate_corpus
from cascadeseg.volume import BBox3, Volume


def _volumes():
    rng = np.random.default_rng(0)
    yield Volume(rng.integers(-1024, 3000, (7, 5, 3)).astype(np.int16), (0.7, 0.8, 2.5))
    yield Volume(rng.uniform(0, 1, (4, 6, 5)).astype(np.float32))
    yield Volume(rng.integers(0, 256, (3, 3, 9)).astype(np.uint8), (1.0, 1.0, 1.0))
    yield Volume(np.array([0.0, 1.0, np.float32(1e-45)], np.float32).reshape(3, 1, 1))


@pytest.mark.parametrize("vol", list(_volumes()))
def test_volume_round_trip_bit_exact(tmp_path, vol):
    h, r = cio.store_volume(vol, tmp_path / "v")
    back = cio.load_volume(tmp_path / "v")
    assert back.data.dtype == vol.data.dtype and back.spacing == vol.spacing
    assert back.data.tobytes() == vol.data.tobytes()
    assert r.stat().st_size == vol.data.size * vol.data.itemsize
    header = json.loads(h.read_text())
    assert header["order"] == "x-fastest" and header["endianness"] == "little"


def test_payload_is_x_fastest(tmp_path):
    a = np.arange(24, dtype=np.int16).reshape(2, 3, 4)
    cio.store_volume(Volume(a), tmp_path / "v")
    raw = np.frombuffer((tmp_path / "v.raw").read_bytes(), "<i2")
    assert list(raw[:3]) == [a[0, 0, 0], a[1, 0, 0], a[0, 1, 0]]


def test_truncated_payload_names_sizes(tmp_path):
    cio.store_volume(Volume(np.zeros((4, 4, 4), np.int16)), tmp_path / "v")
    raw = tmp_path / "v.raw"
    raw.write_bytes(raw.read_bytes()[:-3])
    with pytest.raises(FormatError) as e:
        cio.load_volume(tmp_path / "v")
    assert "128" in str(e.value) and "125" in str(e.value) and e.value.offset == 125


def test_bad_fields_and_nonfinite(tmp_path):
    def header(**kw):
        h = {"magic": "CSEG", "version": 1, "dims": [2, 1, 1], "spacing_mm": [1, 1, 1], "dtype": "f32",
             "order": "x-fastest", "endianness": "little"}
        h.update(kw)
        return json.dumps(h).encode()

    for kw, key in [({"magic": "XXXX"}, "magic"), ({"version": 2}, "version"), ({"dims": [2, 0, 1]}, "dims"),
                    ({"dtype": "f64"}, "dtype"), ({"endianness": "big"}, "endianness")]:
        with pytest.raises(FormatError) as e:
            cio.parse_header(header(**kw))
        assert key in str(e.value) and e.value.offset > 0
    # a hand-written header without a checksum is accepted when valid
    (tmp_path / "n.json").write_bytes(header())
    (tmp_path / "n.raw").write_bytes(np.array([0.5, np.nan], "<f4").tobytes())
    with pytest.raises(FormatError) as e:
        cio.load_volume(tmp_path / "n")
    assert e.value.offset == 4
    (tmp_path / "n.raw").write_bytes(np.array([0.5, 0.25], "<f4").tobytes())
    assert cio.load_volume(tmp_path / "n").data[1, 0, 0] == np.float32(0.25)


def _mutate(raw: bytes, rng: random.Random) -> bytes:
    b = bytearray(raw)
    kind = rng.randrange(5)
    i = rng.randrange(len(b))
    if kind == 0:
        b[i] = rng.choice([v for v in range(256) if v != b[i]])
    elif kind == 1:
        b.insert(i, rng.randrange(256))
    elif kind == 2:
        del b[i]
    elif kind == 3:
        b = b[:i]
    else:
        b[i] ^= 1 << rng.randrange(8)
    return bytes(b)


def test_header_fuzz_always_format_error(tmp_path):
    vol = Volume(np.random.default_rng(1).integers(0, 255, (5, 4, 3)).astype(np.uint8), (1.0, 0.5, 2.0))
    h, _ = cio.store_volume(vol, tmp_path / "v")
    original = h.read_bytes()
    rng = random.Random(1234)
    for _ in range(100):
        bad = _mutate(original, rng)
        assert bad != original
        h.write_bytes(bad)
        with pytest.raises(FormatError):
            cio.load_volume(tmp_path / "v")


def test_hnn_checkpoint_round_trip(tmp_path):
    cfg = NetConfig(channels=(2, 3, 3), depths=(1, 2, 1))
    p = init_params(cfg, seed=3)
    path = cio.store_hnn(p, tmp_path / "net.hnn")
    q = cio.load_hnn(path)
    assert q.config == cfg and list(q.tensors) == list(p.tensors)
    assert all(torch.equal(p.tensors[k], q.tensors[k]) for k in p.tensors)
    raw = path.read_bytes()
    path.write_bytes(raw[:-2])
    with pytest.raises(FormatError):
        cio.load_hnn(path)
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        cio.load_hnn(path)


def test_forest_container_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    X = rng.normal(size=(200, 39))
    clf = train_forest(X, (X[:, 0] > 0).astype(int), trees=5, seed=2)
    reg, _ = train_regression_forest(X, X[:, :9], trees=3, seed=2, max_depth=6)
    for m in (clf, reg):
        path = cio.store_forest(m, tmp_path / f"{m.mode}.forest")
        back = cio.load_forest(path)
        assert back.digest() == m.digest() and back.mode == m.mode
        assert np.array_equal(back.predict_raw(X), m.predict_raw(X))
    raw = cio.forest_bytes(clf)
    with pytest.raises(FormatError):
        cio.forest_from_bytes(raw[:-1])
    with pytest.raises(FormatError):
        cio.forest_from_bytes(raw + b"\0")


def test_case_box_manifest_and_overlay(tmp_path):
    case = generate_corpus(1, seed=2)[0]
    files = cio.store_case(case, tmp_path / case.id)
    back = cio.load_case(tmp_path / case.id)
    assert back.id == case.id and np.array_equal(back.ct.data, case.ct.data)
    assert np.array_equal(back.gt_boundary.data, case.gt_boundary.data)
    box = BBox3((1, 2, 3), (4, 5, 6), "candidate")
    files.append(cio.store_bbox(box, tmp_path / "box.json"))
    assert cio.load_bbox(tmp_path / "box.json") == box
    man = cio.write_manifest(tmp_path, files)
    assert cio.verify_manifest(man) == []
    (tmp_path / "box.json").write_text("{}")
    assert cio.verify_manifest(man) == ["box.json"]
    k = case.ct.dims[2] // 2
    ov = cio.write_overlay(tmp_path / "o.ppm", case.ct.data[:, :, k], case.gt_interior.data[:, :, k],
                           case.gt_interior.data[:, :, k])
    assert ov.read_bytes().startswith(b"P6\n64 64\n255\n")
    assert len(ov.read_bytes()) == len(b"P6\n64 64\n255\n") + 64 * 64 * 3
