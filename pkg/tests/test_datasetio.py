import numpy as np
import pytest

from hdrvqa.datasetio import (DatasetManifest, Record, generate_synthetic, load_manifest, save_manifest,
                              split_by_reference)
from hdrvqa.errors import DataError, ParseError
from hdrvqa.videoio import decode

FIXTURE = """dataset_id,video,reference,mos,split
demo,d/a1.y4m,r/a.y4m,4.5,train
demo,d/a2.y4m,r/a.y4m,2.0,train
demo,d/b1.y4m,r/b.y4m,3.25,val
demo,d/b2.y4m,r/b.y4m,1.5,val
"""


def write(tmp_path, text, name="m.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_load_fixture(tmp_path):
    m = load_manifest(write(tmp_path, FIXTURE))
    assert m.dataset_id == "demo" and len(m) == 4
    assert len(m.split("train")) == 2 and len(m.split("val")) == 2
    assert m.is_fr and m.records[2] == Record("d/b1.y4m", "r/b.y4m", 3.25, "val")
    assert m.resolve("d/a1.y4m") == str(tmp_path / "d" / "a1.y4m")


def test_nr_rows(tmp_path):
    m = load_manifest(write(tmp_path, "dataset_id,video,reference,mos,split\nx,v1.y4m,,3,train\nx,v2.y4m,,4,val\n"))
    assert not m.is_fr and m.records[0].reference is None
    with pytest.raises(DataError):
        m.require_fr()


@pytest.mark.parametrize("row, pattern", [
    ("demo,d/c.y4m,r/c.y4m,abc,train", "row 6.*'abc'"),
    ("demo,d/c.y4m,r/c.y4m,3,test", "row 6.*split"),
    ("demo,d/a1.y4m,r/a.y4m,3,train", "row 6.*duplicate"),
    ("demo,d/c.y4m,r/c.y4m,nan,train", "row 6.*finite"),
    ("demo,d/c.y4m,3,train", "row 6.*columns"),
])
def test_load_errors(tmp_path, row, pattern):
    with pytest.raises(ParseError, match=pattern):
        load_manifest(write(tmp_path, FIXTURE + row + "\n"))


def test_fr_manifest_with_missing_reference(tmp_path):
    with pytest.raises(DataError, match="lack a reference"):
        load_manifest(write(tmp_path, FIXTURE + "demo,d/c.y4m,,3,train\n"))


def test_mixed_ids_and_bad_header(tmp_path):
    with pytest.raises(DataError, match="mixes"):
        load_manifest(write(tmp_path, FIXTURE + "other,d/c.y4m,r/c.y4m,3,train\n"))
    with pytest.raises(ParseError, match="header"):
        load_manifest(write(tmp_path, "video,mos\na,1\n"))


def test_save_load_round_trip(tmp_path):
    m = load_manifest(write(tmp_path, FIXTURE))
    m.records.append(Record("d/z.y4m", "r/z.y4m", 0.1 + 0.2, "train"))
    save_manifest(tmp_path / "out.csv", m)
    back = load_manifest(tmp_path / "out.csv")
    assert back.records == m.records and back.dataset_id == m.dataset_id


def refs_records(n_refs, per_ref):
    return [Record(f"d/{r}_{k}.y4m", f"r/{r}.y4m", float(k), "train") for r in range(n_refs) for k in range(per_ref)]


def test_split_20_refs_18_clips():
    out = split_by_reference(refs_records(20, 18), 0.8, seed=3)
    train = [r for r in out if r.split == "train"]
    val = [r for r in out if r.split == "val"]
    assert len(train) == 288 and len(val) == 72
    assert len({r.reference for r in train}) == 16 and len({r.reference for r in val}) == 4
    assert not {r.reference for r in train} & {r.reference for r in val}
    assert out == split_by_reference(refs_records(20, 18), 0.8, seed=3)
    assert out != split_by_reference(refs_records(20, 18), 0.8, seed=4)


def test_split_edge_cases():
    assert all(r.split == "train" for r in split_by_reference(refs_records(5, 2), 1.0))
    assert sum(r.split == "val" for r in split_by_reference(refs_records(2, 3), 0.99)) == 3
    with pytest.raises(DataError, match="2 distinct"):
        split_by_reference(refs_records(1, 3), 0.8)
    with pytest.raises(DataError):
        split_by_reference([Record("a.y4m", None, 1.0)], 0.8)


def test_generate_synthetic(tmp_path):
    m = generate_synthetic(tmp_path / "s", n_refs=5, levels=4, seed=0, width=32, height=32, n_frames=4, fps=2)
    assert len(m) == 40 and m.is_fr
    assert len(m.split("train")) == 32 and len(m.split("val")) == 8
    for r in m.records:
        if r.video.endswith(("blur0.y4m", "noise0.y4m")):
            assert (tmp_path / "s" / r.video).read_bytes() == (tmp_path / "s" / r.reference).read_bytes()
            assert r.mos == pytest.approx(5.0, abs=0.1)
    by_ref = {}
    for r in m.records:
        by_ref.setdefault((r.reference, r.video.rsplit("_", 1)[1][:-5]), []).append(r.mos)
    for mos in by_ref.values():
        assert all(a > b for a, b in zip(mos, mos[1:]))
    seq = decode(str(tmp_path / "s" / m.records[0].video))
    assert (seq.width, seq.height, seq.frame_count) == (32, 32, 4)
    reloaded = load_manifest(tmp_path / "s" / "manifest.csv")
    assert reloaded.records == m.records


def test_generate_synthetic_deterministic(tmp_path):
    a = generate_synthetic(tmp_path / "a", n_refs=2, levels=2, seed=7, width=16, height=16, n_frames=2, fps=2)
    b = generate_synthetic(tmp_path / "b", n_refs=2, levels=2, seed=7, width=16, height=16, n_frames=2, fps=2)
    assert a.records == b.records
    for r in a.records:
        assert (tmp_path / "a" / r.video).read_bytes() == (tmp_path / "b" / r.video).read_bytes()


def test_generate_synthetic_10bit(tmp_path):
    m = generate_synthetic(tmp_path / "h", n_refs=2, levels=2, seed=0, width=16, height=16, n_frames=2, fps=2,
                           bit_depth=10)
    seq = decode(str(tmp_path / "h" / m.records[0].video))
    assert seq.bit_depth == 10 and max(int(p.max()) for p in seq.frames[0]) > 255
