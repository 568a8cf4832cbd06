import csv

import numpy as np
import pytest

from hdrvqa import diffcore as dc
from hdrvqa.backbone import BackboneConfig, FeaturePyramid, extract, init_params
from hdrvqa.errors import ShapeError
from hdrvqa.features import (SimilarityConfig, channel_stats, export_csv, fr_feature, fr_features, fr_layout,
                             nr_feature, structure_similarity, texture_similarity)

from gradcheck import TOL, check


def random_pyramid(rng, channels=(3, 4, 5), size=8):
    stages = []
    for c in channels:
        stages.append(rng.normal(size=(c, size, size)))
        size //= 2
    return FeaturePyramid(stages)


def test_channel_stats_examples():
    s = channel_stats(np.full((1, 3, 3), 3.0))
    assert s.mean[0] == 3.0 and s.var[0] == 0.0
    s = channel_stats(np.array([[[0.0, 2.0]]]))
    assert s.mean[0] == 1.0 and s.var[0] == 1.0
    m = np.random.default_rng(0).normal(size=(2, 4, 5))
    a, b = channel_stats(m, m)
    np.testing.assert_allclose(a.cov, a.var, rtol=1e-15)
    with pytest.raises(ShapeError):
        channel_stats(m, m[:, :3])


def test_texture_similarity_examples():
    assert texture_similarity(np.array(5.0), np.array(5.0), 0.3) == 1.0
    assert texture_similarity(np.array(1.0), np.array(0.0), 1e-6) == pytest.approx(1e-6, rel=1e-5)
    assert texture_similarity(np.array(2.0), np.array(1.0), 0.1) == pytest.approx(4.1 / 5.1, abs=1e-15)


def test_structure_similarity_examples():
    m = np.random.default_rng(1).normal(size=(1, 6, 6))
    a, _ = channel_stats(m, m)
    assert structure_similarity(a.var, a.var, a.cov, 1e-6)[0] == 1.0
    assert structure_similarity(np.array(1.0), np.array(1.0), np.array(-1.0), 1e-6) == \
        pytest.approx(-1.0, abs=1e-5)
    assert structure_similarity(np.array(0.0), np.array(0.0), np.array(0.0), 1e-6) == 1.0


def test_fr_feature_identity_and_length():
    rng = np.random.default_rng(2)
    cfg = BackboneConfig()
    params = init_params(cfg, 0)
    pyr = extract(rng.uniform(size=(32, 32, 3)), params, cfg)
    vec = fr_feature(pyr, pyr)
    assert len(vec) == 480 and vec.kind == "FR"
    assert np.array_equal(vec.values, np.ones(480))
    assert vec.layout[:2] == [(0, "T", 0), (0, "T", 1)] and vec.layout[16] == (0, "S", 0)
    assert vec.layout[32] == (1, "T", 0)


def test_fr_feature_symmetric_and_bounded():
    rng = np.random.default_rng(3)
    cfg = SimilarityConfig()
    for _ in range(20):
        a, b = random_pyramid(rng), random_pyramid(rng)
        ab, ba = fr_feature(a, b, cfg).values, fr_feature(b, a, cfg).values
        assert ab.tobytes() == ba.tobytes()
        assert np.all(np.abs(ab) <= 1 + max(cfg.c1, cfg.c2))


def test_fr_feature_mismatch():
    rng = np.random.default_rng(4)
    with pytest.raises(ShapeError):
        fr_feature(random_pyramid(rng, (3, 4)), random_pyramid(rng, (3, 4, 5)))
    with pytest.raises(ShapeError):
        fr_feature(random_pyramid(rng, (3, 4)), random_pyramid(rng, (3, 5)))


def test_nr_feature_examples():
    pyr = FeaturePyramid([np.zeros((2, 4, 4)), np.full((3, 2, 2), 0.5)])
    np.testing.assert_array_equal(nr_feature(pyr).values, [0.5, 0.5, 0.5])
    pyr = FeaturePyramid([np.array([[[1.0, 2.0], [3.0, 4.0]]])])
    np.testing.assert_array_equal(nr_feature(pyr).values, [2.5])
    cfg = BackboneConfig()
    pyr = extract(np.full((16, 16, 3), 0.5), init_params(cfg), cfg)
    assert len(nr_feature(pyr)) == 128


def test_nr_feature_linear_in_scale():
    rng = np.random.default_rng(5)
    pyr = random_pyramid(rng)
    k = 3.0
    scaled = FeaturePyramid([k * m for m in pyr.stages])
    np.testing.assert_allclose(nr_feature(scaled).values, k * nr_feature(pyr).values, rtol=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_fr_features_gradient(seed):
    rng = np.random.default_rng(seed)
    cfg = SimilarityConfig(c1=1e-3, c2=1e-3)

    def fn(r0, d0, r1, d1):
        return fr_features([r0, r1], [d0, d1], cfg)

    inputs = {"r0": rng.uniform(-2, 2, size=(2, 3, 4, 4)), "d0": rng.uniform(-2, 2, size=(2, 3, 4, 4)),
              "r1": rng.uniform(-2, 2, size=(2, 2, 2, 2)), "d1": rng.uniform(-2, 2, size=(2, 2, 2, 2))}
    assert check(fn, inputs, seed) < TOL


def test_export_csv(tmp_path):
    rng = np.random.default_rng(6)
    vecs = [fr_feature(random_pyramid(rng, (2, 1)), random_pyramid(rng, (2, 1))) for _ in range(3)]
    path = tmp_path / "f.csv"
    export_csv(path, vecs)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["frame", "s0_T_c0", "s0_T_c1", "s0_S_c0", "s0_S_c1", "s1_T_c0", "s1_S_c0"]
    assert len(rows) == 4 and float(rows[2][3]) == vecs[1].values[2]
    assert fr_layout([2, 1]) == [(0, "T", 0), (0, "T", 1), (0, "S", 0), (0, "S", 1), (1, "T", 0), (1, "S", 0)]
