import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dualanchor.features import (PAPER_FEATURES, FeatureConfig, category_table, extract, read_dafm,
                                 write_dafm)
from dualanchor.worldsim import MAX_RANGE, NUM_RAYS, Observation

TABLE = category_table(16, 16)


def blank():
    return Observation(np.full(NUM_RAYS, MAX_RANGE), np.full(NUM_RAYS, -1))


def test_empty_observation_gives_zero_map():
    assert not extract(blank(), TABLE).any()


def test_single_landmark_splat():
    obs = blank()
    obs.depth[12] = 2.5
    obs.category[12] = 4
    m = extract(obs, TABLE)
    nz = np.argwhere(np.abs(m).sum(axis=0) > 0)
    # row floor(2.5 / 5 * 8) = 4, column floor(12 / 24 * 8) = 4
    assert nz.tolist() == [[4, 4]]
    np.testing.assert_allclose(m[:, 4, 4], TABLE[4] * 0.5, rtol=1e-6)


def test_table_properties():
    assert TABLE.shape == (16, 16)
    np.testing.assert_allclose(np.linalg.norm(TABLE, axis=1), 1.0, rtol=1e-6)
    d = np.linalg.norm(TABLE[:, None] - TABLE[None], axis=-1) + np.eye(16) * 10
    assert d.min() > 0.1
    assert np.array_equal(category_table(16, 16), TABLE)


def test_paper_scale_accepted():
    obs = blank()
    obs.depth[0], obs.category[0] = 1.0, 2
    m = extract(obs, category_table(16, 256), PAPER_FEATURES)
    assert m.shape == (256, 64, 64) and np.isfinite(m).all()


def test_dafm_roundtrip(tmp_path):
    m = np.random.default_rng(0).standard_normal((16, 8, 8)).astype(np.float32)
    write_dafm(tmp_path / "a.dafm", m)
    raw = (tmp_path / "a.dafm").read_bytes()
    assert raw[:4] == b"DAFM" and len(raw) == 16 + m.size * 4
    assert np.array_equal(read_dafm(tmp_path / "a.dafm"), m)
    (tmp_path / "b.dafm").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError):
        read_dafm(tmp_path / "b.dafm")


rays = st.lists(st.tuples(st.floats(0.05, MAX_RANGE), st.integers(-1, 15)), min_size=NUM_RAYS, max_size=NUM_RAYS)


@settings(max_examples=200, deadline=None)
@given(rays)
def test_norm_zero_iff_no_landmarks(r):
    obs = Observation(np.array([d for d, _ in r]), np.array([c for _, c in r]))
    m = extract(obs, TABLE)
    assert np.isfinite(m).all()
    assert (np.linalg.norm(m) == 0) == (not obs.categories() or all(d >= MAX_RANGE for d, c in r if c >= 0))


@settings(max_examples=200, deadline=None)
@given(rays, st.integers(0, NUM_RAYS - 1), st.integers(0, 15))
def test_single_ray_category_change_is_visible(r, i, new):
    depth = np.array([min(d, MAX_RANGE * 0.99) for d, _ in r])
    cat = np.array([c for _, c in r])
    if cat[i] == new:
        return
    a = extract(Observation(depth, cat), TABLE)
    cat2 = cat.copy()
    cat2[i] = new
    b = extract(Observation(depth, cat2), TABLE)
    assert not np.array_equal(a, b)
