import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from molflae.geom import (
    DegenerateGeometryError,
    RigidTransform,
    apply,
    random_rotation,
    rmsd,
    rotation_angle_between,
    weighted_kabsch,
    weighted_sq_residual,
)

seeds = st.integers(0, 2**32 - 1)


def _transform(rng, scale=5.0):
    r = random_rotation(rng)
    return RigidTransform(r.rotation, rng.normal(scale=scale, size=3))


@given(seeds)
def test_random_rotation_is_proper(seed):
    r = random_rotation(np.random.default_rng(seed)).rotation
    np.testing.assert_allclose(r.T @ r, np.eye(3), atol=1e-9)
    assert abs(np.linalg.det(r) - 1.0) <= 1e-9


def test_random_rotation_reproducible():
    a = random_rotation(np.random.default_rng(5)).rotation
    b = random_rotation(np.random.default_rng(5)).rotation
    np.testing.assert_array_equal(a, b)


def test_random_rotation_haar_mean():
    rng = np.random.default_rng(0)
    mean = sum(random_rotation(rng).rotation for _ in range(100_000)) / 100_000
    assert np.abs(mean).max() < 0.01


def test_apply_examples():
    pts = np.random.default_rng(0).normal(size=(5, 3))
    np.testing.assert_array_equal(apply(RigidTransform.identity(), pts), pts)
    t = np.array([1.0, -2.0, 3.0])
    np.testing.assert_array_equal(apply(RigidTransform(np.eye(3), t), [[0, 0, 0]]), [t])


@given(seeds)
def test_apply_inverse(seed):
    rng = np.random.default_rng(seed)
    t = _transform(rng)
    p = rng.normal(size=(7, 3))
    np.testing.assert_allclose(apply(t.inverse(), apply(t, p)), p, atol=1e-9)
    u = _transform(rng)
    np.testing.assert_allclose(apply(t.compose(u), p), apply(t, apply(u, p)), atol=1e-9)


@given(seeds, st.integers(3, 20))
def test_kabsch_recovers_exact_fit(seed, n):
    rng = np.random.default_rng(seed)
    src = rng.normal(scale=2.0, size=(n, 3))
    t0 = _transform(rng)
    got = weighted_kabsch(src, apply(t0, src))
    np.testing.assert_allclose(got.rotation, t0.rotation, atol=1e-6)
    np.testing.assert_allclose(got.translation, t0.translation, atol=1e-6)


def test_kabsch_identity():
    src = np.random.default_rng(1).normal(size=(6, 3))
    t = weighted_kabsch(src, src)
    np.testing.assert_allclose(t.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(t.translation, 0, atol=1e-12)


def test_kabsch_beats_random_transforms():
    rng = np.random.default_rng(7)
    src = rng.normal(size=(8, 3))
    dst = apply(_transform(rng), src) + rng.normal(scale=0.3, size=(8, 3))
    w = rng.uniform(0, 2, size=8)
    best = weighted_sq_residual(weighted_kabsch(src, dst, w), src, dst, w)
    for _ in range(1000):
        assert best <= weighted_sq_residual(_transform(rng, scale=2.0), src, dst, w) + 1e-12
    # also no worse than the identity transform
    assert best <= weighted_sq_residual(RigidTransform.identity(), src, dst, w)


def test_kabsch_never_reflects():
    src = np.random.default_rng(2).normal(size=(6, 3))
    mirrored = src * np.array([1, 1, -1])
    r = weighted_kabsch(src, mirrored).rotation
    assert np.linalg.det(r) == pytest.approx(1.0)


@given(seeds)
def test_kabsch_residual_invariant_to_prerotation(seed):
    rng = np.random.default_rng(seed)
    src = rng.normal(size=(6, 3))
    dst = rng.normal(size=(6, 3))
    pre = _transform(rng)
    r1 = weighted_sq_residual(weighted_kabsch(src, dst), src, dst)
    src2 = apply(pre, src)
    r2 = weighted_sq_residual(weighted_kabsch(src2, dst), src2, dst)
    assert r1 == pytest.approx(r2, rel=1e-9, abs=1e-9)


def test_kabsch_degenerate():
    line = np.outer(np.arange(5.0), [1.0, 2.0, 0.5])
    with pytest.raises(DegenerateGeometryError):
        weighted_kabsch(line, line)
    pts = np.random.default_rng(0).normal(size=(4, 3))
    with pytest.raises(DegenerateGeometryError):
        weighted_kabsch(pts, pts, np.zeros(4))
    with pytest.raises(ValueError):
        weighted_kabsch(pts, pts[:3])


def test_rmsd_examples():
    a = np.random.default_rng(0).normal(size=(5, 3))
    assert rmsd(a, a) == 0.0
    assert rmsd([[0, 0, 0]], [[1, 0, 0]]) == 1.0
    with pytest.raises(ValueError):
        rmsd(a, a[:4])


@given(seeds)
def test_rmsd_isometry(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 6, 3))
    t = _transform(rng)
    assert rmsd(apply(t, a), apply(t, b)) == pytest.approx(rmsd(a, b), abs=1e-9)


def test_rotation_angle():
    t = np.radians(30)
    rz = np.array([[np.cos(t), -np.sin(t), 0], [np.sin(t), np.cos(t), 0], [0, 0, 1]])
    assert rotation_angle_between(np.eye(3), rz) == pytest.approx(30.0)
