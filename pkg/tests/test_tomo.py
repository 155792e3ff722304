import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cdinet.tomo import (Geometry, back_project, embed_limited, forward_project, get_projector,
                         mlem_reconstruct, poisson_loglik)

GEOM = Geometry(n=16, pixel_size=1.0, n_angles=12, n_limited=5)


def disk(geom, radius, cx=0.0, cy=0.0):
    c = (np.arange(geom.n) + 0.5 - geom.n / 2) * geom.pixel_size
    x, y = np.meshgrid(c, c)
    return ((x - cx) ** 2 + (y - cy) ** 2 <= radius**2).astype(float)


# ------------------------------------------------------------------ geometry

def test_default_geometry_limited_block():
    g = Geometry()
    assert g.limited_indices.tolist() == list(range(10, 29))


def test_angles_increasing_in_half_turn():
    a = GEOM.angles
    assert np.all(np.diff(a) > 0) and a[0] == 0.0 and a[-1] < np.pi


@pytest.mark.parametrize("kw", [dict(n_limited=0), dict(n_limited=13), dict(n=0), dict(pixel_size=0.0)])
def test_invalid_geometry(kw):
    with pytest.raises(ValueError):
        Geometry(**{**GEOM.to_dict(), **kw})


def test_geometry_mismatch_errors():
    with pytest.raises(ValueError):
        forward_project(np.ones((8, 8)), GEOM)
    with pytest.raises(ValueError):
        back_project(np.ones((7, 16)), GEOM)
    with pytest.raises(ValueError):
        forward_project(np.ones((16, 16)), GEOM, mu=np.ones((8, 8)))
    with pytest.raises(ValueError):
        forward_project(np.ones((16, 16)), GEOM, angle_set="partial")


def test_embed_limited_places_rows():
    lim = np.arange(5 * 16, dtype=float).reshape(5, 16) + 1
    full = embed_limited(lim, GEOM)
    assert full.shape == (12, 16)
    np.testing.assert_array_equal(full[GEOM.limited_indices], lim)
    assert np.count_nonzero(np.delete(full, GEOM.limited_indices, axis=0)) == 0


# ---------------------------------------------------------------- projector

def test_zero_activity_gives_zero_sinogram(rng):
    mu = rng.uniform(0, 0.3, GEOM.image_shape)
    assert not np.any(forward_project(np.zeros(GEOM.image_shape), GEOM, mu))


def test_zero_sinogram_gives_zero_image(rng):
    assert not np.any(back_project(np.zeros((12, 16)), GEOM, rng.uniform(0, 0.3, (16, 16))))


def test_center_pixel_chord_lengths():
    g = Geometry(n=9, pixel_size=0.5, n_angles=16, n_limited=4)
    img = np.zeros((9, 9))
    img[4, 4] = 1.0
    sino = forward_project(img, g)
    for k, theta in enumerate(g.angles):
        expected = g.pixel_size / max(abs(np.cos(theta)), abs(np.sin(theta)))
        assert sino[k, 4] == pytest.approx(expected, rel=1e-12)
    assert np.count_nonzero(sino[0]) == 1


def test_uniform_disk_central_ray_matches_closed_form():
    g = Geometry(n=128, pixel_size=0.25, n_angles=4, n_limited=1)
    s = g.pixel_size / 2  # offset of detector bin n/2
    half = 40 * g.pixel_size  # chord half-length aligned with pixel edges
    radius = np.hypot(half, s)
    act = 2.0 * disk(g, radius)
    mu_val = 0.15
    mu = mu_val * disk(g, radius)
    sino = forward_project(act, g, mu)
    analytic = 2.0 * (1 - np.exp(-2 * mu_val * half)) / mu_val
    for k in (0, 2):  # 0 and 90 degrees
        assert sino[k, g.n // 2] == pytest.approx(analytic, rel=1e-2)


def test_attenuation_zero_equals_absent_bitwise(rng):
    x = rng.uniform(0, 1, GEOM.image_shape)
    a = forward_project(x, GEOM)
    b = forward_project(x, GEOM, np.zeros(GEOM.image_shape))
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("limited", [False, True])
@pytest.mark.parametrize("attenuated", [False, True])
def test_adjoint_identity(limited, attenuated, rng):
    proj = get_projector(GEOM, limited)
    for _ in range(20):
        mu = rng.uniform(0, 0.3, GEOM.image_shape) if attenuated else None
        x = rng.standard_normal(GEOM.image_shape)
        y = rng.standard_normal(proj.shape)
        fx = proj.forward(x, mu)
        err = abs(np.vdot(fx, y) - np.vdot(x, proj.back(y, mu)))
        assert err <= 1e-10 * np.linalg.norm(fx) * np.linalg.norm(y)


def test_back_projection_of_ones_positive_everywhere():
    for limited in (False, True):
        proj = get_projector(GEOM, limited)
        assert np.all(proj.back(np.ones(proj.shape)) > 0)


def test_batched_projection_matches_single(rng):
    x = rng.uniform(0, 1, (3, 2, 16, 16))
    out = forward_project(x, GEOM)
    assert out.shape == (3, 2, 12, 16)
    np.testing.assert_allclose(out[1, 0], forward_project(x[1, 0], GEOM), rtol=1e-14)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_more_attenuation_never_raises_counts(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, GEOM.image_shape)
    mu1 = rng.uniform(0, 0.2, GEOM.image_shape)
    mu2 = mu1 + rng.uniform(0, 0.2, GEOM.image_shape)
    assert np.all(forward_project(x, GEOM, mu2) <= forward_project(x, GEOM, mu1) + 1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 10.0))
def test_projection_is_linear_in_activity(seed, c):
    rng = np.random.default_rng(seed)
    x, z = rng.uniform(0, 1, (2, 16, 16))
    mu = rng.uniform(0, 0.3, (16, 16))
    np.testing.assert_allclose(forward_project(c * x + z, GEOM, mu),
                               c * forward_project(x, GEOM, mu) + forward_project(z, GEOM, mu),
                               rtol=1e-12, atol=1e-12)


# -------------------------------------------------------------------- ML-EM

def test_mlem_noiseless_fixed_point(rng):
    x0 = rng.uniform(0.5, 2.0, GEOM.image_shape)
    mu = rng.uniform(0, 0.2, GEOM.image_shape)
    y = forward_project(x0, GEOM, mu)
    x = mlem_reconstruct(y, GEOM, mu, iterations=10, init=x0)
    assert np.max(np.abs(x - x0)) <= 1e-12 * np.max(x0)


def test_mlem_zero_sinogram():
    x = mlem_reconstruct(np.zeros((12, 16)), GEOM, iterations=1)
    assert not np.any(x)


def test_mlem_loglik_monotone_on_noiseless_disk():
    y = forward_project(disk(GEOM, 6.0) * 3.0, GEOM)
    lls = []
    mlem_reconstruct(y, GEOM, None, 30, callback=lambda k, x, fp: lls.append(poisson_loglik(y, fp)))
    lls.append(poisson_loglik(y, forward_project(mlem_reconstruct(y, GEOM, None, 30), GEOM)))
    assert all(b >= a - 1e-9 * abs(a) for a, b in zip(lls, lls[1:]))


def test_mlem_count_consistency():
    y = forward_project(disk(GEOM, 6.0) + 0.1, GEOM)
    x = mlem_reconstruct(y, GEOM, None, 30)
    assert abs(forward_project(x, GEOM).sum() - y.sum()) <= 1e-3 * y.sum()


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1), st.booleans())
def test_mlem_preserves_nonnegativity_and_zeros(seed, limited):
    rng = np.random.default_rng(seed)
    rows = GEOM.n_limited if limited else GEOM.n_angles
    y = rng.poisson(5.0, (rows, GEOM.n)).astype(float)
    init = rng.uniform(0, 1, GEOM.image_shape)
    init[rng.uniform(size=init.shape) < 0.3] = 0.0
    x = mlem_reconstruct(y, GEOM, rng.uniform(0, 0.2, GEOM.image_shape), 5, init=init)
    assert np.all(x >= 0) and not np.any(x[init == 0])


def test_mlem_rejects_bad_input():
    with pytest.raises(ValueError):
        mlem_reconstruct(-np.ones((12, 16)), GEOM)
    with pytest.raises(ValueError):
        mlem_reconstruct(np.ones((12, 16)), GEOM, iterations=0)


def test_poisson_loglik_simple():
    assert poisson_loglik([1.0, 0.0], [1.0, 2.0]) == pytest.approx(-3.0)
    assert poisson_loglik([1.0], [0.0]) == -np.inf
