"""Parallel-beam emission tomography: attenuated projector, adjoint, ML-EM.

Geometry conventions
--------------------
Pixel ``[i, j]`` is centred at ``x = (j + 1/2 - n/2) * d``,
``y = (i + 1/2 - n/2) * d`` where ``d`` is the pixel size in cm. Angle
``theta_k = k * pi / A`` for ``k = 0 .. A-1``. Detector bin ``b`` sits at
offset ``s_b = (b + 1/2 - n/2) * d`` along ``(cos theta, sin theta)`` and
collects photons travelling along ``(-sin theta, cos theta)``; "downstream"
of a point means further along that direction, i.e. closer to the detector.

Line lengths come from an exact Siddon trace of each ray through the pixel
grid. With attenuation, a pixel's weight on a ray is the exact integral of
the attenuated unit source over its chord, assuming piecewise-constant
images::

    w = exp(-D) * (1 - exp(-mu * l)) / mu        (= l when mu * l == 0)

where ``l`` is the chord length and ``D`` the attenuation line integral of
all pixels strictly downstream. The projector is stored as a sparse matrix,
so the back projector is its exact transpose.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict
from functools import lru_cache

import numpy as np
import scipy.sparse as sp


@dataclass(frozen=True)
class Geometry:
    """2-D parallel-beam acquisition over 180 degrees.

    ``n_limited`` central contiguous angles form the limited-angle subset.
    """

    n: int = 64
    pixel_size: float = 0.625
    n_angles: int = 40
    n_limited: int = 19

    def __post_init__(self):
        if self.n < 1 or self.pixel_size <= 0:
            raise ValueError("image grid must be non-empty with positive pixel size")
        if not 0 < self.n_limited <= self.n_angles:
            raise ValueError(f"need 0 < n_limited <= n_angles, got {self.n_limited}, {self.n_angles}")

    @property
    def n_bins(self):
        return self.n

    @property
    def angles(self):
        return np.arange(self.n_angles) * (np.pi / self.n_angles)

    @property
    def limited_start(self):
        return (self.n_angles - self.n_limited) // 2

    @property
    def limited_indices(self):
        return np.arange(self.limited_start, self.limited_start + self.n_limited)

    @property
    def image_shape(self):
        return (self.n, self.n)

    def sino_shape(self, limited=False):
        return (self.n_limited if limited else self.n_angles, self.n)

    def to_dict(self):
        return asdict(self)


def _trace_angle(theta, n, d):
    """Siddon trace of all ``n`` rays at one angle.

    Returns pixel indices and lengths, both ``[n, S]``, ordered along the
    direction of travel. Padding entries have zero length.
    """
    half = n * d / 2.0
    s = (np.arange(n) + 0.5) * d - half
    c, si = np.cos(theta), np.sin(theta)
    if abs(c) < 1e-12:
        c = 0.0
    if abs(si) < 1e-12:
        si = 0.0
    # ray: p(t) = s*(c, si) + t*(-si, c)
    x0, y0 = s * c, s * si
    edges = np.arange(n + 1) * d - half
    big = np.inf

    if si != 0.0:
        tx = (edges[None, :] - x0[:, None]) / (-si)
        tx_lo, tx_hi = np.minimum(tx[:, 0], tx[:, -1]), np.maximum(tx[:, 0], tx[:, -1])
    else:
        tx = np.full((n, n + 1), np.nan)
        inside = (x0 > -half) & (x0 < half)
        tx_lo = np.where(inside, -big, big)
        tx_hi = np.where(inside, big, -big)
    if c != 0.0:
        ty = (edges[None, :] - y0[:, None]) / c
        ty_lo, ty_hi = np.minimum(ty[:, 0], ty[:, -1]), np.maximum(ty[:, 0], ty[:, -1])
    else:
        ty = np.full((n, n + 1), np.nan)
        inside = (y0 > -half) & (y0 < half)
        ty_lo = np.where(inside, -big, big)
        ty_hi = np.where(inside, big, -big)

    t_in = np.maximum(tx_lo, ty_lo)
    t_out = np.minimum(tx_hi, ty_hi)
    hit = t_out > t_in
    t_in = np.where(hit, t_in, 0.0)
    t_out = np.where(hit, t_out, 0.0)

    ts = np.concatenate([tx, ty, t_in[:, None], t_out[:, None]], axis=1)
    ts = np.where(np.isnan(ts), t_in[:, None], ts)
    ts = np.clip(ts, t_in[:, None], t_out[:, None])
    ts.sort(axis=1)
    lengths = np.diff(ts, axis=1)
    tmid = 0.5 * (ts[:, 1:] + ts[:, :-1])
    xm = x0[:, None] - tmid * si
    ym = y0[:, None] + tmid * c
    col = np.floor((xm + half) / d).astype(np.int64)
    row = np.floor((ym + half) / d).astype(np.int64)
    valid = (lengths > 1e-9 * d) & (col >= 0) & (col < n) & (row >= 0) & (row < n) & hit[:, None]
    lengths = np.where(valid, lengths, 0.0)
    pix = np.where(valid, row * n + col, 0)
    return pix, lengths


class Projector:
    """Sparse attenuated parallel-beam projector for a fixed angle set."""

    def __init__(self, geom: Geometry, limited=False):
        self.geom = geom
        self.limited = limited
        n, d = geom.n, geom.pixel_size
        angle_ids = geom.limited_indices if limited else np.arange(geom.n_angles)
        traces = [_trace_angle(geom.angles[k], n, d) for k in angle_ids]
        self.pix = np.concatenate([t[0] for t in traces], axis=0)  # [R, S]
        self.lengths = np.concatenate([t[1] for t in traces], axis=0)
        self.n_rays = self.pix.shape[0]
        self.shape = (len(angle_ids), n)

        # fixed sparse structure; per-mu rebuilds only refill the data array
        valid = self.lengths > 0
        rows = np.broadcast_to(np.arange(self.n_rays)[:, None], self.pix.shape)[valid]
        cols = self.pix[valid]
        key = rows * (n * n) + cols
        uniq, inverse = np.unique(key, return_inverse=True)
        self._valid = valid
        self._inverse = inverse
        self._indices = (uniq % (n * n)).astype(np.int32)
        counts = np.bincount(uniq // (n * n), minlength=self.n_rays)
        self._indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int32)
        self._plain = self._assemble(self.lengths)

    def _assemble(self, weights):
        data = np.bincount(self._inverse, weights=weights[self._valid], minlength=len(self._indices))
        n = self.geom.n
        return sp.csr_matrix((data, self._indices, self._indptr), shape=(self.n_rays, n * n))

    def matrix(self, mu=None):
        """System matrix ``[rays, pixels]``; unattenuated when ``mu`` is None."""
        if mu is None:
            return self._plain
        mu = np.asarray(mu, dtype=np.float64)
        if mu.shape != self.geom.image_shape:
            raise ValueError(f"mu-map shape {mu.shape} does not match geometry {self.geom.image_shape}")
        ml = mu.reshape(-1)[self.pix] * self.lengths
        downstream = np.zeros_like(ml)
        downstream[:, :-1] = np.cumsum(ml[:, ::-1], axis=1)[:, ::-1][:, 1:]
        with np.errstate(invalid="ignore", divide="ignore"):
            self_term = np.where(ml > 0, -np.expm1(-ml) / np.where(ml > 0, ml, 1.0), 1.0)
        weights = self.lengths * np.exp(-downstream) * self_term
        return self._assemble(weights)

    def forward(self, image, mu=None, matrix=None):
        """Project ``[..., n, n]`` images to ``[..., A, n]`` sinograms."""
        a = self.matrix(mu) if matrix is None else matrix
        image = np.asarray(image, dtype=np.float64)
        n = self.geom.n
        if image.shape[-2:] != (n, n):
            raise ValueError(f"image shape {image.shape} does not match geometry n={n}")
        lead = image.shape[:-2]
        flat = image.reshape(-1, n * n)
        out = (a @ flat.T).T
        return np.ascontiguousarray(out).reshape(lead + self.shape)

    def back(self, sino, mu=None, matrix=None):
        """Exact adjoint of :meth:`forward`."""
        a = self.matrix(mu) if matrix is None else matrix
        sino = np.asarray(sino, dtype=np.float64)
        if sino.shape[-2:] != self.shape:
            raise ValueError(f"sinogram shape {sino.shape} does not match {self.shape}")
        lead = sino.shape[:-2]
        flat = sino.reshape(-1, self.n_rays)
        out = (a.T @ flat.T).T
        n = self.geom.n
        return np.ascontiguousarray(out).reshape(lead + (n, n))


@lru_cache(maxsize=16)
def get_projector(geom: Geometry, limited=False) -> Projector:
    return Projector(geom, limited)


def _angle_set_is_limited(angle_set):
    if angle_set not in ("full", "limited"):
        raise ValueError(f"angle_set must be 'full' or 'limited', got {angle_set!r}")
    return angle_set == "limited"


def _projector_for_sino(sino, geom):
    rows = np.shape(sino)[-2]
    if np.shape(sino)[-1] != geom.n_bins:
        raise ValueError(f"sinogram has {np.shape(sino)[-1]} bins, geometry has {geom.n_bins}")
    if rows == geom.n_angles:
        return get_projector(geom, False)
    if rows == geom.n_limited:
        return get_projector(geom, True)
    raise ValueError(f"sinogram has {rows} angle rows; geometry expects {geom.n_angles} or {geom.n_limited}")


def forward_project(activity, geom: Geometry, mu=None, angle_set="full"):
    """Attenuated (or plain, if ``mu`` is None) forward projection."""
    return get_projector(geom, _angle_set_is_limited(angle_set)).forward(activity, mu)


def back_project(sino, geom: Geometry, mu=None):
    """Adjoint of :func:`forward_project`; the angle set follows the row count."""
    return _projector_for_sino(sino, geom).back(sino, mu)


def embed_limited(sino_lim, geom: Geometry):
    """Place limited-angle rows on a zero full-angle canvas."""
    sino_lim = np.asarray(sino_lim, dtype=np.float64)
    if sino_lim.shape[-2:] != geom.sino_shape(limited=True):
        raise ValueError(f"expected limited sinogram {geom.sino_shape(True)}, got {sino_lim.shape[-2:]}")
    out = np.zeros(sino_lim.shape[:-2] + geom.sino_shape(), dtype=np.float64)
    out[..., geom.limited_indices, :] = sino_lim
    return out


def poisson_loglik(y, yhat):
    """Poisson log-likelihood up to the constant ``-log y!``."""
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    pos = y > 0
    if np.any(pos & (yhat <= 0)):
        return -np.inf
    return float(np.sum(y[pos] * np.log(yhat[pos])) - np.sum(yhat))


def mlem_reconstruct(sino, geom: Geometry, mu=None, iterations=30, init=None, callback=None):
    """ML-EM reconstruction ``x <- x * BP(y / FP(x)) / BP(1)``.

    The angle set is inferred from the sinogram's row count. Ratios with a
    zero expected count are set to 0, and pixels with zero sensitivity stay
    at 0. The default initial image is 1.0 on every sensitive pixel.
    ``callback(k, x, fp)`` is called after each iteration with the updated
    image and the projection of the image that produced the update.
    """
    y = np.asarray(sino, dtype=np.float64)
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if np.any(y < 0):
        raise ValueError("sinogram must be nonnegative")
    proj = _projector_for_sino(y, geom)
    a = proj.matrix(mu)
    sens = proj.back(np.ones(proj.shape), matrix=a)
    active = sens > 0
    if init is None:
        x = np.where(active, 1.0, 0.0)
    else:
        x = np.where(active, np.asarray(init, dtype=np.float64), 0.0)
        if x.shape != geom.image_shape or np.any(x < 0):
            raise ValueError("initial image must be a nonnegative n x n array")
    inv_sens = np.where(active, 1.0 / np.where(active, sens, 1.0), 0.0)
    for k in range(iterations):
        fp = proj.forward(x, matrix=a)
        ratio = np.divide(y, fp, out=np.zeros_like(y), where=fp > 0)
        x = x * proj.back(ratio, matrix=a) * inv_sens
        if callback is not None:
            callback(k, x, fp)
    return x
