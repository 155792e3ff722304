"""Synthetic paired data: cardiac-like phantoms, count noise, angle limiting.

Random streams use numpy's Philox4x64-10 counter-based generator. The
128-bit Philox key for sample ``i`` of a dataset is
``((i + 1) << 64) | base_seed``; key ``base_seed`` alone (index slot 0)
drives the train/val/test shuffle. Streams are therefore independent per
sample and reproducible on any platform running the same numpy.
"""
from __future__ import annotations

import hashlib
import json
import shutil
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np

from .tensorio import write_tensor, read_tensor
from .tomo import Geometry, forward_project, mlem_reconstruct

MANIFEST_SCHEMA = "cdinet-dataset/1"
SAMPLE_TENSORS = ("P_L", "I_L", "P_F", "mu", "activity")


def philox(key):
    return np.random.Generator(np.random.Philox(key=int(key)))


def sample_key(base_seed, index):
    if not 0 <= base_seed < 2**64:
        raise ValueError("base_seed must fit in 64 bits")
    return ((index + 1) << 64) | base_seed


def canonical_hash(obj):
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True)
class PhantomParams:
    """Sampling ranges for one phantom. Lengths in cm, mu in cm^-1."""

    seed: int = 0
    body_axes: tuple = ((13.0, 17.0), (9.5, 12.5))
    body_shift: float = 1.0
    body_tilt: float = 0.15
    heart_center: tuple = ((1.0, 4.5), (-1.0, 3.0))
    heart_radius: tuple = (3.5, 5.0)
    heart_thickness: tuple = (1.0, 1.8)
    heart_intensity: tuple = (0.8, 1.2)
    defect_probability: float = 0.5
    defect_intensity: tuple = (0.25, 0.7)
    defect_span: tuple = (0.5, 1.4)
    lung_offset: tuple = (4.5, 7.0)
    lung_axes: tuple = ((3.0, 4.5), (5.0, 7.0))
    liver_activity: tuple = (0.2, 0.5)
    background_activity: tuple = (0.05, 0.15)
    mu_soft: float = 0.15
    mu_lung: float = 0.045
    mu_bone: float = 0.25
    total_counts: float = 5e5
    max_tries: int = 50

    def __post_init__(self):
        for name in ("mu_soft", "mu_lung", "mu_bone"):
            if not 0.0 <= getattr(self, name) <= 0.3:
                raise ValueError(f"{name} must lie in [0, 0.3] cm^-1")
        if self.total_counts <= 0:
            raise ValueError("total_counts must be positive")
        for name in ("heart_radius", "heart_thickness", "heart_intensity", "background_activity"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"empty range for {name}")


def _coords(geom):
    c = (np.arange(geom.n) + 0.5 - geom.n / 2) * geom.pixel_size
    y, x = np.meshgrid(c, c, indexing="ij")
    return x, y


def _ellipse(x, y, cx, cy, ax, ay, tilt=0.0):
    ct, st = np.cos(tilt), np.sin(tilt)
    u = (x - cx) * ct + (y - cy) * st
    v = -(x - cx) * st + (y - cy) * ct
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


def _draw_layout(p, rng):
    u = lambda r: rng.uniform(*r)
    return dict(
        body=(u((-p.body_shift, p.body_shift)), u((-p.body_shift, p.body_shift)),
              u(p.body_axes[0]), u(p.body_axes[1]), u((-p.body_tilt, p.body_tilt))),
        heart=(u(p.heart_center[0]), u(p.heart_center[1]), u(p.heart_radius), u(p.heart_thickness)),
        heart_intensity=u(p.heart_intensity),
        defect=(rng.uniform() < p.defect_probability, u((0, 2 * np.pi)), u(p.defect_span), u(p.defect_intensity)),
        lungs=(u(p.lung_offset), u(p.lung_axes[0]), u(p.lung_axes[1]), u((-1.0, 2.0))),
        liver=(u((-8.0, -5.0)), u((2.0, 5.0)), u((3.0, 4.5)), u((2.5, 3.5)), u(p.liver_activity)),
        spine=(u((-0.5, 0.5)), u((1.2, 1.8))),
        background=u(p.background_activity),
    )


def make_phantom(params: PhantomParams, geom: Geometry):
    """Return ``(activity, mu)`` images for ``params.seed``.

    Activity is scaled so that the attenuated full-angle projection sums to
    ``params.total_counts``.
    """
    rng = philox(params.seed)
    x, y = _coords(geom)
    fov = geom.n * geom.pixel_size / 2
    for _ in range(params.max_tries):
        lay = _draw_layout(params, rng)
        bx, by, bax, bay, tilt = lay["body"]
        body = _ellipse(x, y, bx, by, bax, bay, tilt)
        hx, hy, hr, ht = lay["heart"]
        hx, hy = bx + hx, by + hy
        # the heart's outer circle must sit inside the body and the FOV
        ang = np.linspace(0, 2 * np.pi, 64, endpoint=False)
        px, py = hx + hr * np.cos(ang), hy + hr * np.sin(ang)
        ct, st = np.cos(tilt), np.sin(tilt)
        pu = (px - bx) * ct + (py - by) * st
        pv = -(px - bx) * st + (py - by) * ct
        inside = np.all((pu / bax) ** 2 + (pv / bay) ** 2 <= 0.85)
        fits = bax < fov and bay < fov and np.hypot(abs(bx) + bax, abs(by) + bay) < fov * 1.15
        if inside and fits and hr - ht > 0.5:
            break
    else:
        raise ValueError(f"could not draw a valid phantom in {params.max_tries} tries")

    r = np.hypot(x - hx, y - hy)
    heart_disk = r <= hr
    myo = heart_disk & (r >= hr - ht)
    lo, lax, lay_, ly = lay["lungs"]
    lungs = (_ellipse(x, y, bx - lo, by + ly, lax, lay_) | _ellipse(x, y, bx + lo, by + ly, lax, lay_)) & body
    lungs &= ~heart_disk
    sx, sr = lay["spine"]
    spine = (np.hypot(x - (bx + sx), y - (by - bay + sr + 1.5)) <= sr) & body
    lvx, lvy, lvax, lvay, lv_act = lay["liver"]
    liver = _ellipse(x, y, bx + lvx, by + lvy, lvax, lvay) & body & ~lungs & ~heart_disk

    mu = np.zeros(geom.image_shape)
    mu[body] = params.mu_soft
    mu[lungs] = params.mu_lung
    mu[spine] = params.mu_bone

    bg = lay["background"]
    act = np.zeros(geom.image_shape)
    act[body] = bg
    act[lungs] = 0.3 * bg
    act[liver] = lv_act
    myo_level = np.full(geom.image_shape, lay["heart_intensity"])
    has_defect, d_ang, d_span, d_level = lay["defect"]
    if has_defect:
        phi = np.arctan2(y - hy, x - hx)
        dphi = np.angle(np.exp(1j * (phi - d_ang)))
        myo_level = np.where(np.abs(dphi) <= d_span / 2, myo_level * d_level, myo_level)
    act[myo] = myo_level[myo]

    ideal = forward_project(act, geom, mu)
    act *= params.total_counts / ideal.sum()
    return act, mu


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else philox(seed)


def simulate_counts(ideal, dose_fraction, seed):
    """Poisson counts at ``dose_fraction`` of the ideal mean sinogram."""
    ideal = np.asarray(ideal, dtype=np.float64)
    if not 0.0 < dose_fraction <= 1.0:
        raise ValueError("dose_fraction must lie in (0, 1]")
    if np.any(ideal < 0):
        raise ValueError("ideal sinogram has negative entries")
    return _rng(seed).poisson(dose_fraction * ideal).astype(np.float64)


def thin_counts(counts, dose_fraction, seed):
    """Binomial thinning: keep each recorded count with prob. ``dose_fraction``.

    Applied to Poisson counts this is distributed exactly as
    :func:`simulate_counts` at the same dose, and mimics decimating the
    events of the very acquisition used as the full-dose target.
    """
    if not 0.0 < dose_fraction <= 1.0:
        raise ValueError("dose_fraction must lie in (0, 1]")
    counts = np.asarray(counts)
    if np.any(counts < 0) or np.any(counts != np.round(counts)):
        raise ValueError("counts must be nonnegative integers")
    return _rng(seed).binomial(counts.astype(np.int64), dose_fraction).astype(np.float64)


def limit_angles(sino, geom: Geometry):
    """Select the central contiguous limited-angle rows of a full sinogram."""
    sino = np.asarray(sino)
    if sino.shape[-2] != geom.n_angles:
        if sino.shape[-2] == geom.n_limited:
            raise ValueError("sinogram is already limited-angle")
        raise ValueError(f"expected {geom.n_angles} angle rows, got {sino.shape[-2]}")
    return sino[..., geom.limited_indices, :].copy()


@dataclass
class Sample:
    P_L: np.ndarray
    I_L: np.ndarray
    P_F: np.ndarray
    mu: np.ndarray
    seed: int
    dose_fraction: float
    id: str = ""
    activity: np.ndarray | None = None

    def validate(self, geom: Geometry):
        if self.P_L.shape != geom.sino_shape(True) or self.P_F.shape != geom.sino_shape(False):
            raise ValueError(f"sample {self.id}: sinogram shapes do not match geometry")
        for name in ("I_L", "mu"):
            if getattr(self, name).shape != geom.image_shape:
                raise ValueError(f"sample {self.id}: {name} shape mismatch")
        for name in ("P_L", "I_L", "P_F", "mu"):
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)) or np.any(arr < 0):
                raise ValueError(f"sample {self.id}: {name} must be finite and nonnegative")
        if np.any(self.mu > 0.5):
            raise ValueError(f"sample {self.id}: mu exceeds 0.5 cm^-1")


@dataclass
class DatasetConfig:
    geometry: Geometry = field(default_factory=Geometry)
    phantom: PhantomParams = field(default_factory=PhantomParams)
    dose_fraction: float = 0.1
    mlem_iterations: int = 30
    split: tuple = (0.60, 0.15, 0.25)

    def to_dict(self):
        ph = asdict(self.phantom)
        ph.pop("seed")
        return {
            "geometry": self.geometry.to_dict(),
            "phantom": json.loads(json.dumps(ph)),
            "dose_fraction": self.dose_fraction,
            "mlem_iterations": self.mlem_iterations,
            "split": list(self.split),
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        geom = Geometry(**d.pop("geometry", {}))
        ph = d.pop("phantom", {})
        ph = {k: _tuplify(v) for k, v in ph.items()}
        split = tuple(d.pop("split", (0.60, 0.15, 0.25)))
        return cls(geometry=geom, phantom=PhantomParams(**ph), split=split, **d)

    def hash(self):
        return canonical_hash(self.to_dict())


def _tuplify(v):
    return tuple(_tuplify(x) for x in v) if isinstance(v, list) else v


def make_sample(index, base_seed, config: DatasetConfig):
    geom = config.geometry
    key = sample_key(base_seed, index)
    rng = philox(key)
    params = replace(config.phantom, seed=int(rng.integers(2**63)))
    activity, mu = make_phantom(params, geom)
    ideal = forward_project(activity, geom, mu)
    p_full = simulate_counts(ideal, 1.0, rng)
    # decimate first, then keep the limited rows
    p_low = limit_angles(thin_counts(p_full, config.dose_fraction, rng), geom)
    i_low = mlem_reconstruct(p_low, geom, None, config.mlem_iterations)
    return Sample(P_L=p_low, I_L=i_low, P_F=p_full, mu=mu, seed=key,
                  dose_fraction=config.dose_fraction, id=f"s{index:05d}", activity=activity)


def split_counts(count, fractions):
    f_train, f_val, f_test = fractions
    if min(fractions) < 0 or abs(f_train + f_val + f_test - 1.0) > 1e-9:
        raise ValueError("split fractions must be nonnegative and sum to 1")
    n_val = int(round(count * f_val))
    n_test = int(round(count * f_test))
    return count - n_val - n_test, n_val, n_test


def build_dataset(out_dir, count, base_seed, config: DatasetConfig | None = None, force=False):
    """Generate ``count`` samples and a manifest under ``out_dir``."""
    config = config or DatasetConfig()
    if count < 1:
        raise ValueError("count must be >= 1")
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise FileExistsError(f"{out} exists and is not empty (use force to overwrite)")
        shutil.rmtree(out)
    (out / "samples").mkdir(parents=True)

    n_train, n_val, n_test = split_counts(count, config.split)
    order = philox(base_seed).permutation(count)
    split_of = {}
    for rank, idx in enumerate(order):
        split_of[int(idx)] = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")

    entries = []
    for i in range(count):
        s = make_sample(i, base_seed, config)
        s.validate(config.geometry)
        files = {}
        for name in SAMPLE_TENSORS:
            rel = f"samples/{s.id}_{name}.cdit"
            write_tensor(out / rel, getattr(s, name))
            files[name] = {"path": rel, "sha256": hashlib.sha256((out / rel).read_bytes()).hexdigest()}
        entries.append({"id": s.id, "index": i, "seed": str(s.seed), "split": split_of[i],
                        "dose_fraction": s.dose_fraction, "files": files})

    manifest = {
        "schema": MANIFEST_SCHEMA,
        "base_seed": base_seed,
        "count": count,
        "config": config.to_dict(),
        "config_hash": config.hash(),
        "splits": {"train": n_train, "val": n_val, "test": n_test},
        "samples": entries,
    }
    manifest["manifest_hash"] = canonical_hash(manifest)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


class Dataset:
    """Read access to a directory written by :func:`build_dataset`."""

    def __init__(self, root):
        self.root = Path(root)
        path = self.root / "manifest.json"
        if not path.is_file():
            raise FileNotFoundError(f"no manifest.json in {self.root}")
        self.manifest = json.loads(path.read_text())
        if self.manifest.get("schema") != MANIFEST_SCHEMA:
            raise ValueError(f"unsupported dataset schema {self.manifest.get('schema')!r}")
        self.config = DatasetConfig.from_dict(self.manifest["config"])
        self.geometry = self.config.geometry

    @property
    def manifest_hash(self):
        return self.manifest["manifest_hash"]

    def ids(self, split=None):
        return [e["id"] for e in self.manifest["samples"] if split is None or e["split"] == split]

    def load(self, sample_id):
        entry = next((e for e in self.manifest["samples"] if e["id"] == sample_id), None)
        if entry is None:
            raise KeyError(sample_id)
        arrays = {}
        for name, meta in entry["files"].items():
            p = self.root / meta["path"]
            if not p.is_file():
                raise FileNotFoundError(f"missing tensor file {p}")
            arrays[name] = read_tensor(p)
        return Sample(seed=int(entry["seed"]), dose_fraction=entry["dose_fraction"], id=sample_id, **arrays)

    def split(self, name):
        return [self.load(i) for i in self.ids(name)]
