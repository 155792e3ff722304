"""Image-quality metrics, paired t-tests, method evaluation and parameter sweeps.

Metric conventions
------------------
* NMSE = 100 * ||x - ref||_2^2 / ||ref||_2^2, NMAE = 100 * ||x - ref||_1 / ||ref||_1.
* SSIM follows Wang et al. (2004): 11x11 Gaussian window with sigma 1.5,
  K1 = 0.01, K2 = 0.03, dynamic range ``max(ref)``, reflective borders and a
  5-pixel border excluded from the mean; no sample-covariance correction.
* PSNR = 10 log10(max(ref)^2 / MSE); identical inputs give ``math.inf``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import stats
from scipy.ndimage import gaussian_filter

from .phantom import Dataset, DatasetConfig, build_dataset, canonical_hash
from .tomo import Geometry, embed_limited, mlem_reconstruct

METRICS = ("nmse", "nmae", "ssim", "psnr")
DOMAINS = ("projection", "mu_map", "ac_recon")
CONVENTIONS = {
    "nmse": "100*||x-ref||_2^2/||ref||_2^2",
    "nmae": "100*||x-ref||_1/||ref||_1",
    "ssim": "gaussian window 11x11 sigma=1.5, K1=0.01, K2=0.03, L=max(ref), reflect borders, 5px crop",
    "psnr": "10*log10(max(ref)^2/MSE); inf when MSE=0",
    "ac_reference": "ML-EM(P_F, mu, 30 iterations)",
    "baseline_projection": "zero-embedded P_L / dose_fraction",
    "baseline_ac": "ML-EM(P_L / dose_fraction, limited angles, true mu, 30 iterations)",
}


class DegenerateTestError(ValueError):
    pass


def _pair(x, ref):
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {ref.shape}")
    return x, ref


def nmse(x, ref):
    x, ref = _pair(x, ref)
    den = np.sum(ref**2)
    if den == 0:
        raise ValueError("reference is all zero")
    return 100.0 * float(np.sum((x - ref) ** 2) / den)


def nmae(x, ref):
    x, ref = _pair(x, ref)
    den = np.sum(np.abs(ref))
    if den == 0:
        raise ValueError("reference is all zero")
    return 100.0 * float(np.sum(np.abs(x - ref)) / den)


def psnr(x, ref):
    x, ref = _pair(x, ref)
    peak = float(np.max(ref))
    if peak <= 0:
        raise ValueError("reference maximum must be positive")
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak**2 / mse)


def ssim(x, ref, sigma=1.5, k1=0.01, k2=0.03):
    x, ref = _pair(x, ref)
    if x.ndim != 2:
        raise ValueError("ssim expects 2-D arrays")
    peak = float(np.max(ref))
    if peak <= 0:
        raise ValueError("reference maximum must be positive")
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    filt = lambda a: gaussian_filter(a, sigma, mode="reflect", truncate=3.5)
    mx, my = filt(x), filt(ref)
    vx = filt(x * x) - mx * mx
    vy = filt(ref * ref) - my * my
    cxy = filt(x * ref) - mx * my
    smap = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2))
    pad = 5
    return float(smap[pad:-pad, pad:-pad].mean())


def all_metrics(x, ref):
    return {"nmse": nmse(x, ref), "nmae": nmae(x, ref), "ssim": ssim(x, ref), "psnr": psnr(x, ref)}


# ------------------------------------------------------------- statistics

def paired_t_statistic(a, b):
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if d.ndim != 1 or len(d) < 2:
        raise ValueError("need two equal-length lists with at least 2 entries")
    sd = float(np.std(d, ddof=1))
    if sd == 0.0:
        raise DegenerateTestError("differences have zero variance")
    return float(np.mean(d)) / (sd / math.sqrt(len(d))), len(d) - 1


def paired_ttest(a, b):
    """Two-sided paired t-test p-value."""
    if len(a) != len(b):
        raise ValueError("paired samples must have equal length")
    paired_t_statistic(a, b)  # validates shapes and rejects zero-variance differences
    return float(stats.ttest_rel(a, b).pvalue)


# ------------------------------------------------------------- reports

@dataclass
class MetricReport:
    method: str
    rows: list = field(default_factory=list)  # {"id", "domain", metric...}

    def values(self, domain, metric):
        return [r[metric] for r in self.rows if r["domain"] == domain]

    def ids(self, domain):
        return [r["id"] for r in self.rows if r["domain"] == domain]

    def domains(self):
        return [d for d in DOMAINS if any(r["domain"] == d for r in self.rows)]

    def summary(self):
        out = {}
        for d in self.domains():
            out[d] = {}
            for m in METRICS:
                v = np.array(self.values(d, m), dtype=np.float64)
                out[d][m] = {"mean": float(np.mean(v)), "std": float(np.std(v, ddof=1)) if len(v) > 1 else 0.0}
        return out

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / f"report_{self.method}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "id", "domain", *METRICS])
            for r in self.rows:
                w.writerow([self.method, r["id"], r["domain"], *(repr(float(r[m])) for m in METRICS)])
        (out / f"report_{self.method}.json").write_text(json.dumps(
            {"method": self.method, "conventions": CONVENTIONS, "summary": self.summary(),
             "n": {d: len(self.ids(d)) for d in self.domains()}}, indent=2, sort_keys=True, default=str))


class ReferenceCache:
    """Ground-truth AC reconstructions ML-EM(P_F, mu), computed once per sample."""

    def __init__(self, geom: Geometry, iterations=30):
        self.geom, self.iterations, self._store = geom, iterations, {}

    def get(self, sample):
        if sample.id not in self._store:
            self._store[sample.id] = mlem_reconstruct(sample.P_F, self.geom, sample.mu, self.iterations)
        return self._store[sample.id]


def _load_split(dataset: Dataset, split):
    ids = dataset.ids(split)
    if not ids:
        raise ValueError(f"split {split!r} is empty")
    missing = [i for i in ids if not all((dataset.root / f["path"]).is_file()
                                         for e in dataset.manifest["samples"] if e["id"] == i
                                         for f in e["files"].values())]
    if missing:
        raise FileNotFoundError(f"missing samples: {', '.join(missing)}")
    return [dataset.load(i) for i in ids]


def evaluate_method(net_or_checkpoint, dataset: Dataset, split="test", method=None, references=None,
                    iterations=30):
    """Metric report for one trained network on a dataset split."""
    from .training import load_checkpoint, predict

    if isinstance(net_or_checkpoint, (str, Path)):
        net, _ = load_checkpoint(net_or_checkpoint)
    else:
        net = net_or_checkpoint
    geom = dataset.geometry
    if net.cfg.geometry != geom:
        raise ValueError("checkpoint geometry does not match the dataset geometry")
    samples = _load_split(dataset, split)
    refs = references or ReferenceCache(geom, iterations)
    projs, mus = predict(net, samples)
    report = MetricReport(method or net.cfg.variant)
    for s, p_hat, mu_hat in zip(samples, projs, mus):
        ac = mlem_reconstruct(p_hat, geom, mu_hat, iterations)
        report.rows.append({"id": s.id, "domain": "projection", **all_metrics(p_hat, s.P_F)})
        report.rows.append({"id": s.id, "domain": "mu_map", **all_metrics(mu_hat, s.mu)})
        report.rows.append({"id": s.id, "domain": "ac_recon", **all_metrics(ac, refs.get(s))})
    return report


def evaluate_baseline(dataset: Dataset, split="test", references=None, iterations=30):
    """The LD&LA baseline rows: dose-rescaled zero-embedded P_L and its AC ML-EM."""
    geom = dataset.geometry
    samples = _load_split(dataset, split)
    refs = references or ReferenceCache(geom, iterations)
    report = MetricReport("baseline_ld_la")
    for s in samples:
        p = s.P_L / s.dose_fraction
        report.rows.append({"id": s.id, "domain": "projection", **all_metrics(embed_limited(p, geom), s.P_F)})
        ac = mlem_reconstruct(p, geom, s.mu, iterations)
        report.rows.append({"id": s.id, "domain": "ac_recon", **all_metrics(ac, refs.get(s))})
    return report


def comparison_table(reports, reference="full"):
    """Rows shaped like the projection / mu-map / AC comparison tables.

    The p-value column is the paired t-test on per-sample NMSE against the
    ``reference`` method (empty for the reference itself, ``"degenerate"`` when
    the differences have zero variance, ``"insufficient"`` below two samples).
    """
    by_name = {r.method: r for r in reports}
    ref = by_name.get(reference)
    rows = []
    for domain in DOMAINS:
        for rep in reports:
            if domain not in rep.domains():
                continue
            summ = rep.summary()[domain]
            row = {"domain": domain, "method": rep.method}
            for m in METRICS:
                row[f"{m}_mean"] = summ[m]["mean"]
                row[f"{m}_std"] = summ[m]["std"]
            row["p_value"] = ""
            if ref is not None and rep is not ref and domain in ref.domains():
                if rep.ids(domain) != ref.ids(domain):
                    raise ValueError(f"{rep.method} and {reference} cover different samples")
                if len(rep.ids(domain)) < 2:
                    row["p_value"] = "insufficient"
                else:
                    try:
                        row["p_value"] = paired_ttest(rep.values(domain, "nmse"), ref.values(domain, "nmse"))
                    except DegenerateTestError:
                        row["p_value"] = "degenerate"
            rows.append(row)
    return rows


def write_table(rows, path):
    cols = ["domain", "method"] + [f"{m}_{s}" for m in METRICS for s in ("mean", "std")] + ["p_value"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})
    return Path(path)


# ---------------------------------------------------------- comparisons

def run_comparison(dataset: Dataset, train_config, variants, out_dir, reference="full", force=False):
    """Train each variant with the same budget, evaluate, and write ``table.csv``."""
    from .training import train

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    refs = ReferenceCache(dataset.geometry)
    reports = [evaluate_baseline(dataset, references=refs)]
    results = {}
    for v in variants:
        cfg = replace(train_config, variant=v)
        res = train(cfg, out / v, dataset, force=force)
        results[v] = res
        reports.append(evaluate_method(res.checkpoint, dataset, method=v, references=refs))
    for rep in reports:
        rep.write(out / "reports")
    rows = comparison_table(reports, reference)
    write_table(rows, out / "table.csv")
    return reports, rows, results


# --------------------------------------------------------------- sweeps

class BudgetError(RuntimeError):
    pass


@dataclass
class SweepConfig:
    count: int = 40
    base_seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    train: object = None
    methods: tuple = ("full",)
    max_total_epochs: int = 200


def sweep(dimension, values, base: SweepConfig, out_dir, force=False):
    """Train/evaluate once per value and write ``sweep_<dimension>.csv``.

    Rows are ``value, method, domain, metric, mean, std, n``; the LD&LA
    baseline is included as method ``baseline_ld_la``.
    """
    from .training import TrainConfig, train

    values = list(values)
    if not values:
        raise ValueError("sweep values must be non-empty")
    if dimension == "iterations":
        if any(int(v) != v or not 1 <= v <= 6 for v in values):
            raise ValueError("iteration values must be integers in 1..6")
    elif dimension == "dose":
        if any(not 0 < v <= 1 for v in values):
            raise ValueError("dose values must lie in (0, 1]")
    else:
        raise ValueError(f"unknown sweep dimension {dimension!r}")
    tcfg = base.train or TrainConfig()
    planned = len(values) * len(base.methods) * tcfg.epochs
    if planned > base.max_total_epochs and not force:
        raise BudgetError(f"sweep needs {planned} training epochs, over the budget of {base.max_total_epochs}")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    shared = None
    for value in values:
        if dimension == "dose":
            dcfg = replace(base.dataset, dose_fraction=float(value))
            ds_dir = out / f"data_dose_{value:g}"
        else:
            dcfg = base.dataset
            ds_dir = out / "data"
        if dimension == "dose" or shared is None:
            build_dataset(ds_dir, base.count, base.base_seed, dcfg, force=True)
            shared = Dataset(ds_dir)
        ds = shared
        refs = ReferenceCache(ds.geometry)
        reports = [evaluate_baseline(ds, references=refs)]
        for method in base.methods:
            cfg = replace(tcfg, variant=method)
            if dimension == "iterations":
                cfg = replace(cfg, iterations=int(value))
            res = train(cfg, out / f"{dimension}_{value:g}_{method}", ds, force=True)
            reports.append(evaluate_method(res.checkpoint, ds, method=method, references=refs))
        for rep in reports:
            for domain, ms in rep.summary().items():
                for metric, st in ms.items():
                    rows.append({"value": value, "method": rep.method, "domain": domain, "metric": metric,
                                 "mean": st["mean"], "std": st["std"], "n": len(rep.ids(domain))})
    path = out / f"sweep_{dimension}.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, ["value", "method", "domain", "metric", "mean", "std", "n"], lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})
    (out / f"sweep_{dimension}.json").write_text(json.dumps(
        {"dimension": dimension, "values": values, "methods": list(base.methods),
         "train": tcfg.to_dict(), "dataset": base.dataset.to_dict(), "count": base.count,
         "base_seed": base.base_seed, "hash": canonical_hash(rows)}, indent=2, sort_keys=True, default=str))
    return path, rows
