"""Deep-supervised training of CDI-Net variants with Adam and per-domain LR decay."""
from __future__ import annotations

import csv
import json
import logging
import math
import shutil
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .networks import CDINet, CDINetConfig, build_variant
from .phantom import Dataset, canonical_hash, philox
from .tensorio import write_tensor, read_tensor
from .tomo import Geometry, embed_limited

log = logging.getLogger(__name__)

LOG_HEADER = ["epoch", "split", "loss", "loss_proj", "loss_mu", "lr_proj", "lr_img"]
CHECKPOINT_FORMAT = "cdinet-checkpoint/1"


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    dataset: str = ""
    variant: str = "full"
    iterations: int = 5
    epochs: int = 50
    batch_size: int = 4
    w_proj: float = 0.5
    w_mu: float = 0.5
    lr_proj: float = 1e-4
    lr_img: float = 1e-3
    lr_decay: float = 0.99
    seed: int = 0
    depth: int = 3
    base_width: int = 16
    awr_reduction: int = 2

    def __post_init__(self):
        if self.w_proj < 0 or self.w_mu < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.lr_proj <= 0 or self.lr_img <= 0:
            raise ValueError("learning rates must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    def net_config(self, geometry: Geometry):
        return CDINetConfig(iterations=self.iterations, variant=self.variant, depth=self.depth,
                            base_width=self.base_width, awr_reduction=self.awr_reduction,
                            geometry=geometry)

    def to_dict(self):
        return asdict(self)


# ------------------------------------------------------------------- loss

def total_loss(outputs, targets, w_proj=0.5, w_mu=0.5):
    """Deep-supervised L1 loss summed over iterations.

    ``outputs`` is ``(p_hats, mu_hats)``, ``targets`` is ``(P_F, mu)``. Each
    term is a mean absolute error. Returns ``(loss, proj_part, mu_part)``
    where the parts are floats of the weighted sub-sums.
    """
    p_hats, mu_hats = outputs
    p_f, mu = targets
    if len(p_hats) != len(mu_hats) or not p_hats:
        raise ValueError(f"need matching non-empty output lists, got {len(p_hats)} and {len(mu_hats)}")
    loss, lp, lm = None, 0.0, 0.0
    for p_hat, mu_hat in zip(p_hats, mu_hats):
        a = ad.l1_loss(p_hat, p_f) * w_proj
        b = ad.l1_loss(mu_hat, mu) * w_mu
        lp += a.item()
        lm += b.item()
        term = a + b
        loss = term if loss is None else loss + term
    return loss, lp, lm


# -------------------------------------------------------------- optimizer

@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(params, state: OptimizerState, lr):
    """One bias-corrected Adam update over ``{name: Tensor}`` using their ``.grad``.

    Parameters without a gradient are treated as having a zero gradient.
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise TrainingError(f"non-finite gradient for parameter {name}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        if m.shape != p.data.shape:
            raise ValueError(f"moment shape mismatch for {name}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def lr_at_epoch(lr0, decay, epoch):
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return lr0 * decay**epoch


# ------------------------------------------------------------ data prep

def network_inputs(samples, geom: Geometry):
    """Stack samples into normalised network inputs.

    ``P_L`` is divided by its mean measured count, so the input rows have
    mean 1; the NAC image is divided by its own mean. Projection targets and
    predictions use the unit ``mean(P_L) / dose_fraction`` (the expected
    full-dose mean count), which keeps every projection-domain channel of
    order one. Returns ``(p_l, i_l, unit)`` with ``p_l`` zero-embedded on the
    full-angle canvas.
    """
    mean_pl = np.array([max(float(np.mean(s.P_L)), 1e-12) for s in samples])
    unit = mean_pl / np.array([s.dose_fraction for s in samples])
    p_l = np.stack([embed_limited(s.P_L, geom) for s in samples]) / mean_pl[:, None, None]
    i_scale = np.array([max(float(np.mean(s.I_L)), 1e-12) for s in samples])
    i_l = np.stack([s.I_L for s in samples]) / i_scale[:, None, None]
    return p_l[:, None], i_l[:, None], unit


def network_targets(samples, unit):
    p_f = np.stack([s.P_F for s in samples]) / unit[:, None, None]
    mu = np.stack([s.mu for s in samples])
    return p_f[:, None], mu[:, None]


def predict(net: CDINet, samples, batch_size=8):
    """Final-iteration projections (counts) and mu-maps for each sample."""
    geom = net.cfg.geometry
    projs, mus = [], []
    with ad.no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i:i + batch_size]
            p_l, i_l, unit = network_inputs(chunk, geom)
            p_hats, mu_hats = net(ad.Tensor(p_l), ad.Tensor(i_l))
            projs.extend(p_hats[-1].data[:, 0] * unit[:, None, None])
            mus.extend(mu_hats[-1].data[:, 0])
    return projs, mus


def _batch_loss(net, batch, cfg: TrainConfig, geom):
    p_l, i_l, unit = network_inputs(batch, geom)
    p_f, mu = network_targets(batch, unit)
    outputs = net(ad.Tensor(p_l), ad.Tensor(i_l))
    return total_loss(outputs, (ad.Tensor(p_f), ad.Tensor(mu)), cfg.w_proj, cfg.w_mu)


def evaluate_loss(net, samples, cfg: TrainConfig, geom):
    """Sample-weighted mean loss over ``samples`` without building a graph."""
    tot = tp = tm = 0.0
    with ad.no_grad():
        for i in range(0, len(samples), cfg.batch_size):
            batch = samples[i:i + cfg.batch_size]
            loss, lp, lm = _batch_loss(net, batch, cfg, geom)
            tot += loss.item() * len(batch)
            tp += lp * len(batch)
            tm += lm * len(batch)
    n = len(samples)
    return tot / n, tp / n, tm / n


# ----------------------------------------------------------- checkpoints

def save_checkpoint(path, net: CDINet, states=None, meta=None, bits=64):
    path = Path(path)
    if path.exists():
        shutil.rmtree(path)
    (path / "params").mkdir(parents=True)
    params = []
    for name, p in net.named_parameters():
        rel = f"params/{name}.cdit"
        write_tensor(path / rel, p.data, bits)
        params.append({"name": name, "shape": list(p.shape), "file": rel})
    optim = {}
    for group, st in (states or {}).items():
        (path / "optim" / group).mkdir(parents=True, exist_ok=True)
        moments = []
        for name in sorted(st.m):
            write_tensor(path / "optim" / group / f"{name}.m.cdit", st.m[name], bits)
            write_tensor(path / "optim" / group / f"{name}.v.cdit", st.v[name], bits)
            moments.append(name)
        optim[group] = {"step": st.step, "beta1": st.beta1, "beta2": st.beta2, "eps": st.eps,
                        "moments": moments}
    net_cfg = net.cfg.to_dict()
    index = {"format": CHECKPOINT_FORMAT, "net_config": net_cfg, "config_hash": canonical_hash(net_cfg),
             "params": params, "optimizer": optim, "bits": bits, **(meta or {})}
    (path / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True))
    return path


def load_checkpoint(path):
    """Return ``(net, index)`` for a checkpoint directory."""
    path = Path(path)
    if not (path / "index.json").is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    index = json.loads((path / "index.json").read_text())
    if index.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {index.get('format')!r}")
    cfg = CDINetConfig.from_dict(index["net_config"])
    net = build_variant(cfg)
    named = dict(net.named_parameters())
    if set(named) != {e["name"] for e in index["params"]}:
        raise ValueError("checkpoint parameters do not match the network layout")
    for e in index["params"]:
        arr = read_tensor(path / e["file"])
        if list(arr.shape) != e["shape"] or arr.shape != named[e["name"]].shape:
            raise ValueError(f"shape mismatch for {e['name']}")
        named[e["name"]].data = arr
    return net, index


# ---------------------------------------------------------------- train

@dataclass
class TrainResult:
    checkpoint: Path
    log: Path
    best_epoch: int
    best_loss: float
    history: list


def train(config: TrainConfig, out_dir, dataset: Dataset | None = None, force=False):
    """Train one variant; writes ``metrics.csv`` and ``best.ckpt`` under ``out_dir``."""
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise FileExistsError(f"{out} exists and is not empty (use force to overwrite)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    ds = dataset or Dataset(config.dataset)
    geom = ds.geometry
    train_set = ds.split("train")
    if not train_set:
        raise TrainingError("training split is empty")
    val_set = ds.split("val")

    net = build_variant(config.net_config(geom), seed=config.seed)
    groups = {k: dict(v) for k, v in net.param_groups().items()}
    states = {"proj": OptimizerState(), "img": OptimizerState()}
    lr0 = {"proj": config.lr_proj, "img": config.lr_img}

    log_path = out / "metrics.csv"
    ckpt_path = out / "best.ckpt"
    history, best = [], (math.inf, -1)
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_HEADER)
        for epoch in range(config.epochs):
            lrs = {g: lr_at_epoch(lr0[g], config.lr_decay, epoch) for g in lr0}
            order = philox((epoch + 1) << 64 | config.seed).permutation(len(train_set))
            tot = tp = tm = 0.0
            for start in range(0, len(order), config.batch_size):
                batch = [train_set[i] for i in order[start:start + config.batch_size]]
                net.zero_grad()
                loss, lp, lm = _batch_loss(net, batch, config, geom)
                if not math.isfinite(loss.item()):
                    raise TrainingError(f"non-finite loss at epoch {epoch}, batch starting {start}")
                loss.backward()
                try:
                    for g, params in groups.items():
                        optimizer_step(params, states[g], lrs[g])
                except TrainingError as exc:
                    raise TrainingError(f"epoch {epoch}, batch starting {start}: {exc}") from exc
                tot += loss.item() * len(batch)
                tp += lp * len(batch)
                tm += lm * len(batch)
            n = len(train_set)
            rows = [(epoch, "train", tot / n, tp / n, tm / n)]
            if val_set:
                rows.append((epoch, "val", *evaluate_loss(net, val_set, config, geom)))
            for row in rows:
                rec = dict(zip(LOG_HEADER, (*row, lrs["proj"], lrs["img"])))
                history.append(rec)
                writer.writerow([rec[k] if isinstance(rec[k], (int, str)) else repr(float(rec[k]))
                                 for k in LOG_HEADER])
            fh.flush()
            score = rows[-1][2]
            log.info("epoch %d %s loss %.6g", epoch, rows[-1][1], score)
            if score < best[0]:
                best = (score, epoch)
                save_checkpoint(ckpt_path, net, states, {
                    "epoch": epoch, "selection_loss": score, "selection_split": rows[-1][1],
                    "train_config": config.to_dict(), "dataset_manifest_hash": ds.manifest_hash})
    return TrainResult(ckpt_path, log_path, best[1], best[0], history)
