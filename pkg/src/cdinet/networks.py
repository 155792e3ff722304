"""U-Net backbone, adaptive weight recalibrator and the cross-domain iterative network."""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Module, Conv2d, Linear, ShapeError
from .tomo import Geometry, get_projector

VARIANTS = ("full", "no_ci_dc", "no_cd_rc", "no_awr", "separate_unet")


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 1
    out_channels: int = 1
    depth: int = 3
    base_width: int = 16
    output_scale: float = 1.0
    head_bias: float = 0.0

    def __post_init__(self):
        if self.output_scale <= 0:
            raise ValueError("output_scale must be positive")
        if self.depth < 1 or self.base_width < 1 or self.in_channels < 1 or self.out_channels < 1:
            raise ValueError(f"invalid U-Net config {self}")

    def check_input(self, h, w):
        f = 2 ** (self.depth - 1)
        if h % f or w % f:
            raise ShapeError("unet", f"spatial dims must be divisible by {f}", [(h, w)])




class UNet(Module):
    """Encoder-decoder with skip concatenations and a ReLU output head.

    Each level has two 3x3 conv + ReLU layers; widths double per level.
    Decoding upsamples (nearest) then applies a 3x3 conv before the skip
    concatenation. The head is a 1x1 conv followed by ReLU.
    """

    def __init__(self, cfg: UNetConfig, rng):
        self.cfg = cfg
        widths = [cfg.base_width * 2**lvl for lvl in range(cfg.depth)]
        self.enc = []
        c_in = cfg.in_channels
        for w in widths:
            self.enc.append([Conv2d(c_in, w, 3, rng), Conv2d(w, w, 3, rng)])
            c_in = w
        self.dec = []
        for lvl in range(cfg.depth - 2, -1, -1):
            w = widths[lvl]
            self.dec.append([Conv2d(widths[lvl + 1], w, 3, rng), Conv2d(2 * w, w, 3, rng), Conv2d(w, w, 3, rng)])
        self.head = Conv2d(widths[0], cfg.out_channels, 1, rng)
        self.head.bias.data[:] = cfg.head_bias

    def __call__(self, x):
        if x.data.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ShapeError("unet", f"expected [B, {self.cfg.in_channels}, H, W]", [x.shape])
        self.cfg.check_input(*x.shape[2:])
        skips = []
        for i, (c1, c2) in enumerate(self.enc):
            if i:
                x = ad.avg_pool2(x)
            x = ad.relu(c2(ad.relu(c1(x))))
            skips.append(x)
        for (up, c1, c2), skip in zip(self.dec, reversed(skips[:-1])):
            x = ad.relu(up(ad.upsample2(x)))
            x = ad.concat([skip, x], axis=1)
            x = ad.relu(c2(ad.relu(c1(x))))
        out = ad.relu(self.head(x))
        return out if self.cfg.output_scale == 1.0 else ad.scale(out, self.cfg.output_scale)


def unet_parameter_count(cfg: UNetConfig):
    """Closed-form parameter count of :class:`UNet`."""
    conv = lambda i, o, k=3: i * o * k * k + o
    widths = [cfg.base_width * 2**lvl for lvl in range(cfg.depth)]
    total, c_in = 0, cfg.in_channels
    for w in widths:
        total += conv(c_in, w) + conv(w, w)
        c_in = w
    for lvl in range(cfg.depth - 1):
        w = widths[lvl]
        total += conv(widths[lvl + 1], w) + conv(2 * w, w) + conv(w, w)
    return total + conv(widths[0], cfg.out_channels, 1)


def unet_forward(cfg: UNetConfig, x, rng=None, net=None):
    """Run a U-Net on a single ``[C, H, W]`` or batched ``[B, C, H, W]`` input."""
    net = net or UNet(cfg, rng if rng is not None else np.random.default_rng(0))
    x = ad.as_tensor(x)
    if x.data.ndim == 3:
        return ad.Tensor(net(ad.Tensor(x.data[None])).data[0])
    return net(x)


@dataclass(frozen=True)
class AWRConfig:
    channels: int
    reduction: int = 2

    def __post_init__(self):
        if self.channels < 1 or not 1 <= self.reduction <= self.channels:
            raise ValueError(f"need channels >= 1 and 1 <= reduction <= channels, got {self}")

    @property
    def hidden(self):
        return max(1, self.channels // self.reduction)


class AWR(Module):
    """Adaptive weight recalibrator.

    Channel descriptors from global average pooling go through
    FC -> ReLU -> FC -> sigmoid; the resulting per-channel factors in
    (0, 1) rescale the input, and the input is added back on top.
    """

    def __init__(self, cfg: AWRConfig, rng):
        self.cfg = cfg
        self.fc1 = Linear(cfg.channels, cfg.hidden, rng)
        self.fc2 = Linear(cfg.hidden, cfg.channels, rng)
        # Channel descriptors are nonnegative (means of ReLU outputs and
        # count data); nonnegative first-layer weights keep every hidden
        # unit alive at initialisation, which matters when C // r == 1.
        self.fc1.weight.data = np.abs(self.fc1.weight.data)

    def weights(self, f_mul):
        alpha0 = ad.global_avg_pool(f_mul)
        return ad.sigmoid(self.fc2(ad.relu(self.fc1(alpha0))))

    def __call__(self, f_mul):
        if f_mul.data.ndim != 4 or f_mul.shape[1] != self.cfg.channels:
            raise ShapeError("awr", f"expected {self.cfg.channels} channels", [f_mul.shape])
        return ad.scale_channels(f_mul, self.weights(f_mul)) + f_mul


def awr_forward(cfg: AWRConfig, f_mul, rng=None, module=None):
    module = module or AWR(cfg, rng if rng is not None else np.random.default_rng(0))
    f_mul = ad.as_tensor(f_mul)
    if f_mul.data.ndim == 3:
        return ad.Tensor(module(ad.Tensor(f_mul.data[None])).data[0])
    return module(f_mul)


@dataclass(frozen=True)
class CDINetConfig:
    iterations: int = 5
    variant: str = "full"
    depth: int = 3
    base_width: int = 16
    awr_reduction: int = 2
    geometry: Geometry = field(default_factory=Geometry)
    # mu-maps are predicted in multiples of this attenuation (cm^-1)
    mu_unit: float = 0.15
    # initial output level of the projection networks; a positive start keeps
    # the ReLU head active everywhere (targets are normalised to mean ~1)
    proj_head_bias: float = 1.0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.mu_unit <= 0:
            raise ValueError("mu_unit must be positive")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        f = 2 ** (self.depth - 1)
        g = self.geometry
        if g.n % f or g.n_angles % f:
            raise ShapeError("cdinet", f"image size and angle count must be divisible by {f}",
                             [(g.n_angles, g.n), (g.n, g.n)])

    @property
    def n_stages(self):
        return 1 if self.variant == "separate_unet" else self.iterations

    def to_dict(self):
        d = asdict(self)
        d["geometry"] = self.geometry.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        geom = Geometry(**d.pop("geometry", {}))
        return cls(geometry=geom, **d)


def proj_in_channels(variant, m):
    """Input channel count of the projection network at iteration m (1-based)."""
    if m == 1 or variant == "separate_unet":
        return 1
    return {"full": 2 * m - 1, "no_awr": 2 * m - 1, "no_ci_dc": 2, "no_cd_rc": m}[variant]


def img_in_channels(variant, m):
    """Input channel count of the image network at iteration m (1-based)."""
    if variant == "separate_unet":
        return 1
    return {"full": 2 * m, "no_awr": 2 * m, "no_ci_dc": 2, "no_cd_rc": m}[variant]


class CrossDomainOps:
    """Unattenuated FP/BP used for the cross-domain connections.

    Back projections are divided by ``n_angles * pixel_size`` so they read
    as angle-averaged sinogram values; forward projections of mu-maps are
    used as-is (line integrals of order one).
    """

    def __init__(self, geom: Geometry):
        self.proj = get_projector(geom, False)
        self.bp_scale = 1.0 / (geom.n_angles * geom.pixel_size)

    def fp(self, mu_hat):
        p = self.proj
        return ad.linear_map(mu_hat, p.forward, p.back, "forward_project")

    def bp(self, p_hat):
        p, c = self.proj, self.bp_scale
        return ad.linear_map(p_hat, lambda s: p.back(s) * c, lambda g: p.forward(g) * c, "back_project")


class CDINet(Module):
    """Cross-domain iterative network and its ablation variants.

    ``forward`` takes the zero-embedded, normalised limited-angle
    projection ``[B, 1, A, n]`` and the normalised NAC reconstruction
    ``[B, 1, n, n]`` and returns the per-iteration projection and mu-map
    predictions.
    """

    def __init__(self, cfg: CDINetConfig, rng):
        self.cfg = cfg
        v, N = cfg.variant, cfg.n_stages
        self.ops = CrossDomainOps(cfg.geometry)
        ucfg = lambda c, scale=1.0, bias=0.0: UNetConfig(c, 1, cfg.depth, cfg.base_width, scale, bias)
        self.proj_nets = [UNet(ucfg(proj_in_channels(v, m), bias=cfg.proj_head_bias), rng) for m in range(1, N + 1)]
        self.img_nets = [UNet(ucfg(img_in_channels(v, m), cfg.mu_unit), rng) for m in range(1, N + 1)]
        use_awr = v not in ("no_awr", "separate_unet")
        awr = lambda c: AWR(AWRConfig(c, min(cfg.awr_reduction, c)), rng)
        # Proj-Net_1 consumes P_L directly, so no projection AWR at m = 1
        self.proj_awrs = [awr(proj_in_channels(v, m)) for m in range(2, N + 1)] if use_awr else []
        self.img_awrs = [awr(img_in_channels(v, m)) for m in range(1, N + 1)] if use_awr else []
        self._check_channels()

    def _check_channels(self):
        v = self.cfg.variant
        for m, net in enumerate(self.proj_nets, 1):
            if net.cfg.in_channels != proj_in_channels(v, m):
                raise ShapeError("cdinet", f"Proj-Net_{m} channel bookkeeping broken")
        for m, net in enumerate(self.img_nets, 1):
            if net.cfg.in_channels != img_in_channels(v, m):
                raise ShapeError("cdinet", f"Img-Net_{m} channel bookkeeping broken")

    def _proj_inputs(self, m, p_l, p_hats, fp_mus):
        v = self.cfg.variant
        if m == 1:
            return [p_l]
        if v in ("full", "no_awr"):
            return [p_l, *p_hats, *fp_mus]
        if v == "no_ci_dc":
            return [p_l, fp_mus[-1]]
        return [p_l, *p_hats]  # no_cd_rc

    def _img_inputs(self, m, i_l, mu_hats, bp_ps):
        v = self.cfg.variant
        if v in ("full", "no_awr"):
            return [i_l, *mu_hats, *bp_ps]
        if v == "no_ci_dc":
            return [i_l, bp_ps[-1]]
        return [i_l, *mu_hats]  # no_cd_rc

    def forward(self, p_l, i_l):
        p_l, i_l = ad.as_tensor(p_l), ad.as_tensor(i_l)
        g = self.cfg.geometry
        if p_l.data.ndim != 4 or p_l.shape[1:] != (1, g.n_angles, g.n):
            raise ShapeError("cdinet", "P_L must be zero-embedded [B, 1, A_full, n]", [p_l.shape])
        if i_l.data.ndim != 4 or i_l.shape[1:] != (1, g.n, g.n) or i_l.shape[0] != p_l.shape[0]:
            raise ShapeError("cdinet", "I_L must be [B, 1, n, n]", [i_l.shape])
        if self.cfg.variant == "separate_unet":
            return [self.proj_nets[0](p_l)], [self.img_nets[0](i_l)]

        v = self.cfg.variant
        cross = v != "no_cd_rc"
        p_hats, mu_hats, fp_mus, bp_ps = [], [], [], []
        for m in range(1, self.cfg.n_stages + 1):
            u_p = ad.concat(self._proj_inputs(m, p_l, p_hats, fp_mus), axis=1)
            if m > 1 and self.proj_awrs:
                u_p = self.proj_awrs[m - 2](u_p)
            p_hat = self.proj_nets[m - 1](u_p)
            p_hats.append(p_hat)
            if cross:
                bp_ps.append(self.ops.bp(p_hat))
            u_i = ad.concat(self._img_inputs(m, i_l, mu_hats, bp_ps), axis=1)
            if self.img_awrs:
                u_i = self.img_awrs[m - 1](u_i)
            mu_hat = self.img_nets[m - 1](u_i)
            mu_hats.append(mu_hat)
            if cross and m < self.cfg.n_stages:
                fp_mus.append(self.ops.fp(mu_hat))
        return p_hats, mu_hats

    __call__ = forward

    def param_groups(self):
        """Parameter names split into projection- and image-domain groups."""
        proj, img = [], []
        for name, p in self.named_parameters():
            (proj if name.startswith("proj_") else img).append((name, p))
        return {"proj": proj, "img": img}


def build_variant(cfg: CDINetConfig, seed=0):
    if cfg.variant not in VARIANTS:
        raise ValueError(f"unknown variant {cfg.variant!r}")
    return CDINet(cfg, np.random.Generator(np.random.Philox(key=seed)))


def cdinet_forward(cfg: CDINetConfig, P_L, I_L, net=None, seed=0):
    """Single-sample convenience wrapper: arrays in, per-iteration arrays out."""
    net = net or build_variant(cfg, seed)
    p_l = ad.Tensor(np.asarray(P_L, dtype=np.float64)[None, None])
    i_l = ad.Tensor(np.asarray(I_L, dtype=np.float64)[None, None])
    p_hats, mu_hats = net(p_l, i_l)
    return [p.data[0, 0] for p in p_hats], [m.data[0, 0] for m in mu_hats]
