"""Shared feature extractor, twin heatmap heads, and domain discriminator.

The backbone is a small from-scratch CNN producing a spatial feature map at
1/8 input resolution. Two structurally identical heads upsample it to heatmaps
at 1/4 resolution: the invariant head sees features only, the domain-dependent
head additionally receives a spatially broadcast one-hot domain plane pair.
The discriminator is an MLP over globally pooled features.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_MAGIC = b"SDAPOSE-CKPT"
CHECKPOINT_VERSION = 1


class DomainLabel(Enum):
    SOURCE = "source"
    TARGET = "target"


@dataclass(frozen=True)
class ArchConfig:
    input_size: int = 64
    n_keypoints: int = 11
    feature_channels: int = 32
    discriminator_hidden: tuple = (64, 64)
    heatmap_sigma: float = 1.5  # Gaussian target std, heatmap pixels

    def __post_init__(self):
        if self.input_size % 8:
            raise ValueError(f"input_size must be divisible by 8, got {self.input_size}")
        if self.n_keypoints < 4:
            raise ValueError(f"need >= 4 keypoints, got {self.n_keypoints}")

    @property
    def heatmap_size(self):
        return self.input_size // 4

    @property
    def feature_size(self):
        return self.input_size // 8

    def to_dict(self):
        return {
            "input_size": self.input_size,
            "n_keypoints": self.n_keypoints,
            "feature_channels": self.feature_channels,
            "discriminator_hidden": list(self.discriminator_hidden),
            "heatmap_sigma": self.heatmap_sigma,
        }

    @staticmethod
    def from_dict(d):
        return ArchConfig(
            input_size=int(d["input_size"]),
            n_keypoints=int(d["n_keypoints"]),
            feature_channels=int(d["feature_channels"]),
            discriminator_hidden=tuple(d["discriminator_hidden"]),
            heatmap_sigma=float(d["heatmap_sigma"]),
        )


def _he_conv(rng, out_c, in_c, k):
    std = np.sqrt(2.0 / (in_c * k * k))
    return Tensor(rng.normal(0.0, std, (out_c, in_c, k, k)), requires_grad=True)


def _he_fc(rng, in_n, out_n):
    std = np.sqrt(2.0 / in_n)
    return Tensor(rng.normal(0.0, std, (in_n, out_n)), requires_grad=True)


def _zeros(*shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def _head_params(rng, in_c, mid_c, n_kp):
    return {
        "conv1.w": _he_conv(rng, mid_c, in_c, 3),
        "conv1.b": _zeros(mid_c, 1, 1),
        "conv2.w": _he_conv(rng, n_kp, mid_c, 3),
        "conv2.b": _zeros(n_kp, 1, 1),
    }


@dataclass
class ModelBundle:
    """Parameters of the extractor g, heads f_i / f_d, and discriminator C."""

    arch: ArchConfig
    g_params: dict
    fi_params: dict
    fd_params: dict
    c_params: dict

    @staticmethod
    def initialize(arch: ArchConfig, seed: int) -> "ModelBundle":
        rng = np.random.default_rng(seed)
        F = arch.feature_channels
        plan = [max(F // 4, 4), max(F // 2, 8), F, F]
        g = {}
        in_c = 1
        for i, out_c in enumerate(plan, start=1):
            g[f"conv{i}.w"] = _he_conv(rng, out_c, in_c, 3)
            g[f"conv{i}.b"] = _zeros(out_c, 1, 1)
            in_c = out_c
        mid = max(F // 2, 8)
        fi = _head_params(rng, F, mid, arch.n_keypoints)
        fd = _head_params(rng, F + 2, mid, arch.n_keypoints)
        c = {}
        widths = [F, *arch.discriminator_hidden, 1]
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]), start=1):
            c[f"fc{i}.w"] = _he_fc(rng, a, b)
            c[f"fc{i}.b"] = _zeros(b)
        return ModelBundle(arch=arch, g_params=g, fi_params=fi, fd_params=fd, c_params=c)

    def named_params(self):
        for group, params in (("g", self.g_params), ("fi", self.fi_params),
                              ("fd", self.fd_params), ("c", self.c_params)):
            for name, p in params.items():
                yield f"{group}.{name}", p

    def all_params(self):
        return [p for _, p in self.named_params()]

    def param_groups(self, *groups):
        table = {"g": self.g_params, "fi": self.fi_params,
                 "fd": self.fd_params, "c": self.c_params}
        out = []
        for gname in groups:
            out.extend(table[gname].values())
        return out

    def copy(self) -> "ModelBundle":
        def clone(d):
            return {k: Tensor(v.data.copy(), requires_grad=True) for k, v in d.items()}
        return ModelBundle(self.arch, clone(self.g_params), clone(self.fi_params),
                           clone(self.fd_params), clone(self.c_params))


def _check_image(arch, image):
    s = arch.input_size
    if image.data.ndim != 4 or image.shape[2] != s or image.shape[3] != s:
        raise ad.ShapeError(f"expected image batch (B,1,{s},{s}), got {image.shape}")


def forward_features(bundle: ModelBundle, image: Tensor) -> Tensor:
    """Backbone g: (B,1,H,W) -> (B,F,H/8,W/8)."""
    _check_image(bundle.arch, image)
    x = image
    g = bundle.g_params
    for i in range(1, 5):
        x = ad.conv2d(x, g[f"conv{i}.w"], stride=1, pad=1)
        x = ad.add(x, g[f"conv{i}.b"])
        x = ad.relu(x)
        if i < 4:
            x = ad.max_pool2d(x, 2)
    return x


def _head_forward(params, features, out_size):
    x = ad.conv2d(features, params["conv1.w"], stride=1, pad=1)
    x = ad.relu(ad.add(x, params["conv1.b"]))
    x = ad.upsample_bilinear(x, out_size, out_size)
    x = ad.conv2d(x, params["conv2.w"], stride=1, pad=1)
    return ad.add(x, params["conv2.b"])


def forward_head_invariant(bundle: ModelBundle, features: Tensor) -> Tensor:
    """Domain-invariant head f_i: features -> (B,N,h,h) heatmaps."""
    return _head_forward(bundle.fi_params, features, bundle.arch.heatmap_size)


def domain_planes(domain: DomainLabel, batch, size) -> np.ndarray:
    """One-hot (B,2,size,size) conditioning planes for a domain label."""
    planes = np.zeros((batch, 2, size, size))
    planes[:, 0 if domain is DomainLabel.SOURCE else 1] = 1.0
    return planes


def forward_head_domain(bundle: ModelBundle, features: Tensor, d: DomainLabel) -> Tensor:
    """Domain-dependent head f_d(g(x), D): one-hot planes concatenated channel-wise."""
    B, _, s, _ = features.shape
    cond = Tensor(domain_planes(d, B, s))
    x = ad.concat([features, cond], axis=1)
    return _head_forward(bundle.fd_params, x, bundle.arch.heatmap_size)


def pooled_features(features: Tensor) -> Tensor:
    """Global average pool (B,F,h,w) -> (B,F)."""
    return ad.mean(features, axis=(2, 3))


def forward_discriminator(bundle: ModelBundle, features: Tensor,
                          grl_lambda: float = None) -> Tensor:
    """Discriminator C on pooled features -> (B,1) source probability.

    When ``grl_lambda`` is given, the pooled features pass through a gradient
    reversal layer first, so one backward pass trains C adversarially to g.
    """
    x = pooled_features(features)
    if grl_lambda is not None:
        x = ad.grl(x, grl_lambda)
    c = bundle.c_params
    n = len(bundle.arch.discriminator_hidden) + 1
    for i in range(1, n + 1):
        x = ad.add(ad.matmul(x, c[f"fc{i}.w"]), c[f"fc{i}.b"])
        if i < n:
            x = ad.relu(x)
    return ad.sigmoid(x)


def make_target_heatmaps(keypoints, arch: ArchConfig) -> Tensor:
    """Unnormalized Gaussian target heatmaps (N,h,h) from crop-coordinate keypoints.

    Keypoints further than 3 sigma (in heatmap pixels) outside the heatmap get
    an all-zero channel.
    """
    h = arch.heatmap_size
    scale = h / arch.input_size
    sig = arch.heatmap_sigma
    grid = np.arange(h, dtype=np.float64)
    out = np.zeros((arch.n_keypoints, h, h))
    for i, kp in enumerate(keypoints):
        u, v = (kp.u, kp.v) if hasattr(kp, "u") else (kp[0], kp[1])
        hu, hv = u * scale, v * scale
        if hu < -3 * sig or hu > h - 1 + 3 * sig or hv < -3 * sig or hv > h - 1 + 3 * sig:
            continue
        du2 = (grid - hu) ** 2
        dv2 = (grid - hv) ** 2
        out[i] = np.exp(-(dv2[:, None] + du2[None, :]) / (2.0 * sig**2))
    return Tensor(out)


def decode_heatmaps(heatmaps: np.ndarray, arch: ArchConfig, beta: float = 100.0) -> np.ndarray:
    """Soft-argmax decode (N,h,h) heatmaps to (N,2) crop-pixel coordinates."""
    coords = np.empty((heatmaps.shape[0], 2))
    scale = arch.input_size / arch.heatmap_size
    for i in range(heatmaps.shape[0]):
        uv = ad.soft_argmax(Tensor(heatmaps[i]), beta=beta).data
        coords[i] = uv * scale
    return coords


# -- checkpoint I/O -------------------------------------------------------------
# Format: magic, uint32 header length, JSON header (version, arch, entries with
# name/shape/offset), then raw little-endian float64 blobs. Fully deterministic.


def save_checkpoint(bundle: ModelBundle, path):
    entries = []
    blobs = []
    offset = 0
    for name, p in bundle.named_params():
        raw = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(p.data.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"version": CHECKPOINT_VERSION, "arch": bundle.arch.to_dict(), "params": entries},
        sort_keys=True,
    ).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)


def load_checkpoint(path) -> ModelBundle:
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a sdapose checkpoint (bad magic)")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen))
        if header["version"] != CHECKPOINT_VERSION:
            raise ValueError(
                f"{path}: checkpoint version {header['version']} unsupported "
                f"(expected {CHECKPOINT_VERSION})"
            )
        arch = ArchConfig.from_dict(header["arch"])
        bundle = ModelBundle.initialize(arch, seed=0)
        table = dict(bundle.named_params())
        blob = f.read()
    for e in header["params"]:
        if e["name"] not in table:
            raise ValueError(f"{path}: unknown parameter {e['name']!r} in checkpoint")
        shape = tuple(e["shape"])
        expect = table[e["name"]].data.shape
        if shape != expect:
            raise ValueError(
                f"{path}: parameter {e['name']!r} has shape {shape}, model expects {expect}"
            )
        n = int(np.prod(shape)) * 8
        arr = np.frombuffer(blob[e["offset"]:e["offset"] + n], dtype="<f8").reshape(shape)
        table[e["name"]].data = arr.astype(np.float64).copy()
    return bundle
