"""Two-domain synthetic data: wireframe-satellite renders with controllable
photometric domain shift, exact ground-truth poses, 2D keypoints, and boxes.

Geometry is never perturbed by the shift: keypoint labels are exact pinhole
projections in every domain. The shift only changes image statistics (gain,
blur, noise, clutter streaks, glare).
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .geometry import (CameraIntrinsics, KeypointModel, PixelPoint, Pose,
                       Quaternion, project_points)
from .networks import DomainLabel


def default_keypoint_model() -> KeypointModel:
    """11-landmark satellite: 8 body-box corners, 2 antenna tips, 1 dish center."""
    corners = [[sx, sy, sz]
               for sx in (-0.4, 0.4) for sy in (-0.3, 0.3) for sz in (-0.25, 0.25)]
    antenna = [[0.0, 0.75, 0.35], [0.0, -0.75, 0.35]]
    dish = [[0.0, 0.0, 0.55]]
    return KeypointModel(np.array(corners + antenna + dish))


# wireframe edges over the default 11-point model (indices into points)
DEFAULT_EDGES = (
    (0, 1), (0, 2), (1, 3), (2, 3),       # -x face
    (4, 5), (4, 6), (5, 7), (6, 7),       # +x face
    (0, 4), (1, 5), (2, 6), (3, 7),       # connecting
    (3, 8), (7, 8), (2, 9), (6, 9),       # antennas
    (1, 10), (5, 10), (3, 10), (7, 10),   # dish struts
)


@dataclass(frozen=True)
class SceneConfig:
    keypoint_model: KeypointModel = field(default_factory=default_keypoint_model)
    K: CameraIntrinsics = field(default_factory=lambda: CameraIntrinsics(240.0, 240.0, 64.0, 64.0))
    range_min: float = 3.0
    range_max: float = 8.0
    image_size: int = 128
    edges: tuple = DEFAULT_EDGES

    def __post_init__(self):
        if not 0 < self.range_min < self.range_max:
            raise ValueError(f"need 0 < range_min < range_max, got "
                             f"({self.range_min}, {self.range_max})")

    def to_dict(self):
        return {
            "keypoints3d": self.keypoint_model.points.tolist(),
            "K": [self.K.fx, self.K.fy, self.K.cx, self.K.cy],
            "range_min": self.range_min,
            "range_max": self.range_max,
            "image_size": self.image_size,
            "edges": [list(e) for e in self.edges],
        }

    @staticmethod
    def from_dict(d):
        return SceneConfig(
            keypoint_model=KeypointModel(np.array(d["keypoints3d"])),
            K=CameraIntrinsics(*d["K"]),
            range_min=float(d["range_min"]),
            range_max=float(d["range_max"]),
            image_size=int(d["image_size"]),
            edges=tuple(tuple(e) for e in d["edges"]),
        )


@dataclass(frozen=True)
class DomainShiftConfig:
    brightness_gain: float = 1.0
    noise_sigma: float = 0.0
    blur_radius: float = 0.0
    background_clutter: int = 0
    glare_prob: float = 0.0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not 0.0 <= self.glare_prob <= 1.0:
            raise ValueError(f"glare_prob must be in [0,1], got {self.glare_prob}")

    def to_dict(self):
        return {
            "brightness_gain": self.brightness_gain,
            "noise_sigma": self.noise_sigma,
            "blur_radius": self.blur_radius,
            "background_clutter": self.background_clutter,
            "glare_prob": self.glare_prob,
        }

    @staticmethod
    def from_dict(d):
        return DomainShiftConfig(**d)


IDENTITY_SHIFT = DomainShiftConfig()

SHIFT_PRESETS = {
    "clean": DomainShiftConfig(brightness_gain=1.0, noise_sigma=0.01),
    # harsh direct illumination: saturating gain, flare, bright clutter streaks
    "sunlamp": DomainShiftConfig(brightness_gain=2.2, noise_sigma=0.06,
                                 blur_radius=0.6, background_clutter=14,
                                 glare_prob=0.9),
    # diffuse lab illumination: dim, soft, low contrast
    "lightbox": DomainShiftConfig(brightness_gain=0.4, noise_sigma=0.03,
                                  blur_radius=1.6, background_clutter=4,
                                  glare_prob=0.0),
}


@dataclass
class Sample:
    image: np.ndarray            # (H,W) float crop in [0,1]
    domain: DomainLabel
    pose: Pose
    keypoints2d: list            # PixelPoint, crop coordinates
    bbox: tuple                  # (u_min, v_min, u_max, v_max), full-image pixels
    crop_transform: "CropTransform"
    index: int = -1


# -- pose sampling ---------------------------------------------------------------


def random_unit_quaternion(rng) -> Quaternion:
    q = rng.normal(size=4)
    return Quaternion(*(q / np.linalg.norm(q)))


def sample_pose(rng, scene: SceneConfig) -> Pose:
    """Uniform SO(3) rotation; z uniform in range; centroid projected inside
    the central 80% of the frame (rejection on x/y)."""
    s = scene.image_size
    lo, hi = 0.1 * s, 0.9 * s
    centroid = scene.keypoint_model.points.mean(axis=0)
    while True:
        q = random_unit_quaternion(rng)
        z = rng.uniform(scene.range_min, scene.range_max)
        half = 0.3 * z / scene.K.fx * s  # generous lateral window, then reject
        x = rng.uniform(-half, half)
        y = rng.uniform(-half, half)
        pose = Pose(q, np.array([x, y, z]))
        uv = project_points(pose, scene.K, centroid[None])[0]
        if lo <= uv[0] <= hi and lo <= uv[1] <= hi:
            return pose


# -- rendering ---------------------------------------------------------------------


def _splat_line(img, p0, p1, value=0.5):
    p0, p1 = np.asarray(p0, dtype=np.float64), np.asarray(p1, dtype=np.float64)
    n = max(2, int(np.hypot(*(p1 - p0)) * 2))
    ts = np.linspace(0.0, 1.0, n)
    pts = p0[None] + ts[:, None] * (p1 - p0)[None]
    h, w = img.shape
    iu = np.floor(pts[:, 0]).astype(int)
    iv = np.floor(pts[:, 1]).astype(int)
    fu, fv = pts[:, 0] - iu, pts[:, 1] - iv
    taps = ((0, 0, (1 - fu) * (1 - fv)), (1, 0, fu * (1 - fv)),
            (0, 1, (1 - fu) * fv), (1, 1, fu * fv))
    for du, dv, wgt in taps:
        uu, vv = iu + du, iv + dv
        m = (uu >= 0) & (uu < w) & (vv >= 0) & (vv < h)
        np.maximum.at(img, (vv[m], uu[m]), value * wgt[m])


def _splat_blob(img, center, sigma=1.0, peak=1.0):
    h, w = img.shape
    u, v = center
    r = int(math.ceil(3 * sigma))
    v0, v1 = max(0, int(v) - r), min(h, int(v) + r + 1)
    u0, u1 = max(0, int(u) - r), min(w, int(u) + r + 1)
    if v0 >= v1 or u0 >= u1:
        return
    vs, us = np.mgrid[v0:v1, u0:u1]
    g = peak * np.exp(-((us - u) ** 2 + (vs - v) ** 2) / (2 * sigma**2))
    np.maximum(img[v0:v1, u0:u1], g, out=img[v0:v1, u0:u1])


def render(scene: SceneConfig, pose: Pose, shift: DomainShiftConfig, rng):
    """Render one full image; returns (image, keypoints2d (N,2), bbox).

    Keypoints are exact pre-shift projections; bbox is the tight box of the
    projected points clipped to the frame.
    """
    s = scene.image_size
    kps = project_points(pose, scene.K, scene.keypoint_model.points)  # (N,2)
    img = np.zeros((s, s))

    for i, j in scene.edges:
        _splat_line(img, kps[i].copy(), kps[j].copy(), value=0.45)
    for uv in kps:
        _splat_blob(img, uv, sigma=1.0, peak=1.0)

    # photometric domain shift; geometry labels stay exact
    img = img * shift.brightness_gain
    if shift.blur_radius > 0:
        img = gaussian_filter(img, sigma=shift.blur_radius)
    for _ in range(shift.background_clutter):
        p0 = rng.uniform(0, s, size=2)
        ang = rng.uniform(0, 2 * np.pi)
        length = rng.uniform(4, s / 3)
        p1 = p0 + length * np.array([np.cos(ang), np.sin(ang)])
        _splat_line(img, p0, p1, value=rng.uniform(0.3, 0.9))
    if rng.uniform() < shift.glare_prob:
        center = rng.uniform(0.2 * s, 0.8 * s, size=2)
        radius = rng.uniform(0.2 * s, 0.5 * s)
        vs, us = np.mgrid[0:s, 0:s]
        d2 = (us - center[0]) ** 2 + (vs - center[1]) ** 2
        img = np.maximum(img, 1.2 * np.exp(-d2 / (2 * (radius / 2) ** 2)))
    if shift.noise_sigma > 0:
        img = img + rng.normal(0.0, shift.noise_sigma, img.shape)
    img = np.clip(img, 0.0, 1.0)

    u_min = max(0.0, kps[:, 0].min())
    v_min = max(0.0, kps[:, 1].min())
    u_max = min(float(s - 1), kps[:, 0].max())
    v_max = min(float(s - 1), kps[:, 1].max())
    return img, kps, (u_min, v_min, u_max, v_max)


# -- cropping -----------------------------------------------------------------------


@dataclass(frozen=True)
class CropTransform:
    """Affine full-image -> crop pixel map: crop = (full - offset) * scale."""

    offset_u: float
    offset_v: float
    scale_u: float
    scale_v: float

    def to_crop(self, uv):
        uv = np.asarray(uv, dtype=np.float64)
        return (uv - [self.offset_u, self.offset_v]) * [self.scale_u, self.scale_v]

    def to_full(self, uv):
        uv = np.asarray(uv, dtype=np.float64)
        return uv / [self.scale_u, self.scale_v] + [self.offset_u, self.offset_v]

    def to_dict(self):
        return {"offset_u": self.offset_u, "offset_v": self.offset_v,
                "scale_u": self.scale_u, "scale_v": self.scale_v}

    @staticmethod
    def from_dict(d):
        return CropTransform(**d)


def crop_resize(image: np.ndarray, bbox, out_size: int, margin_frac: float = 0.05):
    """Crop ``bbox`` expanded by ``margin_frac`` of its width per side, clipped
    to the image, and resize to ``out_size`` square (bilinear).

    Returns (crop, CropTransform).
    """
    h, w = image.shape
    u_min, v_min, u_max, v_max = bbox
    if u_max <= u_min or v_max <= v_min:
        raise ValueError(f"degenerate bbox {bbox}")
    margin = margin_frac * (u_max - u_min)
    u0 = max(0.0, u_min - margin)
    v0 = max(0.0, v_min - margin)
    u1 = min(float(w - 1), u_max + margin)
    v1 = min(float(h - 1), v_max + margin)

    tf = CropTransform(offset_u=u0, offset_v=v0,
                       scale_u=(out_size - 1) / (u1 - u0),
                       scale_v=(out_size - 1) / (v1 - v0))

    # sample the source at the crop grid positions (bilinear)
    us = np.linspace(u0, u1, out_size)
    vs = np.linspace(v0, v1, out_size)
    iu = np.clip(np.floor(us).astype(int), 0, w - 2)
    iv = np.clip(np.floor(vs).astype(int), 0, h - 2)
    fu = us - iu
    fv = vs - iv
    top = image[iv[:, None], iu[None, :]] * (1 - fu) + image[iv[:, None], iu[None, :] + 1] * fu
    bot = image[iv[:, None] + 1, iu[None, :]] * (1 - fu) + image[iv[:, None] + 1, iu[None, :] + 1] * fu
    crop = top * (1 - fv)[:, None] + bot * fv[:, None]
    return crop, tf


# -- dataset generation ---------------------------------------------------------------


def _sample_rng(seed: int, index: int):
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(index,)))


def make_sample(scene: SceneConfig, shift: DomainShiftConfig, domain: DomainLabel,
                seed: int, index: int, crop_size: int = 64,
                margin_frac: float = 0.05) -> Sample:
    rng = _sample_rng(seed, index)
    pose = sample_pose(rng, scene)
    img, kps, bbox = render(scene, pose, shift, rng)
    crop, tf = crop_resize(img, bbox, crop_size, margin_frac)
    kps_crop = tf.to_crop(kps)
    return Sample(
        image=crop,
        domain=domain,
        pose=pose,
        keypoints2d=[PixelPoint(u, v) for u, v in kps_crop],
        bbox=bbox,
        crop_transform=tf,
        index=index,
    )


def split_indices(n: int, n_test: int):
    """Deterministic disjoint train/test index split, evenly interleaved."""
    if not 0 <= n_test <= n:
        raise ValueError(f"n_test {n_test} out of range for n {n}")
    test = [i for i in range(n) if (i * n_test) // n != ((i + 1) * n_test) // n]
    train = [i for i in range(n) if (i * n_test) // n == ((i + 1) * n_test) // n]
    return train, test


def generate_dataset(scene: SceneConfig, shift: DomainShiftConfig, n: int,
                     domain: DomainLabel, seed: int, crop_size: int = 64,
                     n_test: int = 0):
    """n deterministic samples plus the train/test split lists."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    samples = [make_sample(scene, shift, domain, seed, i, crop_size) for i in range(n)]
    train, test = split_indices(n, n_test)
    return samples, train, test


# -- on-disk format ---------------------------------------------------------------------


def save_dataset(dirpath, samples, train_idx, test_idx, scene: SceneConfig,
                 shift: DomainShiftConfig, seed: int):
    """Write manifest.json + annotations.json + one grayscale PNG per sample."""
    os.makedirs(dirpath, exist_ok=True)
    annotations = []
    for s in samples:
        fname = f"img_{s.index:06d}.png"
        arr = np.clip(np.round(s.image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr, mode="L").save(os.path.join(dirpath, fname))
        annotations.append({
            "filename": fname,
            "domain": s.domain.value,
            "quaternion_wxyz": list(s.pose.rotation.as_array()),
            "translation_xyz_m": s.pose.translation.tolist(),
            "keypoints2d": [[p.u, p.v] for p in s.keypoints2d],
            "bbox": list(s.bbox),
            "crop_transform": s.crop_transform.to_dict(),
        })
    with open(os.path.join(dirpath, "annotations.json"), "w") as f:
        json.dump({"samples": annotations}, f, indent=1, sort_keys=True)
    manifest = {
        "scene": scene.to_dict(),
        "shift": shift.to_dict(),
        "seed": seed,
        "n_samples": len(samples),
        "crop_size": samples[0].image.shape[0] if samples else 0,
        "train_indices": list(train_idx),
        "test_indices": list(test_idx),
    }
    with open(os.path.join(dirpath, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


def manifest_hash(dirpath) -> str:
    with open(os.path.join(dirpath, "manifest.json"), "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def load_dataset(dirpath):
    """Load a saved dataset directory; returns (samples, train_idx, test_idx,
    scene, shift). Raises ValueError naming the offending entry/field."""
    with open(os.path.join(dirpath, "manifest.json")) as f:
        manifest = json.load(f)
    scene = SceneConfig.from_dict(manifest["scene"])
    shift = DomainShiftConfig.from_dict(manifest["shift"])
    with open(os.path.join(dirpath, "annotations.json")) as f:
        ann = json.load(f)
    samples = []
    required = ("filename", "domain", "quaternion_wxyz", "translation_xyz_m",
                "keypoints2d", "bbox", "crop_transform")
    for i, a in enumerate(ann.get("samples", [])):
        for key in required:
            if key not in a:
                raise ValueError(f"annotations.json: sample {i} missing field {key!r}")
        try:
            img = np.asarray(Image.open(os.path.join(dirpath, a["filename"])),
                             dtype=np.float64) / 255.0
            pose = Pose(Quaternion(*a["quaternion_wxyz"]), np.array(a["translation_xyz_m"]))
            sample = Sample(
                image=img,
                domain=DomainLabel(a["domain"]),
                pose=pose,
                keypoints2d=[PixelPoint(u, v) for u, v in a["keypoints2d"]],
                bbox=tuple(a["bbox"]),
                crop_transform=CropTransform.from_dict(a["crop_transform"]),
                index=i,
            )
        except (TypeError, ValueError) as e:
            raise ValueError(f"annotations.json: sample {i} is invalid: {e}") from e
        samples.append(sample)
    return samples, manifest["train_indices"], manifest["test_indices"], scene, shift
