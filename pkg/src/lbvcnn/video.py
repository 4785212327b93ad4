"""Video cuboids: temporal normalization, resizing, augmentation, plane views,
synthetic motion datasets and the dataset manifest format.

Cuboids are ``[X, Y, T]`` grayscale volumes in ``[0, 1]``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import InvalidShapeError
from .network import VIEW_PERMUTATIONS, VIEWS
from .tensor import Rng, inverse_permutation, load_tensor, permute_axes, save_tensor

ROTATIONS = (5, 10, 15, -5, -10, -15)
AUG_TAGS = (("original",) + tuple(f"rot{a:+d}" for a in ROTATIONS) + ("flip",)
            + tuple(f"flip_rot{a:+d}" for a in ROTATIONS))

# every pattern keeps its label under the X flip used by augmentation
CLASS_PATTERNS = ("expand", "contract", "translate-left", "translate-right",
                  "rotate-pattern", "static", "stretch-x", "stretch-y", "dim", "brighten")


@dataclass
class VideoCuboid:
    data: np.ndarray
    label: int
    subject_id: str
    view: str = "xy"
    augmentation_tag: str = "original"

    def __post_init__(self):
        if self.view not in VIEWS:
            raise ValueError(f"unknown view {self.view!r}")
        if self.data.ndim != 3:
            raise InvalidShapeError(f"cuboid must be 3D, got shape {self.data.shape}")
        if self.augmentation_tag not in AUG_TAGS:
            raise ValueError(f"unknown augmentation tag {self.augmentation_tag!r}")

    @property
    def is_original(self):
        return self.augmentation_tag == "original"

    def check_range(self):
        lo, hi = float(self.data.min()), float(self.data.max())
        if lo < 0 or hi > 1:
            raise ValueError(f"pixel values outside [0, 1]: [{lo}, {hi}]")


@dataclass
class Dataset:
    samples: list
    class_names: list
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.samples)

    @property
    def labels(self):
        return np.array([s.label for s in self.samples], dtype=np.int64)

    @property
    def subjects(self):
        return [s.subject_id for s in self.samples]

    @property
    def n_classes(self):
        return len(self.class_names)

    def subset(self, indices):
        return Dataset([self.samples[i] for i in indices], list(self.class_names), dict(self.provenance))

    def originals(self):
        return Dataset([s for s in self.samples if s.is_original], list(self.class_names),
                       dict(self.provenance))

    def augmented(self):
        """Every original expanded into its 14 variants."""
        out = []
        for s in self.samples:
            if s.is_original:
                out.extend(augment(s))
        return Dataset(out, list(self.class_names), dict(self.provenance, augmented=True))

    def stack(self, view="xy", dtype=np.float32):
        """``(N, 1, *view_shape)`` batch array for the given view."""
        arrs = [view_data(s, view) for s in self.samples]
        return np.stack(arrs)[:, None].astype(dtype, copy=False)


# -- frame ops ---------------------------------------------------------------

def _as_frames(frames):
    if isinstance(frames, np.ndarray) and frames.ndim == 3:
        return frames.astype(np.float64, copy=False)
    frames = [np.asarray(f, dtype=np.float64) for f in frames]
    if not frames:
        raise ValueError("need at least one frame")
    if any(f.ndim != 2 or f.shape != frames[0].shape for f in frames):
        raise InvalidShapeError("frames must be 2D images of one shape")
    return np.stack(frames, axis=-1)


def normalize_temporal(frames, target_len=11):
    """Resample a frame sequence to ``target_len`` frames by linear interpolation.

    ``frames`` is a list of 2D images or an ``[X, Y, T]`` array. The first and
    last inputs land on the first and last outputs.
    """
    vol = _as_frames(frames)
    n = vol.shape[-1]
    if n == 0:
        raise ValueError("need at least one frame")
    if target_len < 1:
        raise ValueError("target_len must be >= 1")
    if n == target_len:
        return vol.copy()
    if n == 1:
        return np.repeat(vol, target_len, axis=-1)
    if target_len == 1:
        return vol[..., :1].copy()
    pos = np.arange(target_len) * ((n - 1) / (target_len - 1))
    lo = np.minimum(np.floor(pos).astype(int), n - 2)
    w = pos - lo
    return vol[..., lo] + w * (vol[..., lo + 1] - vol[..., lo])


def _axis_weights(n_in, n_out):
    # half-pixel aligned sampling, clamped at the borders
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.minimum(np.floor(src).astype(int), max(n_in - 2, 0))
    w = src - lo
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, w


def resize_frame(frame, height=64, width=64):
    """Bilinear resize with half-pixel sampling."""
    f = np.asarray(frame, dtype=np.float64)
    if f.ndim != 2 or f.size == 0:
        raise InvalidShapeError(f"need a nonempty 2D frame, got shape {f.shape}")
    if f.shape == (height, width):
        return f.copy()
    lo, hi, w = _axis_weights(f.shape[0], height)
    rows = f[lo] + w[:, None] * (f[hi] - f[lo])
    lo, hi, w = _axis_weights(f.shape[1], width)
    out = rows[:, lo] + w * (rows[:, hi] - rows[:, lo])
    return np.clip(out, f.min(), f.max())


def rotate_frames(vol, degrees):
    """Rotate every frame of ``[X, Y, T]`` about its center; zero fill."""
    if degrees == 0:
        return vol.copy()
    out = ndimage.rotate(vol, degrees, axes=(1, 0), reshape=False, order=1,
                         mode="constant", cval=0.0)
    return np.clip(out, 0.0, 1.0)


def flip_frames(vol):
    """Mirror each frame along X."""
    return vol[::-1].copy()


def augment(cuboid: VideoCuboid):
    """The original plus 13 variants: 6 rotations, a flip, 6 rotations of the flip."""
    if cuboid.view != "xy":
        raise ValueError("augmentation expects an XY-T cuboid")
    base = np.asarray(cuboid.data)
    flipped = flip_frames(base)
    vols = [base.copy()] + [rotate_frames(base, a) for a in ROTATIONS]
    vols += [flipped] + [rotate_frames(flipped, a) for a in ROTATIONS]
    return [VideoCuboid(v.astype(base.dtype, copy=False), cuboid.label, cuboid.subject_id,
                        "xy", tag) for v, tag in zip(vols, AUG_TAGS)]


def view_data(cuboid: VideoCuboid, view):
    if cuboid.view != "xy":
        raise ValueError("plane views are taken from an XY-T cuboid")
    return permute_axes(np.asarray(cuboid.data), VIEW_PERMUTATIONS[view])


def plane_views(cuboid):
    """``(XY-T, XT-Y, YT-X)`` arrays of one cuboid (accepts a raw array too)."""
    if not isinstance(cuboid, VideoCuboid):
        cuboid = VideoCuboid(np.asarray(cuboid), 0, "", "xy")
    return tuple(view_data(cuboid, v) for v in VIEWS)


def unpermute_view(data, view):
    return permute_axes(data, inverse_permutation(VIEW_PERMUTATIONS[view]))


# -- synthetic data ----------------------------------------------------------

def _texture(rng: Rng, size, sigma):
    noise = rng.normal((size, size))
    tex = ndimage.gaussian_filter(noise, sigma, mode="wrap")
    return tex / (np.abs(tex).max() + 1e-12)


def _render(pattern, size, frames, cx, cy, scale, contrast, theta, bg, rng: Rng):
    """One neutral-to-peak sequence of a soft elliptical blob on ``bg``."""
    xs, ys = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    shift = size * 0.22
    vol = np.empty((size, size, frames))
    for t in range(frames):
        s = t / (frames - 1)
        x0, y0, sc, th, ct = cx, cy, scale, theta, contrast
        ax, ay = 1.0, 1.0
        if pattern == "expand":
            sc = scale * (1 + 0.7 * s)
        elif pattern == "contract":
            sc = scale * (1 - 0.5 * s)
        elif pattern == "translate-left":
            y0 = cy - shift * s
        elif pattern == "translate-right":
            y0 = cy + shift * s
        elif pattern == "stretch-x":
            ax = 1 + 0.8 * s
        elif pattern == "stretch-y":
            ay = 1 + 0.8 * s
        elif pattern == "rotate-pattern":
            th = theta + 1.6 * s
        elif pattern == "dim":
            ct = contrast * (1 - 0.6 * s)
        elif pattern == "brighten":
            ct = contrast * (1 + 0.8 * s)
        dx, dy = (xs - x0) / ax, (ys - y0) / ay
        u = dx * np.cos(th) + dy * np.sin(th)
        v = -dx * np.sin(th) + dy * np.cos(th)
        a, b = sc, 0.45 * sc
        blob = np.exp(-0.5 * ((u / a) ** 2 + (v / b) ** 2))
        # stripes make in-plane rotation visible
        stripes = 0.6 + 0.4 * np.cos(2 * np.pi * u / (0.9 * sc))
        vol[:, :, t] = bg + ct * blob * stripes
    vol += rng.normal(vol.shape, 0.015)
    return np.clip(vol, 0.0, 1.0)


def synth_dataset(n_classes=6, per_class=40, seed=0, size=64, frames=11):
    """Class-balanced synthetic motion dataset.

    Subject ``k`` contributes sample ``k`` of every class and owns a background
    texture; every sample adds jitter in start position, scale, orientation and
    contrast. Frame 0 comes from the same distribution for every class, so only
    the motion separates the classes.
    """
    if not 2 <= n_classes <= len(CLASS_PATTERNS):
        raise ValueError(f"n_classes must be in [2, {len(CLASS_PATTERNS)}], got {n_classes}")
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    root = Rng(seed)
    samples = []
    for k in range(per_class):
        srng = root.child(k)
        bg = 0.3 + 0.08 * _texture(srng, size, size / 16)
        base_scale = size * (0.12 + 0.04 * srng.uniform(1)[0])
        for c in range(n_classes):
            rng = srng.child(1000 + c)
            u = rng.uniform(6)
            cx = size * (0.38 + 0.24 * u[0])
            cy = size * (0.38 + 0.24 * u[1])
            scale = base_scale * (0.85 + 0.3 * u[2])
            theta = np.pi * u[3]
            contrast = 0.45 + 0.2 * u[4]
            vol = _render(CLASS_PATTERNS[c], size, frames, cx, cy, scale, contrast, theta, bg, rng)
            samples.append(VideoCuboid(vol.astype(np.float32), c, f"s{k:03d}", "xy"))
    provenance = {"generator": "synth_dataset", "n_classes": n_classes, "per_class": per_class,
                  "seed": seed, "size": size, "frames": frames}
    return Dataset(samples, list(CLASS_PATTERNS[:n_classes]), provenance)


# -- manifest ----------------------------------------------------------------

def save_dataset(ds: Dataset, directory):
    """Write ``manifest.json`` plus one LBVT tensor per sample."""
    directory = os.fspath(directory)
    os.makedirs(os.path.join(directory, "tensors"), exist_ok=True)
    entries = []
    for i, s in enumerate(ds.samples):
        rel = f"tensors/{i:05d}.lbvt"
        save_tensor(np.asarray(s.data), os.path.join(directory, rel))
        entries.append({"path": rel, "label": int(s.label), "subject_id": s.subject_id,
                        "augmentation_tag": s.augmentation_tag})
    manifest = {"class_names": list(ds.class_names), "provenance": ds.provenance,
                "samples": entries}
    path = os.path.join(directory, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return path


def load_dataset(directory) -> Dataset:
    directory = os.fspath(directory)
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    samples = [VideoCuboid(load_tensor(os.path.join(directory, e["path"])), e["label"],
                           e["subject_id"], "xy", e["augmentation_tag"])
               for e in manifest["samples"]]
    return Dataset(samples, manifest["class_names"], manifest.get("provenance", {}))
