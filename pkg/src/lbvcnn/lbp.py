"""LBP, VLBP and LBP-TOP descriptors.

Conventions
-----------
* A 2D image ``img`` is indexed ``img[row, col]``. Neighbour ``i`` (``i = 0 ..
  p-1``) sits at angle ``2*pi*i/p`` measured counterclockwise from east:
  ``col = c + r*cos(a)``, ``row = r0 - r*sin(a)``. Neighbour ``i`` sets bit ``i``.
* Off-grid neighbours are bilinearly interpolated. Coordinates within 1e-9 of
  an integer are snapped to it.
* The threshold is ``value - center >= 0``. Interpolated differences whose
  magnitude is below ``1e-9`` times the largest corner difference are treated
  as exact ties (bit set); this keeps histograms exactly invariant under gray
  shifts and positive scaling despite rounding in the interpolation.
* Cuboids are ``[X, Y, T]``; frame ``t`` is ``cuboid[:, :, t]``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .tensor import load_tensor, save_tensor

TIE_TOL = 1e-9


@dataclass
class Descriptor:
    """Histogram bins plus named segments ``(name, start, stop)``."""

    bins: np.ndarray
    layout: list = field(default_factory=list)
    params: dict = field(default_factory=dict)

    def segment(self, name):
        for n, a, b in self.layout:
            if n == name:
                return self.bins[a:b]
        raise KeyError(name)

    def normalized(self):
        out = self.bins.astype(np.float64).copy()
        for _, a, b in self.layout:
            total = out[a:b].sum()
            if total > 0:
                out[a:b] /= total
        return Descriptor(out, list(self.layout), dict(self.params))

    def __len__(self):
        return self.bins.size


def save_descriptor(desc: Descriptor, path):
    """Bins as an LBVT tensor at ``path`` plus ``path + '.json'`` header."""
    save_tensor(desc.bins.astype(np.float64), path)
    header = {"segments": [{"name": n, "start": a, "stop": b} for n, a, b in desc.layout],
              "params": desc.params}
    with open(os.fspath(path) + ".json", "w") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)


def load_descriptor(path) -> Descriptor:
    bins = load_tensor(path)
    with open(os.fspath(path) + ".json") as fh:
        header = json.load(fh)
    layout = [(s["name"], s["start"], s["stop"]) for s in header["segments"]]
    return Descriptor(bins, layout, header["params"])


# -- sampling ----------------------------------------------------------------

def _snap(v):
    rv = round(v)
    return float(rv) if abs(v - rv) < 1e-9 else v


def neighbor_offsets(p, r):
    """``(drow, dcol)`` offsets for the ``p`` circular neighbours."""
    out = []
    for i in range(p):
        a = 2 * np.pi * i / p
        out.append((_snap(-r * np.sin(a)), _snap(r * np.cos(a))))
    return out


def _margin(p, r):
    return int(max(np.ceil(max(abs(dr), abs(dc))) for dr, dc in neighbor_offsets(p, r)))


def _interp_diff(img, center, dr, dc, rows, cols):
    """Interpolated ``img - center`` at ``(rows+dr, cols+dc)`` plus a tie scale."""
    r0 = int(np.floor(dr))
    c0 = int(np.floor(dc))
    fr = dr - r0
    fc = dc - c0
    h, w = len(rows), len(cols)

    def corner(a, b):
        return img[rows[0] + a:rows[0] + a + h, cols[0] + b:cols[0] + b + w] - center

    d00 = corner(r0, c0)
    if fr == 0 and fc == 0:
        return d00, np.abs(d00)
    d01 = corner(r0, c0 + 1) if fc else d00
    d10 = corner(r0 + 1, c0) if fr else d00
    d11 = corner(r0 + 1, c0 + 1) if (fr and fc) else (d01 if fc else d10)
    top = d00 + fc * (d01 - d00)
    bot = d10 + fc * (d11 - d10)
    val = top + fr * (bot - top)
    scale = np.maximum(np.maximum(np.abs(d00), np.abs(d01)), np.maximum(np.abs(d10), np.abs(d11)))
    return val, scale


def _bits(val, scale):
    return (val >= -TIE_TOL * scale).astype(np.int64)


def _ring_bits(img, center, rows, cols, p, r):
    """List of ``p`` bit maps for the ring around each center."""
    return [_bits(*_interp_diff(img, center, dr, dc, rows, cols))
            for dr, dc in neighbor_offsets(p, r)]


def lbp_map(image, p=8, r=1):
    """Codes for every valid center, shape ``(H - 2m, W - 2m)``, ``m = ceil(r)``."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("lbp expects a 2D image")
    if p < 1:
        raise ValueError("p must be >= 1")
    m = _margin(p, r)
    h, w = img.shape
    if h - 2 * m < 1 or w - 2 * m < 1:
        raise ValueError(f"image {img.shape} has no valid center for radius {r}")
    rows = np.arange(m, h - m)
    cols = np.arange(m, w - m)
    center = img[m:h - m, m:w - m]
    code = np.zeros(center.shape, dtype=np.int64)
    for i, bit in enumerate(_ring_bits(img, center, rows, cols, p, r)):
        code |= bit << i
    return code


def lbp_code(image, cx, cy, p=8, r=1):
    """Code of the center at column ``cx``, row ``cy``."""
    img = np.asarray(image, dtype=np.float64)
    m = _margin(p, r)
    h, w = img.shape
    if not (m <= cy < h - m and m <= cx < w - m):
        raise ValueError(f"center ({cx}, {cy}) is closer than {m} pixels to the border")
    patch = img[cy - m:cy + m + 1, cx - m:cx + m + 1]
    return int(lbp_map(patch, p, r)[0, 0])


def lbp_histogram(image, p=8, r=1) -> Descriptor:
    codes = lbp_map(image, p, r)
    bins = np.bincount(codes.ravel(), minlength=2 ** p).astype(np.float64)
    return Descriptor(bins, [("lbp", 0, 2 ** p)], {"p": p, "r": r})


# -- VLBP --------------------------------------------------------------------

def vlbp_codes(cuboid, p=4, r=1, L=1):
    """VLBP codes for every valid center voxel, shape ``(X', Y', T')``.

    Bit layout (``3p + 2`` bits, low to high): center of frame ``t-L``, ring of
    ``t-L``, ring of ``t``, ring of ``t+L``, center of ``t+L``.
    """
    vol = np.asarray(cuboid, dtype=np.float64)
    if vol.ndim != 3:
        raise ValueError("VLBP expects an [X, Y, T] cuboid")
    X, Y, T = vol.shape
    if T < 2 * L + 1:
        raise ValueError(f"temporal extent {T} is shorter than 2L+1 = {2 * L + 1}")
    m = _margin(p, r)
    if X - 2 * m < 1 or Y - 2 * m < 1:
        raise ValueError(f"frames {X}x{Y} have no valid center for radius {r}")
    rows = np.arange(m, X - m)
    cols = np.arange(m, Y - m)
    codes = np.zeros((X - 2 * m, Y - 2 * m, T - 2 * L), dtype=np.int64)
    for k, t in enumerate(range(L, T - L)):
        center = vol[m:X - m, m:Y - m, t]
        bits = []
        prev, cur, nxt = vol[:, :, t - L], vol[:, :, t], vol[:, :, t + L]
        bits.append(_bits(*_interp_diff(prev, center, 0.0, 0.0, rows, cols)))
        bits += _ring_bits(prev, center, rows, cols, p, r)
        bits += _ring_bits(cur, center, rows, cols, p, r)
        bits += _ring_bits(nxt, center, rows, cols, p, r)
        bits.append(_bits(*_interp_diff(nxt, center, 0.0, 0.0, rows, cols)))
        code = np.zeros(center.shape, dtype=np.int64)
        for i, b in enumerate(bits):
            code |= b << i
        codes[:, :, k] = code
    return codes


def vlbp_descriptor(cuboid, p=4, r=1, L=1) -> Descriptor:
    nbins = 2 ** (3 * p + 2)
    codes = vlbp_codes(cuboid, p, r, L)
    bins = np.bincount(codes.ravel(), minlength=nbins).astype(np.float64)
    return Descriptor(bins, [("vlbp", 0, nbins)], {"p": p, "r": r, "L": L})


# -- LBP-TOP -----------------------------------------------------------------

def plane_slices(cuboid, plane):
    """Iterate the 2D slices of one plane family of an ``[X, Y, T]`` cuboid."""
    vol = np.asarray(cuboid)
    if plane == "xy":
        return (vol[:, :, t] for t in range(vol.shape[2]))
    if plane == "xt":
        return (vol[:, y, :] for y in range(vol.shape[1]))
    if plane == "yt":
        return (vol[x, :, :] for x in range(vol.shape[0]))
    raise ValueError(f"unknown plane {plane!r}")


def lbp_top_descriptor(cuboid, p=8, r_xy=1, r_xt=1, r_yt=1) -> Descriptor:
    """Concatenated XY | XT | YT histograms, ``3 * 2**p`` bins."""
    vol = np.asarray(cuboid, dtype=np.float64)
    if vol.ndim != 3:
        raise ValueError("LBP-TOP expects an [X, Y, T] cuboid")
    nb = 2 ** p
    parts = []
    for plane, r in (("xy", r_xy), ("xt", r_xt), ("yt", r_yt)):
        hist = np.zeros(nb)
        try:
            for sl in plane_slices(vol, plane):
                hist += np.bincount(lbp_map(sl, p, r).ravel(), minlength=nb)
        except ValueError as exc:
            raise ValueError(f"plane {plane} is degenerate: {exc}") from None
        parts.append(hist)
    layout = [("xy", 0, nb), ("xt", nb, 2 * nb), ("yt", 2 * nb, 3 * nb)]
    return Descriptor(np.concatenate(parts), layout,
                      {"p": p, "r_xy": r_xy, "r_xt": r_xt, "r_yt": r_yt})


def nearest_centroid_fit(features, labels):
    labels = np.asarray(labels)
    classes = np.unique(labels)
    return classes, np.stack([np.asarray(features)[labels == c].mean(axis=0) for c in classes])


def nearest_centroid_predict(model, features):
    classes, centroids = model
    f = np.asarray(features, dtype=np.float64)
    d = ((f[:, None, :] - centroids[None]) ** 2).sum(axis=-1)
    return classes[d.argmin(axis=1)]
