"""Conditioning images, the schematic face renderer and its inverse, PGM I/O.

Images are float64 arrays of shape (res, res), row-major, values in [0, 1].

Renderer geometry is written in base units for a 32 px image and scales by
res / 32. Coordinates (u, v) are measured from the head centre, u to the
right and v downwards. Every facial element is an axis-aligned rectangle
with exact box-filter coverage, so the extractor can read edges and sizes
back from pixel sums. Elements are separated by more than one pixel, so no
pixel touches two of them.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from ..features import (
    AU_NAMES, DIM, N_AU, NATIVE_MAX, NATIVE_MIN, AuPose, AuPoseSequence, NormStats, au_index,
)

BASE = 32.0
HEAD = 0.45  # head intensity; background 0, features 1
SUPERSAMPLE = 16

# coefficient name -> value, base units (pixels at 32x32) and native AU/radian units
COEF = {
    "head_a": 11.0,            # horizontal semi-axis
    "head_b": 13.5,            # vertical semi-axis
    "pose_shift": 2.0 / (math.pi / 2),  # px per radian; ry moves centre right, rx moves it down
    "tilt": 0.2,               # ellipse tilt (radians) per radian of rz
    "brow_len": 2.5,
    "brow_inner0": 0.6, "brow_inner_au02": 0.3,
    "brow_thick0": 1.0, "brow_thick_au04": 0.2,
    "brow_bottom0": -4.7, "brow_lift": 0.12,  # bottom = brow_bottom0 - brow_lift*(AU01+AU02-AU04+5)
    "eye_u0": 2.25, "eye_w": 2.5, "eye_v": -2.0,
    "eye_open0": 1.5, "eye_open_gain": 0.3, "eye_open_max": 3.0,  # open = clamp(0 + .. (AU05-AU07-AU45))
    "ulip_thick": 1.2, "ulip_w0": 4.0, "ulip_w_gain": 0.4, "ulip_bottom0": 5.0, "ulip_au25": 0.3,
    "llip_thick": 1.2, "llip_w0": 3.0, "llip_w_au20": 0.4, "llip_top0": 6.2, "llip_au26": 0.3,
    "cheek_u0": 5.5, "cheek_v0": 1.0, "cheek_h": 1.5, "cheek_w_au06": 0.5,
}

INVERTIBLE_AUS = ("AU01", "AU02", "AU04", "AU06", "AU12", "AU20", "AU25", "AU26")
INVERTIBLE_MASK = np.zeros(DIM, bool)
INVERTIBLE_MASK[[au_index(a) for a in INVERTIBLE_AUS]] = True
INVERTIBLE_MASK[N_AU:] = True

_A = {a: au_index(a) for a in AU_NAMES}


class StructureNotFound(ValueError):
    pass


# ---------------------------------------------------------------- conditioning image

GRID_COLS, GRID_ROWS, PATCH = 5, 4, 2


def _grid_origin(res):
    h, w = GRID_ROWS * PATCH, GRID_COLS * PATCH
    if res < max(h, w) or res % 2:
        raise ValueError(f"resolution {res} cannot hold the {w}x{h} feature block")
    return res // 2 - h // 2, res // 2 - w // 2


def conditioning_image(p, stats: NormStats, res: int = 32) -> np.ndarray:
    """Normalized features as a centred 5x4 grid of 2x2 patches, row-major.

    Values outside [0, 1] after normalization are clipped so the image stays
    a valid frame.
    """
    vec = p.vector if isinstance(p, AuPose) else np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(vec)):
        raise ValueError("features must be finite")
    r0, c0 = _grid_origin(res)
    z = np.clip(stats.normalize(vec), 0.0, 1.0)
    img = np.zeros((res, res))
    block = np.kron(z.reshape(GRID_ROWS, GRID_COLS), np.ones((PATCH, PATCH)))
    img[r0:r0 + GRID_ROWS * PATCH, c0:c0 + GRID_COLS * PATCH] = block
    return img


def conditioning_batch(frames, stats: NormStats, res: int = 32) -> np.ndarray:
    """Vectorized :func:`conditioning_image` over (..., 20) frames."""
    frames = np.asarray(frames, dtype=np.float64)
    r0, c0 = _grid_origin(res)
    z = np.clip(stats.normalize(frames), 0.0, 1.0).reshape(frames.shape[:-1] + (GRID_ROWS, GRID_COLS))
    z = np.repeat(np.repeat(z, PATCH, axis=-2), PATCH, axis=-1)
    img = np.zeros(frames.shape[:-1] + (res, res))
    img[..., r0:r0 + GRID_ROWS * PATCH, c0:c0 + GRID_COLS * PATCH] = z
    return img


def read_conditioning(img) -> np.ndarray:
    """Normalized 20-vector back from patch centres (mean of each 2x2 patch)."""
    img = np.asarray(img)
    r0, c0 = _grid_origin(img.shape[-1])
    block = img[..., r0:r0 + GRID_ROWS * PATCH, c0:c0 + GRID_COLS * PATCH]
    block = block.reshape(block.shape[:-2] + (GRID_ROWS, PATCH, GRID_COLS, PATCH)).mean(axis=(-3, -1))
    return block.reshape(block.shape[:-2] + (DIM,))


# ---------------------------------------------------------------- renderer

def _overlap(lo, hi, edges):
    """Length of [lo, hi] inside each pixel [edges[k], edges[k] + 1]."""
    return np.clip(np.minimum(hi, edges + 1.0) - np.maximum(lo, edges), 0.0, None)


def _geometry(v):
    """Element rectangles (u0, u1, v0, v1) in base units for a native frame ``v``."""
    C = COEF
    au = lambda name: v[_A[name]]
    rects = []
    inner = C["brow_inner0"] + C["brow_inner_au02"] * au("AU02")
    thick = C["brow_thick0"] + C["brow_thick_au04"] * au("AU04")
    bottom = C["brow_bottom0"] - C["brow_lift"] * (au("AU01") + au("AU02") - au("AU04") + 5.0)
    for sgn in (-1, 1):
        rects.append(_mirror(sgn, inner, inner + C["brow_len"], bottom - thick, bottom))
    open_ = min(max(C["eye_open0"] + C["eye_open_gain"] * (au("AU05") - au("AU07") - au("AU45")), 0.0),
                C["eye_open_max"])
    for sgn in (-1, 1):
        rects.append(_mirror(sgn, C["eye_u0"], C["eye_u0"] + C["eye_w"],
                             C["eye_v"] - open_ / 2, C["eye_v"] + open_ / 2))
    cheek = C["cheek_w_au06"] * au("AU06")
    for sgn in (-1, 1):
        rects.append(_mirror(sgn, C["cheek_u0"], C["cheek_u0"] + cheek, C["cheek_v0"], C["cheek_v0"] + C["cheek_h"]))
    uw = C["ulip_w0"] + C["ulip_w_gain"] * (au("AU12") + au("AU20"))
    ub = C["ulip_bottom0"] - C["ulip_au25"] * au("AU25")
    rects.append((-uw / 2, uw / 2, ub - C["ulip_thick"], ub))
    lw = C["llip_w0"] + C["llip_w_au20"] * au("AU20")
    lt = C["llip_top0"] + C["llip_au26"] * au("AU26")
    rects.append((-lw / 2, lw / 2, lt, lt + C["llip_thick"]))
    return rects


def _mirror(sgn, a, b, v0, v1):
    return (a, b, v0, v1) if sgn > 0 else (-b, -a, v0, v1)


def head_center(v, res: int = 32):
    """Head centre (x, y) in pixel coordinates and the tilt angle."""
    s = res / BASE
    cx = res / 2 + s * COEF["pose_shift"] * v[N_AU + 1]
    cy = res / 2 + s * COEF["pose_shift"] * v[N_AU]
    return cx, cy, COEF["tilt"] * v[N_AU + 2]


def _head_coverage(cx, cy, theta, res):
    s = res / BASE
    a, b = COEF["head_a"] * s, COEF["head_b"] * s
    k = SUPERSAMPLE
    offs = (np.arange(k) + 0.5) / k
    pix = np.arange(res, dtype=np.float64)
    # relative coordinates: pixel edge minus centre first, then the sub-sample offset
    xs = ((pix - cx)[:, None] + offs[None, :]).ravel()
    ys = ((pix - cy)[:, None] + offs[None, :]).ravel()
    ct, st = math.cos(theta), math.sin(theta)
    p = xs[None, :] * ct + ys[:, None] * st
    q = -xs[None, :] * st + ys[:, None] * ct
    inside = (p / a) ** 2 + (q / b) ** 2 <= 1.0
    return inside.reshape(res, k, res, k).mean(axis=(1, 3))


def render_face(p, res: int = 32):
    """Schematic face for one frame; returns (image, clamped_flag).

    Inputs outside the native ranges are clamped and the flag is set.
    """
    vec = p.vector if isinstance(p, AuPose) else np.asarray(p, dtype=np.float64)
    if vec.shape != (DIM,) or not np.all(np.isfinite(vec)):
        raise ValueError("render_face needs a finite 20-vector")
    v = np.clip(vec, NATIVE_MIN, NATIVE_MAX)
    clamped = bool(np.any(v != vec))
    if res % 2 or res < 16:
        raise ValueError("resolution must be even and >= 16")
    s = res / BASE
    cx, cy, theta = head_center(v, res)
    head = _head_coverage(cx, cy, theta, res)
    ex = np.arange(res) - cx
    ey = np.arange(res) - cy
    feat = np.zeros((res, res))
    for u0, u1, v0, v1 in _geometry(v):
        if u1 > u0 and v1 > v0:
            feat += np.outer(_overlap(v0 * s, v1 * s, ey), _overlap(u0 * s, u1 * s, ex))
    img = HEAD * head + (1.0 - HEAD) * feat
    return np.clip(img, 0.0, 1.0), clamped


def render_sequence(frames, res: int = 32) -> np.ndarray:
    return np.stack([render_face(f, res)[0] for f in np.asarray(frames)])


# ---------------------------------------------------------------- extractor

def _low_edge(profile, length):
    """Low edge of an interval of known length from its coverage profile.

    The centroid picks a pixel boundary k inside the interval; the edge is k
    minus the coverage accumulated before it. This is exact on rendered
    profiles and unbiased under zero-mean noise, unlike a first-nonzero scan.
    """
    m = profile.sum()
    if not m > 0:
        return None
    k = int(round(float(profile @ (np.arange(len(profile)) + 0.5) / m)))
    lo = max(0, k - int(math.ceil(length)) - 2)
    return k - float(profile[lo:k].sum())


def extract_aupose(img):
    """Invert :func:`render_face` on the invertible dims.

    Returns (20-vector in native units, mask). Unrecoverable dims are NaN.
    Feature coverage is the signed residual against a head ellipse fitted
    from the image moments, so symmetric pixel noise (as in generator
    output) cancels instead of piling up.
    """
    img = np.asarray(img, dtype=np.float64)
    res = img.shape[-1]
    if img.shape != (res, res) or res % 2:
        raise ValueError("extract_aupose needs a square image with even side")
    s = res / BASE
    head = np.clip(np.minimum(img, HEAD) / HEAD, 0.0, 1.0)
    mass = head.sum()
    if mass < 0.25 * math.pi * COEF["head_a"] * COEF["head_b"] * s * s:
        raise StructureNotFound("no head-shaped region found")
    pix = np.arange(res) + 0.5
    cx = float(head.sum(axis=0) @ pix / mass)
    cy = float(head.sum(axis=1) @ pix / mass)
    dx, dy = pix - cx, pix - cy
    mxx = float(head.sum(axis=0) @ dx ** 2 / mass)
    myy = float(head.sum(axis=1) @ dy ** 2 / mass)
    mxy = float(dy @ head @ dx / mass)
    theta = 0.5 * math.atan2(-2.0 * mxy, -(mxx - myy))

    out = np.full(DIM, np.nan)
    out[N_AU] = (cy - res / 2) / (s * COEF["pose_shift"])
    out[N_AU + 1] = (cx - res / 2) / (s * COEF["pose_shift"])
    out[N_AU + 2] = theta / COEF["tilt"]

    feat = (img - HEAD * _head_coverage(cx, cy, theta, res)) / (1.0 - HEAD)
    # pixel centres relative to the head centre, in base units
    U = (pix - cx)[None, :] / s
    V = (pix - cy)[:, None] / s
    area = 1.0 / (s * s)  # base-unit area of one pixel
    C = COEF

    def region(cond):
        return np.where(cond, feat, 0.0)

    brow = region((V < -4.1) & (np.abs(U) < 7.0) & (V > -11.0))
    cheek = region((V >= 0.25) & (V < 4.0) & (np.abs(U) >= 4.75) & (np.abs(U) < 10.0))
    ulip = region((V >= 0.25) & (V < 5.6) & (np.abs(U) < 4.75))
    llip = region((V >= 5.6) & (V < 10.5) & (np.abs(U) < 4.75))

    # brows, both sides averaged: thickness from mass with known length,
    # bottom from the top edge of the row profile, inner edge from columns
    Lp = C["brow_len"] * s
    thick, inner, bottom = [], [], []
    for right in (True, False):
        b = np.where((U > 0) if right else (U < 0), brow, 0.0)
        tp = b.sum() / Lp
        if not tp > 0:
            raise StructureNotFound("eyebrows not found")
        top = _low_edge(b.sum(axis=1) / Lp, tp)
        cols = b.sum(axis=0) / tp
        edge = _low_edge(cols if right else cols[::-1], Lp)
        if top is None or edge is None:
            raise StructureNotFound("eyebrows not found")
        inner.append((edge - cx) / s if right else (cx - (res - edge)) / s)
        thick.append(tp / s)
        bottom.append((top + tp - cy) / s)
    au04 = (float(np.mean(thick)) - C["brow_thick0"]) / C["brow_thick_au04"]
    au02 = (float(np.mean(inner)) - C["brow_inner0"]) / C["brow_inner_au02"]
    s_sum = (C["brow_bottom0"] - float(np.mean(bottom))) / C["brow_lift"] - 5.0
    out[_A["AU04"]] = au04
    out[_A["AU02"]] = au02
    out[_A["AU01"]] = s_sum - au02 + au04

    # cheek marks: width from mass with known height
    out[_A["AU06"]] = cheek.sum() * area / 2 / C["cheek_h"] / C["cheek_w_au06"]

    # lips: width from mass with known thickness, edge from the row profile
    def lip(region_img, thick):
        wp = region_img.sum() / (thick * s)
        edge = _low_edge(region_img.sum(axis=1) / wp, thick * s) if wp > 0 else None
        if edge is None:
            raise StructureNotFound("mouth not found")
        return wp / s, edge

    uw, top = lip(ulip, C["ulip_thick"])
    ub = (top - cy) / s + C["ulip_thick"]
    lw, lt = lip(llip, C["llip_thick"])
    lt = (lt - cy) / s
    au20 = (lw - C["llip_w0"]) / C["llip_w_au20"]
    out[_A["AU20"]] = au20
    out[_A["AU12"]] = (uw - C["ulip_w0"]) / C["ulip_w_gain"] - au20
    out[_A["AU25"]] = (C["ulip_bottom0"] - ub) / C["ulip_au25"]
    out[_A["AU26"]] = (lt - C["llip_top0"]) / C["llip_au26"]
    return out, INVERTIBLE_MASK.copy()


# ---------------------------------------------------------------- files

def renderer_spec_text() -> str:
    lines = [f"{k} = {v!r}" for k, v in COEF.items()]
    lines += [f"head_intensity = {HEAD!r}", "feature_intensity = 1.0", f"base_resolution = {BASE!r}",
              f"supersample = {SUPERSAMPLE}", "invertible = " + ",".join(INVERTIBLE_AUS + ("pose_Rx", "pose_Ry", "pose_Rz"))]
    return "\n".join(lines) + "\n"


def write_pgm(path, img) -> None:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("PGM frames are 2-D")
    data = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = data.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while raw[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported")
    data = raw[pos + 1:pos + 1 + w * h]
    if len(data) != w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0


def write_frames(directory, images, fps: float = 25.0) -> None:
    """``frame_%05d.pgm`` files, ``index.txt`` (fps then file order) and ``renderer_spec.txt``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names = []
    for k, img in enumerate(images):
        name = f"frame_{k:05d}.pgm"
        write_pgm(d / name, img)
        names.append(name)
    (d / "index.txt").write_text(f"fps={fps:g}\n" + "\n".join(names) + "\n")
    (d / "renderer_spec.txt").write_text(renderer_spec_text())


def read_frames(directory):
    d = Path(directory)
    lines = (d / "index.txt").read_text().splitlines()
    fps = float(lines[0].split("=", 1)[1])
    return np.stack([read_pgm(d / n) for n in lines[1:]]), fps


def sequence_images(seq: AuPoseSequence, stats: NormStats, res: int = 32):
    """(conditioning images, rendered targets) for a whole sequence."""
    return conditioning_batch(seq.frames, stats, res), render_sequence(seq.frames, res)
