"""Binary scalar-grid files and quick-look raster exports.

Grid files carry one float64 array sampled on a regular node grid over an
axis-aligned box.  Layout (all little-endian):

    bytes 0..3   magic b"CGRD"
    u32          format version (1)
    u32          ndim
    u32 * ndim   nodes per axis
    f64 * ndim   box lower corner
    f64 * ndim   box upper corner
    f64 * prod   samples, C order (last axis fastest)

Renders are plain binary PGM/PPM so they open everywhere without extra
dependencies.
"""

import struct

import numpy as np

from .errors import SpecificationError

MAGIC = b"CGRD"
VERSION = 1


def save_grid(path, values, lo=None, hi=None):
    """Write `values` (any-dimensional float array) with its box bounds."""
    values = np.ascontiguousarray(values, dtype="<f8")
    ndim = values.ndim
    lo = np.zeros(ndim) if lo is None else np.asarray(lo, dtype=float)
    hi = np.ones(ndim) if hi is None else np.asarray(hi, dtype=float)
    if lo.shape != (ndim,) or hi.shape != (ndim,):
        raise SpecificationError(
            f"bounds shape must be ({ndim},), got {lo.shape} / {hi.shape}")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, ndim))
        fh.write(struct.pack(f"<{ndim}I", *values.shape))
        fh.write(lo.astype("<f8").tobytes())
        fh.write(hi.astype("<f8").tobytes())
        fh.write(values.tobytes())


def load_grid(path):
    """Read a grid file; returns (values, lo, hi)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise SpecificationError(f"{path}: not a grid file (bad magic)")
    version, ndim = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise SpecificationError(f"{path}: unsupported grid version {version}")
    if not 1 <= ndim <= 8:
        raise SpecificationError(f"{path}: implausible ndim {ndim}")
    off = 12
    shape = struct.unpack_from(f"<{ndim}I", raw, off)
    off += 4 * ndim
    lo = np.frombuffer(raw, dtype="<f8", count=ndim, offset=off).copy()
    off += 8 * ndim
    hi = np.frombuffer(raw, dtype="<f8", count=ndim, offset=off).copy()
    off += 8 * ndim
    count = int(np.prod(shape))
    values = np.frombuffer(raw, dtype="<f8", count=count, offset=off)
    if len(raw) != off + 8 * count:
        raise SpecificationError(f"{path}: size mismatch (truncated or padded)")
    return values.reshape(shape).copy(), lo, hi


def render_pgm(path, values, vmin=None, vmax=None):
    """Grayscale render of a 2-D array (x right, y up)."""
    img = _to_bytes(values, vmin, vmax)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        fh.write(img.tobytes())


def render_ppm(path, values, center=None, span=None):
    """Diverging blue-white-red render around `center` (default: midrange)."""
    values = _as_image(values)
    if center is None:
        center = 0.5 * (float(values.min()) + float(values.max()))
    if span is None:
        span = max(float(np.max(np.abs(values - center))), 1e-300)
    t = np.clip((values - center) / span, -1.0, 1.0)
    rgb = np.empty(values.shape + (3,), dtype=np.uint8)
    up = np.clip(t, 0.0, None)          # toward red
    down = np.clip(-t, 0.0, None)       # toward blue
    rgb[..., 0] = np.round(255 * (1.0 - down)).astype(np.uint8)
    rgb[..., 1] = np.round(255 * (1.0 - np.maximum(up, down))).astype(np.uint8)
    rgb[..., 2] = np.round(255 * (1.0 - up)).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (rgb.shape[1], rgb.shape[0]))
        fh.write(rgb.tobytes())


def _as_image(values):
    values = np.asarray(values, dtype=float)
    if values.ndim != 2:
        raise SpecificationError(f"render expects a 2-D array, got {values.shape}")
    # array index (i, j) = (x, y); flip so y points up in the image
    return values.T[::-1]


def _to_bytes(values, vmin, vmax):
    img = _as_image(values)
    vmin = float(img.min()) if vmin is None else vmin
    vmax = float(img.max()) if vmax is None else vmax
    if vmax <= vmin:
        return np.zeros(img.shape, dtype=np.uint8)
    t = np.clip((img - vmin) / (vmax - vmin), 0.0, 1.0)
    return np.round(255 * t).astype(np.uint8)
