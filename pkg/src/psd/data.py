"""Image ingestion, patch sampling and recognition preprocessing."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import FormatError, InputError, PreconditionError

# 9 / 5.655: about three standard deviations inside the window radius
GAUSS_SIGMA = 1.591
STD_FLOOR = 1e-8


@dataclass
class PatchSet:
    patches: np.ndarray  # (N, k*k), row-major flattening
    patch_side: int
    image_ids: np.ndarray = field(default=None)
    coords: np.ndarray = field(default=None)  # (N, 2) top-left (row, col)

    def __len__(self):
        return len(self.patches)


def _read_token(buf: bytes, pos: int):
    """Next whitespace-delimited header token, skipping ``#`` comments."""
    n = len(buf)
    while pos < n:
        c = buf[pos : pos + 1]
        if c.isspace():
            pos += 1
        elif c == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError(f"PGM header ended unexpectedly at byte offset {start}")
    return buf[start:pos], pos


def load_pgm(buf: bytes) -> np.ndarray:
    """Decode a binary (P5) PGM with maxval <= 255 into floats in [0, 1]."""
    if buf[:2] != b"P5":
        raise FormatError(f"bad PGM magic {buf[:2]!r} at byte offset 0, expected b'P5'")
    pos = 2
    fields = []
    for name in ("width", "height", "maxval"):
        tok, end = _read_token(buf, pos)
        if not tok.isdigit():
            raise FormatError(f"PGM {name} {tok!r} at byte offset {end - len(tok)} is not an integer")
        fields.append(int(tok))
        pos = end
    width, height, maxval = fields
    if not 0 < maxval <= 255:
        raise FormatError(f"PGM maxval {maxval} at byte offset {pos} not in 1..255")
    if width < 1 or height < 1:
        raise FormatError(f"PGM dimensions {width}x{height} must be positive")
    pos += 1  # exactly one whitespace byte separates header from raster
    expected = width * height
    actual = max(len(buf) - pos, 0)
    if actual < expected:
        raise FormatError(
            f"truncated PGM raster at byte offset {pos}: expected {expected} bytes, got {actual}"
        )
    raster = np.frombuffer(buf, dtype=np.uint8, count=expected, offset=pos)
    return raster.reshape(height, width).astype(np.float64) / maxval


def encode_pgm(img) -> bytes:
    """Encode an image with values in [0, 1] as an 8-bit P5 PGM."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    pixels = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return f"P5\n{w} {h}\n255\n".encode() + pixels.tobytes()


def extract_patches(img, k: int, count: int, seed: int, image_id: int = 0) -> PatchSet:
    """Draw ``count`` k-by-k patches at uniformly random top-left corners."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    if k < 1 or k > min(h, w):
        raise PreconditionError(f"patch side {k} does not fit image of shape {img.shape}")
    if count < 1:
        raise PreconditionError(f"patch count must be >= 1, got {count}")
    rng = np.random.default_rng(seed)
    rows = rng.integers(0, h - k + 1, size=count)
    cols = rng.integers(0, w - k + 1, size=count)
    windows = np.lib.stride_tricks.sliding_window_view(img, (k, k))
    patches = windows[rows, cols].reshape(count, k * k).copy()
    return PatchSet(
        patches=patches,
        patch_side=k,
        image_ids=np.full(count, image_id),
        coords=np.stack([rows, cols], axis=1),
    )


def normalize_patch(p) -> np.ndarray:
    """Zero mean, unit population std along the last axis; flat patches map to 0."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-1] < 2:
        raise PreconditionError(f"patch length must be >= 2, got {p.shape[-1]}")
    centered = p - p.mean(axis=-1, keepdims=True)
    std = np.sqrt((centered * centered).mean(axis=-1, keepdims=True))
    flat = std < STD_FLOOR
    out = centered / np.where(flat, 1.0, std)
    return np.where(flat, 0.0, out)


def gaussian_window(side: int = 9, sigma: float = GAUSS_SIGMA) -> np.ndarray:
    if side < 1 or side % 2 == 0:
        raise PreconditionError(f"window side must be a positive odd number, got {side}")
    if not sigma > 0:
        raise PreconditionError(f"sigma must be > 0, got {sigma}")
    r = np.arange(side) - side // 2
    w = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2.0 * sigma**2))
    return w / w.sum()


def _interp_matrix(n_out, n_in):
    # half-pixel-centre mapping, clamped at the borders
    scale = n_out / n_in
    src = np.clip((np.arange(n_out) + 0.5) / scale - 0.5, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    mat = np.zeros((n_out, n_in))
    np.add.at(mat, (np.arange(n_out), lo), 1.0 - frac)
    np.add.at(mat, (np.arange(n_out), hi), frac)
    return mat


def resize_bilinear(img, out_h: int, out_w: int) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return _interp_matrix(out_h, img.shape[0]) @ img @ _interp_matrix(out_w, img.shape[1]).T


def resize_long_side(img, long_side: int) -> np.ndarray:
    h, w = img.shape
    scale = long_side / max(h, w)
    return resize_bilinear(img, max(1, round(h * scale)), max(1, round(w * scale)))


def local_normalize(img, window=None) -> np.ndarray:
    """Subtract the Gaussian-weighted local mean, divide by the local norm when it exceeds 1.

    Outside the image is treated as missing: the window weights are
    renormalized over in-bounds pixels.
    """
    img = np.asarray(img, dtype=np.float64)
    if window is None:
        window = gaussian_window()
    coverage = ndimage.correlate(np.ones_like(img), window, mode="constant", cval=0.0)
    mean = ndimage.correlate(img, window, mode="constant", cval=0.0) / coverage
    v = img - mean
    norm = np.sqrt(ndimage.correlate(v * v, window, mode="constant", cval=0.0) / coverage)
    return v / np.maximum(norm, 1.0)


def center_canvas(img, size: int) -> np.ndarray:
    """Center ``img`` on a size-by-size zero canvas, cropping centrally if larger."""
    h, w = img.shape
    out = np.zeros((size, size))
    src_r, dst_r = max((h - size) // 2, 0), max((size - h) // 2, 0)
    src_c, dst_c = max((w - size) // 2, 0), max((size - w) // 2, 0)
    rh, rw = min(h, size), min(w, size)
    out[dst_r : dst_r + rh, dst_c : dst_c + rw] = img[src_r : src_r + rh, src_c : src_c + rw]
    return out


def preprocess_recognition(img, long_side: int = 151, pad_to: int = 143, window=None) -> np.ndarray:
    """Resize, globally standardize, locally normalize and pad a gray image."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise InputError(f"need a non-empty gray image, got shape {img.shape}")
    img = resize_long_side(img, long_side)
    img = img - img.mean()
    img = img / max(img.std(), STD_FLOOR)
    img = local_normalize(img, window)
    return center_canvas(img, pad_to)


def patches_from_images(images, k: int, count: int, seed: int, normalize: bool = True) -> PatchSet:
    """Sample ``count`` patches spread as evenly as possible over ``images``."""
    if not images:
        raise InputError("no images given")
    seeds = np.random.SeedSequence(seed).generate_state(len(images))
    share = [count // len(images) + (i < count % len(images)) for i in range(len(images))]
    sets = [
        extract_patches(img, k, c, int(s), image_id=i)
        for i, (img, c, s) in enumerate(zip(images, share, seeds))
        if c > 0
    ]
    patches = np.concatenate([s.patches for s in sets])
    return PatchSet(
        patches=normalize_patch(patches) if normalize else patches,
        patch_side=k,
        image_ids=np.concatenate([s.image_ids for s in sets]),
        coords=np.concatenate([s.coords for s in sets]),
    )
