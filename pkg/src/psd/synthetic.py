"""Synthetic stand-ins for natural images and video.

The dead-leaves model (occluding discs with power-law radii) reproduces
the edge statistics and roughly 1/f spectrum of natural images, which is
what patch-level dictionary learning cares about.
"""

from __future__ import annotations

import numpy as np


def dead_leaves(size: int, seed: int, n_discs: int = 4000, r_min: float = 1.0, r_max: float = 40.0):
    """Square gray image in [0, 1] built from randomly stacked discs."""
    rng = np.random.default_rng(seed)
    img = np.full((size, size), rng.uniform())
    yy, xx = np.mgrid[0:size, 0:size]
    # radius density proportional to r^-3, sampled by inverse CDF
    u = rng.uniform(size=n_discs)
    radii = (r_min**-2 - u * (r_min**-2 - r_max**-2)) ** -0.5
    centres = rng.uniform(-r_max, size + r_max, size=(n_discs, 2))
    shades = rng.uniform(size=n_discs)
    for (cy, cx), r, s in zip(centres, radii, shades):
        y0, y1 = max(int(cy - r), 0), min(int(cy + r) + 1, size)
        x0, x1 = max(int(cx - r), 0), min(int(cx + r) + 1, size)
        if y0 >= y1 or x0 >= x1:
            continue
        sub_y, sub_x = yy[y0:y1, x0:x1], xx[y0:y1, x0:x1]
        inside = (sub_y - cy) ** 2 + (sub_x - cx) ** 2 <= r * r
        img[y0:y1, x0:x1][inside] = s
    return img


def band_limited_field(height: int, width: int, seed: int, cutoff: float = 0.15, slope: float = 0.0):
    """Zero-mean unit-variance Gaussian field with a low-pass spectrum.

    The amplitude spectrum is ``f**-slope * exp(-f**2 / (2 cutoff**2))``
    with ``f`` in cycles per pixel; ``slope = 1`` gives the natural-image
    1/f falloff below the cutoff.
    """
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((height, width))
    fy = np.fft.fftfreq(height)[:, None]
    fx = np.fft.rfftfreq(width)[None, :]
    f2 = fx**2 + fy**2
    gain = np.exp(-f2 / (2.0 * cutoff**2))
    if slope:
        f2[0, 0] = np.inf
        gain = gain * f2 ** (-slope / 2.0)
    field = np.fft.irfft2(np.fft.rfft2(noise) * gain, s=(height, width))
    field -= field.mean()
    return field / field.std()


def translating_sequence(
    n_frames: int, height: int, width: int, seed: int, step: int = 1, cutoff: float = 0.15, slope: float = 0.0
):
    """Frames of a band-limited texture sliding ``step`` pixels right per frame.

    Returns an array of shape (n_frames, height, width).
    """
    span = width + step * (n_frames - 1)
    field = band_limited_field(height, span, seed, cutoff, slope)
    return np.stack([field[:, t * step : t * step + width] for t in range(n_frames)])
