"""Intensity images from event windows.

A recurrent reconstructor maps ``(window, state) -> (image, new state)``.
The built-in one is a leaky integrator: every event adds ``p * C`` to its
pixel's log-intensity estimate, after first decaying that pixel toward the
current spatial mean with rate ``lambda`` per second.  Frames produced by
an external reconstructor can be loaded through a manifest instead.
"""

import math
import os
from dataclasses import dataclass

import numba
import numpy as np

from .errors import MissingFile, NonMonotoneManifest, OutOfOrderWindow, UnsupportedImageFormat
from .fileio import read_image

NEVER = np.iinfo(np.int64).min


@dataclass(frozen=True, eq=False)
class IntensityImage:
    values: np.ndarray  # (h, w) in [0, 1]
    k: int
    t_mid: int


@dataclass(frozen=True)
class IntegratorConfig:
    C: float = 0.1
    decay: float = 0.1  # 1/s, toward the spatial mean
    low_pct: float = 1.0
    high_pct: float = 99.0

    def __post_init__(self):
        if not self.C > 0:
            raise ValueError("contrast step must be positive")
        if self.decay < 0:
            raise ValueError("decay rate must be non-negative")
        if not 0 <= self.low_pct < self.high_pct <= 100:
            raise ValueError("need 0 <= low percentile < high percentile <= 100")


@dataclass(frozen=True, eq=False)
class ReconState:
    log_surface: np.ndarray  # (h, w)
    last_update: np.ndarray  # (h, w) int64 us, NEVER if untouched
    t: int  # latest event time consumed, NEVER for a fresh state
    norm_low: float = math.nan
    norm_high: float = math.nan

    @property
    def shape(self):
        return self.log_surface.shape


def _frozen(a):
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


def init_state(geometry):
    return ReconState(
        _frozen(np.zeros(geometry.shape)),
        _frozen(np.full(geometry.shape, NEVER, dtype=np.int64)),
        NEVER,
    )


@numba.njit(cache=True)
def _integrate(L, last, x, y, t, p, C, decay):
    w = L.shape[1]
    npix = L.size
    Lf = L.ravel()
    lf = last.ravel()
    total = Lf.sum()
    for i in range(len(t)):
        j = y[i] * w + x[i]
        if decay > 0.0 and lf[j] != NEVER:
            f = math.exp(-decay * (t[i] - lf[j]) * 1e-6)
            mean = total / npix
            old = Lf[j]
            Lf[j] = mean + (old - mean) * f
            total += Lf[j] - old
        Lf[j] += p[i] * C
        total += p[i] * C
        lf[j] = t[i]


def _decay_all(L, last, t_end, decay):
    touched = last != NEVER
    if decay <= 0 or not np.any(touched):
        return
    mean = L.mean()
    f = np.exp(-decay * (t_end - last[touched]) * 1e-6)
    L[touched] = mean + (L[touched] - mean) * f
    last[touched] = t_end


def integrate_window(window, state, config):
    """Advance the log surface over one window; returns the raw surface and new state."""
    ev = window.events
    if state.t != NEVER and window.t_start < state.t:
        raise OutOfOrderWindow(f"window {window.k} starts at {window.t_start} us, before state time {state.t} us")
    L = np.array(state.log_surface, dtype=np.float64)
    last = np.array(state.last_update, dtype=np.int64)
    _integrate(L, last, ev.x, ev.y, ev.t, ev.p, float(config.C), float(config.decay))
    _decay_all(L, last, window.t_end, config.decay)
    return L, last


def reconstruct_window(window, state, config=IntegratorConfig()):
    """One recurrence step: ``(window, state) -> (image, new state)``.

    The input state is left untouched.
    """
    L, last = integrate_window(window, state, config)
    img, lo, hi = _normalize(L, config.low_pct, config.high_pct)
    new_state = ReconState(_frozen(L), _frozen(last), window.t_end, lo, hi)
    return IntensityImage(_frozen(img), window.k, window.t_mid), new_state


def _normalize(surface, low_pct, high_pct):
    s = np.asarray(surface, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise ValueError("log surface must be finite")
    lo = float(np.percentile(s, low_pct, method="nearest"))
    hi = float(np.percentile(s, high_pct, method="nearest"))
    if hi > lo:
        out = np.clip((s - lo) / (hi - lo), 0.0, 1.0)
    else:
        # information-free spread: constant maps to mid-grey, outliers to the ends
        out = 0.5 + 0.5 * np.sign(s - lo)
    return out, lo, hi


def normalize_image(surface, low_pct=1.0, high_pct=99.0, k=0, t_mid=0):
    """Affine map of the ``low_pct``/``high_pct`` percentiles onto 0/1, clamped.

    Percentiles use nearest-rank selection.  A constant surface maps to 0.5.
    """
    img, _, _ = _normalize(surface, low_pct, high_pct)
    return IntensityImage(_frozen(img), k, t_mid)


def reconstruct_stream(windows, geometry, config=IntegratorConfig(), state=None):
    """Run the recurrence over a window sequence; returns (images, final state)."""
    state = init_state(geometry) if state is None else state
    images = []
    for win in windows:
        img, state = reconstruct_window(win, state, config)
        images.append(img)
    return images, state


def _parse_manifest_time(tok):
    if "." in tok or "e" in tok.lower():
        return int(round(float(tok) * 1e6))
    return int(tok)


def load_external_frames(manifest_path):
    """Load frames listed as ``t path`` lines (t in integer us or decimal s).

    Relative paths resolve against the manifest's directory.  PGM values are
    divided by their max value; float PFM frames outside [0, 1] are min-max
    rescaled.
    """
    manifest_path = os.fspath(manifest_path)
    if not os.path.exists(manifest_path):
        raise MissingFile(manifest_path)
    base = os.path.dirname(os.path.abspath(manifest_path))
    entries = []
    with open(manifest_path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            tok, _, rel = line.partition(" ")
            try:
                t = _parse_manifest_time(tok)
            except ValueError:
                raise NonMonotoneManifest(f"line {lineno}: bad timestamp {tok!r}") from None
            entries.append((t, rel.strip()))
    for (ta, _), (tb, _) in zip(entries[:-1], entries[1:]):
        if tb <= ta:
            raise NonMonotoneManifest(f"timestamps not increasing: {ta} then {tb}")
    images = []
    for k, (t, rel) in enumerate(entries):
        path = rel if os.path.isabs(rel) else os.path.join(base, rel)
        if not os.path.exists(path):
            raise MissingFile(path)
        img = np.asarray(read_image(path), dtype=np.float64)
        if img.ndim == 3:
            raise UnsupportedImageFormat(f"{path}: colour frames not supported")
        lo, hi = float(img.min()), float(img.max())
        if lo < 0 or hi > 1:
            img = (img - lo) / (hi - lo) if hi > lo else np.full_like(img, 0.5)
        images.append(IntensityImage(_frozen(img), k, t))
    return images
