"""Resolution machinery: MTF-matched low-pass filtering, decimation,
23-tap polynomial upsampling, Wald-protocol degradation and radiometric
indices.

Conventions used throughout the package:
  * boundary handling is half-sample symmetric mirroring (numpy `symmetric`,
    scipy.ndimage `reflect`);
  * decimation by R keeps samples at offset (R-1)//2 + k*R;
  * upsampling places original samples at phase 0 of the fine grid.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .raster import MultibandImage

EPS_INDEX = 1e-9

# 4-band order B,G,R,NIR; 8-band order coastal,B,G,Y,R,red-edge,NIR1,NIR2.
# Pairs (i, j) mean (b_i - b_j) / (b_i + b_j + eps).
INDEX_RECIPE_4 = ((3, 2), (1, 3))                    # NDVI, NDWI
INDEX_RECIPE_8 = ((6, 4), (2, 6), (6, 5), (0, 7))    # NDVI, NDWI, NDRE, coastal/NIR2


@dataclass(frozen=True)
class SensorProfile:
    """Sensor geometry and MTF description driving degradation and presets."""

    name: str
    bands: int
    ratio: int
    gnyq_ms: tuple
    gnyq_pan: float
    nominal_bit_depth: int = 11
    index_recipe: tuple = ()

    def __post_init__(self):
        if self.ratio < 2:
            raise ValueError("ratio must be >= 2")
        if len(self.gnyq_ms) != self.bands:
            raise ValueError("need one MS Nyquist gain per band")
        for g in tuple(self.gnyq_ms) + (self.gnyq_pan,):
            if not 0.0 < g < 1.0:
                raise ValueError("Nyquist gains must lie in (0, 1)")
        expected = {4: 2, 8: 4}.get(self.bands)
        if expected is not None and len(self.index_recipe) != expected:
            raise ValueError("%d-band profile needs %d index definitions"
                             % (self.bands, expected))
        for i, j in self.index_recipe:
            if not (0 <= i < self.bands and 0 <= j < self.bands):
                raise ValueError("index recipe references missing band (%d, %d)" % (i, j))

    @property
    def index_bands(self):
        return len(self.index_recipe)


def _preset(name, bands):
    recipe = INDEX_RECIPE_4 if bands == 4 else INDEX_RECIPE_8
    return SensorProfile(name=name, bands=bands, ratio=4,
                         gnyq_ms=(0.30,) * bands, gnyq_pan=0.15,
                         nominal_bit_depth=11, index_recipe=recipe)


PRESETS = {
    "ik": _preset("ik", 4),
    "ge1": _preset("ge1", 4),
    "wv2": _preset("wv2", 8),
    "wv3": _preset("wv3", 8),
}


def save_profile(profile, path):
    """Serialize a profile as the plain-text key=value config format."""
    lines = [
        "name=%s" % profile.name,
        "bands=%d" % profile.bands,
        "ratio=%d" % profile.ratio,
        "gnyq_ms=%s" % ",".join("%.6g" % g for g in profile.gnyq_ms),
        "gnyq_pan=%.6g" % profile.gnyq_pan,
        "bit_depth=%d" % profile.nominal_bit_depth,
        "indices=%s" % ";".join("%d,%d" % (i, j) for i, j in profile.index_recipe),
    ]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_profile(path):
    kv = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError("bad profile line: %r" % line)
            key, value = line.split("=", 1)
            kv[key.strip()] = value.strip()
    try:
        recipe = tuple(tuple(int(v) for v in pair.split(","))
                       for pair in kv.get("indices", "").split(";") if pair)
        return SensorProfile(
            name=kv["name"],
            bands=int(kv["bands"]),
            ratio=int(kv["ratio"]),
            gnyq_ms=tuple(float(v) for v in kv["gnyq_ms"].split(",")),
            gnyq_pan=float(kv["gnyq_pan"]),
            nominal_bit_depth=int(kv.get("bit_depth", "11")),
            index_recipe=recipe,
        )
    except KeyError as exc:
        raise ValueError("profile file missing key %s" % exc) from exc


def mtf_gaussian_kernel(ratio, gnyq, size=41):
    """1D factor of the separable Gaussian MTF filter, normalized to sum 1.

    sigma = (R/pi) * sqrt(-2 ln gnyq) puts the frequency response at the
    coarse-grid Nyquist f = 1/(2R) exactly at gnyq; the 2D kernel is the
    outer product of these taps with themselves.
    """
    if size % 2 == 0:
        raise ValueError("kernel size must be odd")
    if not 0.0 < gnyq < 1.0:
        raise ValueError("gnyq must lie in (0, 1)")
    sigma = (ratio / math.pi) * math.sqrt(-2.0 * math.log(gnyq))
    half = size // 2
    n = np.arange(-half, half + 1, dtype=np.float64)
    taps = np.exp(-0.5 * (n / sigma) ** 2)
    return taps / taps.sum()


def _filter2_sep(plane, taps):
    """Separable 2D correlation with mirror boundaries, float64 internally."""
    tmp = ndimage.correlate1d(plane.astype(np.float64), taps, axis=0, mode="reflect")
    return ndimage.correlate1d(tmp, taps, axis=1, mode="reflect")


def decimation_offset(ratio):
    return (ratio - 1) // 2


def lowpass_decimate(img, taps, ratio):
    """Mirror-boundary low-pass filtering followed by decimation by `ratio`.

    `taps` is either one 1D separable kernel used for every band or a list
    of per-band kernels.
    """
    if img.height % ratio or img.width % ratio:
        raise ValueError("image dims %dx%d not divisible by ratio %d"
                         % (img.width, img.height, ratio))
    per_band = taps if isinstance(taps, (list, tuple)) else [taps] * img.bands
    if len(per_band) != img.bands:
        raise ValueError("need one kernel per band")
    off = decimation_offset(ratio)
    out = np.empty((img.bands, img.height // ratio, img.width // ratio), dtype=np.float32)
    for b in range(img.bands):
        low = _filter2_sep(img.band(b), per_band[b])
        out[b] = low[off::ratio, off::ratio].astype(np.float32)
    return MultibandImage(out, img.nominal_bit_depth)


def halfband_23tap():
    """Symmetric 23-tap interpolation kernel for one dyadic stage.

    Ideal half-band sinc windowed with Kaiser beta=8; sample-preserving taps
    forced to exact 0/1 and the remaining (odd) taps scaled to sum exactly 1,
    so the stage has DC gain 2 on the zero-interleaved grid, reproduces
    constants, and keeps original samples untouched.
    """
    n = np.arange(-11, 12, dtype=np.float64)
    taps = np.sinc(n / 2.0) * np.kaiser(23, 8.0)
    odd = (np.abs(n) % 2) == 1
    taps[~odd] = 0.0
    taps[n == 0] = 1.0
    taps[odd] /= taps[odd].sum()
    return taps


_HALFBAND = halfband_23tap()


def _upsample2x_axis(arr, axis):
    """One dyadic interpolation stage along `axis` (float64 in/out)."""
    taps = _HALFBAND
    pad = 6  # ceil(11 / 2): coarse samples feeding the widest tap
    arr = np.moveaxis(arr, axis, -1)
    n = arr.shape[-1]
    padded = np.pad(arr, [(0, 0)] * (arr.ndim - 1) + [(pad, pad)], mode="symmetric")
    inter = np.zeros(padded.shape[:-1] + (2 * (n + 2 * pad),), dtype=np.float64)
    inter[..., 0::2] = padded
    full = ndimage.correlate1d(inter, taps, axis=-1, mode="constant")
    out = full[..., 2 * pad:2 * pad + 2 * n]
    return np.moveaxis(out, -1, axis)


def interp23(img, ratio):
    """Polynomial (23-tap half-band) upsampling by a power-of-two ratio."""
    if ratio < 2 or ratio & (ratio - 1):
        raise ValueError("interp23 ratio must be a power of 2, got %d" % ratio)
    data = img.data.astype(np.float64)
    r = ratio
    while r > 1:
        data = _upsample2x_axis(data, axis=1)
        data = _upsample2x_axis(data, axis=2)
        r //= 2
    return MultibandImage(data.astype(np.float32), img.nominal_bit_depth)


def mtf_kernels(profile, size=41):
    """Per-band MS kernels and the PAN kernel for `profile`."""
    ms = [mtf_gaussian_kernel(profile.ratio, g, size) for g in profile.gnyq_ms]
    pan = mtf_gaussian_kernel(profile.ratio, profile.gnyq_pan, size)
    return ms, pan


def wald_degrade(ms, pan, profile):
    """Wald-protocol degradation: returns (ms_lr, pan_lr, reference).

    Both components are MTF-filtered and decimated by the profile ratio;
    the untouched MS input is handed back as the reference.
    """
    r = profile.ratio
    if (pan.height, pan.width) != (ms.height * r, ms.width * r):
        raise ValueError("pan dims must equal ms dims x ratio")
    if ms.bands != profile.bands:
        raise ValueError("MS band count %d does not match profile %d" % (ms.bands, profile.bands))
    ms_taps, pan_taps = mtf_kernels(profile)
    ms_lr = lowpass_decimate(ms, ms_taps, r)
    pan_lr = lowpass_decimate(pan, pan_taps, r)
    return ms_lr, pan_lr, ms


def radiometric_indices(ms, profile):
    """Normalized-difference index bands (b_i - b_j)/(b_i + b_j + eps)."""
    if ms.bands != profile.bands:
        raise ValueError("MS band count %d does not match profile %d" % (ms.bands, profile.bands))
    if not profile.index_recipe:
        raise ValueError("profile %s defines no radiometric indices" % profile.name)
    out = np.empty((profile.index_bands, ms.height, ms.width), dtype=np.float32)
    for k, (i, j) in enumerate(profile.index_recipe):
        bi = ms.band(i).astype(np.float64)
        bj = ms.band(j).astype(np.float64)
        out[k] = ((bi - bj) / (bi + bj + EPS_INDEX)).astype(np.float32)
    return MultibandImage(out, ms.nominal_bit_depth)


def stack_input(pan, ms_up, indices=None):
    """Concatenate the network input stack [PAN, upsampled MS, indices]."""
    parts = [pan.data, ms_up.data]
    if indices is not None:
        parts.append(indices.data)
    for part in parts:
        if part.shape[1:] != pan.data.shape[1:]:
            raise ValueError("stack components disagree on spatial dims")
    return MultibandImage(np.concatenate(parts, axis=0), ms_up.nominal_bit_depth)
