"""Multiband raster container, MBIR on-disk format, previews and tiling.

MBIR layout (little-endian): magic b"MBIR", version u16, width u32,
height u32, bands u32, nominal bit depth u16, then band-sequential
(planar) float32 samples, row-major within each band.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"MBIR"
VERSION = 1
_HEADER = struct.Struct("<4sHIIIH")

# refuse absurd headers before allocating (2**31 float32 = 8 GiB)
MAX_VALUES = 2 ** 31


class RasterError(Exception):
    """Base class for raster format failures."""


class BadMagicError(RasterError):
    pass


class TruncatedPayloadError(RasterError):
    pass


class DimensionOverflowError(RasterError):
    pass


@dataclass(frozen=True)
class MultibandImage:
    """Planar multiband raster; `data` is float32 (bands, height, width).

    Immutable: the array is frozen at construction so images can be shared
    across workers without copies.
    """

    data: np.ndarray
    nominal_bit_depth: int = 11

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 3:
            raise ValueError("image data must be (bands, height, width), got %r" % (arr.shape,))
        if arr.size == 0:
            raise ValueError("image has no pixels")
        if not np.isfinite(arr).all():
            raise ValueError("image contains non-finite values")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def bands(self):
        return self.data.shape[0]

    @property
    def height(self):
        return self.data.shape[1]

    @property
    def width(self):
        return self.data.shape[2]

    def band(self, i):
        return self.data[i]


@dataclass
class TrainingSample:
    """One input/target tile pair; target is the full image or the residual."""

    input: MultibandImage
    target: MultibandImage
    target_kind: str = "full"  # "full" | "residual"

    def __post_init__(self):
        if self.target_kind not in ("full", "residual"):
            raise ValueError("target_kind must be 'full' or 'residual'")
        if (self.input.height, self.input.width) != (self.target.height, self.target.width):
            raise ValueError("input and target tiles must share width/height")


def write_raster(img, path):
    """Write `img` to `path` in MBIR format (byte-exact, see module docstring)."""
    header = _HEADER.pack(MAGIC, VERSION, img.width, img.height, img.bands,
                          img.nominal_bit_depth)
    payload = img.data.astype("<f4", copy=False).tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_raster(path):
    """Read an MBIR file back into a MultibandImage."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise TruncatedPayloadError("file shorter than MBIR header")
    magic, version, width, height, bands, bit_depth = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagicError("not an MBIR file (magic %r)" % magic)
    if version != VERSION:
        raise RasterError("unsupported MBIR version %d" % version)
    if min(width, height, bands) == 0:
        raise DimensionOverflowError("zero dimension in header")
    count = width * height * bands
    if count > MAX_VALUES:
        raise DimensionOverflowError(
            "header claims %dx%dx%d values, beyond the %d limit" % (width, height, bands, MAX_VALUES))
    expected = _HEADER.size + 4 * count
    if len(raw) < expected:
        raise TruncatedPayloadError(
            "payload truncated: header promises %d bytes, file has %d" % (expected, len(raw)))
    if len(raw) > expected:
        raise RasterError("trailing bytes after payload")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(bands, height, width)
    if not np.isfinite(data).all():
        raise RasterError("payload contains non-finite values")
    return MultibandImage(data.copy(), nominal_bit_depth=bit_depth)


def percentile_nearest_rank(values, pct):
    """Nearest-rank percentile: smallest value with >= pct% of samples at or below it."""
    if not 0 <= pct <= 100:
        raise ValueError("percentile out of [0, 100]")
    flat = np.sort(np.asarray(values), axis=None)
    rank = max(1, int(np.ceil(pct / 100.0 * flat.size)))
    return float(flat[rank - 1])


def export_rgb_preview(img, band_triplet, low_pct, high_pct, path):
    """Write an 8-bit binary PPM preview of three bands.

    Each selected band is linearly stretched between its nearest-rank
    low/high percentiles and clamped to [0, 255]; a constant band maps to
    mid-gray 128.
    """
    if len(band_triplet) != 3:
        raise ValueError("band_triplet must name exactly three bands")
    for b in band_triplet:
        if not 0 <= b < img.bands:
            raise ValueError("band index %d out of range (bands=%d)" % (b, img.bands))
    if not (0 <= low_pct < high_pct <= 100):
        raise ValueError("need 0 <= low_pct < high_pct <= 100")

    channels = []
    for b in band_triplet:
        band = img.band(b)
        lo = percentile_nearest_rank(band, low_pct)
        hi = percentile_nearest_rank(band, high_pct)
        if hi == lo:
            chan = np.full(band.shape, 128, dtype=np.uint8)
        else:
            scaled = (band.astype(np.float64) - lo) / (hi - lo) * 255.0
            chan = np.clip(np.rint(scaled), 0, 255).astype(np.uint8)
        channels.append(chan)
    rgb = np.stack(channels, axis=-1)  # (H, W, 3)
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (img.width, img.height))
        fh.write(rgb.tobytes())


def extract_tiles(ms_up, pan, ref, tile_size, count, seed,
                  indices=None, target_kind="full"):
    """Sample `count` training tiles at uniformly random positions.

    All inputs live on the PAN grid (the MS component already upsampled).
    The tile input stack is [pan, ms_up bands, index bands]; positions are
    drawn with replacement over valid top-left corners, deterministic under
    `seed`.
    """
    h, w = pan.height, pan.width
    parts = [pan.data, ms_up.data]
    if indices is not None:
        parts.append(indices.data)
    for part in parts + [ref.data]:
        if part.shape[1:] != (h, w):
            raise ValueError("inputs not mutually aligned at PAN resolution")
    if tile_size > h or tile_size > w:
        raise ValueError("tile_size %d larger than image %dx%d" % (tile_size, w, h))

    stack = np.concatenate(parts, axis=0)
    rng = np.random.default_rng(seed)
    ys = rng.integers(0, h - tile_size + 1, size=count)
    xs = rng.integers(0, w - tile_size + 1, size=count)
    samples = []
    for y, x in zip(ys, xs):
        tile_in = stack[:, y:y + tile_size, x:x + tile_size]
        tile_ref = ref.data[:, y:y + tile_size, x:x + tile_size]
        samples.append(TrainingSample(
            input=MultibandImage(tile_in.copy(), ms_up.nominal_bit_depth),
            target=MultibandImage(tile_ref.copy(), ms_up.nominal_bit_depth),
            target_kind=target_kind,
        ))
    return samples


def samples_to_arrays(samples):
    """Stack TrainingSamples into (inputs, targets) float32 batch arrays."""
    inputs = np.stack([s.input.data for s in samples]).astype(np.float32)
    targets = np.stack([s.target.data for s in samples]).astype(np.float32)
    return inputs, targets
