"""Fusion quality measures.

Full-reference: SAM (degrees), ERGAS, the universal image quality index Q
averaged over bands, and its hypercomplex extension Q2^n where each pixel's
spectrum is one 2^n-dimensional number built by the Cayley-Dickson
construction. No-reference: spectral distortion D_lambda, spatial
distortion D_S and the combined QNR.

Windowed statistics use non-overlapping blocks (default 32x32) with
unbiased (ddof=1) variances; windows with a vanishing denominator are
skipped, and a measure whose windows all degenerate raises instead of
fabricating a value.
"""

import math
from dataclasses import dataclass

import numpy as np

from .dsp import lowpass_decimate, mtf_gaussian_kernel
from .raster import MultibandImage

REPORT_FIELDS = ("SAM", "ERGAS", "Q", "Q2n", "Dlambda", "Ds", "QNR")


class DegenerateInputError(ValueError):
    """All windows of a windowed measure were degenerate."""


@dataclass(frozen=True)
class QualityReport:
    """One table row; fields not computed by a protocol stay None."""

    sam_deg: float = None
    ergas: float = None
    q_avg: float = None
    q2n: float = None
    d_lambda: float = None
    d_s: float = None
    qnr: float = None

    def values(self):
        return (self.sam_deg, self.ergas, self.q_avg, self.q2n,
                self.d_lambda, self.d_s, self.qnr)


def report_csv(rows, path):
    """Write (name, QualityReport) pairs as a CSV table."""
    lines = [",".join(("method",) + REPORT_FIELDS)]
    for name, report in rows:
        cells = [name]
        for v in report.values():
            cells.append("" if v is None else "%.9g" % v)
        lines.append(",".join(cells))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _as_bands(x):
    if isinstance(x, MultibandImage):
        x = x.data
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise ValueError("expected (bands, H, W) or (H, W) data")
    return x


def _pair(pred, ref):
    p = _as_bands(pred)
    r = _as_bands(ref)
    if p.shape != r.shape:
        raise ValueError("shape mismatch: %r vs %r" % (p.shape, r.shape))
    return p, r


# ---------------------------------------------------------------------------
# full-reference

def sam_degrees(pred, ref):
    """Mean per-pixel spectral angle; pixels with a zero vector on either
    side are skipped (0 if every pixel is skipped)."""
    p, r = _pair(pred, ref)
    dot = (p * r).sum(axis=0)
    na = np.sqrt((p * p).sum(axis=0))
    nb = np.sqrt((r * r).sum(axis=0))
    valid = (na > 0) & (nb > 0)
    if not valid.any():
        return 0.0
    c = np.clip(dot[valid] / (na[valid] * nb[valid]), -1.0, 1.0)
    return float(np.degrees(np.arccos(c).mean()))


def ergas(pred, ref, ratio):
    """100/ratio * sqrt(mean over bands of (RMSE_b / mean(ref_b))^2)."""
    p, r = _pair(pred, ref)
    acc = 0.0
    for b in range(r.shape[0]):
        mu = r[b].mean()
        if mu == 0:
            raise ValueError("ERGAS undefined: reference band %d has zero mean" % b)
        acc += ((p[b] - r[b]) ** 2).mean() / (mu * mu)
    return float(100.0 / ratio * math.sqrt(acc / r.shape[0]))


def _block_view(plane, block):
    h, w = plane.shape
    if block > h or block > w:
        raise ValueError("block %d larger than image %dx%d" % (block, w, h))
    nby, nbx = h // block, w // block
    v = plane[:nby * block, :nbx * block]
    v = v.reshape(nby, block, nbx, block).transpose(0, 2, 1, 3)
    return v.reshape(nby * nbx, block * block)


def _window_q(a, b):
    """Signed Q of two flattened windows; None when degenerate."""
    n = a.size
    mu_a = a.mean()
    mu_b = b.mean()
    da = a - mu_a
    db = b - mu_b
    var_a = (da * da).sum() / (n - 1)
    var_b = (db * db).sum() / (n - 1)
    cov = (da * db).sum() / (n - 1)
    d1 = var_a + var_b
    d2 = mu_a * mu_a + mu_b * mu_b
    if d1 == 0 or d2 == 0:
        return None
    return 4.0 * cov * mu_a * mu_b / (d1 * d2)


def uiqi_q(a, b, block=32):
    """Universal image quality index over non-overlapping blocks; multiband
    input is reduced by averaging the per-band values."""
    pa, pb = _pair(a, b)
    band_values = []
    for band in range(pa.shape[0]):
        wa = _block_view(pa[band], block)
        wb = _block_view(pb[band], block)
        vals = [q for q in (_window_q(wa[i], wb[i]) for i in range(len(wa)))
                if q is not None]
        if not vals:
            raise DegenerateInputError("all %dx%d windows degenerate" % (block, block))
        band_values.append(float(np.mean(vals)))
    return float(np.mean(band_values))


# ---------------------------------------------------------------------------
# hypercomplex Q

def hyper_conj(x):
    """Hypercomplex conjugate along the last axis: negate all but slot 0."""
    out = x.copy()
    out[..., 1:] = -out[..., 1:]
    return out


def hyper_mult(x, y):
    """Cayley-Dickson product along the last axis (length a power of two).

    Recursion on halves (a,b)*(c,d) = (a*c - conj(d)*b, conj(a)*conj(d) + c*conj(b));
    dimension 1 is plain real multiplication.
    """
    d = x.shape[-1]
    if d == 1:
        return x * y
    half = d // 2
    a, b = x[..., :half], x[..., half:]
    c, e = y[..., :half], y[..., half:]
    first = hyper_mult(a, c) - hyper_mult(hyper_conj(e), b)
    second = hyper_mult(hyper_conj(a), hyper_conj(e)) + hyper_mult(c, hyper_conj(b))
    return np.concatenate([first, second], axis=-1)


def _pad_pow2(p):
    bands = p.shape[0]
    target = 1 << max(0, (bands - 1).bit_length())
    if target == bands:
        return p
    pad = np.zeros((target - bands,) + p.shape[1:], dtype=p.dtype)
    return np.concatenate([p, pad], axis=0)


def q2n(pred, ref, block=32):
    """Hypercomplex generalization of Q over non-overlapping blocks.

    Bands are zero-padded to the next power of two; per block the modulus
    of the unbiased hypercomplex covariance is combined with the variance
    and mean terms of Q. A single band stays in real arithmetic, where the
    value keeps its sign and equals `uiqi_q`.
    """
    p, r = _pair(pred, ref)
    p = _pad_pow2(p)
    r = _pad_pow2(r)
    bands = p.shape[0]
    if bands == 1:
        return uiqi_q(p[0], r[0], block)

    # (blocks, pixels, bands) with the reference first (order matters only
    # by convention; the modulus is symmetric)
    wp = np.stack([_block_view(p[b], block) for b in range(bands)], axis=-1)
    wr = np.stack([_block_view(r[b], block) for b in range(bands)], axis=-1)
    n = block * block
    temp = n / (n - 1.0)

    m_r = wr.mean(axis=1)
    m_p = wp.mean(axis=1)
    mod2_mr = (m_r * m_r).sum(axis=-1)
    mod2_mp = (m_p * m_p).sum(axis=-1)
    var_r = temp * ((wr * wr).sum(axis=-1).mean(axis=1) - mod2_mr)
    var_p = temp * ((wp * wp).sum(axis=-1).mean(axis=1) - mod2_mp)

    cov = temp * (hyper_mult(wr, hyper_conj(wp)).mean(axis=1)
                  - hyper_mult(m_r, hyper_conj(m_p)))
    mod_cov = np.sqrt((cov * cov).sum(axis=-1))

    d1 = var_r + var_p
    d2 = mod2_mr + mod2_mp
    keep = (d1 != 0) & (d2 != 0)
    if not keep.any():
        raise DegenerateInputError("all %dx%d blocks degenerate" % (block, block))
    vals = (4.0 * mod_cov[keep] * np.sqrt(mod2_mr[keep]) * np.sqrt(mod2_mp[keep])
            / (d1[keep] * d2[keep]))
    return float(vals.mean())


# ---------------------------------------------------------------------------
# no-reference

def d_lambda(fused, ms_lr, p=1, block=32):
    """Spectral distortion: inter-band Q drift between fusion and MS."""
    f = _as_bands(fused)
    m = _as_bands(ms_lr)
    nb = f.shape[0]
    if nb != m.shape[0]:
        raise ValueError("band count mismatch")
    if nb < 2:
        raise ValueError("D_lambda needs at least two bands")
    acc = 0.0
    for l in range(nb):
        for r in range(nb):
            if l == r:
                continue
            qf = uiqi_q(f[l], f[r], block)
            qm = uiqi_q(m[l], m[r], block)
            acc += abs(qf - qm) ** p
    return float((acc / (nb * (nb - 1))) ** (1.0 / p))


def d_s(fused, pan, ms_lr, pan_lr, q=1, block=32):
    """Spatial distortion: band-to-PAN Q drift across the two scales."""
    f = _as_bands(fused)
    m = _as_bands(ms_lr)
    p_hi = _as_bands(pan)[0]
    p_lo = _as_bands(pan_lr)[0]
    if f.shape[0] != m.shape[0]:
        raise ValueError("band count mismatch")
    acc = 0.0
    for l in range(f.shape[0]):
        qf = uiqi_q(f[l], p_hi, block)
        qm = uiqi_q(m[l], p_lo, block)
        acc += abs(qf - qm) ** q
    return float((acc / f.shape[0]) ** (1.0 / q))


def qnr(dl, ds, alpha=1.0, beta=1.0):
    return float((1.0 - dl) ** alpha * (1.0 - ds) ** beta)


# ---------------------------------------------------------------------------
# protocols

def evaluate_reduced(fused_lr, ms_original, ratio, block=32):
    """Reference-based row: the fusion ran on degraded inputs, so the
    original MS is the ground truth."""
    return QualityReport(
        sam_deg=sam_degrees(fused_lr, ms_original),
        ergas=ergas(fused_lr, ms_original, ratio),
        q_avg=uiqi_q(fused_lr, ms_original, block),
        q2n=q2n(fused_lr, ms_original, block),
    )


def evaluate_full(fused, ms_lr, pan, profile, block=32):
    """No-reference row at native resolution; PAN is MTF-degraded to the MS
    grid for the spatial term."""
    pan_taps = mtf_gaussian_kernel(profile.ratio, profile.gnyq_pan)
    pan_img = pan if isinstance(pan, MultibandImage) else MultibandImage(
        _as_bands(pan).astype(np.float32))
    pan_lr = lowpass_decimate(pan_img, pan_taps, profile.ratio)
    dl = d_lambda(fused, ms_lr, block=block)
    ds = d_s(fused, pan_img, ms_lr, pan_lr, block=block)
    return QualityReport(d_lambda=dl, d_s=ds, qnr=qnr(dl, ds))
