"""Target adaptation and whole-image fusion.

The network always operates on intensities normalized by 2**bit_depth;
files keep their native DN scale. Fine-tuning degrades the target pair once
(MTF low-pass + decimation), so the original MS acts as reference, then
runs a short burst of the regular training loop with mirror padding. Fusion
adds the predicted residual back onto the plainly upsampled MS.
"""

import math
from dataclasses import dataclass

import numpy as np

from .dsp import interp23, radiometric_indices, wald_degrade
from .nn import network_forward
from .optim import TrainConfig, train
from .raster import MultibandImage, extract_tiles, samples_to_arrays

DEFAULT_MEM_BUDGET = 512 * 1024 * 1024  # peak im2col bytes per tile
MIN_TILE = 64


@dataclass
class FinetuneConfig:
    iterations: int = 50
    batch_size: int = 128
    tile_size: int = 33
    max_tiles: int = 4096
    loss: str = "l1"
    lrs: tuple = (1e-4, 1e-4, 1e-5)
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.max_tiles < 1:
            raise ValueError("max_tiles must be >= 1")


def dn_scale(bit_depth):
    return float(2 ** bit_depth)


def normalized(img):
    """Divide by 2**bit_depth (exact in float32: power-of-two scaling)."""
    return MultibandImage(img.data / dn_scale(img.nominal_bit_depth),
                          img.nominal_bit_depth)


def augment_for_spec(spec, profile):
    """Infer from the input width whether the stack carries index bands."""
    plain = 1 + profile.bands
    if spec.in_channels == plain:
        return False
    if spec.in_channels == plain + profile.index_bands and profile.index_bands:
        return True
    raise ValueError("network wants %d input channels; profile %s offers %d or %d"
                     % (spec.in_channels, profile.name, plain,
                        plain + profile.index_bands))


def build_network_components(ms, pan, profile, augment):
    """Upsample MS to the PAN grid and normalize all inputs.

    Returns (pan_n, ms_up_n, indices_n_or_None), each a MultibandImage on
    the PAN grid scaled to DN / 2**bit_depth.
    """
    if pan.bands != 1:
        raise ValueError("pan must be single-band, got %d" % pan.bands)
    r = profile.ratio
    if (pan.height, pan.width) != (ms.height * r, ms.width * r):
        raise ValueError("pan %dx%d does not match ms %dx%d at ratio %d"
                         % (pan.width, pan.height, ms.width, ms.height, r))
    ms_up = interp23(ms, r)
    pan_n = normalized(pan)
    ms_up_n = normalized(ms_up)
    idx = radiometric_indices(ms_up_n, profile) if augment else None
    return pan_n, ms_up_n, idx


def reduced_training_pair(ms, pan, profile, augment):
    """Degrade (ms, pan) one resolution step and prepare network inputs.

    Returns (pan_n, ms_up_n, indices, target_n): normalized inputs on the
    original MS grid with the untouched MS as normalized target.
    """
    ms_lr, pan_lr, ref = wald_degrade(ms, pan, profile)
    pan_n, ms_up_n, idx = build_network_components(ms_lr, pan_lr, profile, augment)
    return pan_n, ms_up_n, idx, normalized(ref)


def training_tiles_from_scene(ms, pan, profile, augment, tile_size, count, seed):
    """Reduced-scale training tiles for a full scene; returns (inputs, targets)."""
    pan_n, ms_up_n, idx, target_n = reduced_training_pair(ms, pan, profile, augment)
    samples = extract_tiles(ms_up_n, pan_n, target_n, tile_size, count, seed,
                            indices=idx)
    return samples_to_arrays(samples)


def finetune(ms, pan, spec, params, profile, cfg=None):
    """Adapt pre-trained parameters to one target scene.

    The scene is degraded once; training tiles are resampled from it with a
    budget fixed by `max_tiles`, so the cost is independent of scene size.
    Returns (adapted_params, history); the input params are left untouched.
    """
    cfg = cfg or FinetuneConfig()
    work = params.copy()
    if cfg.iterations == 0:
        return work, []
    augment = augment_for_spec(spec, profile)
    inputs, targets = training_tiles_from_scene(
        ms, pan, profile, augment, cfg.tile_size, cfg.max_tiles, cfg.seed)
    tcfg = TrainConfig(iterations=cfg.iterations, batch_size=cfg.batch_size,
                       loss=cfg.loss, lrs=cfg.lrs, momentum=cfg.momentum,
                       seed=cfg.seed, val_every=max(1, cfg.iterations))
    ft_spec = spec.with_padding("same_mirror")
    history = train(inputs, targets, ft_spec, work, tcfg)
    return work, history


# ---------------------------------------------------------------------------
# fusion

def _fuse_stack(stack, ms_up_n_data, spec, params):
    out = network_forward(stack[None], spec.with_padding("same_mirror"), params)[0]
    if spec.residual:
        out = out + ms_up_n_data
    return out


def pansharpen(ms, pan, spec, params, profile):
    """Fuse a (MS, PAN) pair into a full-resolution MS image (DN scale)."""
    augment = augment_for_spec(spec, profile)
    pan_n, ms_up_n, idx = build_network_components(ms, pan, profile, augment)
    parts = [pan_n.data, ms_up_n.data] + ([idx.data] if idx is not None else [])
    stack = np.concatenate(parts, axis=0)
    fused = _fuse_stack(stack, ms_up_n.data, spec, params)
    return MultibandImage(fused * dn_scale(ms.nominal_bit_depth),
                          ms.nominal_bit_depth)


def tile_plan(height, width, spec, mem_budget=DEFAULT_MEM_BUDGET):
    """Split the output grid into tiles whose peak im2col stays in budget.

    Returns a list of (y0, y1, x0, x1) output windows; a single window means
    the whole image fits.
    """
    max_cols = max(spec.layer_in_channels(i) * l.kernel_size ** 2
                   for i, l in enumerate(spec.layers))
    m = spec.crop_margin
    rows_allowed = max(mem_budget // (4 * max_cols), 1)
    t = int(math.isqrt(rows_allowed)) - 2 * m
    t = max(t, MIN_TILE)
    if t >= height and t >= width:
        return [(0, height, 0, width)]
    plan = []
    for y0 in range(0, height, t):
        for x0 in range(0, width, t):
            plan.append((y0, min(y0 + t, height), x0, min(x0 + t, width)))
    return plan


def pansharpen_tiled(ms, pan, spec, params, profile, mem_budget=DEFAULT_MEM_BUDGET):
    """Memory-bounded fusion; equals `pansharpen` up to float noise.

    Each output tile is computed from an input window expanded by the
    network's receptive-field margin and run with valid padding; mirror
    padding is applied only where the window touches a true image edge, so
    per-pixel arithmetic matches the whole-image pass.
    """
    augment = augment_for_spec(spec, profile)
    pan_n, ms_up_n, idx = build_network_components(ms, pan, profile, augment)
    parts = [pan_n.data, ms_up_n.data] + ([idx.data] if idx is not None else [])
    stack = np.concatenate(parts, axis=0)
    h, w = pan.height, pan.width
    plan = tile_plan(h, w, spec, mem_budget)
    if len(plan) == 1:
        fused = _fuse_stack(stack, ms_up_n.data, spec, params)
        return MultibandImage(fused * dn_scale(ms.nominal_bit_depth),
                              ms.nominal_bit_depth)

    m = spec.crop_margin
    valid_spec = spec.with_padding("valid")
    out = np.empty((spec.out_channels, h, w), dtype=np.float32)
    for y0, y1, x0, x1 in plan:
        ylo, yhi = max(0, y0 - m), min(h, y1 + m)
        xlo, xhi = max(0, x0 - m), min(w, x1 + m)
        window = stack[:, ylo:yhi, xlo:xhi]
        pads = ((0, 0), (m - (y0 - ylo), m - (yhi - y1)),
                (m - (x0 - xlo), m - (xhi - x1)))
        if any(p for pair in pads for p in pair):
            window = np.pad(window, pads, mode="symmetric")
        tile_out = network_forward(window[None], valid_spec, params)[0]
        if spec.residual:
            tile_out = tile_out + ms_up_n.data[:, y0:y1, x0:x1]
        out[:, y0:y1, x0:x1] = tile_out
    return MultibandImage(out * dn_scale(ms.nominal_bit_depth),
                          ms.nominal_bit_depth)
