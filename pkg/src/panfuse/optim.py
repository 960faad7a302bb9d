"""Patch-based training: SGD with momentum, loss histories and checkpoints.

The loop consumes pre-extracted tile arrays (see `raster.extract_tiles`),
shuffles them into without-replacement epochs and records one history row
per iteration. Checkpoints are a small self-describing binary format
("PNNW"): a JSON header with the network spec and tensor manifest followed
by raw little-endian float32 tensor data.
"""

import json
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .nn import (NetworkParams, NetworkSpec, TRAINABLE_KEYS, backward_pass,
                 forward_pass, loss_eval, network_forward)

CHECKPOINT_MAGIC = b"PNNW"
CHECKPOINT_VERSION = 1
HISTORY_FIELDS = ("iteration", "seconds", "train_loss", "val_mse", "val_mae")


class CheckpointError(Exception):
    """Raised for malformed checkpoint files."""


class TrainingDiverged(RuntimeError):
    """Raised when the training loss explodes or turns non-finite."""


@dataclass
class TrainConfig:
    iterations: int
    batch_size: int = 128
    loss: str = "l1"
    lrs: tuple = (1e-4, 1e-4, 1e-5)
    momentum: float = 0.9
    seed: int = 0
    val_every: int = 50
    divergence_factor: float = 100.0
    max_seconds: float = 0.0  # 0 = no wall-clock cap

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.val_every < 1:
            raise ValueError("val_every must be >= 1")


class OptimizerState:
    """Momentum buffers mirroring the trainable tensors of NetworkParams."""

    def __init__(self, params):
        self.velocity = [
            {k: np.zeros_like(layer[k]) for k in TRAINABLE_KEYS if k in layer}
            for layer in params.layers
        ]


def sgd_momentum_step(params, grads, state, lrs, momentum):
    """v <- momentum*v + lr*grad; p <- p - v, with one lr per layer."""
    if len(lrs) != len(params.layers):
        raise ValueError("need one learning rate per layer (%d != %d)"
                         % (len(lrs), len(params.layers)))
    for layer, layer_grads, vel, lr in zip(params.layers, grads, state.velocity, lrs):
        for key, g in layer_grads.items():
            v = vel[key]
            v *= momentum
            v += lr * g.astype(v.dtype, copy=False)
            layer[key] -= v


def _residual_base(inputs, spec, out_h, out_w):
    """Slice of the input stack added back by residual nets: the upsampled
    MS channels, cropped to the output window for valid padding."""
    m = spec.crop_margin if spec.padding == "valid" else 0
    return inputs[:, 1:1 + spec.out_channels, m:m + out_h, m:m + out_w]


def _crop_target(targets, spec, out_h, out_w):
    m = spec.crop_margin if spec.padding == "valid" else 0
    return targets[:, :, m:m + out_h, m:m + out_w]


def predict_batch(inputs, spec, params):
    """Inference prediction for a batch of input stacks."""
    out = network_forward(inputs, spec, params)
    if spec.residual:
        out = out + _residual_base(inputs, spec, out.shape[2], out.shape[3])
    return out


def validate(inputs, targets, spec, params, batch_size=128):
    """Mean squared / absolute error of predictions over a validation set."""
    if len(inputs) == 0:
        raise ValueError("empty validation set")
    se = 0.0
    ae = 0.0
    count = 0
    for lo in range(0, len(inputs), batch_size):
        xb = inputs[lo:lo + batch_size]
        pred = predict_batch(xb, spec, params)
        tgt = _crop_target(targets[lo:lo + batch_size], spec,
                           pred.shape[2], pred.shape[3])
        diff = (pred - tgt).astype(np.float64)
        se += float((diff ** 2).sum())
        ae += float(np.abs(diff).sum())
        count += diff.size
    return se / count, ae / count


def train(inputs, targets, spec, params, cfg, val_inputs=None, val_targets=None):
    """Optimize `params` in place; returns the history as a list of dicts.

    One history row per iteration: running wall-clock seconds, batch
    training loss, and the latest validation MSE/MAE (refreshed every
    `cfg.val_every` iterations and on the final one).
    """
    if len(inputs) != len(targets):
        raise ValueError("inputs/targets length mismatch")
    if len(inputs) == 0:
        raise ValueError("no training samples")
    rng = np.random.default_rng(cfg.seed)
    state = OptimizerState(params)
    has_val = val_inputs is not None and len(val_inputs) > 0

    val_mse = val_mae = float("nan")
    if has_val:
        val_mse, val_mae = validate(val_inputs, val_targets, spec, params,
                                    cfg.batch_size)

    history = []
    order = rng.permutation(len(inputs))
    cursor = 0
    first_loss = None
    t0 = time.perf_counter()
    for it in range(1, cfg.iterations + 1):
        take = min(cfg.batch_size, len(inputs))
        if cursor + take > len(order):
            order = rng.permutation(len(inputs))
            cursor = 0
        idx = order[cursor:cursor + take]
        cursor += take

        xb = inputs[idx]
        out, caches = forward_pass(xb, spec, params, training=True)
        pred = out
        if spec.residual:
            pred = out + _residual_base(xb, spec, out.shape[2], out.shape[3])
        tgt = _crop_target(targets[idx], spec, out.shape[2], out.shape[3])
        loss, grad = loss_eval(pred, tgt, cfg.loss)

        if first_loss is None:
            first_loss = loss if loss > 0 else 1.0
        if not np.isfinite(loss) or loss > cfg.divergence_factor * max(first_loss, 1e-12):
            raise TrainingDiverged(
                "loss %g at iteration %d (first batch %g)" % (loss, it, first_loss))

        grads, _ = backward_pass(grad, spec, caches)
        sgd_momentum_step(params, grads, state, cfg.lrs, cfg.momentum)

        if has_val and (it % cfg.val_every == 0 or it == cfg.iterations):
            val_mse, val_mae = validate(val_inputs, val_targets, spec, params,
                                        cfg.batch_size)
        history.append({
            "iteration": it,
            "seconds": time.perf_counter() - t0,
            "train_loss": loss,
            "val_mse": val_mse,
            "val_mae": val_mae,
        })
        if cfg.max_seconds and time.perf_counter() - t0 >= cfg.max_seconds:
            break
    return history


def history_to_csv(history, path, deterministic=False):
    """Write history rows as CSV; deterministic mode zeroes the wall-clock
    column so repeated runs are byte-identical."""
    lines = [",".join(HISTORY_FIELDS)]
    for row in history:
        secs = 0.0 if deterministic else row["seconds"]
        lines.append("%d,%.6f,%.9g,%.9g,%.9g" % (
            row["iteration"], secs, row["train_loss"],
            row["val_mse"], row["val_mae"]))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, spec, params, meta=None):
    manifest = [[i, name, list(arr.shape)]
                for i, name, arr in params.tensors()]
    header = {
        "spec": spec.to_dict(),
        "meta": dict(meta or {}),
        "tensors": manifest,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HI", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for _, _, arr in params.tensors():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (spec, params, meta)."""
    with open(path, "rb") as fh:
        head = fh.read(4 + 6)
        if len(head) < 10:
            raise CheckpointError("file too short for a checkpoint header")
        if head[:4] != CHECKPOINT_MAGIC:
            raise CheckpointError("bad magic %r" % (head[:4],))
        version, blob_len = struct.unpack("<HI", head[4:])
        if version != CHECKPOINT_VERSION:
            raise CheckpointError("unsupported checkpoint version %d" % version)
        blob = fh.read(blob_len)
        if len(blob) != blob_len:
            raise CheckpointError("truncated header blob")
        try:
            header = json.loads(blob.decode("utf-8"))
            spec = NetworkSpec.from_dict(header["spec"])
            manifest = header["tensors"]
        except (ValueError, KeyError, TypeError) as exc:
            raise CheckpointError("malformed header: %s" % exc) from exc

        layers = [{} for _ in spec.layers]
        for entry in manifest:
            i, name, shape = int(entry[0]), entry[1], tuple(int(s) for s in entry[2])
            if not (0 <= i < len(layers)):
                raise CheckpointError("tensor for missing layer %d" % i)
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(4 * count)
            if len(raw) != 4 * count:
                raise CheckpointError("truncated tensor data for layer %d %s" % (i, name))
            layers[i][name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        if fh.read(1):
            raise CheckpointError("trailing bytes after tensor data")

    params = NetworkParams(layers)
    _check_params_match(spec, params)
    return spec, params, header.get("meta", {})


def _check_params_match(spec, params):
    if len(params.layers) != len(spec.layers):
        raise CheckpointError("layer count mismatch")
    for i, l in enumerate(spec.layers):
        layer = params.layers[i]
        c_in = spec.layer_in_channels(i)
        want_w = (l.out_channels, c_in, l.kernel_size, l.kernel_size)
        if "w" not in layer or "b" not in layer:
            raise CheckpointError("layer %d missing conv tensors" % i)
        if layer["w"].shape != want_w:
            raise CheckpointError("layer %d weight shape %r, expected %r"
                                  % (i, layer["w"].shape, want_w))
        if layer["b"].shape != (l.out_channels,):
            raise CheckpointError("layer %d bias shape %r" % (i, layer["b"].shape))
        if l.batch_norm:
            for key in ("gamma", "beta", "running_mean", "running_var"):
                if key not in layer or layer[key].shape != (l.out_channels,):
                    raise CheckpointError("layer %d missing/invalid %s" % (i, key))
