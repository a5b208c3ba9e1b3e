"""SGD-with-momentum training loop, class weighting and GNET checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import NetworkConfig, NetworkError, backward, forward, init_params, loss, param_shapes, predict

logger = logging.getLogger(__name__)

GNET_MAGIC = b"GNET"
GNET_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class NumericalError(RuntimeError):
    def __init__(self, message: str, batch_index: int):
        super().__init__(message)
        self.batch_index = batch_index


@dataclass
class Sample:
    """One training example: input grids plus rasterized targets."""

    inputs: list[np.ndarray]  # each (H, W, d)
    mask: np.ndarray  # (H, W)
    boxes: np.ndarray  # (H, W, 4)
    valid: np.ndarray  # (H, W)


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 8
    schedule: str = "cosine"  # "constant" | "cosine" | "step"
    clip_norm: float | None = 5.0
    seed: int = 0


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    seg_term: float
    box_term: float
    lr: float


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    log: list[EpochLog] = field(default_factory=list)
    initial_loss: float = math.nan


def class_weights(samples: Sequence[Sample], num_classes: int, lo: float = 0.1, hi: float = 10.0) -> np.ndarray:
    """Inverse-frequency weights normalized so a uniform distribution gives 1, clamped to [lo, hi]."""
    counts = np.zeros(num_classes)
    for s in samples:
        counts += np.bincount(s.mask.ravel(), minlength=num_classes)[:num_classes]
    total = counts.sum()
    with np.errstate(divide="ignore"):
        w = total / (num_classes * counts)
    w[~np.isfinite(w)] = hi
    return np.clip(w, lo, hi)


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    if cfg.schedule == "constant" or cfg.epochs <= 1:
        return cfg.lr
    if cfg.schedule == "cosine":
        return cfg.lr * 0.5 * (1 + math.cos(math.pi * epoch / cfg.epochs))
    if cfg.schedule == "step":
        return cfg.lr * 0.1 ** (epoch // max(cfg.epochs // 3, 1))
    raise NetworkError(f"unknown lr schedule {cfg.schedule!r}")


def _stack(samples: Sequence[Sample]):
    n_in = len(samples[0].inputs)
    inputs = [np.stack([s.inputs[k] for s in samples]) for k in range(n_in)]
    return (
        inputs,
        np.stack([s.mask for s in samples]),
        np.stack([s.boxes for s in samples]),
        np.stack([s.valid for s in samples]),
    )


def evaluate_loss(samples, params, net_cfg: NetworkConfig, weights, batch_size: int = 16) -> tuple[float, float, float]:
    """Mean (total, seg, box) loss over ``samples`` without updating params."""
    if not samples:
        return math.nan, math.nan, math.nan
    tot = seg = box = 0.0
    for start in range(0, len(samples), batch_size):
        batch = samples[start : start + batch_size]
        inputs, mask, boxes, valid = _stack(batch)
        out = predict(inputs, params, net_cfg)
        parts, _, _ = loss(out, mask, boxes, valid, weights, net_cfg.box_weight)
        tot += parts.total * len(batch)
        seg += parts.seg * len(batch)
        box += parts.box * len(batch)
    n = len(samples)
    return tot / n, seg / n, box / n


def train(
    train_samples: Sequence[Sample],
    net_cfg: NetworkConfig,
    cfg: TrainConfig,
    val_samples: Sequence[Sample] = (),
    weights: np.ndarray | None = None,
    params: dict | None = None,
    log_path: str | Path | None = None,
) -> TrainResult:
    """Train with minibatch SGD + momentum. Deterministic for a fixed seed and sample order."""
    if not train_samples:
        raise NetworkError("empty training set")
    shape = train_samples[0].mask.shape
    if any(s.mask.shape != shape for s in train_samples):
        raise NetworkError("all samples must share one grid spec")
    if params is None:
        params = init_params(net_cfg)
    params = {k: v.copy() for k, v in params.items()}
    if weights is None:
        weights = class_weights(train_samples, net_cfg.num_classes)
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    rng = np.random.default_rng(cfg.seed)
    result = TrainResult(params)
    result.initial_loss = evaluate_loss(train_samples, params, net_cfg, weights)[0]
    logger.info("initial train loss %.4f", result.initial_loss)

    batch_index = 0
    for epoch in range(cfg.epochs):
        lr = lr_at(cfg, epoch)
        order = rng.permutation(len(train_samples))
        sums = np.zeros(3)
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_samples[i] for i in order[start : start + cfg.batch_size]]
            inputs, mask, boxes, valid = _stack(batch)
            out, cache = forward(inputs, params, net_cfg)
            parts, dseg, dbox = loss(out, mask, boxes, valid, weights, net_cfg.box_weight)
            if not math.isfinite(parts.total):
                raise NumericalError(f"non-finite loss at batch {batch_index}", batch_index)
            sums += len(batch) * np.array([parts.total, parts.seg, parts.box])
            grads = backward(cache, dseg, dbox, params, net_cfg)
            scale = 1.0
            if cfg.clip_norm:
                norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
                if norm > cfg.clip_norm:
                    scale = cfg.clip_norm / norm
            for k, p in params.items():
                v = velocity[k]
                v *= cfg.momentum
                v -= (lr * scale) * grads[k]
                p += v
                if not np.all(np.isfinite(p)):
                    raise NumericalError(f"non-finite parameter {k} after batch {batch_index}", batch_index)
            batch_index += 1
        # running mean over the epoch's batches, measured before each update
        train_loss, seg_term, box_term = (float(v) for v in sums / len(train_samples))
        val_loss = evaluate_loss(val_samples, params, net_cfg, weights)[0]
        result.log.append(EpochLog(epoch + 1, train_loss, val_loss, seg_term, box_term, lr))
        logger.info(
            "epoch %d train %.4f val %.4f (seg %.4f box %.4f) lr %.4g",
            epoch + 1, train_loss, val_loss, seg_term, box_term, lr,
        )
        if log_path is not None:
            write_log(result.log, log_path)
    return result


def write_log(log: Sequence[EpochLog], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "seg_term", "box_term", "lr"])
        for e in log:
            writer.writerow([e.epoch, f"{e.train_loss:.6f}", f"{e.val_loss:.6f}", f"{e.seg_term:.6f}", f"{e.box_term:.6f}", f"{e.lr:.6g}"])


def save_checkpoint(path: str | Path, params: dict, cfg: NetworkConfig, extra: dict | None = None) -> None:
    """GNET: magic, version, JSON header (config + extra), then shape-tagged arrays."""
    header = json.dumps({"config": cfg.to_dict(), "extra": extra or {}}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", GNET_MAGIC, GNET_VERSION, len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            arr = params[name]
            code = 1 if arr.dtype == np.float64 else 0
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack("<BI", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict, NetworkConfig, dict]:
    data = Path(path).read_bytes()
    try:
        magic, version, hlen = struct.unpack_from("<4sII", data)
        if magic != GNET_MAGIC:
            raise NetworkError(f"{path}: not a GNET checkpoint")
        if version != GNET_VERSION:
            raise NetworkError(f"{path}: unsupported checkpoint version {version}")
        pos = 12
        header = json.loads(data[pos : pos + hlen])
        pos += hlen
        cfg = NetworkConfig.from_dict(header["config"])
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        params = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + nlen].decode()
            pos += nlen
            code, ndim = struct.unpack_from("<BI", data, pos)
            pos += 5
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            dt = _DTYPES[code]
            size = int(np.prod(shape)) * dt.itemsize
            if pos + size > len(data):
                raise NetworkError(f"{path}: truncated checkpoint")
            params[name] = np.frombuffer(data, dtype=dt, count=int(np.prod(shape)), offset=pos).reshape(shape).astype(dt.newbyteorder("="))
            pos += size
    except (struct.error, json.JSONDecodeError, KeyError, UnicodeDecodeError) as exc:
        raise NetworkError(f"{path}: corrupt checkpoint ({exc})") from exc
    expected = param_shapes(cfg)
    got = {k: tuple(v.shape) for k, v in params.items()}
    if got != expected:
        raise NetworkError(f"{path}: checkpoint topology does not match its config")
    return params, cfg, header.get("extra", {})
