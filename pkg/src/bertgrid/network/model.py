"""Fully convolutional encoder-decoder with segmentation and box-regression heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from ..doc_model import NUM_CLASSES
from . import layers as L


class NetworkError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    input_depths: tuple[int, ...]
    base_channels: int = 16
    num_down: int = 2
    num_classes: int = NUM_CLASSES
    seed: int = 0
    box_weight: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "input_depths", tuple(int(d) for d in self.input_depths))
        if len(self.input_depths) not in (1, 2):
            raise NetworkError("input_depths must hold one (single) or two (combined) depths")
        if self.num_classes < 2:
            raise NetworkError("num_classes must be >= 2")
        if self.num_down < 0 or self.base_channels < 1:
            raise NetworkError("num_down must be >= 0 and base_channels >= 1")

    def channels(self, stage: int) -> int:
        return self.base_channels * 2**stage

    def check_grid(self, h: int, w: int) -> None:
        step = 2**self.num_down
        if h % step or w % step:
            raise NetworkError(f"grid {h}x{w} not divisible by 2^num_down = {step}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_depths"] = list(self.input_depths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**{**d, "input_depths": tuple(d["input_depths"])})


def param_shapes(cfg: NetworkConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    c0 = cfg.channels(0)
    for b, depth in enumerate(cfg.input_depths):
        shapes[f"in{b}.w"] = (3, 3, depth, c0)
        shapes[f"in{b}.b"] = (c0,)
    for i in range(1, cfg.num_down + 1):
        shapes[f"down{i}.w"] = (3, 3, cfg.channels(i - 1), cfg.channels(i))
        shapes[f"down{i}.b"] = (cfg.channels(i),)
    for i in range(cfg.num_down, 0, -1):
        shapes[f"up{i}.w"] = (3, 3, cfg.channels(i), cfg.channels(i - 1))
        shapes[f"up{i}.b"] = (cfg.channels(i - 1),)
    shapes["seg.w"] = (1, 1, c0, cfg.num_classes)
    shapes["seg.b"] = (cfg.num_classes,)
    shapes["box.w"] = (1, 1, c0, 4)
    shapes["box.b"] = (4,)
    return shapes


def init_params(cfg: NetworkConfig, dtype=np.float32) -> dict[str, np.ndarray]:
    """He (fan-in) normal init for weights, zero biases."""
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".w"):
            fan_in = shape[0] * shape[1] * shape[2]
            params[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    return params


@dataclass
class NetworkOutput:
    seg_logits: np.ndarray  # (N, H, W, C)
    box_preds: np.ndarray  # (N, H, W, 4)


def _as_batch(inputs: Sequence[np.ndarray]) -> list[np.ndarray]:
    out = []
    for x in inputs:
        x = getattr(x, "values", x)
        x = np.asarray(x)
        out.append(x[None] if x.ndim == 3 else x)
    return out


def forward(inputs: Sequence[np.ndarray], params: dict, cfg: NetworkConfig, keep_cache: bool = True):
    """Run the network on one or two NHWC (or HWC) inputs; returns (NetworkOutput, cache)."""
    xs = _as_batch(inputs)
    if len(xs) != len(cfg.input_depths):
        raise NetworkError(f"expected {len(cfg.input_depths)} input grids, got {len(xs)}")
    for x, depth in zip(xs, cfg.input_depths):
        if x.shape[-1] != depth:
            raise NetworkError(f"input depth {x.shape[-1]} does not match config {depth}")
        if x.shape[:3] != xs[0].shape[:3]:
            raise NetworkError(f"input grids differ in shape: {x.shape[:3]} vs {xs[0].shape[:3]}")
    cfg.check_grid(xs[0].shape[1], xs[0].shape[2])
    dtype = params["seg.w"].dtype
    cache: dict = {"inputs": []}

    h = None
    for b, x in enumerate(xs):
        x = x.astype(dtype, copy=False)
        z, cols = L.conv2d(x, params[f"in{b}.w"], params[f"in{b}.b"])
        a = L.relu(z)
        cache["inputs"].append((x.shape, cols if keep_cache else None, a))
        h = a if h is None else h + a
    skips = [h]
    for i in range(1, cfg.num_down + 1):
        z, cols = L.conv2d(h, params[f"down{i}.w"], params[f"down{i}.b"], stride=2)
        cache[f"down{i}"] = (h.shape, cols if keep_cache else None)
        h = L.relu(z)
        cache[f"down{i}.act"] = h
        skips.append(h)
    for i in range(cfg.num_down, 0, -1):
        u = L.upsample2(h)
        z, cols = L.conv2d(u, params[f"up{i}.w"], params[f"up{i}.b"])
        a = L.relu(z)
        cache[f"up{i}"] = (u.shape, cols if keep_cache else None, a)
        h = a + skips[i - 1]
    seg, seg_cols = L.conv2d(h, params["seg.w"], params["seg.b"])
    box, _ = L.conv2d(h, params["box.w"], params["box.b"])
    cache["head"] = h
    return NetworkOutput(seg, box), (cache if keep_cache else None)


def backward(cache: dict, dseg: np.ndarray, dbox: np.ndarray, params: dict, cfg: NetworkConfig) -> dict:
    """Gradients of the loss w.r.t. every parameter, given d loss / d outputs."""
    grads: dict[str, np.ndarray] = {}
    h = cache["head"]
    dh, grads["seg.w"], grads["seg.b"] = L.conv2d_backward(dseg, h, h.shape, params["seg.w"])
    dh2, grads["box.w"], grads["box.b"] = L.conv2d_backward(dbox, h, h.shape, params["box.w"])
    dh = dh + dh2
    dskips: list = [None] * (cfg.num_down + 1)
    for i in range(1, cfg.num_down + 1):
        # h = relu(conv(up(h_prev))) + skip[i-1]
        u_shape, cols, a = cache[f"up{i}"]
        dskips[i - 1] = dh
        dz = L.relu_backward(dh, a)
        du, grads[f"up{i}.w"], grads[f"up{i}.b"] = L.conv2d_backward(dz, cols, u_shape, params[f"up{i}.w"])
        dh = L.upsample2_backward(du)
    # dh is now the gradient w.r.t. the bottleneck activation
    for i in range(cfg.num_down, 0, -1):
        if i < cfg.num_down:
            dh = dh + dskips[i]
        x_shape, cols = cache[f"down{i}"]
        dz = L.relu_backward(dh, cache[f"down{i}.act"])
        dh, grads[f"down{i}.w"], grads[f"down{i}.b"] = L.conv2d_backward(
            dz, cols, x_shape, params[f"down{i}.w"], stride=2
        )
    if cfg.num_down > 0:
        dh = dh + dskips[0]
    for b, (x_shape, cols, a) in enumerate(cache["inputs"]):
        dz = L.relu_backward(dh, a)
        _, grads[f"in{b}.w"], grads[f"in{b}.b"] = L.conv2d_backward(dz, cols, x_shape, params[f"in{b}.w"])
    return grads


@dataclass
class LossBreakdown:
    total: float
    seg: float
    box: float


def loss(
    out: NetworkOutput,
    gt_mask: np.ndarray,
    gt_boxes: np.ndarray,
    valid: np.ndarray,
    class_weights: np.ndarray | None = None,
    box_weight: float = 1.0,
):
    """Class-weighted softmax cross-entropy plus Huber box loss on line-item cells.

    Returns (LossBreakdown, dseg, dbox). The CE term is the weighted mean over
    all cells; the box term is the mean over valid cells (0 when none).
    """
    logits = out.seg_logits
    if gt_mask.ndim == 2:
        gt_mask, gt_boxes, valid = gt_mask[None], gt_boxes[None], valid[None]
    if logits.shape[:3] != gt_mask.shape or out.box_preds.shape != gt_boxes.shape:
        raise NetworkError(f"target shapes {gt_mask.shape}/{gt_boxes.shape} do not match outputs")
    dtype = logits.dtype
    n_cls = logits.shape[-1]
    if class_weights is None:
        class_weights = np.ones(n_cls)
    cw = np.asarray(class_weights, dtype=dtype)[gt_mask]
    logp = L.log_softmax(logits)
    ce = -np.take_along_axis(logp, gt_mask[..., None], axis=-1)[..., 0]
    wsum = cw.sum()
    seg_term = float((cw * ce).sum() / wsum)
    dseg = np.exp(logp)
    np.put_along_axis(dseg, gt_mask[..., None], np.take_along_axis(dseg, gt_mask[..., None], -1) - 1, -1)
    dseg *= (cw / wsum)[..., None]

    n_valid = int(valid.sum())
    dbox = np.zeros_like(out.box_preds)
    box_term = 0.0
    if n_valid:
        r = (out.box_preds - gt_boxes.astype(dtype)) * valid[..., None]
        box_term = float(L.huber(r).sum() / n_valid)
        dbox = (L.huber_grad(r) * (box_weight / n_valid)).astype(dtype)
    total = seg_term + box_weight * box_term
    return LossBreakdown(total, seg_term, box_term), dseg.astype(dtype), dbox


def predict(inputs: Sequence[np.ndarray], params: dict, cfg: NetworkConfig) -> NetworkOutput:
    out, _ = forward(inputs, params, cfg, keep_cache=False)
    return out
