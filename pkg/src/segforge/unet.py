"""UNet encoder-decoder with four skip connections.

Layout for widths ``[w1, w2, w3, w4]`` and bottleneck ``b``::

    enc_i   : [conv k x k -> ReLU] x convs_per_block   (w_{i-1} -> w_i)
              followed by 2x2 max-pool
    bottleneck block                                    (w4 -> b)
    up_i    : 2x2 stride-2 transpose conv               (w_{i+1} or b -> w_i)
    dec_i   : block on concat(up_i, enc_i)              (2 w_i -> w_i)
    head    : 1x1 conv                                  (w1 -> num_classes)

Also holds parameter counting, the FLOPs estimate and the checkpoint format.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .tensor import Tensor

NUM_STAGES = 4
CHECKPOINT_MAGIC = b"SGFG"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class UNetConfig:
    in_channels: int = 3
    num_classes: int = 4
    encoder_widths: List[int] = field(default_factory=lambda: [8, 16, 32, 64])
    bottleneck_width: int = 128
    kernel_size: int = 3
    convs_per_block: int = 2

    def validate(self) -> None:
        if len(self.encoder_widths) != NUM_STAGES:
            raise ConfigError(f"encoder_widths needs {NUM_STAGES} entries, got {len(self.encoder_widths)}")
        widths = list(self.encoder_widths) + [self.bottleneck_width, self.in_channels, self.num_classes]
        if any(int(w) != w or w < 1 for w in widths):
            raise ConfigError("channel widths must be positive integers")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be a positive odd integer")
        if self.convs_per_block < 1:
            raise ConfigError("convs_per_block must be >= 1")


# Reconstruction of the full-size network: standard doubling widths with a
# widened bottleneck, 43.03M parameters for 16 classes.
PAPER_SCALE = UNetConfig(num_classes=16, encoder_widths=[64, 128, 256, 512], bottleneck_width=1440)

# Desk-scale network for the synthetic smoke experiment (82,432 parameters).
# A 12-channel first stage matters more than depth here; 4-8 channels train
# far slower at full resolution.
SMOKE_SCALE = UNetConfig(num_classes=4, encoder_widths=[12, 16, 20, 24], bottleneck_width=32)


def layer_specs(cfg: UNetConfig) -> List[Tuple[str, str, int, int, int]]:
    """Ordered (name, kind, cin, cout, k) for every learnable layer."""
    k = cfg.kernel_size
    specs = []

    def block(prefix, cin, cout):
        for j in range(cfg.convs_per_block):
            specs.append((f"{prefix}.conv{j}", "conv", cin if j == 0 else cout, cout, k))

    cin = cfg.in_channels
    for i, w in enumerate(cfg.encoder_widths):
        block(f"enc{i}", cin, w)
        cin = w
    block("bottleneck", cin, cfg.bottleneck_width)
    cin = cfg.bottleneck_width
    for i in reversed(range(NUM_STAGES)):
        w = cfg.encoder_widths[i]
        specs.append((f"up{i}", "convT", cin, w, 2))
        block(f"dec{i}", 2 * w, w)
        cin = w
    specs.append(("head", "conv", cin, cfg.num_classes, 1))
    return specs


class UNetModel:
    def __init__(self, cfg: UNetConfig, params: Dict[str, Tensor]):
        self.cfg = cfg
        self.params = params

    def parameters(self) -> Dict[str, Tensor]:
        return self.params

    def __call__(self, images) -> Tensor:
        return forward(self, images)


def build(cfg: UNetConfig, init_seed: int = 0) -> UNetModel:
    """Kaiming-uniform (fan-in, ReLU gain) kernels, zero biases."""
    cfg.validate()
    rng = np.random.default_rng(init_seed)
    params: Dict[str, Tensor] = {}
    for name, kind, cin, cout, k in layer_specs(cfg):
        shape = (cout, cin, k, k) if kind == "conv" else (cin, cout, k, k)
        fan_in = (cin if kind == "conv" else cout) * k * k
        bound = np.sqrt(6.0 / fan_in)
        params[f"{name}.weight"] = T.parameter(rng.uniform(-bound, bound, size=shape))
        params[f"{name}.bias"] = T.parameter(np.zeros(cout))
    return UNetModel(cfg, params)


def _block(model: UNetModel, prefix: str, x: Tensor) -> Tensor:
    p, pad = model.params, model.cfg.kernel_size // 2
    for j in range(model.cfg.convs_per_block):
        x = T.relu(T.conv2d(x, p[f"{prefix}.conv{j}.weight"], p[f"{prefix}.conv{j}.bias"], 1, pad))
    return x


def forward(model: UNetModel, images) -> Tensor:
    x = images if isinstance(images, Tensor) else Tensor(images)
    if x.ndim != 4 or x.shape[1] != model.cfg.in_channels:
        raise T.ShapeError(f"expected (N, {model.cfg.in_channels}, H, W), got {x.shape}")
    h, w = x.shape[2:]
    if h % 2 ** NUM_STAGES or w % 2 ** NUM_STAGES:
        raise T.ShapeError(f"spatial extent {h}x{w} must be divisible by {2 ** NUM_STAGES}")
    p = model.params
    skips = []
    for i in range(NUM_STAGES):
        x = _block(model, f"enc{i}", x)
        skips.append(x)
        x = T.maxpool2d(x, 2, 2)
    x = _block(model, "bottleneck", x)
    for i in reversed(range(NUM_STAGES)):
        x = T.conv2d_transpose(x, p[f"up{i}.weight"], p[f"up{i}.bias"], stride=2)
        x = T.concat_channels(x, skips[i])
        x = _block(model, f"dec{i}", x)
    return T.conv2d(x, p["head.weight"], p["head.bias"])


def predict(model: UNetModel, images) -> np.ndarray:
    """Hard (N, H, W) class masks from argmax over logits."""
    return forward(model, images).data.argmax(axis=1)


def count_params(model: UNetModel) -> int:
    return int(sum(t.size for t in model.params.values()))


def conv_param_count(cin: int, cout: int, k: int, bias: bool = True) -> int:
    return cin * cout * k * k + (cout if bias else 0)


def conv_flops(cin: int, cout: int, out_h: int, out_w: int, k: int) -> int:
    """2 FLOPs per multiply-add of a k x k convolution producing ``out_h x out_w``."""
    return 2 * cout * out_h * out_w * cin * k * k


def estimate_flops(cfg: UNetConfig, input_size) -> int:
    """Forward FLOPs for one image.

    Convolutions and transpose convolutions count 2 FLOPs per multiply-add
    (MACs = Cout * H' * W' * Cin * k * k, over input pixels for the transpose
    case); bias adds are folded into the accumulate.  Each ReLU adds one FLOP
    per output element and each 2x2 max-pool three comparisons per output.
    """
    cfg.validate()
    h, w = (input_size, input_size) if isinstance(input_size, int) else input_size
    if h % 2 ** NUM_STAGES or w % 2 ** NUM_STAGES:
        raise ConfigError(f"input {h}x{w} must be divisible by {2 ** NUM_STAGES}")
    k = cfg.kernel_size
    total = 0

    def block(cin, cout, hh, ww):
        nonlocal total
        for j in range(cfg.convs_per_block):
            total += conv_flops(cin if j == 0 else cout, cout, hh, ww, k)
            total += cout * hh * ww

    cin, hh, ww = cfg.in_channels, h, w
    for wd in cfg.encoder_widths:
        block(cin, wd, hh, ww)
        hh, ww = hh // 2, ww // 2
        total += 3 * wd * hh * ww
        cin = wd
    block(cin, cfg.bottleneck_width, hh, ww)
    cin = cfg.bottleneck_width
    for wd in reversed(cfg.encoder_widths):
        # transpose conv: every input pixel scatters a 2x2 kernel per channel pair
        total += conv_flops(cin, wd, hh, ww, 2)
        hh, ww = hh * 2, ww * 2
        block(2 * wd, wd, hh, ww)
        cin = wd
    total += conv_flops(cin, cfg.num_classes, hh, ww, 1)
    return total


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------

def encode_checkpoint(meta: Dict[str, Any], tensors: Dict[str, np.ndarray]) -> bytes:
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), struct.pack("<I", len(blob)), blob]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode_checkpoint(data: bytes) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    pos = 4

    def read(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise CheckpointError("checkpoint truncated")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    (version,) = read("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (blob_len,) = read("<I")
    if pos + blob_len > len(data):
        raise CheckpointError("checkpoint truncated in metadata")
    meta = json.loads(data[pos:pos + blob_len].decode("utf-8"))
    pos += blob_len
    tensors: Dict[str, np.ndarray] = {}
    while pos < len(data):
        (name_len,) = read("<I")
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = read("<I")
        shape = read(f"<{rank}Q") if rank else ()
        count = int(np.prod(shape)) if rank else 1
        end = pos + 8 * count
        if end > len(data):
            raise CheckpointError(f"checkpoint truncated in tensor {name!r}")
        tensors[name] = np.frombuffer(data[pos:end], dtype="<f8").astype(np.float64).reshape(shape)
        pos = end
    return meta, tensors


def save_checkpoint(path, model: UNetModel, meta: Optional[Dict[str, Any]] = None,
                    extra_tensors: Optional[Dict[str, np.ndarray]] = None) -> None:
    full_meta = {"unet": asdict(model.cfg)}
    if meta:
        full_meta.update(meta)
    tensors = {name: t.data for name, t in model.params.items()}
    if extra_tensors:
        tensors.update(extra_tensors)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(full_meta, tensors))
    tmp.replace(path)


def load_checkpoint(path) -> Tuple[UNetModel, Dict[str, Any], Dict[str, np.ndarray]]:
    """Returns the model, the metadata blob and any non-parameter tensors."""
    meta, tensors = decode_checkpoint(Path(path).read_bytes())
    cfg = UNetConfig(**meta["unet"])
    model = build(cfg, 0)
    for name in model.params:
        if name not in tensors:
            raise CheckpointError(f"checkpoint is missing parameter {name!r}")
        arr = tensors.pop(name)
        if arr.shape != model.params[name].shape:
            raise CheckpointError(f"parameter {name!r} has shape {arr.shape}, expected {model.params[name].shape}")
        model.params[name] = T.parameter(arr)
    return model, meta, tensors
