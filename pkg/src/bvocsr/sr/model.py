"""Super-resolution backends and the model file format.

Two backends share one interface (``n_channels``, ``alpha``, ``predict``):

``BicubicBaseline``
    bicubic upsampling of channel 0; driver channels are ignored.
``ConvModel``
    a bicubic skip path on channel 0 plus a residual branch of 3x3
    convolutions (three by default, tanh after all but the last) whose ``alpha**2`` output maps are
    rearranged into an ``alpha``-times larger image. Written directly in numpy
    with hand-derived gradients.

Arrays handed to ``predict`` are channel-first ``(N, C, H, W)``; outputs are
``(N, alpha*H, alpha*W)`` clipped to [0, 1].
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import DataError
from ..raster import resize_matrix
from ..transform import TransformModel

KERNEL = 3
MODEL_MAGIC = b"BSRKMODL"
MODEL_FORMAT = 1


@dataclass(frozen=True)
class SRInput:
    """Stacked network input: channel 0 is T_LR, the rest are drivers in [0, 1]."""

    channels: np.ndarray
    alpha: int = 2

    def __post_init__(self):
        ch = np.asarray(self.channels, dtype=np.float64)
        if ch.ndim != 3 or ch.shape[0] < 1:
            raise DataError(f"expected (C, H, W) channels, got shape {ch.shape}")
        if np.isnan(ch).any() or ch.min() < 0.0 or ch.max() > 1.0:
            raise DataError("input channels must be finite and within [0, 1]")
        object.__setattr__(self, "channels", ch)

    @property
    def n_channels(self) -> int:
        return self.channels.shape[0]


def upsample_skip(x0: np.ndarray, alpha: int) -> np.ndarray:
    """Bicubic upsampling of a batch ``(N, H, W)`` by ``alpha``."""
    h, w = x0.shape[-2:]
    uy = resize_matrix(h, alpha * h)
    ux = resize_matrix(w, alpha * w)
    return uy @ x0 @ ux.T


class BicubicBaseline:
    topology = "bicubic"

    def __init__(self, alpha: int = 2, n_channels: int | None = None):
        self.alpha = int(alpha)
        self.n_channels = n_channels  # None: accepts any channel count

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return np.clip(upsample_skip(x[:, 0], self.alpha), 0.0, 1.0)


# ---------------------------------------------------------------------------
# convolution primitives, NHWC layout

def _im2col(x: np.ndarray) -> np.ndarray:
    """(N, H, W, C) -> (N*H*W, C*9) patches of the zero-padded input."""
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (KERNEL, KERNEL), axis=(1, 2))
    return win.reshape(n * h * w, c * KERNEL * KERNEL)


def _col2im(dcols: np.ndarray, shape: tuple[int, int, int, int]) -> np.ndarray:
    n, h, w, c = shape
    d = dcols.reshape(n, h, w, c, KERNEL, KERNEL)
    dxp = np.zeros((n, h + 2, w + 2, c))
    for i in range(KERNEL):
        for j in range(KERNEL):
            dxp[:, i:i + h, j:j + w, :] += d[..., i, j]
    return dxp[:, 1:-1, 1:-1, :]


def conv_forward(x, weight, bias):
    n, h, w, _ = x.shape
    cols = _im2col(x)
    out = cols @ weight.reshape(weight.shape[0], -1).T + bias
    return out.reshape(n, h, w, weight.shape[0]), cols


def conv_backward(dout, cols, x_shape, weight):
    f = weight.shape[0]
    d2 = dout.reshape(-1, f)
    dw = (d2.T @ cols).reshape(weight.shape)
    db = d2.sum(axis=0)
    dx = _col2im(d2 @ weight.reshape(f, -1), x_shape)
    return dx, dw, db


def pixel_shuffle(r: np.ndarray, alpha: int) -> np.ndarray:
    """(N, H, W, alpha**2) -> (N, alpha*H, alpha*W); map a*alpha+b fills sub-pixel (a, b)."""
    n, h, w, _ = r.shape
    return r.reshape(n, h, w, alpha, alpha).transpose(0, 1, 3, 2, 4).reshape(n, h * alpha, w * alpha)


def pixel_unshuffle(img: np.ndarray, alpha: int) -> np.ndarray:
    n, hh, ww = img.shape
    h, w = hh // alpha, ww // alpha
    return img.reshape(n, h, alpha, w, alpha).transpose(0, 1, 3, 2, 4).reshape(n, h, w, alpha * alpha)


class ConvModel:
    """Bicubic skip path plus an ``n_layers``-deep 3x3 convolutional residual branch."""

    topology = "conv3-skip"

    def __init__(self, n_channels: int, alpha: int = 2, features: int = 16, seed: int = 0,
                 params: dict[str, np.ndarray] | None = None, n_layers: int = 3):
        if n_layers < 2:
            raise ValueError("n_layers must be at least 2")
        self.n_channels = int(n_channels)
        self.alpha = int(alpha)
        self.features = int(features)
        self.seed = int(seed)
        self.n_layers = int(n_layers)
        shapes = self.param_shapes()
        if params is None:
            params = self._init_params(shapes)
        for k, shape in shapes.items():
            if k not in params or tuple(params[k].shape) != shape:
                raise DataError(f"parameter {k} missing or not of shape {shape}")
        self.params = {k: np.array(params[k], dtype=np.float64) for k in shapes}

    @property
    def param_names(self) -> list[str]:
        return list(self.param_shapes())

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        f, a2 = self.features, self.alpha ** 2
        ins = [self.n_channels] + [f] * (self.n_layers - 1)
        outs = [f] * (self.n_layers - 1) + [a2]
        shapes = {}
        for i, (ci, co) in enumerate(zip(ins, outs), start=1):
            shapes[f"w{i}"] = (co, ci, KERNEL, KERNEL)
            shapes[f"b{i}"] = (co,)
        return shapes

    def _init_params(self, shapes):
        # Fan-in scaled uniform (variance 1/fan_in); the output layer starts at
        # zero so the untrained model reproduces the bicubic baseline.
        rng = np.random.Generator(np.random.Philox(self.seed))
        last = f"w{self.n_layers}"
        params = {}
        for k, shape in shapes.items():
            if k.startswith("b") or k == last:
                params[k] = np.zeros(shape)
            else:
                bound = np.sqrt(3.0 / np.prod(shape[1:]))
                params[k] = rng.uniform(-bound, bound, size=shape)
        return params

    def copy_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4:
            raise DataError(f"expected (N, C, H, W) input, got shape {x.shape}")
        if x.shape[1] != self.n_channels:
            raise DataError(
                f"model was trained on {self.n_channels} channel(s), input has {x.shape[1]}"
            )
        return x

    def forward(self, x: np.ndarray, keep: bool = False):
        """Unclipped output ``(N, aH, aW)``; with ``keep`` also the backward cache."""
        x = self._check(x)
        p = self.params
        h = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
        cache = []
        for i in range(1, self.n_layers + 1):
            z, cols = conv_forward(h, p[f"w{i}"], p[f"b{i}"])
            cache.append((cols, h.shape))
            h = np.tanh(z) if i < self.n_layers else z
            if i < self.n_layers:
                cache[-1] += (h,)
        out = upsample_skip(x[:, 0], self.alpha) + pixel_shuffle(h, self.alpha)
        return (out, cache) if keep else out

    def backward(self, dout: np.ndarray, cache) -> dict[str, np.ndarray]:
        p = self.params
        grads = {}
        d = pixel_unshuffle(dout, self.alpha)
        for i in range(self.n_layers, 0, -1):
            cols, in_shape = cache[i - 1][:2]
            if i < self.n_layers:
                act = cache[i - 1][2]
                d = d * (1.0 - act * act)
            d, grads[f"w{i}"], grads[f"b{i}"] = conv_backward(d, cols, in_shape, p[f"w{i}"])
        return grads

    def loss_and_grads(self, x: np.ndarray, y: np.ndarray):
        """Mean squared error against ``y`` and its gradient for every parameter."""
        out, cache = self.forward(x, keep=True)
        diff = out - y
        loss = float(np.mean(diff * diff))
        grads = self.backward(2.0 * diff / diff.size, cache)
        return loss, grads

    def predict(self, x: np.ndarray, batch: int = 256) -> np.ndarray:
        x = self._check(x)
        outs = [self.forward(x[i:i + batch]) for i in range(0, x.shape[0], batch)]
        return np.clip(np.concatenate(outs), 0.0, 1.0)


def super_resolve(backend, inp: SRInput) -> np.ndarray:
    """Super-resolve one stacked input to an ``(aH, aW)`` map in [0, 1]."""
    if inp.alpha != backend.alpha:
        raise DataError(f"backend scale {backend.alpha} != input scale {inp.alpha}")
    return backend.predict(inp.channels[None])[0]


def deploy(backend, transform: TransformModel, patch, drivers=()) -> np.ndarray:
    """Emission-domain estimate: inverse transform of the super-resolved T_LR stack."""
    inp = SRInput(patch.stacked_input(drivers), patch.meta.alpha)
    return transform.inverse(super_resolve(backend, inp))


# ---------------------------------------------------------------------------
# model files: magic, u32 header length, JSON header, little-endian float64 blob

def save_model(path, backend, drivers=(), transform: TransformModel | None = None,
               extra: dict | None = None) -> None:
    header = {
        "format": MODEL_FORMAT,
        "topology": backend.topology,
        "alpha": backend.alpha,
        "channels": backend.n_channels,
        "drivers": list(drivers),
        "transform": transform.to_dict() if transform is not None else None,
    }
    blob = b""
    if isinstance(backend, ConvModel):
        names = backend.param_names
        header.update(features=backend.features, seed=backend.seed, activation="tanh",
                      layers=backend.n_layers,
                      params=[{"name": k, "shape": list(backend.params[k].shape)} for k in names])
        blob = b"".join(np.ascontiguousarray(backend.params[k], dtype="<f8").tobytes()
                        for k in names)
    if extra:
        header["extra"] = extra
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC + struct.pack("<I", len(hbytes)) + hbytes + blob)


def load_model(path):
    """Returns ``(backend, header)``; ``header["transform"]`` is a TransformModel or None."""
    p = Path(path)
    if not p.exists():
        raise DataError(f"model file not found: {p}")
    buf = p.read_bytes()
    if buf[:8] != MODEL_MAGIC:
        raise DataError(f"{p}: not a model file")
    try:
        (hlen,) = struct.unpack_from("<I", buf, 8)
        header = json.loads(buf[12:12 + hlen].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, ValueError):
        raise DataError(f"{p}: corrupt model header") from None
    if header.get("format") != MODEL_FORMAT:
        raise DataError(f"{p}: unsupported model format {header.get('format')!r}")
    if header["transform"] is not None:
        header["transform"] = TransformModel.from_dict(header["transform"])
    if header["topology"] == BicubicBaseline.topology:
        return BicubicBaseline(header["alpha"], header["channels"]), header
    if header["topology"] != ConvModel.topology:
        raise DataError(f"{p}: unknown topology {header['topology']!r}")
    off = 12 + hlen
    expected = off + 8 * sum(int(np.prod(spec["shape"])) for spec in header["params"])
    if expected != len(buf):
        raise DataError(f"{p}: weight blob length mismatch")
    params = {}
    for spec in header["params"]:
        n = int(np.prod(spec["shape"]))
        params[spec["name"]] = np.frombuffer(buf, "<f8", n, off).reshape(spec["shape"]).astype(np.float64)
        off += 8 * n
    model = ConvModel(header["channels"], header["alpha"], header["features"], header["seed"],
                      params, n_layers=header.get("layers", 3))
    return model, header
