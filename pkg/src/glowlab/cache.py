"""Neural radiance caches.

A cache maps (surface point, outgoing direction, flashlight position) to
outgoing radiance. The dynamic form is the sum of two small MLPs, with the
learned direct part gated by geometric visibility so cast-shadow
discontinuities never have to be represented by a network; the naive form
is a single ungated MLP. Forward and backward passes are written out by
hand on numpy arrays, and caches can be frozen into immutable snapshots.

Positions are encoded relative to the scene bounding box with sin/cos
frequency bands; directions are encoded raw plus bands.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from .core import RngStream

# Output activation: radiance = max(exp(z) - OUTPUT_FLOOR, 0). The shift
# lets the network reach exactly zero; exp keeps it non-negative.
OUTPUT_FLOOR = float(np.exp(-3.0))

_Z_CLIP = 40.0  # pre-activation cap; exp overflow guard far above radiance scale

DEFAULT_HIDDEN = 128
DEFAULT_DEPTH = 4

CHECKPOINT_MAGIC = b"GLWCACHE"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class PositionalEncodingCfg:
    position_bands: int = 6
    direction_bands: int = 4
    light_bands: int = 6

    def __post_init__(self):
        if min(self.position_bands, self.direction_bands, self.light_bands) < 0:
            raise ValueError("encoding band counts must be >= 0")

    @property
    def width(self) -> int:
        return (3 * (2 * self.position_bands + 1)
                + 3 * (2 * self.direction_bands + 1)
                + 3 * (2 * self.light_bands + 1))


def _encode_vec(v, bands):
    parts = [v]
    for k in range(bands):
        f = (2.0 ** k) * np.pi
        parts.append(np.sin(f * v))
        parts.append(np.cos(f * v))
    return np.concatenate(parts, axis=-1)


def encode(cfg: PositionalEncodingCfg, x, wo, x_l, bbox_min, bbox_max):
    """Feature vector for cache inputs; positions normalized to [-1, 1]^3."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    wo = np.atleast_2d(np.asarray(wo, dtype=np.float64))
    x_l = np.atleast_2d(np.asarray(x_l, dtype=np.float64))
    x, wo, x_l = np.broadcast_arrays(x, wo, x_l)
    center = (np.asarray(bbox_max) + np.asarray(bbox_min)) / 2.0
    half = np.maximum((np.asarray(bbox_max) - np.asarray(bbox_min)) / 2.0, 1e-9)
    xn = (x - center) / half
    ln = (x_l - center) / half
    return np.concatenate([
        _encode_vec(xn, cfg.position_bands),
        _encode_vec(wo, cfg.direction_bands),
        _encode_vec(ln, cfg.light_bands),
    ], axis=-1)


class MlpParams:
    """Fully connected network parameters with a flat-vector view.

    Hidden activations are ReLU; the 3-channel output goes through
    max(exp(z) - OUTPUT_FLOOR, 0).
    """

    def __init__(self, widths, weights, biases):
        self.widths = list(widths)
        self.weights = weights
        self.biases = biases
        for w, b, (fi, fo) in zip(weights, biases, zip(widths[:-1], widths[1:])):
            if w.shape != (fi, fo) or b.shape != (fo,):
                raise ValueError("MLP parameter shape mismatch")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError("MLP parameters must be finite")

    @classmethod
    def init(cls, widths, rng: RngStream) -> "MlpParams":
        weights, biases = [], []
        for fi, fo in zip(widths[:-1], widths[1:]):
            bound = np.sqrt(6.0 / (fi + fo))
            weights.append((rng.uniform((fi, fo)) * 2.0 - 1.0) * bound)
            biases.append(np.zeros(fo))
        return cls(widths, weights, biases)

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def to_flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.reshape(-1), b])
                               for w, b in zip(self.weights, self.biases)])

    def from_flat(self, flat: np.ndarray):
        k = 0
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[i] = flat[k:k + w.size].reshape(w.shape).copy()
            k += w.size
            self.biases[i] = flat[k:k + b.size].copy()
            k += b.size
        if k != len(flat):
            raise ValueError("flat parameter length mismatch")

    def copy(self) -> "MlpParams":
        return MlpParams(self.widths, [w.copy() for w in self.weights],
                         [b.copy() for b in self.biases])


def mlp_forward(params: MlpParams, features):
    """Forward pass; returns (output >= 0, activation cache for backward)."""
    h = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if h.shape[1] != params.widths[0]:
        raise ValueError(
            f"feature width {h.shape[1]} != first layer {params.widths[0]}")
    acts = [h]
    n_layers = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        if i < n_layers - 1:
            h = np.maximum(z, 0.0)
        else:
            z = np.minimum(z, _Z_CLIP)
            h = np.maximum(np.exp(z) - OUTPUT_FLOOR, 0.0)
        acts.append(z)
    return h, acts


def mlp_backward(params: MlpParams, acts, upstream) -> np.ndarray:
    """Exact reverse-mode gradient of mlp_forward w.r.t. the flat parameters."""
    upstream = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    n_layers = len(params.weights)
    z_out = acts[-1]
    exp_z = np.exp(np.minimum(z_out, _Z_CLIP))
    alive = (exp_z - OUTPUT_FLOOR > 0.0) & (z_out < _Z_CLIP)
    delta = upstream * exp_z * alive

    grads_w = [None] * n_layers
    grads_b = [None] * n_layers
    for i in range(n_layers - 1, -1, -1):
        h_in = acts[i] if i == 0 else np.maximum(acts[i], 0.0)
        grads_w[i] = h_in.T @ delta
        grads_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ params.weights[i].T) * (acts[i] > 0.0)
    return np.concatenate([np.concatenate([w.reshape(-1), b])
                           for w, b in zip(grads_w, grads_b)])


def _net_widths(cfg: PositionalEncodingCfg, hidden: int, depth: int):
    return [cfg.width] + [hidden] * depth + [3]


class DynamicRadianceCache:
    """Visibility-gated two-network cache: vis * direct + indirect."""

    kind = "dynamic"

    def __init__(self, direct_net: MlpParams, indirect_net: MlpParams,
                 cfg: PositionalEncodingCfg, bbox_min, bbox_max):
        self.direct_net = direct_net
        self.indirect_net = indirect_net
        self.cfg = cfg
        self.bbox_min = np.asarray(bbox_min, dtype=np.float64)
        self.bbox_max = np.asarray(bbox_max, dtype=np.float64)

    @classmethod
    def create(cls, bbox_min, bbox_max, cfg=None, hidden=DEFAULT_HIDDEN,
               depth=DEFAULT_DEPTH, seed=0):
        cfg = cfg or PositionalEncodingCfg()
        widths = _net_widths(cfg, hidden, depth)
        return cls(MlpParams.init(widths, RngStream(seed, 0xD12EC7)),
                   MlpParams.init(widths, RngStream(seed, 0x17D12EC7)),
                   cfg, bbox_min, bbox_max)

    def encode_inputs(self, x, wo, x_l):
        return encode(self.cfg, x, wo, x_l, self.bbox_min, self.bbox_max)

    def eval_parts(self, x, wo, x_l):
        feats = self.encode_inputs(x, wo, x_l)
        direct, acts_d = mlp_forward(self.direct_net, feats)
        indirect, acts_i = mlp_forward(self.indirect_net, feats)
        return direct, indirect, (acts_d, acts_i)

    def eval(self, x, wo, x_l, vis):
        direct, indirect, _ = self.eval_parts(x, wo, x_l)
        vis = np.atleast_1d(np.asarray(vis, dtype=np.float64))
        return vis[:, None] * direct + indirect

    def nets(self):
        return {"direct": self.direct_net, "indirect": self.indirect_net}

    def copy(self) -> "DynamicRadianceCache":
        return DynamicRadianceCache(self.direct_net.copy(),
                                    self.indirect_net.copy(), self.cfg,
                                    self.bbox_min, self.bbox_max)


class NaiveRadianceCache:
    """Single ungated network; the visibility argument is ignored."""

    kind = "naive"

    def __init__(self, net: MlpParams, cfg: PositionalEncodingCfg,
                 bbox_min, bbox_max):
        self.net = net
        self.cfg = cfg
        self.bbox_min = np.asarray(bbox_min, dtype=np.float64)
        self.bbox_max = np.asarray(bbox_max, dtype=np.float64)

    @classmethod
    def create(cls, bbox_min, bbox_max, cfg=None, hidden=DEFAULT_HIDDEN,
               depth=DEFAULT_DEPTH, seed=0):
        cfg = cfg or PositionalEncodingCfg()
        return cls(MlpParams.init(_net_widths(cfg, hidden, depth),
                                  RngStream(seed, 0xA17E)),
                   cfg, bbox_min, bbox_max)

    def encode_inputs(self, x, wo, x_l):
        return encode(self.cfg, x, wo, x_l, self.bbox_min, self.bbox_max)

    def eval_parts(self, x, wo, x_l):
        feats = self.encode_inputs(x, wo, x_l)
        out, acts = mlp_forward(self.net, feats)
        return out, acts

    def eval(self, x, wo, x_l, vis):
        out, _ = self.eval_parts(x, wo, x_l)
        return out

    def nets(self):
        return {"full": self.net}

    def copy(self) -> "NaiveRadianceCache":
        return NaiveRadianceCache(self.net.copy(), self.cfg,
                                  self.bbox_min, self.bbox_max)


class CacheSnapshot:
    """Immutable deep copy of a cache taken at a training step."""

    def __init__(self, cache, step: int):
        self._cache = cache.copy()
        self.step = int(step)
        self.kind = cache.kind

    def eval(self, x, wo, x_l, vis):
        return self._cache.eval(x, wo, x_l, vis)

    def nets(self):
        return self._cache.nets()

    def checksum(self) -> bytes:
        import hashlib
        h = hashlib.sha256()
        for net in self._cache.nets().values():
            h.update(net.to_flat().tobytes())
        return h.digest()


def snapshot(cache, step: int) -> CacheSnapshot:
    return CacheSnapshot(cache, step)


# ---------------------------------------------------------------------------
# Checkpoint IO: header + little-endian float32 parameter blob


def _write_net(fh, net: MlpParams):
    fh.write(struct.pack("<I", len(net.widths)))
    fh.write(struct.pack(f"<{len(net.widths)}I", *net.widths))
    fh.write(net.to_flat().astype("<f4").tobytes())


def _read_net(fh) -> MlpParams:
    (n_widths,) = struct.unpack("<I", fh.read(4))
    widths = list(struct.unpack(f"<{n_widths}I", fh.read(4 * n_widths)))
    n = sum(fi * fo + fo for fi, fo in zip(widths[:-1], widths[1:]))
    flat = np.frombuffer(fh.read(4 * n), dtype="<f4").astype(np.float64)
    weights, biases = [], []
    k = 0
    for fi, fo in zip(widths[:-1], widths[1:]):
        weights.append(flat[k:k + fi * fo].reshape(fi, fo).copy())
        k += fi * fo
        biases.append(flat[k:k + fo].copy())
        k += fo
    return MlpParams(widths, weights, biases)


def save_cache_bytes(cache) -> bytes:
    fh = io.BytesIO()
    fh.write(CHECKPOINT_MAGIC)
    fh.write(struct.pack("<I", CHECKPOINT_VERSION))
    fh.write(struct.pack("<B", 1 if cache.kind == "dynamic" else 0))
    fh.write(struct.pack("<3I", cache.cfg.position_bands,
                         cache.cfg.direction_bands, cache.cfg.light_bands))
    fh.write(struct.pack("<6d", *cache.bbox_min, *cache.bbox_max))
    for net in cache.nets().values():
        _write_net(fh, net)
    return fh.getvalue()


def load_cache_bytes(data: bytes):
    fh = io.BytesIO(data)
    if fh.read(8) != CHECKPOINT_MAGIC:
        raise ValueError("not a cache checkpoint (bad magic)")
    (version,) = struct.unpack("<I", fh.read(4))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (kind_flag,) = struct.unpack("<B", fh.read(1))
    bands = struct.unpack("<3I", fh.read(12))
    cfg = PositionalEncodingCfg(*bands)
    box = struct.unpack("<6d", fh.read(48))
    bbox_min, bbox_max = np.array(box[:3]), np.array(box[3:])
    if kind_flag == 1:
        return DynamicRadianceCache(_read_net(fh), _read_net(fh), cfg,
                                    bbox_min, bbox_max)
    return NaiveRadianceCache(_read_net(fh), cfg, bbox_min, bbox_max)


def save_cache(cache, path: str):
    import os
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(save_cache_bytes(cache))
    os.replace(tmp, path)


def load_cache(path: str):
    with open(path, "rb") as fh:
        return load_cache_bytes(fh.read())
