"""Vector math, orthonormal frames, and deterministic RNG streams.

Everything here is batch-first: points and directions are numpy arrays of
shape (..., 3) and all functions broadcast over leading dimensions, so a
single (3,) vector works the same as a (N, 3) batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

UNIT_TOL = 1e-6

# Rec. 709 luma weights, used for lobe selection probabilities.
LUMA = np.array([0.2126, 0.7152, 0.0722])


def dot(a, b):
    """Row-wise dot product over the last axis, keeping it as size-1."""
    return np.sum(a * b, axis=-1, keepdims=True)


def norm(v):
    return np.linalg.norm(v, axis=-1, keepdims=True)


def normalize(v):
    """Unit-length copy of v. Raises on (near-)zero vectors."""
    n = norm(v)
    if np.any(n < 1e-12):
        raise ValueError("cannot normalize zero-length vector")
    return v / n


def is_unit(v, tol=UNIT_TOL):
    return np.all(np.abs(norm(v) - 1.0) <= tol)


def reflect(direction, normal):
    """Mirror `direction` about `normal`: d - 2 (d.n) n."""
    return direction - 2.0 * dot(direction, normal) * normal


def luminance(rgb):
    return np.sum(rgb * LUMA, axis=-1)


@dataclass(frozen=True)
class Frame:
    """Right-handed orthonormal frame (tangent, bitangent, normal)."""

    tangent: np.ndarray
    bitangent: np.ndarray
    normal: np.ndarray


def frame_vectors(normal):
    """Tangent/bitangent arrays completing `normal` to an orthonormal frame.

    Branch-free construction (Duff et al.), stable for every input direction,
    so batches never hit a special case. `normal` must be unit length.
    """
    normal = np.asarray(normal, dtype=np.float64)
    n = norm(normal)
    if np.any(n < 1e-12):
        raise ValueError("zero-length normal")
    if not is_unit(normal):
        raise ValueError("normal must be unit length within 1e-6")
    x, y, z = normal[..., 0], normal[..., 1], normal[..., 2]
    s = np.copysign(1.0, z)
    a = -1.0 / (s + z)
    b = x * y * a
    tangent = np.stack([1.0 + s * x * x * a, s * b, -s * x], axis=-1)
    bitangent = np.stack([b, s + y * y * a, -y], axis=-1)
    return tangent, bitangent


def build_frame(normal) -> Frame:
    tangent, bitangent = frame_vectors(normal)
    return Frame(tangent, bitangent, np.asarray(normal, dtype=np.float64))


def to_world(frame_t, frame_b, frame_n, local):
    """Map local-frame directions (z along the normal) into world space."""
    return (
        local[..., 0:1] * frame_t
        + local[..., 1:2] * frame_b
        + local[..., 2:3] * frame_n
    )


def to_local(frame_t, frame_b, frame_n, world):
    return np.stack(
        [
            np.sum(world * frame_t, axis=-1),
            np.sum(world * frame_b, axis=-1),
            np.sum(world * frame_n, axis=-1),
        ],
        axis=-1,
    )


def sample_cosine_hemisphere(u1, u2):
    """Cosine-weighted direction in the local frame (z = normal).

    Returns (direction, pdf) with pdf = cos(theta) / pi. Accepts scalars or
    arrays of matching shape.
    """
    u1 = np.asarray(u1, dtype=np.float64)
    u2 = np.asarray(u2, dtype=np.float64)
    r = np.sqrt(u1)
    phi = 2.0 * np.pi * u2
    z = np.sqrt(np.maximum(1.0 - u1, 0.0))
    direction = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)
    pdf = z / np.pi
    return direction, pdf


def _mix64(a: int, b: int) -> int:
    """SplitMix64-style mixing of two 64-bit ints into one stream id."""
    x = (a * 0x9E3779B97F4A7C15 + b) & 0xFFFFFFFFFFFFFFFF
    x ^= x >> 30
    x = (x * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    x ^= x >> 27
    x = (x * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    x ^= x >> 31
    return x


class RngStream:
    """Counter-based random stream keyed by (seed, stream id).

    Built on Philox4x64, so two streams with distinct ids are statistically
    independent and the sequence for a given (seed, stream id) is bitwise
    reproducible regardless of what other streams were consumed. `counter`
    tracks the number of values drawn (bookkeeping for debug assertions;
    the Philox state itself carries the authoritative position).
    """

    __slots__ = ("seed", "stream_id", "counter", "_gen")

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream_id = int(stream_id) & 0xFFFFFFFFFFFFFFFF
        self.counter = 0
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def split(self, child_id: int) -> "RngStream":
        """Derive an independent child stream; deterministic in child_id."""
        return RngStream(self.seed, _mix64(self.stream_id, int(child_id)))

    def uniform(self, size=None) -> np.ndarray:
        n = 1 if size is None else int(np.prod(size))
        self.counter += n
        return self._gen.random(size)

    def integers(self, low, high, size=None):
        n = 1 if size is None else int(np.prod(size))
        self.counter += n
        return self._gen.integers(low, high, size=size)
