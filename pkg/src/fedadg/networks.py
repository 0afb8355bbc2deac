"""Multilayer perceptrons for the four components plus parameter vectors.

Parameter segments are named ``<prefix>.<layer>.weight`` / ``<prefix>.<layer>.bias``
with prefixes ``w_f`` (feature extractor), ``w_c`` (classifier), ``w_g``
(distribution generator) and ``w_d`` (discriminator). Within a component the
canonical order is layer index ascending, weight before bias. A full model
vector concatenates components in the order ``w_f, w_c, w_g``.

The discriminator's random projection matrix is not a parameter: it is never
trained, flattened or sent anywhere.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

CHECKPOINT_MAGIC = b"FADGCKPT"
CHECKPOINT_VERSION = 1


class IncompatibleParameters(ValueError):
    """A parameter vector does not fit the component it is loaded into."""


@dataclass(frozen=True)
class Segment:
    name: str
    shape: tuple[int, ...]
    values: np.ndarray  # flat, read-only float64

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


class ParameterVector:
    """Ordered, immutable (name, shape, flat values) segments."""

    def __init__(self, segments: Iterable[Segment]):
        segs = []
        for s in segments:
            vals = np.array(s.values, dtype=np.float64).reshape(-1)
            if vals.size != int(np.prod(s.shape)):
                raise IncompatibleParameters(
                    f"segment {s.name}: {vals.size} values for shape {s.shape}")
            vals.setflags(write=False)
            segs.append(Segment(s.name, tuple(int(d) for d in s.shape), vals))
        names = [s.name for s in segs]
        if len(set(names)) != len(names):
            raise IncompatibleParameters("duplicate segment names")
        self.segments: tuple[Segment, ...] = tuple(segs)

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.segments]

    @property
    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(s.name, s.shape) for s in self.segments]

    def __len__(self) -> int:
        return sum(s.size for s in self.segments)

    def __getitem__(self, name: str) -> np.ndarray:
        for s in self.segments:
            if s.name == name:
                return s.values.reshape(s.shape)
        raise KeyError(name)

    def flat(self) -> np.ndarray:
        if not self.segments:
            return np.zeros(0)
        return np.concatenate([s.values for s in self.segments])

    def with_flat(self, flat: np.ndarray) -> ParameterVector:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != len(self):
            raise IncompatibleParameters(f"expected {len(self)} values, got {flat.size}")
        out, off = [], 0
        for s in self.segments:
            out.append(Segment(s.name, s.shape, flat[off:off + s.size]))
            off += s.size
        return ParameterVector(out)

    def select(self, prefixes: Sequence[str]) -> ParameterVector:
        return ParameterVector(s for s in self.segments if s.name.split(".")[0] in prefixes)

    def __add__(self, other: ParameterVector) -> ParameterVector:
        return ParameterVector(self.segments + other.segments)

    def equals(self, other: ParameterVector) -> bool:
        """Bit-exact comparison of layout and values."""
        return self.layout == other.layout and all(
            a.values.tobytes() == b.values.tobytes()
            for a, b in zip(self.segments, other.segments))


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"label out of range [0, {num_classes})")
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels.astype(int)] = 1.0
    return out


def sample_noise(rng: np.random.Generator, batch: int, noise_dim: int) -> np.ndarray:
    """i.i.d. uniform [0, 1) noise."""
    return rng.random((batch, noise_dim))


class MLP:
    """Fully connected layers with ReLU between them (none after the last)."""

    def __init__(self, prefix: str, sizes: Sequence[int], rng: np.random.Generator | None = None):
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        self.prefix = prefix
        self.sizes = [int(s) for s in sizes]
        self.layers: list[tuple[Tensor, Tensor]] = []
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            if rng is None:
                w, b = np.zeros((fan_in, fan_out)), np.zeros(fan_out)
            else:
                bound = 1.0 / np.sqrt(fan_in)
                w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
                b = rng.uniform(-bound, bound, size=fan_out)
            self.layers.append((
                Tensor(w, requires_grad=True, name=f"{prefix}.{i}.weight"),
                Tensor(b, requires_grad=True, name=f"{prefix}.{i}.bias"),
            ))

    @property
    def input_dim(self) -> int:
        return self.sizes[0]

    @property
    def output_dim(self) -> int:
        return self.sizes[-1]

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer]

    def forward(self, x: Tensor) -> Tensor:
        if x.data.ndim != 2 or x.shape[1] != self.input_dim:
            raise T.ShapeError(f"{self.prefix}: expected [batch, {self.input_dim}] input, got {x.shape}")
        n = x.shape[0]
        h = x
        for i, (w, b) in enumerate(self.layers):
            h = T.matmul(h, w) + T.tile_rows(b, n)
            if i < len(self.layers) - 1:
                h = T.relu(h)
        return h

    __call__ = forward

    def flatten(self) -> ParameterVector:
        return ParameterVector(Segment(p.name, p.shape, p.data.copy()) for p in self.parameters())

    def unflatten(self, pv: ParameterVector) -> None:
        params = self.parameters()
        expected = [(p.name, p.shape) for p in params]
        if pv.layout != expected:
            raise IncompatibleParameters(
                f"{self.prefix}: layout {pv.layout} does not match {expected} "
                f"(checkpoint format v{CHECKPOINT_VERSION})")
        for p, seg in zip(params, pv.segments):
            p.data = seg.values.reshape(seg.shape).copy()
            p.grad = None


class FeatureExtractor(MLP):
    def __init__(self, input_dim: int, hidden: Sequence[int], feature_dim: int, rng=None):
        super().__init__("w_f", [input_dim, *hidden, feature_dim], rng)

    @property
    def feature_dim(self) -> int:
        return self.output_dim


class Classifier(MLP):
    def __init__(self, feature_dim: int, hidden: Sequence[int], num_classes: int, rng=None):
        super().__init__("w_c", [feature_dim, *hidden, num_classes], rng)

    @property
    def num_classes(self) -> int:
        return self.output_dim

    def probs(self, h: Tensor) -> Tensor:
        return T.softmax(self.forward(h))


class DistributionGenerator(MLP):
    """Maps (noise, one-hot label) to a synthetic feature vector.

    With ``conditional=False`` the label is ignored and the input is the noise alone.
    """

    def __init__(self, noise_dim: int, num_classes: int, feature_dim: int,
                 rng=None, conditional: bool = True):
        in_dim = noise_dim + (num_classes if conditional else 0)
        super().__init__("w_g", [in_dim, feature_dim, feature_dim], rng)
        self.noise_dim = noise_dim
        self.num_classes = num_classes
        self.conditional = conditional

    def generate(self, z: np.ndarray, y: np.ndarray) -> Tensor:
        z = np.asarray(z, dtype=np.float64)
        if z.ndim != 2 or z.shape[1] != self.noise_dim:
            raise T.ShapeError(f"noise must be [batch, {self.noise_dim}], got {z.shape}")
        if len(y) != z.shape[0]:
            raise T.ShapeError(f"{len(y)} labels for a noise batch of {z.shape[0]}")
        onehot = one_hot(y, self.num_classes)
        x = np.concatenate([z, onehot], axis=1) if self.conditional else z
        return self.forward(Tensor(x))


def make_projection(rng: np.random.Generator, feature_dim: int, rp_dim: int) -> np.ndarray:
    """Frozen Gaussian projection with entries N(0, 1/rp_dim)."""
    if rp_dim < 1:
        raise ValueError("rp_dim must be >= 1")
    return rng.normal(0.0, 1.0 / np.sqrt(rp_dim), size=(feature_dim, rp_dim))


class Discriminator(MLP):
    """logistic(MLP(concat(features @ projection, one_hot(y)))).

    The projection is a constant: gradients pass through it to the features
    but it is never updated.
    """

    def __init__(self, projection: np.ndarray, num_classes: int, rng=None, conditional: bool = True):
        projection = np.array(projection, dtype=np.float64)
        projection.setflags(write=False)
        self.projection = projection
        feature_dim, rp_dim = projection.shape
        in_dim = rp_dim + (num_classes if conditional else 0)
        super().__init__("w_d", [in_dim, feature_dim, 1], rng)
        self.feature_dim = feature_dim
        self.rp_dim = rp_dim
        self.num_classes = num_classes
        self.conditional = conditional

    def discriminate(self, features: Tensor, y: np.ndarray) -> Tensor:
        if features.data.ndim != 2 or features.shape[1] != self.feature_dim:
            raise T.ShapeError(f"discriminator expects [batch, {self.feature_dim}] features, got {features.shape}")
        projected = T.matmul(features, Tensor(self.projection))
        if self.conditional:
            projected = T.concat([projected, Tensor(one_hot(y, self.num_classes))])
        return T.sigmoid(self.forward(projected))


# checkpoint file format:
#   8 bytes magic, u32 format version, u32 header length, JSON header (utf-8),
#   then every segment's values as little-endian float64 in header order.

def config_hash(config_dict: dict) -> str:
    blob = json.dumps(config_dict, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def encode_parameters(pv: ParameterVector, **header) -> bytes:
    head = dict(header)
    head["format_version"] = CHECKPOINT_VERSION
    head["segments"] = [{"name": s.name, "shape": list(s.shape)} for s in pv.segments]
    hb = json.dumps(head, sort_keys=True).encode("utf-8")
    body = pv.flat().astype("<f8").tobytes()
    return CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(hb)) + hb + body


def decode_parameters(blob: bytes) -> tuple[dict, ParameterVector]:
    if blob[:8] != CHECKPOINT_MAGIC:
        raise IncompatibleParameters("not a parameter file (bad magic)")
    version, hlen = struct.unpack("<II", blob[8:16])
    if version != CHECKPOINT_VERSION:
        raise IncompatibleParameters(f"unsupported format version {version} (expected {CHECKPOINT_VERSION})")
    head = json.loads(blob[16:16 + hlen].decode("utf-8"))
    flat = np.frombuffer(blob[16 + hlen:], dtype="<f8").astype(np.float64)
    segs, off = [], 0
    for s in head["segments"]:
        shape = tuple(s["shape"])
        n = int(np.prod(shape))
        if off + n > flat.size:
            raise IncompatibleParameters("truncated parameter payload")
        segs.append(Segment(s["name"], shape, flat[off:off + n]))
        off += n
    if off != flat.size:
        raise IncompatibleParameters("trailing bytes after parameter payload")
    return head, ParameterVector(segs)


def save_checkpoint(path: str | Path, pv: ParameterVector, *, seed: int, config_hash: str, **extra) -> None:
    Path(path).write_bytes(encode_parameters(pv, seed=seed, config_hash=config_hash, **extra))


def load_checkpoint(path: str | Path) -> tuple[dict, ParameterVector]:
    return decode_parameters(Path(path).read_bytes())
