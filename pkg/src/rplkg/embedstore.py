"""On-disk cache of unit-norm embedding vectors.

Binary layout: magic "RPKG" | version u16 | kind u8 (0=image, 1=prompt)
| dim u32 | count u64 | per record (class_id u32, prompt_j u32, dim x
f32) | CRC32 of the record payload.  All integers and floats are
little-endian; images store 0xFFFFFFFF in the prompt_j slot.

Also provides a seeded synthetic encoder that plants one "good" prompt
per class, used as the desk-scale oracle the selector must rediscover.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from typing import BinaryIO, Optional, Union

import numpy as np

from .errors import FormatError, ValidationError

MAGIC = b"RPKG"
VERSION = 1
NO_PROMPT = 0xFFFFFFFF
NORM_TOL = 1e-5

_HEADER = struct.Struct("<4sHBIQ")


def _record_dtype(dim: int) -> np.dtype:
    return np.dtype([("class_id", "<u4"), ("prompt_j", "<u4"), ("vec", "<f4", (dim,))])


@dataclass
class EmbeddingCache:
    kind: str  # "image" | "prompt"
    vectors: np.ndarray  # (count, dim) float32
    labels: np.ndarray  # (count,) int class ids
    prompt_j: Optional[np.ndarray] = None  # (count,) prompt position, prompt caches only

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.count else 0

    def validate(self) -> None:
        if self.kind not in ("image", "prompt"):
            raise ValidationError(f"unknown cache kind {self.kind!r}")
        if self.vectors.ndim != 2:
            raise ValidationError("vectors must be a count x dim matrix")
        if self.labels.shape != (self.count,):
            raise ValidationError("labels length must match vector count")
        if self.count and self.labels.min() < 0:
            raise ValidationError("negative class id")
        norms = np.linalg.norm(self.vectors, axis=1)
        if self.count and np.abs(norms - 1.0).max() > NORM_TOL:
            raise ValidationError("vectors must be unit-norm within 1e-5")
        if self.kind == "prompt":
            if self.prompt_j is None or self.prompt_j.shape != (self.count,):
                raise ValidationError("prompt cache requires per-vector prompt positions")
            pairs = set(zip(self.labels.tolist(), self.prompt_j.tolist()))
            if len(pairs) != self.count:
                raise ValidationError("duplicate (class_id, prompt_j) pair")
            for c in range(self.n_classes):
                js = np.sort(self.prompt_j[self.labels == c])
                if js.size and not np.array_equal(js, np.arange(js.size)):
                    raise ValidationError(f"prompt positions for class {c} are not 0..M_c-1")


def write_cache(cache: EmbeddingCache, sink: Union[str, BinaryIO]) -> int:
    """Write the binary format; returns the number of bytes written."""
    cache.validate()
    if isinstance(sink, str):
        with open(sink, "wb") as f:
            return write_cache(cache, f)
    kind_code = 0 if cache.kind == "image" else 1
    header = _HEADER.pack(MAGIC, VERSION, kind_code, cache.dim, cache.count)
    rec = np.zeros(cache.count, dtype=_record_dtype(cache.dim))
    rec["class_id"] = cache.labels
    rec["prompt_j"] = NO_PROMPT if cache.prompt_j is None else cache.prompt_j
    rec["vec"] = cache.vectors
    body = rec.tobytes()
    crc = zlib.crc32(body) & 0xFFFFFFFF
    data = header + body + struct.pack("<I", crc)
    sink.write(data)
    return len(data)


def read_cache(source: Union[str, BinaryIO]) -> EmbeddingCache:
    """Read and validate a cache file; exact inverse of write_cache."""
    if isinstance(source, str):
        with open(source, "rb") as f:
            return read_cache(f)
    raw = source.read()
    if len(raw) < _HEADER.size + 4:
        raise FormatError("cache file truncated")
    magic, version, kind_code, dim, count = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError("bad magic, not an RPKG cache")
    if version != VERSION:
        raise FormatError(f"unsupported cache version {version}")
    if kind_code not in (0, 1):
        raise FormatError(f"unknown kind code {kind_code}")
    rec_size = 8 + 4 * dim
    body = raw[_HEADER.size:_HEADER.size + count * rec_size]
    if len(body) != count * rec_size:
        raise FormatError("cache payload truncated")
    (crc_stored,) = struct.unpack_from("<I", raw, _HEADER.size + count * rec_size)
    if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise FormatError("payload CRC mismatch")
    rec = np.frombuffer(body, dtype=_record_dtype(dim))
    labels = rec["class_id"].astype(np.int64)
    prompt_j = rec["prompt_j"].astype(np.int64)
    vectors = rec["vec"].astype(np.float32)
    kind = "image" if kind_code == 0 else "prompt"
    cache = EmbeddingCache(
        kind=kind,
        vectors=vectors,
        labels=labels,
        prompt_j=None if kind == "image" else prompt_j,
    )
    cache.validate()
    return cache


def normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ValidationError("cannot normalize a zero vector")
    return x / norms


@dataclass
class SyntheticWorld:
    """Seeded generator config for a planted-prompt toy dataset."""

    seed: int
    n_classes: int
    dim: int
    prompts_per_class: int
    planted: Optional[list[int]] = None  # index of the good prompt per class
    noise_scale: float = 0.1
    images_per_class: int = 40
    planted_offset: float = 0.01  # perturbation of the good prompt off the class anchor
    template_offset: float = 0.3  # perturbation of the manual-template stand-in

    def __post_init__(self):
        if self.n_classes < 2 or self.dim < 2:
            raise ValidationError("synthetic world needs n_classes >= 2 and dim >= 2")
        if self.noise_scale < 0:
            raise ValidationError("noise_scale must be >= 0")
        if self.planted is not None:
            if len(self.planted) != self.n_classes:
                raise ValidationError("planted needs one index per class")
            if any(not 0 <= j < self.prompts_per_class for j in self.planted):
                raise ValidationError("planted index out of range")


@dataclass
class SynthCaches:
    images: EmbeddingCache
    prompts: EmbeddingCache
    templates: EmbeddingCache  # one manual-template stand-in per class
    planted: list[int] = field(default_factory=list)


def synth_encode(world: SyntheticWorld) -> SynthCaches:
    """Deterministically generate image/prompt/template caches.

    Each class gets a unit anchor; its planted prompt sits near the
    anchor, distractor prompts are independent random directions, and
    images are noisy copies of the anchor.
    """
    rng = np.random.default_rng(world.seed)
    C, d, M = world.n_classes, world.dim, world.prompts_per_class
    anchors = normalize_rows(rng.standard_normal((C, d)))
    planted = world.planted
    if planted is None:
        planted = rng.integers(0, M, size=C).tolist()

    prompt_vecs = normalize_rows(rng.standard_normal((C, M, d)))
    good = normalize_rows(anchors + world.planted_offset * rng.standard_normal((C, d)))
    for c in range(C):
        prompt_vecs[c, planted[c]] = good[c]

    templates = normalize_rows(anchors + world.template_offset * rng.standard_normal((C, d)))

    n = world.images_per_class
    noise = rng.standard_normal((C, n, d))
    images = normalize_rows(anchors[:, None, :] + world.noise_scale * noise)

    f32 = lambda a: normalize_rows(a.astype(np.float32))
    image_cache = EmbeddingCache(
        kind="image",
        vectors=f32(images.reshape(C * n, d)),
        labels=np.repeat(np.arange(C), n),
    )
    prompt_cache = EmbeddingCache(
        kind="prompt",
        vectors=f32(prompt_vecs.reshape(C * M, d)),
        labels=np.repeat(np.arange(C), M),
        prompt_j=np.tile(np.arange(M), C),
    )
    template_cache = EmbeddingCache(
        kind="prompt",
        vectors=f32(templates),
        labels=np.arange(C),
        prompt_j=np.zeros(C, dtype=np.int64),
    )
    for cache in (image_cache, prompt_cache, template_cache):
        cache.validate()
    return SynthCaches(images=image_cache, prompts=prompt_cache,
                       templates=template_cache, planted=list(planted))
