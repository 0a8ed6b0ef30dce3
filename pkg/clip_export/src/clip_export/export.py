"""Manifest reading and cache export.

Consumes either an image manifest CSV (path,class_id) or a prompt set
JSONL (one record per prompt with class_id and text) and writes the
binary embedding cache that the training side reads.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from rplkg.embedstore import EmbeddingCache, normalize_rows, write_cache

from .encoders import Encoder, get_encoder

DEFAULT_BATCH = 64


class ExportError(Exception):
    pass


@dataclass
class ExportJob:
    backbone: str
    manifest_path: str
    out_path: str
    kind: str  # "image" | "prompt"
    batch_size: int = DEFAULT_BATCH

    def __post_init__(self):
        if self.kind not in ("image", "prompt"):
            raise ExportError(f"kind must be 'image' or 'prompt', got {self.kind!r}")
        if self.batch_size < 1:
            raise ExportError("batch_size must be >= 1")


@dataclass
class ExportResult:
    count: int
    dim: int
    skipped: int = 0
    skipped_paths: list[str] = field(default_factory=list)


def read_image_manifest(path: str) -> tuple[list[str], np.ndarray]:
    """CSV rows of path,class_id; a 'path' header row is tolerated."""
    paths, labels = [], []
    with open(path, newline="") as f:
        for row in csv.reader(f):
            if not row or (row[0].strip() == "path"):
                continue
            if len(row) < 2:
                raise ExportError(f"manifest row needs path,class_id: {row!r}")
            paths.append(row[0].strip())
            labels.append(int(row[1]))
    if not paths:
        raise ExportError("image manifest is empty")
    return paths, np.asarray(labels, dtype=np.int64)


def read_prompt_manifest(path: str) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Prompt JSONL; returns (texts, class_ids, prompt positions).

    Positions are assigned per class in file order so the cache's
    per-class prompt indices are contiguous from zero.
    """
    texts, labels, positions = [], [], []
    next_j: dict[int, int] = {}
    with open(path) as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            text = rec.get("text", "")
            if not text:
                raise ExportError(f"empty prompt text at line {line_no}")
            c = int(rec["class_id"])
            texts.append(text)
            labels.append(c)
            positions.append(next_j.setdefault(c, 0))
            next_j[c] += 1
    if not texts:
        raise ExportError("prompt manifest is empty")
    return texts, np.asarray(labels, dtype=np.int64), np.asarray(positions, dtype=np.int64)


def _encode_images(encoder: Encoder, paths: list[str], labels: np.ndarray,
                   batch_size: int) -> tuple[np.ndarray, np.ndarray, list[str]]:
    vecs, kept, bad = [], [], []
    for start in range(0, len(paths), batch_size):
        chunk = paths[start:start + batch_size]
        good = []
        for i, p in enumerate(chunk):
            try:
                vecs.append(encoder.encode_images([p]))
                good.append(start + i)
            except OSError:
                bad.append(p)
                warnings.warn(f"skipping unreadable image {p}")
        kept.extend(good)
    if not vecs:
        return np.empty((0, encoder.dim), dtype=np.float32), np.empty(0, dtype=np.int64), bad
    return np.concatenate(vecs, axis=0), labels[np.asarray(kept, dtype=np.int64)], bad


def export(job: ExportJob, encoder: Optional[Encoder] = None) -> ExportResult:
    """Encode the manifest and write the cache; returns a summary.

    Unreadable images are skipped with a warning; producing zero records
    is an error.  Re-running with identical inputs and weights writes a
    byte-identical file.
    """
    encoder = encoder or get_encoder(job.backbone)
    prompt_j = None
    skipped: list[str] = []
    if job.kind == "image":
        paths, labels = read_image_manifest(job.manifest_path)
        vecs, labels, skipped = _encode_images(encoder, paths, labels, job.batch_size)
    else:
        texts, labels, prompt_j = read_prompt_manifest(job.manifest_path)
        vecs = np.concatenate([
            encoder.encode_texts(texts[s:s + job.batch_size])
            for s in range(0, len(texts), job.batch_size)
        ], axis=0)
    if vecs.shape[0] == 0:
        raise ExportError("export produced zero records")
    cache = EmbeddingCache(kind=job.kind,
                           vectors=normalize_rows(vecs).astype(np.float32),
                           labels=labels, prompt_j=prompt_j)
    write_cache(cache, job.out_path)
    return ExportResult(count=cache.count, dim=cache.dim,
                        skipped=len(skipped), skipped_paths=skipped)
