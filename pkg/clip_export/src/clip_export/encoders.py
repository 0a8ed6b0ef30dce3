"""Encoder backbones behind one small interface.

Two families are registered: pretrained CLIP vision-language models
(require torch + open_clip and downloaded weights) and a dependency-free
"toy-color" encoder used for tests and offline smoke runs.  The toy
encoder maps images to color statistics and texts to the canonical color
they mention, so color-named classes are separable zero-shot.
"""

from __future__ import annotations

import hashlib
from typing import Protocol

import numpy as np
from PIL import Image

CLIP_BACKBONES = ("ViT-B/16", "ViT-B/32")

# canonical sRGB anchors for the color vocabulary the toy encoder knows
_COLOR_WORDS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
    "white": (1.0, 1.0, 1.0),
    "black": (0.0, 0.0, 0.0),
    "gray": (0.5, 0.5, 0.5),
    "orange": (1.0, 0.5, 0.0),
    "purple": (0.5, 0.0, 0.5),
    "brown": (0.55, 0.27, 0.07),
}


class Encoder(Protocol):
    name: str
    dim: int

    def encode_images(self, paths: list[str]) -> np.ndarray: ...

    def encode_texts(self, texts: list[str]) -> np.ndarray: ...


def _color_features(rgb: np.ndarray) -> np.ndarray:
    """Shared 8-dim featurization of an (r, g, b) triple in [0, 1]."""
    r, g, b = (float(v) for v in rgb)
    feats = np.array([r - 0.5, g - 0.5, b - 0.5,
                      r - g, g - b, b - r,
                      (r + g + b) / 3.0 - 0.5, 0.25], dtype=np.float64)
    return feats / np.linalg.norm(feats)


def _text_seed_vector(text: str, dim: int) -> np.ndarray:
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    seed = int.from_bytes(digest[:8], "little")
    v = np.random.default_rng(seed).standard_normal(dim)
    return v / np.linalg.norm(v)


class ToyColorEncoder:
    """Deterministic hand-built encoder over mean image color.

    Images map to their mean RGB; texts map to the first color word they
    contain (falling back to a stable text-hash direction so unknown
    prompts are still distinct and deterministic).
    """

    name = "toy-color"
    dim = 8

    def encode_images(self, paths: list[str]) -> np.ndarray:
        out = np.empty((len(paths), self.dim), dtype=np.float32)
        for i, path in enumerate(paths):
            with Image.open(path) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
            out[i] = _color_features(arr.reshape(-1, 3).mean(axis=0))
        return out

    def encode_texts(self, texts: list[str]) -> np.ndarray:
        out = np.empty((len(texts), self.dim), dtype=np.float32)
        for i, text in enumerate(texts):
            words = text.lower().replace(".", " ").replace(",", " ").split()
            color = next((w for w in words if w in _COLOR_WORDS), None)
            if color is not None:
                out[i] = _color_features(np.array(_COLOR_WORDS[color]))
            else:
                out[i] = _text_seed_vector(text, self.dim)
        return out


class ClipEncoder:
    """Pretrained CLIP backbone via open_clip; weights must be available
    locally (this tool never downloads datasets or models itself)."""

    def __init__(self, backbone: str, device: str = "cpu"):
        try:
            import open_clip
            import torch
        except ImportError as exc:
            raise RuntimeError(
                f"backbone {backbone!r} needs torch and open_clip installed"
            ) from exc
        arch = backbone.replace("/", "-")
        model, _, preprocess = open_clip.create_model_and_transforms(
            arch, pretrained="openai")
        self._torch = torch
        self._open_clip = open_clip
        self._model = model.eval().to(device)
        self._preprocess = preprocess
        self._device = device
        self.name = backbone
        self.dim = model.visual.output_dim

    def encode_images(self, paths: list[str]) -> np.ndarray:
        torch = self._torch
        batch = torch.stack([
            self._preprocess(Image.open(p).convert("RGB")) for p in paths
        ]).to(self._device)
        with torch.no_grad():
            feats = self._model.encode_image(batch)
        return feats.cpu().numpy().astype(np.float32)

    def encode_texts(self, texts: list[str]) -> np.ndarray:
        torch = self._torch
        tokens = self._open_clip.tokenize(texts).to(self._device)
        with torch.no_grad():
            feats = self._model.encode_text(tokens)
        return feats.cpu().numpy().astype(np.float32)


def get_encoder(backbone: str) -> Encoder:
    if backbone == ToyColorEncoder.name:
        return ToyColorEncoder()
    if backbone in CLIP_BACKBONES:
        return ClipEncoder(backbone)
    raise ValueError(f"unknown backbone {backbone!r}; choose one of "
                     f"{(ToyColorEncoder.name,) + CLIP_BACKBONES}")
