"""Parameter-free comparison methods over the same cached embeddings.

All four baselines score an image against each class by a dot product
with some combination of that class's prompt embeddings: the manual
template (zeroshot), a random prompt, the plain average, or an
instance-weighted (attentive) average.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError
from .selector import PromptBlock

BASELINE_KINDS = ("zeroshot", "random", "average", "attentive")


def zeroshot_scores(images: np.ndarray, template_block: PromptBlock) -> np.ndarray:
    """score_c = x . t_c with the single manual-template embedding per class."""
    if template_block.counts.max() != 1:
        raise ValidationError("zeroshot requires exactly one template prompt per class")
    t = template_block.tensor[:, 0, :]  # (C, d)
    return images @ t.T


def random_prompt_scores(images: np.ndarray, block: PromptBlock, seed: int) -> np.ndarray:
    """Seeded uniform choice of one prompt per (image, class)."""
    rng = np.random.default_rng(seed)
    B = images.shape[0]
    C, M, _ = block.tensor.shape
    j = rng.integers(0, block.counts[None, :], size=(B, C))  # (B, C), valid per class
    picked = block.tensor[np.arange(C)[None, :], j]  # (B, C, d)
    return np.einsum("bd,bcd->bc", images, picked, optimize=True)


def average_prompt_scores(images: np.ndarray, block: PromptBlock) -> np.ndarray:
    """Class vector = arithmetic mean of its prompts, not re-normalized."""
    sums = (block.tensor * block.mask[:, :, None]).sum(axis=1)
    means = sums / block.counts[:, None]
    return images @ means.T


def attentive_prompt_scores(images: np.ndarray, block: PromptBlock,
                            temperature: float = 1.0) -> np.ndarray:
    """Instance-weighted average: softmax over per-prompt similarities."""
    if temperature <= 0:
        raise ValidationError("temperature must be positive")
    sims = np.einsum("bd,cmd->bcm", images, block.tensor, optimize=True)
    z = sims / temperature
    z = np.where(block.mask[None, :, :], z, -np.inf)
    z = z - z.max(axis=2, keepdims=True)
    e = np.exp(z) * block.mask[None, :, :]
    w = e / e.sum(axis=2, keepdims=True)
    class_vecs = np.einsum("bcm,cmd->bcd", w, block.tensor, optimize=True)
    return np.einsum("bd,bcd->bc", images, class_vecs, optimize=True)


def baseline_scores(kind: str, images: np.ndarray, block: PromptBlock,
                    template_block: PromptBlock = None, seed: int = 0,
                    temperature: float = 1.0) -> np.ndarray:
    """Dispatch by BaselineKind name."""
    if kind == "zeroshot":
        return zeroshot_scores(images, template_block if template_block is not None else block)
    if kind == "random":
        return random_prompt_scores(images, block, seed)
    if kind == "average":
        return average_prompt_scores(images, block)
    if kind == "attentive":
        return attentive_prompt_scores(images, block, temperature)
    raise ValidationError(f"unknown baseline kind {kind!r}")
