"""Gumbel-Softmax prompt selector over cached embeddings.

Three learnable projections map an image embedding to a query and each
class's prompt embeddings to keys and values.  Per (image, class) the
selector picks one prompt: hard argmax of the Gumbel-perturbed
similarities on the forward pass, with gradients flowing through the
soft relaxation (straight-through).  The composed prompt vector is
scored against the image by dot product.

All gradients here are hand-derived and checked against central finite
differences in the test suite.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import BinaryIO, Optional, Union

import numpy as np

from .embedstore import EmbeddingCache
from .errors import FormatError, ValidationError

NEG_INF = -1e30  # mask filler that survives subtract-max softmax
_U_EPS = 1e-12


@dataclass
class SelectorParams:
    w_q: np.ndarray  # (d, d)
    w_k: np.ndarray
    w_v: np.ndarray
    tau: float
    dropout_rate: float = 0.0
    logit_scale: float = 100.0

    def __post_init__(self):
        d = self.w_q.shape[0]
        for name in ("w_q", "w_k", "w_v"):
            w = getattr(self, name)
            if w.shape != (d, d):
                raise ValidationError(f"{name} must be square d x d")
            if not np.all(np.isfinite(w)):
                raise ValidationError(f"{name} contains non-finite entries")
        if self.tau <= 0:
            raise ValidationError("tau must be positive")
        if not 0 <= self.dropout_rate < 1:
            raise ValidationError("dropout_rate must be in [0, 1)")
        if self.logit_scale <= 0:
            raise ValidationError("logit_scale must be positive")

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]

    def copy(self) -> "SelectorParams":
        return SelectorParams(self.w_q.copy(), self.w_k.copy(), self.w_v.copy(),
                              self.tau, self.dropout_rate, self.logit_scale)


def param_count(d: int) -> int:
    """Learnable parameter count: three bias-free d x d projections."""
    return 3 * d * d


def init_params(d: int, tau: float, seed: int = 0, dropout_rate: float = 0.0,
                logit_scale: float = 100.0, init_sigma: float = 0.01) -> SelectorParams:
    """Identity plus small seeded gaussian, so the untrained selector
    approximates plain similarity-in-embedding-space selection."""
    rng = np.random.default_rng(seed)
    mats = [np.eye(d) + init_sigma * rng.standard_normal((d, d)) for _ in range(3)]
    return SelectorParams(*mats, tau=tau, dropout_rate=dropout_rate, logit_scale=logit_scale)


@dataclass
class PromptBlock:
    """Prompt embeddings padded to a (C, M_max, d) tensor with a validity mask."""

    tensor: np.ndarray  # (C, M_max, d)
    mask: np.ndarray  # (C, M_max) bool
    counts: np.ndarray  # (C,) M_c
    texts: Optional[list[list[str]]] = None

    @property
    def n_classes(self) -> int:
        return self.tensor.shape[0]

    @property
    def max_prompts(self) -> int:
        return self.tensor.shape[1]

    @property
    def dim(self) -> int:
        return self.tensor.shape[2]

    @classmethod
    def from_cache(cls, cache: EmbeddingCache, texts: Optional[list[list[str]]] = None) -> "PromptBlock":
        if cache.kind != "prompt":
            raise ValidationError("PromptBlock requires a prompt cache")
        C = cache.n_classes
        counts = np.bincount(cache.labels, minlength=C)
        if counts.min() < 1:
            raise ValidationError("every class needs at least one prompt")
        M = int(counts.max())
        tensor = np.zeros((C, M, cache.dim), dtype=cache.vectors.dtype)
        mask = np.zeros((C, M), dtype=bool)
        tensor[cache.labels, cache.prompt_j] = cache.vectors
        mask[cache.labels, cache.prompt_j] = True
        return cls(tensor=tensor, mask=mask, counts=counts.astype(np.int64), texts=texts)

    def subset(self, class_ids: list[int]) -> "PromptBlock":
        """Restricted label space with classes renumbered 0..len-1."""
        idx = np.asarray(class_ids)
        texts = [self.texts[c] for c in class_ids] if self.texts is not None else None
        return PromptBlock(tensor=self.tensor[idx], mask=self.mask[idx],
                           counts=self.counts[idx], texts=texts)


@dataclass
class SelectionTrace:
    alpha: np.ndarray  # (B, C, M) forward weights
    chosen: np.ndarray  # (B, C) argmax prompt index
    tstar: np.ndarray  # (B, C, d) composed prompt vectors
    scores: np.ndarray  # (B, C) final class scores


@dataclass
class Gradients:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray


def gumbel_from_uniform(u: np.ndarray) -> np.ndarray:
    """Inverse-transform Gumbel(0,1): g = -log(-log(u)), u in (0,1)."""
    return -np.log(-np.log(u))


def sample_gumbel(shape, seed: int) -> np.ndarray:
    """Seeded Gumbel(0,1) draws; uniforms clipped into the open interval."""
    rng = np.random.default_rng(seed)
    u = np.clip(rng.random(shape), _U_EPS, 1.0 - _U_EPS)
    return gumbel_from_uniform(u)


def batch_noise(global_seed: int, step: int, batch_size: int, n_classes: int,
                max_prompts: int) -> np.ndarray:
    """Per-step Gumbel noise block of shape (B, C, M)."""
    rng = np.random.default_rng(np.random.SeedSequence([global_seed & 0xFFFFFFFF, step]))
    u = np.clip(rng.random((batch_size, n_classes, max_prompts)), _U_EPS, 1.0 - _U_EPS)
    return gumbel_from_uniform(u)


# ---------------------------------------------------------------------------
# Single-image reference operations (the contract surface; the batched
# training path below repeats the same math vectorized).
# ---------------------------------------------------------------------------

def project(params: SelectorParams, image_vec: np.ndarray, prompt_mat: np.ndarray,
            training: bool = False, rng: Optional[np.random.Generator] = None):
    """Q = x W_q, K_j = T_j W_k, V_j = T_j W_v; inverted dropout on Q and
    K rows only when training."""
    if image_vec.shape[-1] != params.dim or prompt_mat.shape[-1] != params.dim:
        raise ValidationError("embedding dim does not match projection dim")
    q = image_vec @ params.w_q
    k = prompt_mat @ params.w_k
    v = prompt_mat @ params.w_v
    p = params.dropout_rate
    if training and p > 0:
        if rng is None:
            rng = np.random.default_rng(0)
        q = q * (rng.random(q.shape) >= p) / (1 - p)
        k = k * (rng.random(k.shape) >= p) / (1 - p)
    return q, k, v


def attention_weights(q: np.ndarray, k: np.ndarray, g: np.ndarray, tau: float,
                      mode: str = "soft") -> np.ndarray:
    """Gumbel-perturbed selection weights over one class's prompts."""
    if tau <= 0:
        raise ValidationError("tau must be positive")
    logits = k @ q + g
    if not np.all(np.isfinite(logits)):
        raise ValidationError("non-finite selection logits")
    if mode == "hard":
        alpha = np.zeros_like(logits)
        alpha[np.argmax(logits)] = 1.0
        return alpha
    z = logits / tau
    z -= z.max()
    e = np.exp(z)
    return e / e.sum()


def compose(alpha: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Weighted combination of value rows; exact row copy for one-hot alpha."""
    return alpha @ v


def class_scores(image_vec: np.ndarray, tstars: np.ndarray, logit_scale: float = 100.0) -> np.ndarray:
    """score_c = logit_scale * (x . T*_c)."""
    return logit_scale * (tstars @ image_vec)


def predict(scores: np.ndarray) -> np.ndarray:
    """Argmax over classes; ties break toward the lowest class index."""
    return np.argmax(scores, axis=-1)


# ---------------------------------------------------------------------------
# Batched forward / backward
# ---------------------------------------------------------------------------

def _dropout_masks(params: SelectorParams, batch: int, block: PromptBlock,
                   dropout_seed: Optional[int]):
    p = params.dropout_rate
    if p <= 0 or dropout_seed is None:
        return None, None
    rng = np.random.default_rng(np.random.SeedSequence([dropout_seed & 0xFFFFFFFF, 0xD0]))
    mq = (rng.random((batch, params.dim)) >= p) / (1 - p)
    mk = (rng.random(block.tensor.shape) >= p) / (1 - p)
    return mq, mk


def forward_backward(
    params: SelectorParams,
    images: np.ndarray,  # (B, d)
    labels: Optional[np.ndarray],  # (B,) or None for scoring only
    block: PromptBlock,
    noise: Optional[np.ndarray] = None,  # (B, C, M) Gumbel noise, None = 0
    mode: str = "hard",
    alpha_blend: float = 1.0,
    zeroshot_scores: Optional[np.ndarray] = None,  # (B, C) cosine scores
    dropout_seed: Optional[int] = None,
    want_grads: bool = False,
):
    """One pass of the selector; returns (loss, trace, grads).

    mode "hard": forward weights are the exact one-hot of the perturbed
    similarities, gradients flow through the soft softmax
    (straight-through).  mode "soft": plain Gumbel-Softmax weights both
    ways.  Gradients are exact for fixed noise and dropout masks.
    """
    if mode not in ("hard", "soft"):
        raise ValidationError(f"unknown mode {mode!r}")
    if images.ndim != 2 or images.shape[1] != params.dim:
        raise ValidationError("images must be (B, d) matching the projection dim")
    B = images.shape[0]
    C, M, d = block.tensor.shape
    dtype = np.result_type(images.dtype, np.float32)
    X = images.astype(dtype, copy=False)
    T = block.tensor.astype(dtype, copy=False)
    wq, wk, wv = (w.astype(dtype, copy=False) for w in (params.w_q, params.w_k, params.w_v))

    Q = X @ wq  # (B, d)
    Tf = T.reshape(C * M, d)
    K = (Tf @ wk).reshape(C, M, d)
    V = (Tf @ wv).reshape(C, M, d)

    mq, mk = _dropout_masks(params, B, block, dropout_seed)
    Qd = Q if mq is None else Q * mq
    Kd = K if mk is None else K * mk

    logits = np.einsum("bd,cmd->bcm", Qd, Kd, optimize=True)
    if noise is not None:
        logits = logits + noise.astype(dtype, copy=False)
    if not np.all(np.isfinite(logits)):
        raise ValidationError("non-finite selection logits")
    logits = np.where(block.mask[None, :, :], logits, NEG_INF)

    z = logits / params.tau
    z = z - z.max(axis=2, keepdims=True)
    e = np.exp(z) * block.mask[None, :, :]
    soft = e / e.sum(axis=2, keepdims=True)

    chosen = np.argmax(logits, axis=2)  # (B, C)
    if mode == "hard":
        alpha_fwd = np.zeros_like(soft)
        np.put_along_axis(alpha_fwd, chosen[:, :, None], 1.0, axis=2)
    else:
        alpha_fwd = soft

    tstar = np.einsum("bcm,cmd->bcd", alpha_fwd, V, optimize=True)
    s = np.einsum("bd,bcd->bc", X, tstar, optimize=True)  # cosine-scale class scores

    if zeroshot_scores is not None:
        blended = alpha_blend * s + (1.0 - alpha_blend) * zeroshot_scores.astype(dtype, copy=False)
    else:
        blended = alpha_blend * s
    scores = params.logit_scale * blended
    trace = SelectionTrace(alpha=alpha_fwd, chosen=chosen, tstar=tstar, scores=scores)

    loss = None
    dscores = None
    if labels is not None:
        labels = np.asarray(labels)
        if labels.shape != (B,) or labels.min() < 0 or labels.max() >= C:
            raise ValidationError("labels must be (B,) in [0, C)")
        m = scores.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(scores - m).sum(axis=1))
        loss = float(np.mean(lse - scores[np.arange(B), labels]))
        if want_grads:
            p = np.exp(scores - lse[:, None])
            p[np.arange(B), labels] -= 1.0
            dscores = p / B

    grads = None
    if want_grads:
        if dscores is None:
            raise ValidationError("gradients require labels")
        ds = params.logit_scale * alpha_blend * dscores  # (B, C)
        dtstar = ds[:, :, None] * X[:, None, :]  # (B, C, d)
        # Value path uses the forward weights (hard one-hot in hard mode).
        dV = np.einsum("bcm,bcd->cmd", alpha_fwd, dtstar, optimize=True)
        # Selection path always differentiates through the soft weights.
        dalpha = np.einsum("bcd,cmd->bcm", dtstar, V, optimize=True)
        inner = (soft * dalpha).sum(axis=2, keepdims=True)
        dlogits = soft * (dalpha - inner) / params.tau
        dQd = np.einsum("bcm,cmd->bd", dlogits, Kd, optimize=True)
        dKd = np.einsum("bcm,bd->cmd", dlogits, Qd, optimize=True)
        dQ = dQd if mq is None else dQd * mq
        dK = dKd if mk is None else dKd * mk
        grads = Gradients(
            w_q=X.T @ dQ,
            w_k=Tf.T @ dK.reshape(C * M, d),
            w_v=Tf.T @ dV.reshape(C * M, d),
        )
    return loss, trace, grads


def forward_loss(params, images, labels, block, noise=None, mode="hard",
                 alpha_blend=1.0, zeroshot_scores=None, dropout_seed=None):
    """Cross-entropy loss plus the per-pair selection trace."""
    loss, trace, _ = forward_backward(
        params, images, labels, block, noise=noise, mode=mode,
        alpha_blend=alpha_blend, zeroshot_scores=zeroshot_scores,
        dropout_seed=dropout_seed, want_grads=False)
    return loss, trace


def backward(params, images, labels, block, noise=None, mode="hard",
             alpha_blend=1.0, zeroshot_scores=None, dropout_seed=None) -> Gradients:
    """Exact analytic gradients of forward_loss for fixed noise/masks."""
    _, _, grads = forward_backward(
        params, images, labels, block, noise=noise, mode=mode,
        alpha_blend=alpha_blend, zeroshot_scores=zeroshot_scores,
        dropout_seed=dropout_seed, want_grads=True)
    return grads


def score(params: SelectorParams, images: np.ndarray, block: PromptBlock,
          alpha_blend: float = 1.0, zeroshot_scores: Optional[np.ndarray] = None):
    """Deterministic inference: hard selection with zero Gumbel noise."""
    _, trace, _ = forward_backward(
        params, images, None, block, noise=None, mode="hard",
        alpha_blend=alpha_blend, zeroshot_scores=zeroshot_scores)
    return trace.scores, trace


# ---------------------------------------------------------------------------
# Checkpoint format: one JSON header line, then W_q||W_k||W_v as f32 LE.
# ---------------------------------------------------------------------------

def save_checkpoint(params: SelectorParams, sink: Union[str, BinaryIO],
                    alpha_blend: float = 1.0, seed: int = 0) -> None:
    if isinstance(sink, str):
        with open(sink, "wb") as f:
            save_checkpoint(params, f, alpha_blend=alpha_blend, seed=seed)
        return
    header = {
        "d": params.dim,
        "tau": params.tau,
        "dropout": params.dropout_rate,
        "logit_scale": params.logit_scale,
        "alpha_blend": alpha_blend,
        "seed": seed,
    }
    sink.write(json.dumps(header).encode() + b"\n")
    for w in (params.w_q, params.w_k, params.w_v):
        sink.write(np.ascontiguousarray(w, dtype="<f4").tobytes())


def load_checkpoint(source: Union[str, BinaryIO]) -> tuple[SelectorParams, dict]:
    if isinstance(source, str):
        with open(source, "rb") as f:
            return load_checkpoint(f)
    raw = source.read()
    nl = raw.find(b"\n")
    if nl < 0:
        raise FormatError("checkpoint missing header line")
    try:
        header = json.loads(raw[:nl].decode())
        d = int(header["d"])
    except (json.JSONDecodeError, KeyError, ValueError) as e:
        raise FormatError(f"bad checkpoint header: {e}") from e
    body = raw[nl + 1:]
    expected = 3 * d * d * 4
    if len(body) != expected:
        raise FormatError(f"checkpoint body has {len(body)} bytes, expected {expected}")
    mats = np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(3, d, d)
    params = SelectorParams(
        w_q=mats[0], w_k=mats[1], w_v=mats[2],
        tau=float(header["tau"]),
        dropout_rate=float(header.get("dropout", 0.0)),
        logit_scale=float(header.get("logit_scale", 100.0)),
    )
    return params, header
