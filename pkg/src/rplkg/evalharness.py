"""Task construction, metrics, timing benchmarks, and report emission.

Covers k-shot split sampling, base-to-new class generalization with the
harmonic mean, domain-shift evaluation, and a wall-clock micro-benchmark
of one selector training iteration.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import selector
from .baselines import zeroshot_scores
from .embedstore import EmbeddingCache
from .errors import ValidationError
from .selector import PromptBlock, SelectionTrace, SelectorParams

K_SHOT_CHOICES = (1, 2, 4, 8, 16)


@dataclass
class FewShotTask:
    dataset_id: str
    k: int
    seed: int
    train_indices: np.ndarray
    val_indices: np.ndarray
    test_indices: np.ndarray


@dataclass
class BaseNewSplit:
    base_class_ids: list[int]
    new_class_ids: list[int]

    def __post_init__(self):
        base, new = set(self.base_class_ids), set(self.new_class_ids)
        if base & new:
            raise ValidationError("base and new class sets overlap")

    @classmethod
    def halves(cls, n_classes: int) -> "BaseNewSplit":
        """Base = first ceil(C/2) classes in canonical order."""
        cut = math.ceil(n_classes / 2)
        return cls(base_class_ids=list(range(cut)), new_class_ids=list(range(cut, n_classes)))


@dataclass
class EvalReport:
    method: str
    accuracy: float
    dataset: str = ""
    k: Optional[int] = None
    seed: Optional[int] = None
    base: Optional[float] = None
    new: Optional[float] = None
    h: Optional[float] = None
    iter_seconds: Optional[float] = None
    param_count: Optional[int] = None
    histogram: dict[int, dict[int, int]] = field(default_factory=dict)


def sample_k_shot(image_cache: EmbeddingCache, k: int, seed: int,
                  dataset_id: str = "", val_fraction: float = 0.2) -> FewShotTask:
    """Seeded per-class k-shot split; leftovers become the test set.

    When k >= 4, a val_fraction share of the k-shot pool is carved out
    for validation; for smaller k the val split is empty and callers
    fall back to the train pool.
    """
    if k < 1:
        raise ValidationError("k must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, k]))
    train, val, test = [], [], []
    for c in range(image_cache.n_classes):
        idx = np.flatnonzero(image_cache.labels == c)
        idx = rng.permutation(idx)
        take = min(k, idx.size)
        pool, rest = idx[:take], idx[take:]
        if k >= 4 and take >= 2:
            n_val = max(1, int(round(val_fraction * take)))
            val.extend(pool[:n_val].tolist())
            train.extend(pool[n_val:].tolist())
        else:
            train.extend(pool.tolist())
        test.extend(rest.tolist())
    return FewShotTask(
        dataset_id=dataset_id, k=k, seed=seed,
        train_indices=np.array(sorted(train), dtype=np.int64),
        val_indices=np.array(sorted(val), dtype=np.int64),
        test_indices=np.array(sorted(test), dtype=np.int64),
    )


def harmonic_mean(base_acc: float, new_acc: float) -> float:
    """H = 2ab / (a + b), defined as 0 when both accuracies are 0."""
    if base_acc + new_acc == 0:
        return 0.0
    return 2.0 * base_acc * new_acc / (base_acc + new_acc)


def accuracy(scores: np.ndarray, labels: np.ndarray) -> float:
    preds = np.argmax(scores, axis=1)
    return float(np.mean(preds == labels))


def selection_histogram(trace: SelectionTrace, labels: np.ndarray) -> dict[int, dict[int, int]]:
    """Per true class, how often each prompt index was chosen for it."""
    hist: dict[int, dict[int, int]] = {}
    chosen_for_label = trace.chosen[np.arange(labels.size), labels]
    for c in np.unique(labels):
        per = hist.setdefault(int(c), {})
        js, counts = np.unique(chosen_for_label[labels == c], return_counts=True)
        for j, n in zip(js.tolist(), counts.tolist()):
            per[int(j)] = int(n)
    return hist


def evaluate(scores: np.ndarray, labels: np.ndarray, method: str,
             trace: Optional[SelectionTrace] = None, dataset: str = "",
             k: Optional[int] = None, seed: Optional[int] = None) -> EvalReport:
    """Accuracy plus, when a trace is given, the selected-prompt histogram."""
    if scores.shape[0] != labels.shape[0]:
        raise ValidationError("scores and labels disagree on image count")
    hist = selection_histogram(trace, labels) if trace is not None else {}
    return EvalReport(method=method, accuracy=accuracy(scores, labels),
                      dataset=dataset, k=k, seed=seed, histogram=hist)


def _params_checksum(params: SelectorParams) -> bytes:
    import hashlib
    h = hashlib.sha256()
    for w in (params.w_q, params.w_k, params.w_v):
        h.update(np.ascontiguousarray(w).tobytes())
    return h.digest()


def eval_base_to_new(params: SelectorParams, split: BaseNewSplit,
                     image_cache: EmbeddingCache, block: PromptBlock,
                     test_indices: Optional[np.ndarray] = None,
                     alpha_blend: float = 1.0,
                     template_block: Optional[PromptBlock] = None):
    """Score base and new label spaces with one unchanged parameter set.

    Base accuracy uses base-class test images against the base label
    space only; new accuracy symmetrically.  Returns (base, new, H).
    """
    before = _params_checksum(params)
    labels = image_cache.labels
    idx_all = np.arange(image_cache.count) if test_indices is None else test_indices
    accs = []
    for class_ids in (split.base_class_ids, split.new_class_ids):
        remap = {c: i for i, c in enumerate(class_ids)}
        keep = idx_all[np.isin(labels[idx_all], class_ids)]
        if keep.size == 0:
            raise ValidationError("a split side has no test images")
        sub_block = block.subset(class_ids)
        sub_templates = template_block.subset(class_ids) if template_block is not None else None
        zs = None
        if alpha_blend < 1.0 and sub_templates is not None:
            zs = zeroshot_scores(image_cache.vectors[keep], sub_templates)
        scores, _ = selector.score(params, image_cache.vectors[keep], sub_block,
                                   alpha_blend=alpha_blend, zeroshot_scores=zs)
        y = np.array([remap[int(c)] for c in labels[keep]])
        accs.append(accuracy(scores, y))
    if _params_checksum(params) != before:
        raise ValidationError("parameters were modified during evaluation")
    base_acc, new_acc = accs
    return base_acc, new_acc, harmonic_mean(base_acc, new_acc)


def eval_domain_shift(params: SelectorParams, block: PromptBlock,
                      targets: dict[str, EmbeddingCache],
                      alpha_blend: float = 1.0,
                      template_block: Optional[PromptBlock] = None,
                      max_workers: int = 1) -> dict[str, float]:
    """Apply source-trained params to shifted image caches sharing the
    source class list."""
    def one(cache: EmbeddingCache) -> float:
        if cache.n_classes != block.n_classes:
            raise ValidationError("target class list does not match the source prompt set")
        zs = None
        if alpha_blend < 1.0 and template_block is not None:
            zs = zeroshot_scores(cache.vectors, template_block)
        scores, _ = selector.score(params, cache.vectors, block,
                                   alpha_blend=alpha_blend, zeroshot_scores=zs)
        return accuracy(scores, cache.labels)

    if max_workers > 1 and len(targets) > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=max_workers) as ex:
            results = list(ex.map(one, targets.values()))
        return dict(zip(targets.keys(), results))
    return {name: one(cache) for name, cache in targets.items()}


def bench_iteration(batch_size: int, n_classes: int, prompts_per_class: int,
                    dim: int, reps: int = 11, seed: int = 0,
                    params: Optional[SelectorParams] = None) -> float:
    """Median wall-clock seconds of one forward+backward training step
    on random unit-norm f32 data."""
    rng = np.random.default_rng(seed)
    if params is None:
        params = selector.init_params(dim, tau=0.01, seed=seed)
    X = rng.standard_normal((batch_size, dim)).astype(np.float32)
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    T = rng.standard_normal((n_classes * prompts_per_class, dim)).astype(np.float32)
    T /= np.linalg.norm(T, axis=1, keepdims=True)
    cache = EmbeddingCache(kind="prompt", vectors=T,
                           labels=np.repeat(np.arange(n_classes), prompts_per_class),
                           prompt_j=np.tile(np.arange(prompts_per_class), n_classes))
    block = PromptBlock.from_cache(cache)
    y = rng.integers(0, n_classes, batch_size)
    times = []
    for rep in range(reps):
        noise = selector.batch_noise(seed, rep, batch_size, n_classes, prompts_per_class)
        t0 = time.perf_counter()
        selector.forward_backward(params, X, y, block, noise=noise, mode="hard",
                                  want_grads=True)
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


REPORT_COLUMNS = ["dataset", "method", "k", "seed", "accuracy", "base", "new", "h",
                  "iter_seconds", "param_count"]


def _report_row(r: EvalReport) -> dict:
    return {
        "dataset": r.dataset, "method": r.method, "k": r.k, "seed": r.seed,
        "accuracy": r.accuracy, "base": r.base, "new": r.new, "h": r.h,
        "iter_seconds": r.iter_seconds, "param_count": r.param_count,
    }


def emit_report(reports: list[EvalReport], fmt: str = "csv") -> str:
    """Serialize reports with a stable column order."""
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in reports:
            row = _report_row(r)
            w.writerow({k: ("" if v is None else v) for k, v in row.items()})
        return buf.getvalue()
    if fmt == "json":
        return json.dumps([_report_row(r) for r in reports], indent=2) + "\n"
    if fmt == "markdown":
        def pct(v):
            return "" if v is None else f"{100.0 * v:.2f}"
        lines = ["| Dataset | Method | Base | New | H | Accuracy |",
                 "|---|---|---|---|---|---|"]
        for r in reports:
            lines.append(f"| {r.dataset} | {r.method} | {pct(r.base)} | {pct(r.new)} "
                         f"| {pct(r.h)} | {pct(r.accuracy)} |")
        return "\n".join(lines) + "\n"
    raise ValidationError(f"unknown report format {fmt!r}")


def dump_selected_prompts(report: EvalReport, texts: Optional[list[list[str]]] = None) -> str:
    """JSON lines {class_id, prompt_text, count} from a report histogram."""
    lines = []
    for class_id in sorted(report.histogram):
        for j in sorted(report.histogram[class_id]):
            text = ""
            if texts is not None and class_id < len(texts) and j < len(texts[class_id]):
                text = texts[class_id][j]
            lines.append(json.dumps({
                "class_id": class_id,
                "prompt_text": text or f"prompt {j}",
                "count": report.histogram[class_id][j],
            }))
    return "\n".join(lines) + ("\n" if lines else "")
