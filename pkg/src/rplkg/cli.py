"""Command-line pipeline: build prompts, generate/import caches, train,
evaluate, benchmark, and render reports."""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from . import baselines, evalharness, kgprompt, selector, trainloop
from .embedstore import (EmbeddingCache, SyntheticWorld, normalize_rows,
                         read_cache, synth_encode, write_cache)
from .errors import FormatError, RplkgError, ValidationError
from .selector import PromptBlock


class _Parser(argparse.ArgumentParser):
    # usage errors exit 1, not argparse's default 2
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(1)


def _max_threads() -> int:
    try:
        return max(1, int(os.environ.get("RPLKG_THREADS", "1")))
    except ValueError:
        return 1


def _add_train_flags(p: _Parser) -> None:
    p.add_argument("--tau", type=float, default=0.01)
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--alpha", type=float, default=1.0, help="blend vs zero-shot scores")
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--mode", choices=("soft", "hard"), default="hard")
    p.add_argument("--logit-scale", type=float, default=100.0)


def _train_config(args) -> trainloop.TrainConfig:
    return trainloop.TrainConfig(
        learning_rate=args.lr, weight_decay=args.weight_decay, tau=args.tau,
        dropout=args.dropout, alpha_blend=args.alpha, epochs=args.epochs,
        batch_size=args.batch, seed=args.seed, mode=args.mode,
        logit_scale=args.logit_scale)


def build_parser() -> _Parser:
    parser = _Parser(prog="rplkg")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-prompts", parents=[], help="verbalize a graph dump into per-class prompts")
    p.add_argument("--graph", required=True)
    p.add_argument("--classes", required=True, help="text file, one class name per line")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-per-class", type=int, default=None)

    p = sub.add_parser("synth", help="generate a seeded planted-prompt synthetic world")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--prompts", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--images-per-class", type=int, default=40)
    p.add_argument("--noise", type=float, default=0.1)

    p = sub.add_parser("import-cache", help="convert an .npz of vectors/labels into the cache format")
    p.add_argument("--npz", required=True)
    p.add_argument("--kind", choices=("image", "prompt"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--normalize", action="store_true")

    p = sub.add_parser("train", help="train the selector on a k-shot task")
    p.add_argument("--images", required=True)
    p.add_argument("--prompts", required=True)
    p.add_argument("--templates", default=None)
    p.add_argument("--dataset", default="")
    p.add_argument("--k", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    _add_train_flags(p)

    p = sub.add_parser("eval", help="score a test split and emit a report")
    p.add_argument("--images", required=True)
    p.add_argument("--prompts", required=True)
    p.add_argument("--templates", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--method", default="rplkg",
                   choices=("rplkg",) + baselines.BASELINE_KINDS)
    p.add_argument("--dataset", default="")
    p.add_argument("--k", type=int, default=None, help="evaluate the k-shot test split")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("csv", "json", "markdown"), default="csv")
    p.add_argument("--dump-prompts", default=None, help="write selected-prompt JSONL here")
    p.add_argument("--prompt-texts", default=None, help="prompt-set JSONL for dump texts")

    p = sub.add_parser("base2new", help="train on the base class half, report base/new/H")
    p.add_argument("--images", required=True)
    p.add_argument("--prompts", required=True)
    p.add_argument("--templates", default=None)
    p.add_argument("--dataset", default="")
    p.add_argument("--k", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("csv", "json", "markdown"), default="csv")
    _add_train_flags(p)

    p = sub.add_parser("domainshift", help="apply a trained checkpoint to shifted caches")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompts", required=True)
    p.add_argument("--templates", default=None)
    p.add_argument("--target", action="append", required=True, metavar="NAME=PATH")
    p.add_argument("--dataset", default="")
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("csv", "json", "markdown"), default="csv")

    p = sub.add_parser("bench", help="time one training iteration")
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--prompts", type=int, required=True)
    p.add_argument("--batch", type=int, required=True)
    p.add_argument("--reps", type=int, default=11)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="CSV path; stdout when omitted")

    p = sub.add_parser("report", help="format a report and render figures")
    p.add_argument("--in", dest="infile", required=True, help="report CSV or JSON")
    p.add_argument("--format", choices=("csv", "json", "markdown"), default="markdown")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--prompt-dump", default=None, help="selected-prompt JSONL to plot")
    return parser


# ---------------------------------------------------------------------------
# subcommand implementations
# ---------------------------------------------------------------------------

def _cmd_build_prompts(args) -> int:
    with open(args.graph, encoding="utf-8") as f:
        parsed = kgprompt.parse_graph_dump(f)
    with open(args.classes, encoding="utf-8") as f:
        names = [line.strip() for line in f if line.strip()]
    if not names:
        raise ValidationError("class list is empty")
    graph = kgprompt.GraphIndex(parsed.triplets)
    pset, stats = kgprompt.build_prompt_set(names, args.dataset, graph,
                                            max_per_class=args.max_per_class)
    with open(args.out, "w", encoding="utf-8") as f:
        n = kgprompt.write_prompt_set_jsonl(pset, f)
    hits = " ".join(f"lv{lv}:{c}" for lv, c in sorted(stats.level_hits.items()) if c)
    print(f"classes {len(names)} prompts {n} mean M_c {stats.mean_count:.2f} "
          f"malformed {parsed.malformed_lines} {hits}")
    return 0


def _cmd_synth(args) -> int:
    world = SyntheticWorld(seed=args.seed, n_classes=args.classes, dim=args.dim,
                           prompts_per_class=args.prompts, noise_scale=args.noise,
                           images_per_class=args.images_per_class)
    caches = synth_encode(world)
    os.makedirs(args.out, exist_ok=True)
    write_cache(caches.images, os.path.join(args.out, "images.rpkg"))
    write_cache(caches.prompts, os.path.join(args.out, "prompts.rpkg"))
    write_cache(caches.templates, os.path.join(args.out, "templates.rpkg"))
    with open(os.path.join(args.out, "world.json"), "w") as f:
        json.dump({**asdict(world), "planted": caches.planted}, f, indent=2, sort_keys=True)
        f.write("\n")
    # synthetic stand-in texts so the report path has something to show
    with open(os.path.join(args.out, "prompts.jsonl"), "w") as f:
        for c in range(world.n_classes):
            for j in range(world.prompts_per_class):
                tag = "planted" if j == caches.planted[c] else "distractor"
                f.write(json.dumps({"dataset": "synth", "class_id": c,
                                    "class_name": f"class-{c}",
                                    "text": f"synthetic {tag} prompt {j} for class {c}",
                                    "rule_level": 0, "relation": None,
                                    "tail": None, "weight": None}) + "\n")
    print(f"wrote synthetic world to {args.out} "
          f"(C={world.n_classes}, d={world.dim}, M={world.prompts_per_class})")
    return 0


def _cmd_import_cache(args) -> int:
    with np.load(args.npz) as data:
        if "vectors" not in data or "labels" not in data:
            raise FormatError("npz must contain 'vectors' and 'labels' arrays")
        vectors = data["vectors"].astype(np.float32)
        labels = data["labels"].astype(np.int64)
        prompt_j = data["prompt_j"].astype(np.int64) if "prompt_j" in data else None
    if args.normalize:
        vectors = normalize_rows(vectors)
    if args.kind == "prompt" and prompt_j is None:
        # positions by order of appearance within each class
        prompt_j = np.zeros(labels.size, dtype=np.int64)
        seen: dict[int, int] = {}
        for i, c in enumerate(labels.tolist()):
            prompt_j[i] = seen.get(c, 0)
            seen[c] = prompt_j[i] + 1
    cache = EmbeddingCache(kind=args.kind, vectors=vectors, labels=labels,
                           prompt_j=prompt_j if args.kind == "prompt" else None)
    nbytes = write_cache(cache, args.out)
    print(f"wrote {cache.count} vectors (dim {cache.dim}) to {args.out}, {nbytes} bytes")
    return 0


def _load_blocks(args):
    images = read_cache(args.images)
    block = PromptBlock.from_cache(read_cache(args.prompts))
    tblock = None
    if getattr(args, "templates", None):
        tblock = PromptBlock.from_cache(read_cache(args.templates))
    return images, block, tblock


def _cmd_train(args) -> int:
    images, block, tblock = _load_blocks(args)
    task = evalharness.sample_k_shot(images, args.k, args.seed, dataset_id=args.dataset)
    config = _train_config(args)
    result = trainloop.train(config, task, images, block, tblock)
    os.makedirs(args.out, exist_ok=True)
    selector.save_checkpoint(result.params, os.path.join(args.out, "checkpoint.rplkg"),
                             alpha_blend=config.alpha_blend, seed=config.seed)
    with open(os.path.join(args.out, "train_log.csv"), "w") as f:
        f.write("epoch,loss,train_accuracy,val_accuracy\n")
        for e, (l, ta, va) in enumerate(zip(result.loss_trace, result.train_acc_trace,
                                            result.val_acc_trace)):
            f.write(f"{e},{l},{ta},{va}\n")
        f.write(f"# seconds_total {result.seconds_total:.3f} "
                f"seconds_per_iter {result.seconds_per_iter:.6f}\n")
    print(f"final train accuracy {result.final_train_acc:.4f} "
          f"val accuracy {result.final_val_acc:.4f}")
    return 0


def _eval_scores(args, images, block, tblock, params, meta, idx):
    X = images.vectors[idx]
    if args.method == "rplkg":
        if params is None:
            raise ValidationError("method rplkg requires --checkpoint")
        alpha_blend = float(meta.get("alpha_blend", 1.0))
        zs = None
        if alpha_blend < 1.0:
            if tblock is None:
                raise ValidationError("checkpoint blends zero-shot scores; pass --templates")
            zs = baselines.zeroshot_scores(X, tblock)
        scores, trace = selector.score(params, X, block, alpha_blend=alpha_blend,
                                       zeroshot_scores=zs)
        return scores, trace
    scores = baselines.baseline_scores(args.method, X, block, template_block=tblock,
                                       seed=args.seed)
    return scores, None


def _cmd_eval(args) -> int:
    images, block, tblock = _load_blocks(args)
    params = meta = None
    if args.checkpoint:
        params, meta = selector.load_checkpoint(args.checkpoint)
    if args.k is not None:
        task = evalharness.sample_k_shot(images, args.k, args.seed, dataset_id=args.dataset)
        idx = task.test_indices
    else:
        idx = np.arange(images.count)
    scores, trace = _eval_scores(args, images, block, tblock, params, meta or {}, idx)
    report = evalharness.evaluate(scores, images.labels[idx], method=args.method,
                                  trace=trace, dataset=args.dataset, k=args.k,
                                  seed=args.seed)
    with open(args.out, "w") as f:
        f.write(evalharness.emit_report([report], args.format))
    if args.dump_prompts:
        texts = None
        if args.prompt_texts:
            with open(args.prompt_texts, encoding="utf-8") as f:
                pset = kgprompt.read_prompt_set_jsonl(f)
            texts = [[r.text for r in recs] for recs in pset.prompts]
        with open(args.dump_prompts, "w") as f:
            f.write(evalharness.dump_selected_prompts(report, texts))
    print(f"{args.method} accuracy {report.accuracy:.4f} ({idx.size} images)")
    return 0


def _cmd_base2new(args) -> int:
    images, block, tblock = _load_blocks(args)
    split = evalharness.BaseNewSplit.halves(block.n_classes)
    base_ids = np.array(split.base_class_ids)
    base_img_idx = np.flatnonzero(np.isin(images.labels, base_ids))
    base_cache = EmbeddingCache(kind="image", vectors=images.vectors[base_img_idx],
                                labels=np.searchsorted(base_ids, images.labels[base_img_idx]))
    task = evalharness.sample_k_shot(base_cache, args.k, args.seed, dataset_id=args.dataset)
    base_block = block.subset(split.base_class_ids)
    base_tblock = tblock.subset(split.base_class_ids) if tblock is not None else None
    config = _train_config(args)
    result = trainloop.train(config, task, base_cache, base_block, base_tblock)
    # keep training images out of the reported test pool
    used = set(base_img_idx[np.concatenate([task.train_indices, task.val_indices])].tolist())
    test_idx = np.array([i for i in range(images.count) if i not in used], dtype=np.int64)
    base_acc, new_acc, h = evalharness.eval_base_to_new(
        result.params, split, images, block, test_indices=test_idx,
        alpha_blend=config.alpha_blend, template_block=tblock)
    report = evalharness.EvalReport(method="rplkg", accuracy=h, dataset=args.dataset,
                                    k=args.k, seed=args.seed, base=base_acc,
                                    new=new_acc, h=h)
    with open(args.out, "w") as f:
        f.write(evalharness.emit_report([report], args.format))
    print(f"base {base_acc:.4f} new {new_acc:.4f} H {h:.4f}")
    return 0


def _cmd_domainshift(args) -> int:
    params, meta = selector.load_checkpoint(args.checkpoint)
    block = PromptBlock.from_cache(read_cache(args.prompts))
    tblock = PromptBlock.from_cache(read_cache(args.templates)) if args.templates else None
    targets = {}
    for spec_item in args.target:
        if "=" not in spec_item:
            raise ValidationError(f"--target must be NAME=PATH, got {spec_item!r}")
        name, path = spec_item.split("=", 1)
        targets[name] = read_cache(path)
    accs = evalharness.eval_domain_shift(params, block, targets,
                                         alpha_blend=float(meta.get("alpha_blend", 1.0)),
                                         template_block=tblock,
                                         max_workers=_max_threads())
    reports = [evalharness.EvalReport(method="rplkg", accuracy=a,
                                      dataset=f"{args.dataset}->{name}")
               for name, a in accs.items()]
    with open(args.out, "w") as f:
        f.write(evalharness.emit_report(reports, args.format))
    for name, a in accs.items():
        print(f"{name} accuracy {a:.4f}")
    return 0


def _cmd_bench(args) -> int:
    secs = evalharness.bench_iteration(args.batch, args.classes, args.prompts,
                                       args.dim, reps=args.reps, seed=args.seed)
    n_params = selector.param_count(args.dim)
    line = ("dim,classes,prompts,batch,iter_seconds,param_count\n"
            f"{args.dim},{args.classes},{args.prompts},{args.batch},{secs},{n_params}\n")
    if args.out:
        with open(args.out, "w") as f:
            f.write(line)
    sys.stdout.write(line)
    return 0


def _read_reports(path: str) -> list[evalharness.EvalReport]:
    import csv as _csv

    def _opt(v, cast=float):
        return None if v in ("", None) else cast(v)

    rows: list[dict] = []
    with open(path, encoding="utf-8") as f:
        if path.endswith(".json"):
            rows = json.load(f)
        else:
            rows = list(_csv.DictReader(f))
    reports = []
    for row in rows:
        reports.append(evalharness.EvalReport(
            method=row.get("method", ""),
            accuracy=float(row["accuracy"]),
            dataset=row.get("dataset", "") or "",
            k=_opt(row.get("k"), lambda v: int(float(v))),
            seed=_opt(row.get("seed"), lambda v: int(float(v))),
            base=_opt(row.get("base")), new=_opt(row.get("new")), h=_opt(row.get("h")),
            iter_seconds=_opt(row.get("iter_seconds")),
            param_count=_opt(row.get("param_count"), lambda v: int(float(v))),
        ))
    if not reports:
        raise FormatError("report file contains no rows")
    return reports


def _cmd_report(args) -> int:
    from . import plots
    reports = _read_reports(args.infile)
    os.makedirs(args.out, exist_ok=True)
    ext = {"csv": "csv", "json": "json", "markdown": "md"}[args.format]
    table_path = os.path.join(args.out, f"report.{ext}")
    with open(table_path, "w") as f:
        f.write(evalharness.emit_report(reports, args.format))
    figures = [plots.plot_method_accuracies(reports, os.path.join(args.out, "accuracy.png"))]
    if args.prompt_dump:
        with open(args.prompt_dump, encoding="utf-8") as f:
            figures.append(plots.plot_selection_histograms(
                f, os.path.join(args.out, "selection.png")))
    print(f"wrote {table_path} and {', '.join(figures)}")
    return 0


_COMMANDS = {
    "build-prompts": _cmd_build_prompts,
    "synth": _cmd_synth,
    "import-cache": _cmd_import_cache,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "base2new": _cmd_base2new,
    "domainshift": _cmd_domainshift,
    "bench": _cmd_bench,
    "report": _cmd_report,
}


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (FormatError, OSError) as e:
        sys.stderr.write(f"error: {e}\n")
        return 2
    except RplkgError as e:
        sys.stderr.write(f"error: {e}\n")
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
