"""Knowledge-graph prompt construction.

Turns dataset class labels into sets of plain-text prompt sentences by
looking the labels up in a ConceptNet-style triplet graph.  Labels that
do not match directly are normalized through an escalating rule ladder
(synonym split, lowercasing, space-merge, space-split); classes that
never match fall back to the manual template "A photo of a {class}.".
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import IO, Iterable, Optional

from .errors import EmptyGraphError, FormatError

# Datasets whose labels use "/" as part of the name itself, not as a
# synonym separator (e.g. "Ram C/V Cargo Van Minivan 2012").
NO_SLASH_SPLIT_DATASETS = frozenset({"fgvc_aircraft", "stanford_cars"})

MANUAL_TEMPLATE = "A photo of a {}."


@dataclass(frozen=True)
class Triplet:
    head: str
    relation: str
    tail: str
    weight: float

    def __post_init__(self):
        if not self.head or not self.tail or not self.relation:
            raise ValueError("triplet fields must be non-empty")
        if self.weight < 0:
            raise ValueError("triplet weight must be >= 0")


@dataclass(frozen=True)
class LabelQuery:
    raw_label: str
    dataset_id: str = ""
    slash_is_synonym: bool = True

    @classmethod
    def for_dataset(cls, raw_label: str, dataset_id: str) -> "LabelQuery":
        return cls(
            raw_label=raw_label,
            dataset_id=dataset_id,
            slash_is_synonym=dataset_id not in NO_SLASH_SPLIT_DATASETS,
        )


@dataclass
class PromptRecord:
    class_id: int
    text: str
    rule_level: int
    source: Optional[Triplet] = None


@dataclass
class PromptSet:
    dataset_id: str
    class_names: list[str]
    prompts: list[list[PromptRecord]]

    def counts(self) -> list[int]:
        return [len(p) for p in self.prompts]


@dataclass
class BuildStats:
    per_class_counts: list[int]
    mean_count: float
    level_hits: dict[int, int] = field(default_factory=dict)


@dataclass
class ParsedGraph:
    triplets: list[Triplet]
    malformed_lines: int


def parse_graph_dump(stream: Iterable[str]) -> ParsedGraph:
    """Parse a tab-separated graph dump: relation, head, tail, weight.

    Malformed lines are counted and skipped; a dump with zero
    well-formed lines raises EmptyGraphError.
    """
    triplets: list[Triplet] = []
    malformed = 0
    for line in stream:
        line = line.rstrip("\n")
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            malformed += 1
            continue
        relation, head, tail, weight_s = (p.strip() for p in parts)
        try:
            weight = float(weight_s)
            triplets.append(Triplet(head=head, relation=relation, tail=tail, weight=weight))
        except ValueError:
            malformed += 1
    if not triplets:
        raise EmptyGraphError("graph dump contains no well-formed triplet lines")
    return ParsedGraph(triplets=triplets, malformed_lines=malformed)


class GraphIndex:
    """Immutable head-entity index over a parsed triplet list."""

    def __init__(self, triplets: Iterable[Triplet]):
        index: dict[str, list[Triplet]] = {}
        for t in triplets:
            index.setdefault(t.head, []).append(t)
        self._index = index

    def get(self, entity: str) -> list[Triplet]:
        return self._index.get(entity, [])

    def __contains__(self, entity: str) -> bool:
        return entity in self._index

    def __len__(self) -> int:
        return len(self._index)


_PAREN_RE = re.compile(r"\(([^()]*)\)")
_OR_RE = re.compile(r"\bor\b")


def _dedupe(items: Iterable[str]) -> list[str]:
    seen = set()
    out = []
    for x in items:
        if x and x not in seen:
            seen.add(x)
            out.append(x)
    return out


def _split_synonyms(label: str, slash_is_synonym: bool) -> list[str]:
    # Parenthesized text becomes its own candidate alongside the
    # outside text, then "/" (when a synonym marker) and the standalone
    # word "or" split further.
    parts = [_PAREN_RE.sub(" ", label)]
    parts.extend(m.group(1) for m in _PAREN_RE.finditer(label))
    if slash_is_synonym:
        parts = [frag for p in parts for frag in p.split("/")]
    parts = [frag for p in parts for frag in _OR_RE.split(p)]
    return _dedupe(p.strip() for p in parts)


def ladder_candidates(query: LabelQuery, level: int) -> list[str]:
    """Entity-key candidates for one normalization level (1..4)."""
    if level not in (1, 2, 3, 4):
        raise ValueError(f"level must be in 1..4, got {level}")
    lv1 = _split_synonyms(query.raw_label, query.slash_is_synonym)
    if level == 1:
        return lv1
    lv2 = _dedupe(c.lower() for c in lv1)
    if level == 2:
        return lv2
    if level == 3:
        return _dedupe(c.replace(" ", "") for c in lv2)
    # level 4: split on spaces, with "-" and "_" treated as spaces
    words = []
    for c in lv2:
        words.extend(c.replace("-", " ").replace("_", " ").split())
    return _dedupe(words)


def lookup(query: LabelQuery, graph: GraphIndex) -> tuple[list[str], int]:
    """First-hit escalation through levels 1..4.

    Returns the candidates with at least one triplet at the first level
    where any candidate hits, plus that level; ([], 0) if all levels fail.
    """
    for level in (1, 2, 3, 4):
        hits = [c for c in ladder_candidates(query, level) if graph.get(c)]
        if hits:
            return hits, level
    return [], 0


_CAMEL_RE = re.compile(r"(?<=[a-z0-9])(?=[A-Z])")


def verbalize(triplet: Triplet) -> str:
    """Render a triplet as "{head} is {relation words} {tail}."."""
    if triplet.relation == "IsA":
        return f"{triplet.head} is a {triplet.tail}."
    rel_words = _CAMEL_RE.sub(" ", triplet.relation).lower()
    return f"{triplet.head} is {rel_words} {triplet.tail}."


def build_prompt_set(
    class_names: list[str],
    dataset_id: str,
    graph: GraphIndex,
    max_per_class: Optional[int] = None,
) -> tuple[PromptSet, BuildStats]:
    """Build per-class prompt lists with the Lv0 manual fallback.

    Every class ends with at least one prompt; unmatched classes get the
    manual template at rule level 0.  When max_per_class is set, only
    the highest-weight triplets are kept before verbalization.
    """
    if not class_names:
        raise ValueError("class_names must be non-empty")
    prompts: list[list[PromptRecord]] = []
    level_hits: dict[int, int] = {lv: 0 for lv in range(5)}
    for class_id, name in enumerate(class_names):
        query = LabelQuery.for_dataset(name, dataset_id)
        keys, level = lookup(query, graph)
        triplets = [t for k in keys for t in graph.get(k)]
        if max_per_class is not None:
            triplets = sorted(triplets, key=lambda t: -t.weight)[:max_per_class]
        records: list[PromptRecord] = []
        seen_texts: set[str] = set()
        for t in triplets:
            text = verbalize(t)
            if text in seen_texts:
                continue
            seen_texts.add(text)
            records.append(PromptRecord(class_id=class_id, text=text, rule_level=level, source=t))
        if not records:
            level = 0
            records = [PromptRecord(class_id=class_id, text=MANUAL_TEMPLATE.format(name), rule_level=0)]
        level_hits[level] += 1
        prompts.append(records)
    counts = [len(p) for p in prompts]
    stats = BuildStats(
        per_class_counts=counts,
        mean_count=sum(counts) / len(counts),
        level_hits=level_hits,
    )
    return PromptSet(dataset_id=dataset_id, class_names=list(class_names), prompts=prompts), stats


def write_prompt_set_jsonl(pset: PromptSet, sink: IO[str]) -> int:
    """One JSON object per prompt record; returns the record count."""
    n = 0
    for class_id, records in enumerate(pset.prompts):
        for rec in records:
            src = rec.source
            obj = {
                "dataset": pset.dataset_id,
                "class_id": class_id,
                "class_name": pset.class_names[class_id],
                "text": rec.text,
                "rule_level": rec.rule_level,
                "relation": src.relation if src else None,
                "tail": src.tail if src else None,
                "weight": src.weight if src else None,
            }
            sink.write(json.dumps(obj) + "\n")
            n += 1
    return n


def read_prompt_set_jsonl(source: Iterable[str]) -> PromptSet:
    """Inverse of write_prompt_set_jsonl."""
    dataset_id = ""
    by_class: dict[int, list[PromptRecord]] = {}
    names: dict[int, str] = {}
    for line in source:
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
            class_id = int(obj["class_id"])
            rec = PromptRecord(
                class_id=class_id,
                text=obj["text"],
                rule_level=int(obj["rule_level"]),
                source=None,
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise FormatError(f"bad prompt-set line: {e}") from e
        dataset_id = obj.get("dataset", dataset_id)
        names[class_id] = obj.get("class_name", str(class_id))
        by_class.setdefault(class_id, []).append(rec)
    if not by_class:
        raise FormatError("prompt-set stream contains no records")
    n_classes = max(by_class) + 1
    if sorted(by_class) != list(range(n_classes)):
        raise FormatError("prompt-set class ids are not contiguous from 0")
    return PromptSet(
        dataset_id=dataset_id,
        class_names=[names[c] for c in range(n_classes)],
        prompts=[by_class[c] for c in range(n_classes)],
    )
