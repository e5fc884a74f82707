"""Relation-path extraction and scoring between history and candidate items.

Shortest paths come from a BFS over the typed graph restricted to the
allowed relations (user/RATED edges stay out, so paths never cross a user
node). When several minimum-length paths exist, one is drawn uniformly at
random over the full set of minimal (node, relation) sequences: a
predecessor-count pass makes the backward sampling exact.

Path scoring follows a preference-times-TF-IDF rule. TF is the relation
class frequency within the current query's path set; IDF is computed over
the corpus of training-query path sets as ln(N / (1 + df)) + 1; a path's
score is the mean over its relations of pref(r) * tf(r) * idf(r), inverse
relation names counting toward their forward class.
"""

from __future__ import annotations

import math
from collections import Counter, deque
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .kg import CANONICAL_CLASS, KnowledgeGraph, NodeRef, NodeType, Relation

DEFAULT_MAX_DEPTH = 6

# Every relation except RATED is traversable by default.
PATH_RELATIONS: frozenset[Relation] = frozenset(r for r in Relation if r is not Relation.RATED)


@dataclass
class RelationPath:
    nodes: tuple[NodeRef, ...]
    relations: tuple[Relation, ...]
    score: float = 0.0

    @property
    def length(self) -> int:
        return len(self.relations)

    @property
    def source(self) -> NodeRef:
        return self.nodes[0]

    @property
    def target(self) -> NodeRef:
        return self.nodes[-1]


@dataclass
class PathSet:
    user_id: str
    history: list[str]
    candidates: list[str]
    paths: list[RelationPath] = field(default_factory=list)


@dataclass(frozen=True)
class IdfTable:
    values: Mapping[Relation, float]
    corpus_size: int

    def idf(self, relation: Relation) -> float:
        return self.values[CANONICAL_CLASS[relation]]


def shortest_path(
    kg: KnowledgeGraph,
    src_item: str,
    dst_item: str,
    allowed_relations: Iterable[Relation],
    rng: np.random.Generator,
    max_depth: int = DEFAULT_MAX_DEPTH,
) -> Optional[RelationPath]:
    """Minimum-length relation path from one item to another, or None.

    Sampling is uniform over all minimal paths, counting parallel edges of
    different relation types as distinct paths.
    """
    if src_item == dst_item:
        raise ValueError("source and destination items must differ")
    src = NodeRef(NodeType.ITEM, src_item)
    dst = NodeRef(NodeType.ITEM, dst_item)
    for node in (src, dst):
        if not kg.has_node(node):
            raise ValueError(f"unknown item {node.key!r}")
    allowed = set(allowed_relations)
    if Relation.RATED in allowed:
        raise ValueError("RATED edges are not traversable")

    dist: dict[NodeRef, int] = {src: 0}
    # preds[v]: list of (u, relation, multiplicity-bearing) entries on shortest paths.
    preds: dict[NodeRef, list[tuple[NodeRef, Relation]]] = {}
    queue: deque[NodeRef] = deque([src])
    found_depth: Optional[int] = None
    while queue:
        node = queue.popleft()
        depth = dist[node]
        if found_depth is not None and depth >= found_depth:
            continue
        if depth >= max_depth:
            continue
        for rel, nxt, _ts in kg.out_edges(node):
            if rel not in allowed:
                continue
            if nxt not in dist:
                dist[nxt] = depth + 1
                queue.append(nxt)
                if nxt == dst:
                    found_depth = depth + 1
            if dist[nxt] == depth + 1:
                preds.setdefault(nxt, []).append((node, rel))
    if found_depth is None:
        return None

    # Count minimal paths into each node reachable at its BFS depth.
    counts: dict[NodeRef, int] = {src: 1}

    def count_into(node: NodeRef) -> int:
        if node in counts:
            return counts[node]
        total = sum(count_into(u) for u, _rel in preds[node])
        counts[node] = total
        return total

    count_into(dst)

    # Walk backward from dst, picking each predecessor entry with probability
    # proportional to the number of minimal paths through it (exact integers).
    rev_nodes = [dst]
    rev_rels: list[Relation] = []
    node = dst
    while node != src:
        entries = preds[node]
        weights = [count_into(u) for u, _rel in entries]
        total = sum(weights)
        pick = int(rng.integers(0, total))
        for (u, rel), w in zip(entries, weights):
            if pick < w:
                rev_nodes.append(u)
                rev_rels.append(rel)
                node = u
                break
            pick -= w
    return RelationPath(nodes=tuple(reversed(rev_nodes)), relations=tuple(reversed(rev_rels)))


def enumerate_pair_paths(
    kg: KnowledgeGraph,
    user_id: str,
    history: Sequence[str],
    candidates: Sequence[str],
    rng: np.random.Generator,
    allowed_relations: Iterable[Relation] = PATH_RELATIONS,
    max_depth: int = DEFAULT_MAX_DEPTH,
) -> PathSet:
    """One optional shortest path per ordered (history, candidate) pair."""
    allowed = set(allowed_relations)
    path_set = PathSet(user_id=user_id, history=list(history), candidates=list(candidates))
    for h in history:
        for c in candidates:
            if h == c:
                continue
            path = shortest_path(kg, h, c, allowed, rng, max_depth=max_depth)
            if path is not None:
                path_set.paths.append(path)
    return path_set


def relation_frequencies(path_set: PathSet) -> dict[Relation, float]:
    """Per-class share of relation occurrences across the set's paths."""
    counts: Counter[Relation] = Counter()
    for path in path_set.paths:
        for rel in path.relations:
            counts[CANONICAL_CLASS[rel]] += 1
    total = sum(counts.values())
    if total == 0:
        return {}
    return {rel: c / total for rel, c in counts.items()}


def compute_idf(
    training_sets: Sequence[PathSet], classes: Sequence[Relation]
) -> IdfTable:
    """IDF over training queries: idf(r) = ln(N / (1 + df(r))) + 1."""
    if not training_sets:
        raise ValueError("need at least one training path set")
    df: Counter[Relation] = Counter()
    for path_set in training_sets:
        seen = {CANONICAL_CLASS[rel] for path in path_set.paths for rel in path.relations}
        for rel in seen:
            df[rel] += 1
    n = len(training_sets)
    values = {rel: math.log(n / (1 + df.get(rel, 0))) + 1.0 for rel in classes}
    return IdfTable(values=values, corpus_size=n)


def score_path(
    path: RelationPath,
    preference: Mapping[Relation, float],
    tf: Mapping[Relation, float],
    idf: IdfTable,
) -> float:
    """Mean over the path's relations of pref * tf * idf (canonical classes)."""
    if path.length == 0:
        raise ValueError("cannot score an empty path")
    total = 0.0
    for rel in path.relations:
        cls = CANONICAL_CLASS[rel]
        total += preference[cls] * tf[cls] * idf.idf(cls)
    return total / path.length


def score_path_set(
    path_set: PathSet,
    preference: Mapping[Relation, float],
    idf: IdfTable,
) -> list[float]:
    tf = relation_frequencies(path_set)
    return [score_path(p, preference, tf, idf) for p in path_set.paths]


def select_top_paths(
    paths: Sequence[RelationPath],
    scores: Sequence[float],
    k_paths: int,
) -> list[RelationPath]:
    """Highest-scoring paths, descending; ties prefer shorter paths, then
    lexicographically smaller node keys. Returned paths carry their score.
    """
    if k_paths < 0:
        raise ValueError("k_paths must be >= 0")
    if len(paths) != len(scores):
        raise ValueError("paths and scores must align")
    scored = [replace(p, score=s) for p, s in zip(paths, scores)]
    scored.sort(
        key=lambda p: (
            -p.score,
            p.length,
            tuple(n.key for n in p.nodes),
            tuple(r.value for r in p.relations),
        )
    )
    return scored[:k_paths]


def validate_path(kg: KnowledgeGraph, path: RelationPath) -> bool:
    """Re-check a path edge-by-edge against the graph (simple, connected)."""
    if len(path.nodes) != len(path.relations) + 1:
        return False
    if len(set(path.nodes)) != len(path.nodes):
        return False
    for a, rel, b in zip(path.nodes, path.relations, path.nodes[1:]):
        if (rel, b) not in [(r, d) for r, d, _ in kg.out_edges(a)]:
            return False
    return True
