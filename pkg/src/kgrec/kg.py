"""Heterogeneous knowledge graph: schema, builders, pruning, persistence.

Nodes are typed (users, items, item attributes). Edges are typed and
directed; user->item RATED edges are unidirectional, item<->attribute
relations are materialized as two directed edges with paired relation
names, and item->item behavioral relations are unidirectional.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Mapping, NamedTuple, Optional, Sequence

from .errors import ArtifactMismatchError, CorruptArtifactError
from .ingest import Interaction, ItemMeta

KG_FORMAT = "kgrec-kg"
KG_VERSION = 1


class NodeType(str, Enum):
    USER = "User"
    ITEM = "Item"
    GENRE = "Genre"
    YEAR = "Year"
    DIRECTOR = "Director"
    ACTOR = "Actor"
    BRAND = "Brand"
    CATEGORY = "Category"


class Relation(str, Enum):
    RATED = "RATED"
    GENRE_IS = "GENRE_IS"
    GENRE_INCLUDES = "GENRE_INCLUDES"
    HAS_ACTOR = "HAS_ACTOR"
    ACTED_IN = "ACTED_IN"
    DIRECTED_BY = "DIRECTED_BY"
    IS_THE_DIRECTOR_OF = "IS_THE_DIRECTOR_OF"
    RELEASED_YEAR_IS = "RELEASED_YEAR_IS"
    YEAR_INCLUDES = "YEAR_INCLUDES"
    BRAND_IS = "BRAND_IS"
    BRAND_INCLUDES = "BRAND_INCLUDES"
    CATEGORY_IS = "CATEGORY_IS"
    CATEGORY_INCLUDES = "CATEGORY_INCLUDES"
    ALSO_BOUGHT = "ALSO_BOUGHT"
    ALSO_VIEWED = "ALSO_VIEWED"
    BOUGHT_TOGETHER = "BOUGHT_TOGETHER"
    BUY_AFTER_VIEWING = "BUY_AFTER_VIEWING"


# (source type, target type) per relation; endpoint types are enforced at insert.
RELATION_SIGNATURES: dict[Relation, tuple[NodeType, NodeType]] = {
    Relation.RATED: (NodeType.USER, NodeType.ITEM),
    Relation.GENRE_IS: (NodeType.ITEM, NodeType.GENRE),
    Relation.GENRE_INCLUDES: (NodeType.GENRE, NodeType.ITEM),
    Relation.HAS_ACTOR: (NodeType.ITEM, NodeType.ACTOR),
    Relation.ACTED_IN: (NodeType.ACTOR, NodeType.ITEM),
    Relation.DIRECTED_BY: (NodeType.ITEM, NodeType.DIRECTOR),
    Relation.IS_THE_DIRECTOR_OF: (NodeType.DIRECTOR, NodeType.ITEM),
    Relation.RELEASED_YEAR_IS: (NodeType.ITEM, NodeType.YEAR),
    Relation.YEAR_INCLUDES: (NodeType.YEAR, NodeType.ITEM),
    Relation.BRAND_IS: (NodeType.ITEM, NodeType.BRAND),
    Relation.BRAND_INCLUDES: (NodeType.BRAND, NodeType.ITEM),
    Relation.CATEGORY_IS: (NodeType.ITEM, NodeType.CATEGORY),
    Relation.CATEGORY_INCLUDES: (NodeType.CATEGORY, NodeType.ITEM),
    Relation.ALSO_BOUGHT: (NodeType.ITEM, NodeType.ITEM),
    Relation.ALSO_VIEWED: (NodeType.ITEM, NodeType.ITEM),
    Relation.BOUGHT_TOGETHER: (NodeType.ITEM, NodeType.ITEM),
    Relation.BUY_AFTER_VIEWING: (NodeType.ITEM, NodeType.ITEM),
}

# Bidirectional metadata relations come in (forward, inverse) pairs.
INVERSE_PAIRS: tuple[tuple[Relation, Relation], ...] = (
    (Relation.GENRE_IS, Relation.GENRE_INCLUDES),
    (Relation.HAS_ACTOR, Relation.ACTED_IN),
    (Relation.DIRECTED_BY, Relation.IS_THE_DIRECTOR_OF),
    (Relation.RELEASED_YEAR_IS, Relation.YEAR_INCLUDES),
    (Relation.BRAND_IS, Relation.BRAND_INCLUDES),
    (Relation.CATEGORY_IS, Relation.CATEGORY_INCLUDES),
)

# Inverse relation names collapse onto the forward name for preference and
# TF-IDF accounting; everything else is its own class.
CANONICAL_CLASS: dict[Relation, Relation] = {r: r for r in Relation}
for _fwd, _inv in INVERSE_PAIRS:
    CANONICAL_CLASS[_inv] = _fwd

# Relation classes the preference module scores, per dataset.
PREFERENCE_CLASSES: dict[str, tuple[Relation, ...]] = {
    "ml-100k": (
        Relation.GENRE_IS,
        Relation.RELEASED_YEAR_IS,
        Relation.DIRECTED_BY,
        Relation.HAS_ACTOR,
    ),
    "beauty": (
        Relation.BRAND_IS,
        Relation.CATEGORY_IS,
        Relation.ALSO_BOUGHT,
        Relation.ALSO_VIEWED,
        Relation.BOUGHT_TOGETHER,
    ),
}


class NodeRef(NamedTuple):
    node_type: NodeType
    key: str


class Edge(NamedTuple):
    src: NodeRef
    relation: Relation
    dst: NodeRef
    timestamp: Optional[int]


def item_node(key: str) -> NodeRef:
    return NodeRef(NodeType.ITEM, key)


def user_node(key: str) -> NodeRef:
    return NodeRef(NodeType.USER, key)


class KnowledgeGraph:
    """Typed directed multigraph with an outgoing adjacency index.

    Mutable while building; `freeze()` sorts the adjacency lists and locks
    the structure so it can be shared read-only afterwards.
    """

    def __init__(self) -> None:
        self._nodes: set[NodeRef] = set()
        # (src, relation, dst) -> timestamp; duplicate inserts keep the max.
        self._edges: dict[tuple[NodeRef, Relation, NodeRef], Optional[int]] = {}
        self._adjacency: dict[NodeRef, tuple[tuple[Relation, NodeRef, Optional[int]], ...]] = {}
        self._frozen = False
        self.prune_stats: dict[str, int] = {}
        self.build_notes: dict[str, int] = {}

    @property
    def num_nodes(self) -> int:
        return len(self._nodes)

    @property
    def num_edges(self) -> int:
        return len(self._edges)

    def has_node(self, node: NodeRef) -> bool:
        return node in self._nodes

    def nodes(self) -> Iterator[NodeRef]:
        return iter(sorted(self._nodes))

    def edges(self) -> Iterator[Edge]:
        for (src, rel, dst), ts in sorted(self._edges.items()):
            yield Edge(src, rel, dst, ts)

    def add_node(self, node: NodeRef) -> None:
        if self._frozen:
            raise RuntimeError("graph is frozen")
        self._nodes.add(node)

    def add_edge(
        self,
        src: NodeRef,
        relation: Relation,
        dst: NodeRef,
        timestamp: Optional[int] = None,
    ) -> None:
        if self._frozen:
            raise RuntimeError("graph is frozen")
        want = RELATION_SIGNATURES[relation]
        if (src.node_type, dst.node_type) != want:
            raise ValueError(
                f"{relation.value} requires {want[0].value}->{want[1].value}, "
                f"got {src.node_type.value}->{dst.node_type.value}"
            )
        self._nodes.add(src)
        self._nodes.add(dst)
        key = (src, relation, dst)
        prev = self._edges.get(key, None)
        if key in self._edges:
            if timestamp is not None and (prev is None or timestamp > prev):
                self._edges[key] = timestamp
        else:
            self._edges[key] = timestamp

    def freeze(self) -> "KnowledgeGraph":
        adj: dict[NodeRef, list[tuple[Relation, NodeRef, Optional[int]]]] = {}
        for (src, rel, dst), ts in self._edges.items():
            adj.setdefault(src, []).append((rel, dst, ts))
        self._adjacency = {
            src: tuple(sorted(entries, key=lambda e: (e[0].value, e[1].node_type.value, e[1].key)))
            for src, entries in adj.items()
        }
        self._frozen = True
        return self

    def out_edges(self, node: NodeRef) -> tuple[tuple[Relation, NodeRef, Optional[int]], ...]:
        if not self._frozen:
            raise RuntimeError("freeze() the graph before querying")
        return self._adjacency.get(node, ())

    def neighbors(
        self, node: NodeRef, allowed_relations: Optional[Iterable[Relation]] = None
    ) -> list[tuple[Relation, NodeRef]]:
        """Outgoing (relation, target) pairs, sorted by relation then target key."""
        if node not in self._nodes:
            raise ValueError(f"unknown node {node.node_type.value}:{node.key}")
        allowed = None if allowed_relations is None else set(allowed_relations)
        out = []
        for rel, dst, _ts in self.out_edges(node):
            if allowed is None or rel in allowed:
                out.append((rel, dst))
        return out

    def structurally_equal(self, other: "KnowledgeGraph") -> bool:
        return self._nodes == other._nodes and self._edges == other._edges


@dataclass(frozen=True)
class PrunePolicy:
    drop: frozenset[Relation] = field(default_factory=frozenset)
    dedupe: frozenset[Relation] = field(default_factory=frozenset)


BEAUTY_PRUNE_POLICY = PrunePolicy(
    drop=frozenset({Relation.BUY_AFTER_VIEWING}),
    dedupe=frozenset({Relation.ALSO_VIEWED, Relation.BOUGHT_TOGETHER}),
)
MOVIELENS_PRUNE_POLICY = PrunePolicy()


def prune(kg: KnowledgeGraph, policy: PrunePolicy) -> KnowledgeGraph:
    """Drop named relations; collapse deduped relations to one edge per
    unordered item pair.

    The survivor of a deduped pair is the edge with the latest timestamp;
    edges without timestamps fall back to the lexicographically smaller
    (src, dst) direction. Fallback count lands in `prune_stats`.
    """
    out = KnowledgeGraph()
    for node in kg._nodes:
        out.add_node(node)

    dropped = 0
    dedupe_groups: dict[tuple[Relation, tuple[NodeRef, NodeRef]], list[Edge]] = {}
    for edge in kg.edges():
        if edge.relation in policy.drop:
            dropped += 1
            continue
        if edge.relation in policy.dedupe:
            pair = tuple(sorted((edge.src, edge.dst)))
            dedupe_groups.setdefault((edge.relation, pair), []).append(edge)
            continue
        out.add_edge(edge.src, edge.relation, edge.dst, edge.timestamp)

    dedupe_removed = 0
    dedupe_fallback = 0
    for group in dedupe_groups.values():
        timestamped = [e for e in group if e.timestamp is not None]
        if timestamped:
            keep = max(timestamped, key=lambda e: (e.timestamp, (e.dst, e.src)))
        else:
            keep = min(group, key=lambda e: (e.src, e.dst))
            if len(group) > 1:
                dedupe_fallback += 1
        dedupe_removed += len(group) - 1
        out.add_edge(keep.src, keep.relation, keep.dst, keep.timestamp)

    out.prune_stats = {
        "dropped_edges": dropped,
        "dedupe_removed": dedupe_removed,
        "dedupe_timestampless_fallback": dedupe_fallback,
    }
    return out.freeze()


def _add_bidirectional(
    kg: KnowledgeGraph,
    item: NodeRef,
    forward: Relation,
    inverse: Relation,
    attr: NodeRef,
) -> None:
    kg.add_edge(item, forward, attr, None)
    kg.add_edge(attr, inverse, item, None)


def _latest_ratings(interactions: Sequence[Interaction]) -> dict[tuple[str, str], int]:
    latest: dict[tuple[str, str], int] = {}
    for it in interactions:
        key = (it.user_id, it.item_id)
        if key not in latest or it.timestamp > latest[key]:
            latest[key] = it.timestamp
    return latest


def build_movielens_kg(
    interactions: Sequence[Interaction], meta: Mapping[str, ItemMeta]
) -> KnowledgeGraph:
    """Movie-domain graph: RATED plus genre/year/director/actor relations."""
    kg = KnowledgeGraph()
    items = sorted({it.item_id for it in interactions})
    for item_id in items:
        if item_id not in meta:
            raise ValueError(f"interaction references item {item_id!r} missing from metadata")

    for (uid, iid), ts in sorted(_latest_ratings(interactions).items()):
        kg.add_edge(user_node(uid), Relation.RATED, item_node(iid), ts)

    for item_id in items:
        node = item_node(item_id)
        attrs = meta[item_id].attributes
        for genre in attrs.get("genre", []):
            _add_bidirectional(kg, node, Relation.GENRE_IS, Relation.GENRE_INCLUDES,
                               NodeRef(NodeType.GENRE, genre))
        for year in attrs.get("year", []):
            _add_bidirectional(kg, node, Relation.RELEASED_YEAR_IS, Relation.YEAR_INCLUDES,
                               NodeRef(NodeType.YEAR, year))
        for director in attrs.get("director", []):
            _add_bidirectional(kg, node, Relation.DIRECTED_BY, Relation.IS_THE_DIRECTOR_OF,
                               NodeRef(NodeType.DIRECTOR, director))
        for actor in attrs.get("actor", []):
            _add_bidirectional(kg, node, Relation.HAS_ACTOR, Relation.ACTED_IN,
                               NodeRef(NodeType.ACTOR, actor))
    return kg.freeze()


def build_beauty_kg(
    interactions: Sequence[Interaction], meta: Mapping[str, ItemMeta]
) -> KnowledgeGraph:
    """Product-domain graph: RATED, brand/category, and the four
    unidirectional item->item behavioral relations.

    Behavioral edges whose target is outside the filtered catalog are
    skipped (counted in `build_notes`).
    """
    kg = KnowledgeGraph()
    items = sorted({it.item_id for it in interactions})
    item_set = set(items)
    for item_id in items:
        if item_id not in meta:
            raise ValueError(f"interaction references item {item_id!r} missing from metadata")

    for (uid, iid), ts in sorted(_latest_ratings(interactions).items()):
        kg.add_edge(user_node(uid), Relation.RATED, item_node(iid), ts)

    behavioral = {
        "also_bought": Relation.ALSO_BOUGHT,
        "also_viewed": Relation.ALSO_VIEWED,
        "bought_together": Relation.BOUGHT_TOGETHER,
        "buy_after_viewing": Relation.BUY_AFTER_VIEWING,
    }
    ghost_targets = 0
    for item_id in items:
        node = item_node(item_id)
        attrs = meta[item_id].attributes
        for brand in attrs.get("brand", []):
            _add_bidirectional(kg, node, Relation.BRAND_IS, Relation.BRAND_INCLUDES,
                               NodeRef(NodeType.BRAND, brand))
        for category in attrs.get("category", []):
            _add_bidirectional(kg, node, Relation.CATEGORY_IS, Relation.CATEGORY_INCLUDES,
                               NodeRef(NodeType.CATEGORY, category))
        for attr_name, relation in behavioral.items():
            for target in attrs.get(attr_name, []):
                if target == item_id:
                    continue
                if target not in item_set:
                    ghost_targets += 1
                    continue
                kg.add_edge(node, relation, item_node(target), None)
    kg.build_notes["skipped_behavioral_targets"] = ghost_targets
    return kg.freeze()


def kg_stats(kg: KnowledgeGraph) -> dict:
    node_types = Counter(n.node_type.value for n in kg._nodes)
    relation_counts = Counter(e.relation.value for e in kg.edges())
    stats = {
        "nodes": kg.num_nodes,
        "edges": kg.num_edges,
        "node_types": dict(sorted(node_types.items())),
        "relations": dict(sorted(relation_counts.items())),
    }
    if kg.prune_stats:
        stats["pruning"] = dict(kg.prune_stats)
    if kg.build_notes:
        stats["build_notes"] = dict(kg.build_notes)
    return stats


_ESCAPES = {"\\": "\\\\", "\t": "\\t", "\n": "\\n", "\r": "\\r"}


def _escape(value: str) -> str:
    return "".join(_ESCAPES.get(ch, ch) for ch in value)


def _unescape(value: str) -> str:
    out: list[str] = []
    i = 0
    while i < len(value):
        ch = value[i]
        if ch == "\\" and i + 1 < len(value):
            nxt = value[i + 1]
            mapped = {"\\": "\\", "t": "\t", "n": "\n", "r": "\r"}.get(nxt)
            if mapped is not None:
                out.append(mapped)
                i += 2
                continue
        out.append(ch)
        i += 1
    return "".join(out)


def save_kg(
    kg: KnowledgeGraph,
    path: str | Path,
    config_hash: Optional[str] = None,
    seed: Optional[int] = None,
) -> None:
    """Persist as header.json + nodes.tsv + edges.tsv under `path`."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    header = {
        "format": KG_FORMAT,
        "version": KG_VERSION,
        "nodes": kg.num_nodes,
        "edges": kg.num_edges,
        "config_hash": config_hash,
        "seed": seed,
        "prune_stats": kg.prune_stats,
        "build_notes": kg.build_notes,
    }
    (root / "header.json").write_text(json.dumps(header, sort_keys=True) + "\n", encoding="utf-8")
    with (root / "nodes.tsv").open("w", encoding="utf-8") as fh:
        for node in kg.nodes():
            fh.write(f"{node.node_type.value}\t{_escape(node.key)}\n")
    with (root / "edges.tsv").open("w", encoding="utf-8") as fh:
        for edge in kg.edges():
            ts = "" if edge.timestamp is None else str(edge.timestamp)
            fh.write(
                f"{edge.src.node_type.value}\t{_escape(edge.src.key)}\t{edge.relation.value}\t"
                f"{edge.dst.node_type.value}\t{_escape(edge.dst.key)}\t{ts}\n"
            )


def load_kg(path: str | Path, expected_config_hash: Optional[str] = None) -> KnowledgeGraph:
    root = Path(path)
    header_path = root / "header.json"
    if not header_path.exists():
        raise CorruptArtifactError(f"missing KG header at {header_path}")
    try:
        header = json.loads(header_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CorruptArtifactError(f"unreadable KG header: {exc}") from exc
    if header.get("format") != KG_FORMAT or header.get("version") != KG_VERSION:
        raise CorruptArtifactError(
            f"unsupported KG format/version: {header.get('format')}/{header.get('version')}"
        )
    if expected_config_hash is not None and header.get("config_hash") not in (None, expected_config_hash):
        raise ArtifactMismatchError(
            f"KG at {root} was built under config {header.get('config_hash')}, "
            f"expected {expected_config_hash}"
        )

    kg = KnowledgeGraph()
    try:
        for line in (root / "nodes.tsv").read_text(encoding="utf-8").splitlines():
            type_name, key = line.split("\t")
            kg.add_node(NodeRef(NodeType(type_name), _unescape(key)))
        for line in (root / "edges.tsv").read_text(encoding="utf-8").splitlines():
            st, sk, rel, dt, dk, ts = line.split("\t")
            kg.add_edge(
                NodeRef(NodeType(st), _unescape(sk)),
                Relation(rel),
                NodeRef(NodeType(dt), _unescape(dk)),
                int(ts) if ts else None,
            )
    except (ValueError, FileNotFoundError) as exc:
        raise CorruptArtifactError(f"unreadable KG data at {root}: {exc}") from exc
    if kg.num_nodes != header["nodes"] or kg.num_edges != header["edges"]:
        raise CorruptArtifactError(
            f"KG at {root} is truncated: header says {header['nodes']} nodes/"
            f"{header['edges']} edges, files contain {kg.num_nodes}/{kg.num_edges}"
        )
    kg.prune_stats = dict(header.get("prune_stats") or {})
    kg.build_notes = dict(header.get("build_notes") or {})
    return kg.freeze()
