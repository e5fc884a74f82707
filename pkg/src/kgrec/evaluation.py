"""Leave-one-out evaluation of the ranking pipeline and its ablations.

Three variants share the retrieval + prompt + backend scaffolding:

* ``lkg-rag``  — preference-scored, TF-IDF-weighted top-K relation paths;
* ``kg-rag``   — per-pair shortest paths truncated by seeded random choice,
  no preference or TF-IDF involvement;
* ``base``     — no paths at all.

Metrics are MRR/NDCG/Recall at K over a single relevant item per user:
Recall@K = 1[r <= K], MRR@K = 1/r if r <= K else 0, NDCG@K = 1/log2(r+1)
if r <= K else 0 (ideal DCG = 1). Users whose target never entered the
candidate pool contribute zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .backends import score_candidates
from .ingest import UserSplit
from .kg import KnowledgeGraph, Relation
from .paths import (
    PATH_RELATIONS,
    IdfTable,
    enumerate_pair_paths,
    score_path_set,
    select_top_paths,
)
from .preference import PreferenceModel, UserVocab, pref_forward, traversable_relations
from .prompts import (
    VARIANT_WITH_RELATIONS,
    VARIANT_WITHOUT_RELATIONS,
    PromptBundle,
    build_prompt,
)
from .seeding import derive_rng

VARIANT_PREF_PATHS = "lkg-rag"
VARIANT_RANDOM_PATHS = "kg-rag"
VARIANT_BASE = "base"
VARIANTS = (VARIANT_PREF_PATHS, VARIANT_RANDOM_PATHS, VARIANT_BASE)

METRICS = ("MRR", "NDCG", "Recall")
CUTOFFS = (1, 5, 10)


@dataclass
class RankingResult:
    user_id: str
    ranked_items: list[str]
    target_item: str

    @property
    def target_rank(self) -> Optional[int]:
        try:
            return self.ranked_items.index(self.target_item) + 1
        except ValueError:
            return None


@dataclass
class MetricsReport:
    variant: str
    num_users: int
    values: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {"variant": self.variant, "num_users": self.num_users, "metrics": self.values},
            sort_keys=True,
            indent=2,
        )


def rank_from_scores(
    letter_scores: Sequence[tuple[str, float]],
    letter_map: Sequence[tuple[str, str]],
    user_id: str,
    target_item: str,
) -> RankingResult:
    """Stable descending sort of candidates by score; ties keep letter order."""
    by_letter = dict(letter_map)
    order = sorted(letter_scores, key=lambda ls: (-ls[1], ls[0]))
    ranked = [by_letter[letter] for letter, _ in order]
    return RankingResult(user_id=user_id, ranked_items=ranked, target_item=target_item)


def metric_at_k(results: Sequence[RankingResult], metric: str, k: int) -> float:
    """Mean of the per-user single-relevant-item metric at cutoff k."""
    if k < 1:
        raise ValueError("k must be >= 1")
    metric = metric.lower()
    if metric not in ("mrr", "ndcg", "recall"):
        raise ValueError(f"unknown metric {metric!r}")
    if not results:
        return 0.0
    total = 0.0
    for result in results:
        r = result.target_rank
        if r is None or r > k:
            continue
        if metric == "recall":
            total += 1.0
        elif metric == "mrr":
            total += 1.0 / r
        else:
            total += 1.0 / np.log2(r + 1)
    return total / len(results)


def compute_report(results: Sequence[RankingResult], variant: str) -> MetricsReport:
    values = {
        f"{name}@{k}": metric_at_k(results, name, k) for name in METRICS for k in CUTOFFS
    }
    return MetricsReport(variant=variant, num_users=len(results), values=values)


@dataclass
class EvalSettings:
    seed: int = 13
    k_paths: int = 20
    max_history: int = 20
    max_depth: int = 6
    token_budget: int = 2286
    title_cap: int = 32
    # Relation classes whose edges path variants may traverse; empty means
    # every non-RATED relation.
    relation_classes: tuple[Relation, ...] = ()


@dataclass
class EvalArtifacts:
    """Optional JSON-lines sinks filled during evaluation."""

    paths: list[str] = field(default_factory=list)
    prompts: list[str] = field(default_factory=list)
    results: list[str] = field(default_factory=list)


def _paths_jsonl(user_id: str, paths: Sequence) -> list[str]:
    lines = []
    for p in paths:
        lines.append(json.dumps({
            "user": user_id,
            "history_item": p.nodes[0].key,
            "candidate_item": p.nodes[-1].key,
            "nodes": [[n.node_type.value, n.key] for n in p.nodes],
            "relations": [r.value for r in p.relations],
            "score": p.score,
        }, sort_keys=True))
    return lines


def evaluate_variant(
    splits: Sequence[UserSplit],
    kg: KnowledgeGraph,
    candidates: Mapping[str, Sequence[str]],
    pref_model: Optional[PreferenceModel],
    user_vocab: Optional[UserVocab],
    idf: Optional[IdfTable],
    backend,
    variant: str,
    titles: Mapping[str, str],
    settings: EvalSettings,
    artifacts: Optional[EvalArtifacts] = None,
) -> MetricsReport:
    """Rank each user's test target within their candidate set.

    `candidates` maps user id to the retriever's ordered top-K list (the
    retrieve stage's cache). Path variants consult the graph; the base
    variant never does. Backend failures propagate with the user id.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if variant == VARIANT_PREF_PATHS:
        if pref_model is None or user_vocab is None or idf is None:
            raise ValueError(f"{variant} needs a preference model, user vocab, and IDF table")
    results: list[RankingResult] = []
    classes = settings.relation_classes or (
        pref_model.classes if pref_model is not None else ()
    )
    for split in splits:
        user_id = split.user_id
        cand = list(candidates[user_id])
        history = (split.train + [split.valid_target])[-settings.max_history:]
        try:
            bundle = _build_user_prompt(
                kg, user_id, history, cand, pref_model, user_vocab, idf, variant,
                titles, settings, classes, artifacts,
            )
            letter_scores = score_candidates(backend, bundle)
        except Exception as exc:
            raise RuntimeError(f"evaluation failed for user {user_id}: {exc}") from exc
        result = rank_from_scores(letter_scores, bundle.letter_map, user_id, split.test_target)
        results.append(result)
        if artifacts is not None:
            artifacts.prompts.append(json.dumps({
                "user": user_id,
                "text": bundle.text,
                "letters": {lt: item for lt, item in bundle.letter_map},
                "label": bundle.label_letter,
            }, sort_keys=True))
            artifacts.results.append(json.dumps({
                "user": user_id,
                "target": result.target_item,
                "target_rank": result.target_rank,
                "ranked_items": result.ranked_items,
            }, sort_keys=True))
    return compute_report(results, variant)


def _build_user_prompt(
    kg: KnowledgeGraph,
    user_id: str,
    history: Sequence[str],
    cand: Sequence[str],
    pref_model: Optional[PreferenceModel],
    user_vocab: Optional[UserVocab],
    idf: Optional[IdfTable],
    variant: str,
    titles: Mapping[str, str],
    settings: EvalSettings,
    classes: tuple[Relation, ...],
    artifacts: Optional[EvalArtifacts],
) -> PromptBundle:
    selected = []
    if variant != VARIANT_BASE:
        allowed = traversable_relations(classes) if classes else PATH_RELATIONS
        rng = derive_rng(settings.seed, "eval-paths", user_id)
        path_set = enumerate_pair_paths(
            kg, user_id, history, cand, rng,
            allowed_relations=allowed,
            max_depth=settings.max_depth,
        )
        if variant == VARIANT_PREF_PATHS:
            dist = pref_forward(pref_model, user_vocab.index(user_id), training=False)
            scores = score_path_set(path_set, dist.as_dict(), idf)
            selected = select_top_paths(path_set.paths, scores, settings.k_paths)
        else:
            pick_rng = derive_rng(settings.seed, "eval-random-paths", user_id)
            n = len(path_set.paths)
            take = min(settings.k_paths, n)
            chosen = sorted(pick_rng.choice(n, size=take, replace=False).tolist()) if n else []
            selected = [path_set.paths[i] for i in chosen]
        if artifacts is not None:
            artifacts.paths.extend(_paths_jsonl(user_id, selected))
    prompt_variant = (
        VARIANT_WITHOUT_RELATIONS if variant == VARIANT_BASE else VARIANT_WITH_RELATIONS
    )
    return build_prompt(
        history=history,
        paths=selected,
        candidates=cand,
        titles=titles,
        variant=prompt_variant,
        token_budget=settings.token_budget,
        title_cap=settings.title_cap,
        max_history=settings.max_history,
    )
