"""Ranking prompt assembly with the letter-index candidate scheme.

Two templates: the base one lists history and candidates, the relation
variant additionally carries one verbalized graph path per line. Tokens
are whitespace-delimited words so budgets stay tokenizer-agnostic; when a
prompt exceeds its budget, the lowest-scored paths drop first, then the
oldest history items.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

from .kg import NodeType
from .paths import RelationPath

VARIANT_WITH_RELATIONS = "with_relations"
VARIANT_WITHOUT_RELATIONS = "without_relations"

BASE_TEMPLATE = (
    "### Instruction: Given user history in chronological order, "
    "recommend an item from the candidate pool with its index letter.\n"
    "### Input: User history: {history}; Candidate pool: {candidates}\n"
    "### Response:{label}"
)
RELATIONS_TEMPLATE = (
    "### Instruction: Given user history in chronological order and the relations, "
    "recommend an item from the candidate pool with its index letter.\n"
    "### Input: User history: {history}; Relations: {relations}; "
    "Candidate pool: {candidates}\n"
    "### Response:{label}"
)


@dataclass
class PromptBundle:
    text: str
    letter_map: list[tuple[str, str]]          # (letter, item_id), A-first
    label_letter: Optional[str]
    token_count: int
    path_terminal_items: list[str] = field(default_factory=list)

    def letters(self) -> list[str]:
        return [letter for letter, _ in self.letter_map]

    def item_for(self, letter: str) -> str:
        for lt, item in self.letter_map:
            if lt == letter:
                return item
        raise KeyError(letter)


def letter_for(index: int) -> str:
    if not 0 <= index < 26:
        raise ValueError(f"candidate index {index} out of range 0..25")
    return chr(ord("A") + index)


def index_for(letter: str) -> int:
    if len(letter) != 1 or not "A" <= letter <= "Z":
        raise ValueError(f"invalid candidate letter {letter!r}")
    return ord(letter) - ord("A")


def truncate_title(title: str, cap_tokens: int) -> str:
    if cap_tokens < 1:
        raise ValueError("title cap must be >= 1")
    return " ".join(title.split()[:cap_tokens])


def verbalize_path(
    path: RelationPath, titles: Mapping[str, str], title_cap: int = 32
) -> str:
    """Render "Title -> REL -> Key -> REL -> Title": items show their
    truncated titles, attribute nodes their raw keys.
    """
    parts: list[str] = []
    for i, node in enumerate(path.nodes):
        if node.node_type is NodeType.ITEM:
            if node.key not in titles:
                raise ValueError(f"no title for item {node.key!r}")
            parts.append(truncate_title(titles[node.key], title_cap))
        else:
            parts.append(node.key)
        if i < len(path.relations):
            parts.append(path.relations[i].value)
    return " -> ".join(parts)


def _render(
    variant: str,
    history_titles: Sequence[str],
    path_lines: Sequence[str],
    candidate_titles: Sequence[str],
    label_letter: Optional[str],
) -> str:
    history = ", ".join(history_titles)
    candidates = ", ".join(
        f"({letter_for(i)}) {title}" for i, title in enumerate(candidate_titles)
    )
    label = f" {label_letter}" if label_letter else ""
    if variant == VARIANT_WITH_RELATIONS:
        return RELATIONS_TEMPLATE.format(
            history=history, relations="\n".join(path_lines), candidates=candidates, label=label
        )
    return BASE_TEMPLATE.format(history=history, candidates=candidates, label=label)


def count_tokens(text: str) -> int:
    return len(text.split())


def build_prompt(
    history: Sequence[str],
    paths: Sequence[RelationPath],
    candidates: Sequence[str],
    titles: Mapping[str, str],
    variant: str = VARIANT_WITH_RELATIONS,
    label_item: Optional[str] = None,
    token_budget: int = 2286,
    title_cap: int = 32,
    max_history: int = 20,
) -> PromptBundle:
    """Assemble a ranking prompt from titled history, selected paths, and
    the lettered candidate pool.

    History keeps its most recent `max_history` items. If the rendered text
    exceeds `token_budget` whitespace tokens, paths drop in ascending score
    order, then the oldest history items, before giving up.
    """
    if variant not in (VARIANT_WITH_RELATIONS, VARIANT_WITHOUT_RELATIONS):
        raise ValueError(f"unknown prompt variant {variant!r}")
    if not candidates:
        raise ValueError("candidate pool is empty")
    if len(candidates) > 26:
        raise ValueError(f"{len(candidates)} candidates cannot map onto letters")

    kept_history = list(history)[-max_history:]
    kept_paths = sorted(paths, key=lambda p: p.score) if variant == VARIANT_WITH_RELATIONS else []

    letter_map = [(letter_for(i), item) for i, item in enumerate(candidates)]
    label_letter = None
    if label_item is not None:
        matches = [lt for lt, item in letter_map if item == label_item]
        if not matches:
            raise ValueError(f"label item {label_item!r} is not among the candidates")
        label_letter = matches[0]

    candidate_titles = [truncate_title(titles[item], title_cap) for _, item in letter_map]

    def render() -> str:
        history_titles = [truncate_title(titles[item], title_cap) for item in kept_history]
        ordered = sorted(
            kept_paths,
            key=lambda p: (-p.score, p.length, tuple(n.key for n in p.nodes)),
        )
        lines = [verbalize_path(p, titles, title_cap) for p in ordered]
        return _render(variant, history_titles, lines, candidate_titles, label_letter)

    text = render()
    while count_tokens(text) > token_budget and kept_paths:
        kept_paths.pop(0)           # lowest score drops first
        text = render()
    while count_tokens(text) > token_budget and len(kept_history) > 1:
        kept_history.pop(0)         # then the oldest history item
        text = render()
    tokens = count_tokens(text)
    if tokens > token_budget:
        raise ValueError(
            f"prompt still has {tokens} tokens (budget {token_budget}) with "
            f"{len(kept_history)} history item(s) and no paths"
        )
    return PromptBundle(
        text=text,
        letter_map=letter_map,
        label_letter=label_letter,
        token_count=tokens,
        path_terminal_items=[
            p.target.key
            for p in sorted(kept_paths, key=lambda p: (-p.score, p.length,
                                                       tuple(n.key for n in p.nodes)))
        ],
    )
