"""Raw dataset parsing and preprocessing.

Movie data is accepted in any of the common distribution layouts
(`u.data`/`u.item` tab+pipe files, `ratings.dat`/`movies.dat` ``::`` files,
or `ratings.csv`/`movies.csv`), optionally enriched with a local
director/actor TSV. Product review data is accepted as the usual pair of
JSON-lines files (reviews + item metadata).

Preprocessing: duplicate (user, item) events collapse to the latest,
items without metadata are dropped, users and items with fewer than five
interactions are removed iteratively to a fixed point, and per-user
sequences are ordered by ascending timestamp with input-order tie-breaks.
"""

from __future__ import annotations

import csv
import json
import logging
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

from .errors import ArtifactMismatchError, CorruptArtifactError

logger = logging.getLogger(__name__)

# Canonical genre column order of the classic 100K distribution; used when
# the directory carries no u.genre file.
_DEFAULT_GENRES = [
    "unknown", "Action", "Adventure", "Animation", "Children's", "Comedy",
    "Crime", "Documentary", "Drama", "Fantasy", "Film-Noir", "Horror",
    "Musical", "Mystery", "Romance", "Sci-Fi", "Thriller", "War", "Western",
]

_TITLE_YEAR_RE = re.compile(r"\((\d{4})\)\s*$")


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    rating: Optional[int]
    timestamp: int


@dataclass
class ItemMeta:
    item_id: str
    title: str
    attributes: dict[str, list[str]] = field(default_factory=dict)


@dataclass
class UserSequence:
    user_id: str
    items: list[str]


@dataclass
class UserSplit:
    user_id: str
    train: list[str]
    valid_target: str
    test_target: str

    @property
    def full_sequence(self) -> list[str]:
        return self.train + [self.valid_target, self.test_target]


@dataclass
class SkipReport:
    counts: Counter = field(default_factory=Counter)

    def skip(self, source: str) -> None:
        self.counts[source] += 1

    def total(self) -> int:
        return sum(self.counts.values())

    def as_dict(self) -> dict[str, int]:
        return dict(sorted(self.counts.items()))


def _clamp_rating(value: float) -> int:
    return max(1, min(5, int(value + 0.5)))


def _parse_ratings_lines(
    lines: Sequence[str], sep: str, source: str, skips: SkipReport
) -> list[Interaction]:
    out: list[Interaction] = []
    for line in lines:
        line = line.rstrip("\n")
        if not line:
            continue
        parts = line.split(sep)
        if len(parts) != 4:
            skips.skip(source)
            continue
        try:
            out.append(
                Interaction(
                    user_id=parts[0].strip(),
                    item_id=parts[1].strip(),
                    rating=_clamp_rating(float(parts[2])),
                    timestamp=int(float(parts[3])),
                )
            )
        except ValueError:
            skips.skip(source)
    return out


def _read_genre_names(data_dir: Path) -> list[str]:
    genre_file = data_dir / "u.genre"
    if not genre_file.exists():
        return list(_DEFAULT_GENRES)
    names: dict[int, str] = {}
    for line in genre_file.read_text(encoding="latin-1").splitlines():
        if not line.strip():
            continue
        parts = line.split("|")
        if len(parts) >= 2:
            try:
                names[int(parts[1])] = parts[0]
            except ValueError:
                continue
    return [names[i] for i in sorted(names)] if names else list(_DEFAULT_GENRES)


def _parse_u_item(data_dir: Path, skips: SkipReport) -> dict[str, ItemMeta]:
    genres = _read_genre_names(data_dir)
    meta: dict[str, ItemMeta] = {}
    for line in (data_dir / "u.item").read_text(encoding="latin-1").splitlines():
        if not line.strip():
            continue
        parts = line.split("|")
        if len(parts) < 5 + len(genres) or not parts[1].strip():
            skips.skip("u.item")
            continue
        item_id = parts[0].strip()
        title = parts[1].strip()
        attrs: dict[str, list[str]] = {}
        flags = parts[5:5 + len(genres)]
        genre_list = [g for g, f in zip(genres, flags) if f.strip() == "1" and g != "unknown"]
        if genre_list:
            attrs["genre"] = genre_list
        year = None
        release = parts[2].strip()
        if release:
            tail = release.split("-")[-1]
            if len(tail) == 4 and tail.isdigit():
                year = tail
        if year is None:
            m = _TITLE_YEAR_RE.search(title)
            if m:
                year = m.group(1)
        if year:
            attrs["year"] = [year]
        meta[item_id] = ItemMeta(item_id=item_id, title=title, attributes=attrs)
    return meta


def _parse_movies_dat(path: Path, skips: SkipReport) -> dict[str, ItemMeta]:
    meta: dict[str, ItemMeta] = {}
    for line in path.read_text(encoding="latin-1").splitlines():
        if not line.strip():
            continue
        parts = line.split("::")
        if len(parts) != 3 or not parts[1].strip():
            skips.skip(path.name)
            continue
        item_id, title, genre_field = parts[0].strip(), parts[1].strip(), parts[2].strip()
        attrs: dict[str, list[str]] = {}
        genre_list = [g for g in genre_field.split("|") if g and g != "(no genres listed)"]
        if genre_list:
            attrs["genre"] = genre_list
        m = _TITLE_YEAR_RE.search(title)
        if m:
            attrs["year"] = [m.group(1)]
        meta[item_id] = ItemMeta(item_id=item_id, title=title, attributes=attrs)
    return meta


def _parse_movies_csv(path: Path, skips: SkipReport) -> dict[str, ItemMeta]:
    meta: dict[str, ItemMeta] = {}
    with path.open(encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            item_id = (row.get("movieId") or "").strip()
            title = (row.get("title") or "").strip()
            if not item_id or not title:
                skips.skip(path.name)
                continue
            attrs: dict[str, list[str]] = {}
            genre_field = (row.get("genres") or "").strip()
            genre_list = [g for g in genre_field.split("|") if g and g != "(no genres listed)"]
            if genre_list:
                attrs["genre"] = genre_list
            m = _TITLE_YEAR_RE.search(title)
            if m:
                attrs["year"] = [m.group(1)]
            meta[item_id] = ItemMeta(item_id=item_id, title=title, attributes=attrs)
    return meta


def _parse_ratings_csv(path: Path, skips: SkipReport) -> list[Interaction]:
    out: list[Interaction] = []
    with path.open(encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            try:
                out.append(
                    Interaction(
                        user_id=row["userId"].strip(),
                        item_id=row["movieId"].strip(),
                        rating=_clamp_rating(float(row["rating"])),
                        timestamp=int(float(row["timestamp"])),
                    )
                )
            except (KeyError, ValueError, AttributeError):
                skips.skip(path.name)
    return out


def _apply_enrichment(data_dir: Path, meta: dict[str, ItemMeta], skips: SkipReport) -> None:
    enrichment = data_dir / "enrichment.tsv"
    if not enrichment.exists():
        return
    for line in enrichment.read_text(encoding="utf-8").splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            skips.skip("enrichment.tsv")
            continue
        item_id = parts[0].strip()
        if item_id not in meta:
            skips.skip("enrichment.tsv")
            continue
        directors = [d for d in parts[1].split("|") if d.strip()]
        actors = [a for a in parts[2].split("|") if a.strip()]
        if directors:
            meta[item_id].attributes["director"] = directors
        if actors:
            meta[item_id].attributes["actor"] = actors


def parse_movielens(data_dir: str | Path) -> tuple[list[Interaction], dict[str, ItemMeta], SkipReport]:
    """Parse a movie-ratings directory in whichever layout it uses.

    Returns (interactions, item metadata, skip report). Interactions whose
    item has no metadata entry are dropped and counted.
    """
    data_dir = Path(data_dir)
    skips = SkipReport()

    if (data_dir / "u.data").exists():
        ratings_lines = (data_dir / "u.data").read_text(encoding="latin-1").splitlines()
        interactions = _parse_ratings_lines(ratings_lines, "\t", "u.data", skips)
        if not (data_dir / "u.item").exists():
            raise FileNotFoundError(f"missing item metadata file {data_dir / 'u.item'}")
        meta = _parse_u_item(data_dir, skips)
    elif (data_dir / "ratings.dat").exists():
        ratings_lines = (data_dir / "ratings.dat").read_text(encoding="latin-1").splitlines()
        interactions = _parse_ratings_lines(ratings_lines, "::", "ratings.dat", skips)
        movies = data_dir / "movies.dat"
        if not movies.exists():
            raise FileNotFoundError(f"missing item metadata file {movies}")
        meta = _parse_movies_dat(movies, skips)
    elif (data_dir / "ratings.csv").exists():
        interactions = _parse_ratings_csv(data_dir / "ratings.csv", skips)
        movies = data_dir / "movies.csv"
        if not movies.exists():
            raise FileNotFoundError(f"missing item metadata file {movies}")
        meta = _parse_movies_csv(movies, skips)
    else:
        raise FileNotFoundError(
            f"no ratings file (u.data, ratings.dat, or ratings.csv) under {data_dir}"
        )

    _apply_enrichment(data_dir, meta, skips)

    kept = []
    for it in interactions:
        if it.item_id in meta:
            kept.append(it)
        else:
            skips.skip("interactions_without_metadata")
    return kept, meta, skips


def parse_amazon_beauty(
    reviews_path: str | Path, meta_path: str | Path
) -> tuple[list[Interaction], dict[str, ItemMeta], SkipReport]:
    """Parse JSON-lines review and item-metadata files.

    Items without a title are dropped, along with their interactions.
    Related-item lists land in attributes under also_bought / also_viewed /
    bought_together / buy_after_viewing; category lists-of-lists flatten to
    their distinct leaf strings.
    """
    reviews_path = Path(reviews_path)
    meta_path = Path(meta_path)
    for p in (reviews_path, meta_path):
        if not p.exists():
            raise FileNotFoundError(f"missing input file {p}")
    skips = SkipReport()

    meta: dict[str, ItemMeta] = {}
    for line in meta_path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError:
            skips.skip("meta")
            continue
        asin = obj.get("asin")
        title = (obj.get("title") or "").strip()
        if not asin or not title:
            skips.skip("meta")
            continue
        attrs: dict[str, list[str]] = {}
        brand = (obj.get("brand") or "").strip()
        if brand:
            attrs["brand"] = [brand]
        leaves: list[str] = []
        for chain in obj.get("categories") or []:
            if isinstance(chain, list) and chain:
                leaf = str(chain[-1]).strip()
                if leaf and leaf not in leaves:
                    leaves.append(leaf)
        if leaves:
            attrs["category"] = leaves
        related = obj.get("related") or {}
        for key in ("also_bought", "also_viewed", "bought_together", "buy_after_viewing"):
            values = [str(v) for v in related.get(key) or [] if v]
            if values:
                attrs[key] = values
        meta[asin] = ItemMeta(item_id=str(asin), title=title, attributes=attrs)

    interactions: list[Interaction] = []
    for line in reviews_path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError:
            skips.skip("reviews")
            continue
        reviewer = obj.get("reviewerID")
        asin = obj.get("asin")
        ts = obj.get("unixReviewTime")
        if not reviewer or not asin or ts is None:
            skips.skip("reviews")
            continue
        rating = obj.get("overall")
        if asin not in meta:
            skips.skip("interactions_without_metadata")
            continue
        interactions.append(
            Interaction(
                user_id=str(reviewer),
                item_id=str(asin),
                rating=_clamp_rating(float(rating)) if rating is not None else None,
                timestamp=int(ts),
            )
        )
    return interactions, meta, skips


def dedup_interactions(interactions: Sequence[Interaction]) -> list[Interaction]:
    """Collapse repeated (user, item) events to the latest-timestamp one.

    Output preserves the input order of the surviving events.
    """
    best: dict[tuple[str, str], int] = {}
    for idx, it in enumerate(interactions):
        key = (it.user_id, it.item_id)
        if key not in best or it.timestamp >= interactions[best[key]].timestamp:
            best[key] = idx
    keep = set(best.values())
    return [it for idx, it in enumerate(interactions) if idx in keep]


def apply_five_core(
    interactions: Sequence[Interaction],
    meta: Mapping[str, ItemMeta],
    min_count: int = 5,
) -> list[Interaction]:
    """Iteratively remove users and items with fewer than `min_count`
    interactions until a fixed point; items lacking metadata go first.
    """
    current = [it for it in interactions if it.item_id in meta]
    while True:
        user_counts = Counter(it.user_id for it in current)
        item_counts = Counter(it.item_id for it in current)
        bad_users = {u for u, c in user_counts.items() if c < min_count}
        bad_items = {i for i, c in item_counts.items() if c < min_count}
        if not bad_users and not bad_items:
            break
        current = [
            it for it in current
            if it.user_id not in bad_users and it.item_id not in bad_items
        ]
    if not current:
        raise ValueError(
            f"five-core filtering removed every interaction "
            f"(started with {len(interactions)}); the dataset is too sparse"
        )
    return current


def build_sequences(interactions: Sequence[Interaction]) -> list[UserSequence]:
    """Chronological per-user item sequences; ties keep input-file order."""
    per_user: dict[str, list[tuple[int, int, str]]] = defaultdict(list)
    for idx, it in enumerate(interactions):
        per_user[it.user_id].append((it.timestamp, idx, it.item_id))
    sequences = []
    for user_id in sorted(per_user):
        events = sorted(per_user[user_id])
        sequences.append(UserSequence(user_id=user_id, items=[e[2] for e in events]))
    return sequences


def leave_one_out_split(sequences: Sequence[UserSequence]) -> list[UserSplit]:
    """Last item to test, second-to-last to validation, the rest to train.

    Sequences shorter than 3 are excluded with a warning.
    """
    splits = []
    for seq in sequences:
        if len(seq.items) < 3:
            logger.warning(
                "user %s has only %d items; excluded from splits", seq.user_id, len(seq.items)
            )
            continue
        splits.append(
            UserSplit(
                user_id=seq.user_id,
                train=list(seq.items[:-2]),
                valid_target=seq.items[-2],
                test_target=seq.items[-1],
            )
        )
    return splits


def dataset_stats(sequences: Sequence[UserSequence]) -> dict:
    items = {i for seq in sequences for i in seq.items}
    interactions = sum(len(seq.items) for seq in sequences)
    return {
        "users": len(sequences),
        "items": len(items),
        "interactions": interactions,
        "mean_length": (interactions / len(sequences)) if sequences else 0.0,
    }


def save_sequences(
    sequences: Sequence[UserSequence],
    path: str | Path,
    config_hash: Optional[str] = None,
    seed: Optional[int] = None,
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(f"# kgrec-sequences v1 config_hash={config_hash} seed={seed}\n")
        for seq in sequences:
            fh.write(seq.user_id + "\t" + "\t".join(seq.items) + "\n")


def load_sequences(
    path: str | Path, expected_config_hash: Optional[str] = None
) -> list[UserSequence]:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("# kgrec-sequences v1"):
        raise CorruptArtifactError(f"{path} is not a sequences artifact")
    m = re.search(r"config_hash=(\S+)", lines[0])
    recorded = m.group(1) if m else "None"
    if expected_config_hash is not None and recorded not in ("None", expected_config_hash):
        raise ArtifactMismatchError(
            f"sequences at {path} were produced under config {recorded}, "
            f"expected {expected_config_hash}"
        )
    sequences = []
    for line in lines[1:]:
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) < 2:
            raise CorruptArtifactError(f"malformed sequence row in {path}: {line!r}")
        sequences.append(UserSequence(user_id=parts[0], items=parts[1:]))
    return sequences
