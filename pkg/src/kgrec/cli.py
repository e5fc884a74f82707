"""Command-line pipeline orchestration.

Stages read their declared inputs and write artifacts under the config's
out_dir; every artifact embeds the config hash and seed that produced it,
and downstream stages refuse mismatched inputs. Exit codes: 0 success,
1 stage failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .config import ConfigError, PipelineConfig, config_hash, load_config
from .errors import ArtifactMismatchError, CorruptArtifactError

logger = logging.getLogger(__name__)

CANDIDATES_HEADER = "# kgrec-candidates v1"
IDF_FORMAT = "kgrec-idf"


def _parse_raw(cfg: PipelineConfig):
    from . import ingest

    if cfg.dataset == "ml-100k":
        interactions, meta, skips = ingest.parse_movielens(cfg.data_dir)
    else:
        data_dir = Path(cfg.data_dir)
        interactions, meta, skips = ingest.parse_amazon_beauty(
            data_dir / "reviews.jsonl", data_dir / "meta.jsonl"
        )
    return interactions, meta, skips


def _preprocess(cfg: PipelineConfig):
    from . import ingest

    interactions, meta, skips = _parse_raw(cfg)
    deduped = ingest.dedup_interactions(interactions)
    filtered = ingest.apply_five_core(deduped, meta)
    sequences = ingest.build_sequences(filtered)
    return interactions, deduped, filtered, sequences, meta, skips


def cmd_ingest(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    from . import ingest

    interactions, deduped, filtered, sequences, meta, skips = _preprocess(cfg)
    chash = config_hash(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ingest.save_sequences(sequences, out / "sequences.tsv", chash, cfg.seed)
    stats = ingest.dataset_stats(sequences)
    stats.update({
        "dataset": cfg.dataset,
        "raw_interactions": len(interactions),
        "dedup_collapsed": len(interactions) - len(deduped),
        "skipped": skips.as_dict(),
        "config_hash": chash,
        "seed": cfg.seed,
    })
    (out / "stats.json").write_text(json.dumps(stats, sort_keys=True, indent=2) + "\n",
                                    encoding="utf-8")
    print(json.dumps(stats, sort_keys=True, indent=2))
    return 0


def cmd_build_kg(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    from . import kg as kgmod

    _, _, filtered, _, meta, _ = _preprocess(cfg)
    if cfg.dataset == "ml-100k":
        graph = kgmod.build_movielens_kg(filtered, meta)
        policy = kgmod.MOVIELENS_PRUNE_POLICY
    else:
        graph = kgmod.build_beauty_kg(filtered, meta)
        policy = kgmod.BEAUTY_PRUNE_POLICY
    if not args.no_prune:
        graph = kgmod.prune(graph, policy)
    chash = config_hash(cfg)
    kg_dir = Path(cfg.out_dir) / "kg"
    kgmod.save_kg(graph, kg_dir, chash, cfg.seed)
    stats = kgmod.kg_stats(graph)
    stats["config_hash"] = chash
    print(json.dumps(stats, sort_keys=True, indent=2))
    return 0


def cmd_kg_stats(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    from . import kg as kgmod

    graph = kgmod.load_kg(Path(cfg.out_dir) / "kg")
    print(json.dumps(kgmod.kg_stats(graph), sort_keys=True, indent=2))
    return 0


def _load_splits(cfg: PipelineConfig):
    from . import ingest

    sequences = ingest.load_sequences(Path(cfg.out_dir) / "sequences.tsv", config_hash(cfg))
    return ingest.leave_one_out_split(sequences), sequences


def cmd_train_retriever(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    from . import retriever as ret

    splits, sequences = _load_splits(cfg)
    vocab = ret.ItemVocab(item for seq in sequences for item in seq.items)
    model = ret.init_retriever(
        len(vocab),
        ret.RetrieverConfig(
            dim=cfg.retriever_dim,
            max_seq_len=cfg.retriever_max_seq_len,
            learning_rate=cfg.retriever_lr,
            epochs=cfg.retriever_epochs,
        ),
        cfg.seed,
    )
    train_seqs = [vocab.encode(s.train) for s in splits]
    ret.train_retriever(model, train_seqs)
    ret.save_retriever(model, Path(cfg.out_dir) / "retriever.ckpt", vocab, config_hash(cfg))
    print(f"trained retriever on {len(train_seqs)} users "
          f"({len(vocab)} items, d={cfg.retriever_dim})")
    return 0


def _write_candidates(path: Path, rows: list[tuple[str, list[str]]],
                      chash: str, seed: int, split: str) -> None:
    with path.open("w", encoding="utf-8") as fh:
        fh.write(f"{CANDIDATES_HEADER} config_hash={chash} seed={seed} split={split}\n")
        for user_id, items in rows:
            fh.write(user_id + "\t" + "\t".join(items) + "\n")


def load_candidates(path: str | Path, expected_config_hash: Optional[str] = None
                    ) -> dict[str, list[str]]:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith(CANDIDATES_HEADER):
        raise CorruptArtifactError(f"{path} is not a candidate cache")
    m = re.search(r"config_hash=(\S+)", lines[0])
    recorded = m.group(1) if m else "None"
    if expected_config_hash is not None and recorded not in ("None", expected_config_hash):
        raise ArtifactMismatchError(
            f"candidates at {path} were produced under config {recorded}, "
            f"expected {expected_config_hash}"
        )
    out: dict[str, list[str]] = {}
    for line in lines[1:]:
        if not line:
            continue
        parts = line.split("\t")
        out[parts[0]] = parts[1:]
    return out


def cmd_retrieve(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    from . import retriever as ret

    splits, _ = _load_splits(cfg)
    chash = config_hash(cfg)
    model, vocab = ret.load_retriever(Path(cfg.out_dir) / "retriever.ckpt", chash)
    rows_valid: list[tuple[str, list[str]]] = []
    rows_test: list[tuple[str, list[str]]] = []
    for split in splits:
        train_idx = vocab.encode(split.train)
        valid_idx = vocab.index(split.valid_target)
        exclude_valid = set(train_idx)
        exclude_test = set(train_idx) | {valid_idx}
        if cfg.exclude_target_from_candidates:
            exclude_valid.add(valid_idx)
            exclude_test.add(vocab.index(split.test_target))
        top_valid, _ = ret.retrieve_topk(model, train_idx, cfg.k_candidates, exclude_valid)
        top_test, _ = ret.retrieve_topk(
            model, train_idx + [valid_idx], cfg.k_candidates, exclude_test
        )
        rows_valid.append((split.user_id, [vocab.item(i) for i in top_valid]))
        rows_test.append((split.user_id, [vocab.item(i) for i in top_test]))
    out = Path(cfg.out_dir)
    _write_candidates(out / "candidates_valid.tsv", rows_valid, chash, cfg.seed, "valid")
    _write_candidates(out / "candidates_test.tsv", rows_test, chash, cfg.seed, "test")
    print(f"wrote {len(rows_valid)} candidate rows per split (K={cfg.k_candidates})")
    return 0


def cmd_train_pref(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    from . import kg as kgmod
    from . import paths as pathsmod
    from . import preference as pref

    splits, _ = _load_splits(cfg)
    chash = config_hash(cfg)
    graph = kgmod.load_kg(Path(cfg.out_dir) / "kg", chash)
    classes = kgmod.PREFERENCE_CLASSES[cfg.dataset]
    user_vocab = pref.UserVocab(s.user_id for s in splits)
    model = pref.init_preference(
        len(user_vocab), cfg.pref_dim, classes, cfg.seed, dropout=cfg.pref_dropout
    )
    train_samples, valid_samples, train_sets = pref.build_training_data(
        splits, graph, user_vocab, classes, cfg.seed,
        max_history=cfg.max_history, max_depth=cfg.path_max_depth,
    )
    pref.train_preference(
        model, train_samples, valid_samples,
        epochs=cfg.pref_epochs, learning_rate=cfg.pref_lr,
        batch_size=cfg.pref_batch_size, validate_every=cfg.pref_validate_every,
        patience=cfg.pref_patience,
    )
    pref.save_preference(model, Path(cfg.out_dir) / "pref.ckpt", user_vocab, chash)
    idf = pathsmod.compute_idf(train_sets, classes)
    idf_doc = {
        "format": IDF_FORMAT,
        "version": 1,
        "config_hash": chash,
        "seed": cfg.seed,
        "corpus_size": idf.corpus_size,
        "values": {rel.value: val for rel, val in idf.values.items()},
    }
    (Path(cfg.out_dir) / "idf.json").write_text(
        json.dumps(idf_doc, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    print(f"trained preference model for {len(user_vocab)} users "
          f"({len(classes)} classes, d_u={cfg.pref_dim})")
    return 0


def load_idf(path: str | Path, expected_config_hash: Optional[str] = None):
    from .kg import Relation
    from .paths import IdfTable

    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, FileNotFoundError) as exc:
        raise CorruptArtifactError(f"unreadable IDF table at {path}: {exc}") from exc
    if doc.get("format") != IDF_FORMAT:
        raise CorruptArtifactError(f"{path} is not an IDF table")
    if expected_config_hash is not None and doc.get("config_hash") not in (
        None, expected_config_hash,
    ):
        raise ArtifactMismatchError(
            f"IDF table at {path} was produced under config {doc.get('config_hash')}, "
            f"expected {expected_config_hash}"
        )
    values = {Relation(name): float(v) for name, v in doc["values"].items()}
    return IdfTable(values=values, corpus_size=int(doc["corpus_size"]))


def cmd_evaluate(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    from . import evaluation as ev
    from . import kg as kgmod
    from . import preference as pref
    from .backends import make_backend

    variant = args.variant or cfg.variant
    backend_name = args.backend or cfg.backend
    splits, _ = _load_splits(cfg)
    chash = config_hash(cfg)
    graph = kgmod.load_kg(Path(cfg.out_dir) / "kg", chash)
    candidates = load_candidates(Path(cfg.out_dir) / "candidates_test.tsv", chash)
    _, meta, _ = _parse_raw(cfg)
    titles = {item_id: m.title for item_id, m in meta.items()}

    pref_model = None
    user_vocab = None
    idf = None
    if variant == ev.VARIANT_PREF_PATHS:
        pref_model, user_vocab = pref.load_preference(Path(cfg.out_dir) / "pref.ckpt", chash)
        idf = load_idf(Path(cfg.out_dir) / "idf.json", chash)

    backend = make_backend(
        backend_name, seed=cfg.seed, endpoint_url=cfg.backend_url or None,
        model_name=cfg.backend_model, timeout=cfg.backend_timeout,
    )
    settings = ev.EvalSettings(
        seed=cfg.seed,
        k_paths=cfg.k_paths,
        max_history=cfg.max_history,
        max_depth=cfg.path_max_depth,
        token_budget=cfg.token_budget,
        title_cap=cfg.title_cap,
        relation_classes=kgmod.PREFERENCE_CLASSES[cfg.dataset],
    )
    artifacts = ev.EvalArtifacts()
    report = ev.evaluate_variant(
        splits, graph, candidates, pref_model, user_vocab, idf,
        backend, variant, titles, settings, artifacts,
    )
    out = Path(cfg.out_dir)
    tag = variant.replace("-", "_")
    metrics_doc = {
        "variant": report.variant,
        "num_users": report.num_users,
        "metrics": report.values,
        "config_hash": chash,
        "seed": cfg.seed,
    }
    (out / f"metrics_{tag}.json").write_text(
        json.dumps(metrics_doc, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    _write_jsonl(out / f"results_{tag}.jsonl", "kgrec-results", artifacts.results, chash, cfg.seed)
    _write_jsonl(out / f"paths_{tag}.jsonl", "kgrec-paths", artifacts.paths, chash, cfg.seed)
    _write_jsonl(out / f"prompts_{tag}.jsonl", "kgrec-prompts", artifacts.prompts, chash, cfg.seed)
    print(report.to_json())
    return 0


def _write_jsonl(path: Path, artifact: str, lines: list[str], chash: str, seed: int) -> None:
    header = json.dumps(
        {"artifact": artifact, "config_hash": chash, "seed": seed}, sort_keys=True
    )
    path.write_text("".join(line + "\n" for line in [header] + lines), encoding="utf-8")


def read_jsonl(path: str | Path) -> list[dict]:
    """Rows of a JSONL artifact, skipping its header line."""
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line:
            continue
        doc = json.loads(line)
        if "artifact" in doc:
            continue
        rows.append(doc)
    return rows


def cmd_report(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    from .evaluation import MetricsReport
    from .report import write_report_files

    reports = []
    for metrics_path in args.metrics:
        doc = json.loads(Path(metrics_path).read_text(encoding="utf-8"))
        reports.append(MetricsReport(
            variant=doc["variant"], num_users=doc["num_users"], values=doc["metrics"],
        ))
    out_dir = Path(args.out or (Path(cfg.out_dir) / "report"))
    written = write_report_files(reports, out_dir)
    for path in written:
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kgrec",
        description="Knowledge-graph-augmented recommendation pipeline",
    )
    parser.add_argument("--version", action="version", version=f"kgrec {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=True, help="flat key=value config file")
        p.add_argument(
            "--set", dest="overrides", action="append", default=[],
            metavar="KEY=VALUE", help="override a config value (repeatable)",
        )

    p = sub.add_parser("ingest", help="parse raw data, filter, and write sequences")
    add_common(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("build-kg", help="build (and prune) the knowledge graph")
    add_common(p)
    p.add_argument("--no-prune", action="store_true", help="skip the pruning policy")
    p.set_defaults(func=cmd_build_kg)

    p = sub.add_parser("kg-stats", help="print stats for the stored knowledge graph")
    add_common(p)
    p.set_defaults(func=cmd_kg_stats)

    p = sub.add_parser("train-retriever", help="train the sequential candidate retriever")
    add_common(p)
    p.set_defaults(func=cmd_train_retriever)

    p = sub.add_parser("retrieve", help="write top-K candidate caches for valid and test")
    add_common(p)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("train-pref", help="train the user relation-preference model")
    add_common(p)
    p.set_defaults(func=cmd_train_pref)

    p = sub.add_parser("evaluate", help="run leave-one-out evaluation for one variant")
    add_common(p)
    p.add_argument("--variant", choices=["lkg-rag", "kg-rag", "base"], default=None)
    p.add_argument("--backend", choices=["mock-uniform", "mock-oracle", "http"], default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="render metric tables and figures")
    add_common(p)
    p.add_argument("metrics", nargs="+", help="metrics JSON files to tabulate")
    p.add_argument("--out", default=None, help="output directory (default: <out_dir>/report)")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)

    overrides = {}
    for item in args.overrides:
        if "=" not in item:
            parser.error(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        overrides[key.strip()] = value.strip()
    try:
        cfg = load_config(args.config, overrides)
    except (FileNotFoundError, ConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    logger.info(
        "%s: dataset=%s seed=%d config_hash=%s",
        args.command, cfg.dataset, cfg.seed, config_hash(cfg),
    )

    try:
        return args.func(args, cfg)
    except Exception as exc:  # stage failure
        logger.error("%s failed: %s", args.command, exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
