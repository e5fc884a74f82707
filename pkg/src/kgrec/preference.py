"""Per-user relation-type preference model.

A user id indexes an embedding row, which passes through layer
normalization, dropout (training only), one affine layer, and a softmax
over the dataset's relation classes. Training minimizes cross-entropy
against surrogate targets: the relation-class frequencies observed on
shortest paths from the user's recent history to the item they picked
next, mapped onto canonical classes (inverse relation names count toward
the forward name).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .checkpoint import load_params, save_params
from .errors import DivergenceError
from .kg import CANONICAL_CLASS, KnowledgeGraph, NodeRef, NodeType, Relation
from .paths import PathSet, shortest_path
from .seeding import derive_rng

CHECKPOINT_KIND = "preference"
LAYER_NORM_EPS = 1e-5


@dataclass
class PreferenceModel:
    user_emb: np.ndarray     # (num_users, d_u)
    gain: np.ndarray         # (d_u,)
    bias: np.ndarray         # (d_u,)
    w: np.ndarray            # (num_relations, d_u)
    b: np.ndarray            # (num_relations,)
    classes: tuple[Relation, ...]
    dropout: float
    seed: int

    @property
    def num_users(self) -> int:
        return self.user_emb.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {
            "user_emb": self.user_emb,
            "gain": self.gain,
            "bias": self.bias,
            "w": self.w,
            "b": self.b,
        }


@dataclass(frozen=True)
class RelationDistribution:
    classes: tuple[Relation, ...]
    probs: np.ndarray

    def prob(self, relation: Relation) -> float:
        return float(self.probs[self.classes.index(CANONICAL_CLASS[relation])])

    def as_dict(self) -> dict[Relation, float]:
        return {cls: float(p) for cls, p in zip(self.classes, self.probs)}


class UserVocab:
    """Bijection between raw user ids and 0-based indexes."""

    def __init__(self, user_ids) -> None:
        self._users = sorted(set(user_ids))
        self._index = {u: i for i, u in enumerate(self._users)}

    def __len__(self) -> int:
        return len(self._users)

    def index(self, user_id: str) -> int:
        if user_id not in self._index:
            raise ValueError(f"unknown user {user_id!r}")
        return self._index[user_id]

    def user(self, index: int) -> str:
        return self._users[index]

    def users(self) -> list[str]:
        return list(self._users)


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_preference(
    num_users: int,
    d_u: int,
    classes: Sequence[Relation],
    seed: int,
    dropout: float = 0.2,
) -> PreferenceModel:
    """Xavier-uniform embedding and affine weights; unit gain, zero biases."""
    if d_u < 1:
        raise ValueError("d_u must be >= 1")
    rng = derive_rng(seed, "preference-init")
    num_relations = len(classes)
    a_emb = xavier_bound(num_users, d_u)
    a_fc = xavier_bound(d_u, num_relations)
    return PreferenceModel(
        user_emb=rng.uniform(-a_emb, a_emb, size=(num_users, d_u)),
        gain=np.ones(d_u),
        bias=np.zeros(d_u),
        w=rng.uniform(-a_fc, a_fc, size=(num_relations, d_u)),
        b=np.zeros(num_relations),
        classes=tuple(classes),
        dropout=dropout,
        seed=seed,
    )


def _layer_norm(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    return (x - mu) * inv, inv


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def pref_forward(
    model: PreferenceModel,
    user_index: int,
    training: bool = False,
    dropout_rng: Optional[np.random.Generator] = None,
    dropout_mask: Optional[np.ndarray] = None,
) -> RelationDistribution:
    """Probability distribution over the model's relation classes.

    Inference (training=False) applies no dropout and is deterministic.
    """
    if not 0 <= user_index < model.num_users:
        raise ValueError(f"user index {user_index} out of range [0, {model.num_users})")
    x = model.user_emb[user_index]
    normed, _ = _layer_norm(x)
    y = model.gain * normed + model.bias
    if training and model.dropout > 0.0:
        if dropout_mask is None:
            if dropout_rng is None:
                raise ValueError("training forward needs a dropout rng or mask")
            dropout_mask = (dropout_rng.random(y.shape) >= model.dropout) / (1.0 - model.dropout)
        y = y * dropout_mask
    logits = model.w @ y + model.b
    return RelationDistribution(classes=model.classes, probs=_softmax(logits))


def loss_and_grads(
    model: PreferenceModel,
    user_indices: Sequence[int],
    targets: np.ndarray,
    dropout_masks: Optional[np.ndarray] = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy of the batch against soft targets, with grads.

    `dropout_masks` is (batch, d_u) of 0 / 1/(1-p) factors, or None for the
    no-dropout path.
    """
    idx = np.asarray(user_indices, dtype=int)
    batch = idx.shape[0]
    x = model.user_emb[idx]                            # (B, d)
    normed, inv = _layer_norm(x)
    y = model.gain * normed + model.bias
    if dropout_masks is not None:
        y = y * dropout_masks
    logits = y @ model.w.T + model.b                   # (B, R)
    probs = _softmax(logits)
    eps = 1e-12
    loss = float(-np.mean(np.sum(targets * np.log(probs + eps), axis=1)))

    dlogits = (probs - targets) / batch                # (B, R)
    d_w = dlogits.T @ y
    d_b = dlogits.sum(axis=0)
    dy = dlogits @ model.w                             # (B, d)
    if dropout_masks is not None:
        dy = dy * dropout_masks
    d_gain = (dy * normed).sum(axis=0)
    d_bias = dy.sum(axis=0)
    d_normed = dy * model.gain
    # Layer-norm backward (biased variance).
    mean_dn = d_normed.mean(axis=1, keepdims=True)
    mean_dn_n = (d_normed * normed).mean(axis=1, keepdims=True)
    dx = inv * (d_normed - mean_dn - normed * mean_dn_n)

    d_user_emb = np.zeros_like(model.user_emb)
    np.add.at(d_user_emb, idx, dx)
    return loss, {"user_emb": d_user_emb, "gain": d_gain, "bias": d_bias, "w": d_w, "b": d_b}


def _uniform(classes: Sequence[Relation]) -> np.ndarray:
    return np.full(len(classes), 1.0 / len(classes))


def traversable_relations(classes: Sequence[Relation]) -> frozenset[Relation]:
    """Relations whose canonical class is scoreable (never RATED)."""
    allowed = frozenset(
        r for r in Relation
        if r is not Relation.RATED and CANONICAL_CLASS[r] in set(classes)
    )
    return allowed


def training_path_set(
    kg: KnowledgeGraph,
    user_id: str,
    history: Sequence[str],
    target_item: str,
    classes: Sequence[Relation],
    rng: np.random.Generator,
    max_history: int = 20,
    max_depth: int = 6,
) -> PathSet:
    """Shortest paths from the user's last `max_history` items to the target."""
    allowed = traversable_relations(classes)
    recent = [h for h in list(history)[-max_history:] if h != target_item]
    path_set = PathSet(user_id=user_id, history=recent, candidates=[target_item])
    target_node = NodeRef(NodeType.ITEM, target_item)
    if not kg.has_node(target_node):
        raise ValueError(f"target item {target_item!r} is not in the graph")
    for h in recent:
        if not kg.has_node(NodeRef(NodeType.ITEM, h)):
            continue
        path = shortest_path(kg, h, target_item, allowed, rng, max_depth=max_depth)
        if path is not None:
            path_set.paths.append(path)
    return path_set


def surrogate_targets(
    user_id: str,
    kg: KnowledgeGraph,
    history: Sequence[str],
    target_item: str,
    classes: Sequence[Relation],
    rng: np.random.Generator,
    max_history: int = 20,
    max_depth: int = 6,
) -> RelationDistribution:
    """Relation-class frequencies on history->target shortest paths,
    normalized to a distribution; uniform when no path connects.
    """
    path_set = training_path_set(
        kg, user_id, history, target_item, classes, rng,
        max_history=max_history, max_depth=max_depth,
    )
    counts = np.zeros(len(classes))
    class_index = {cls: i for i, cls in enumerate(classes)}
    for path in path_set.paths:
        for rel in path.relations:
            counts[class_index[CANONICAL_CLASS[rel]]] += 1
    total = counts.sum()
    probs = counts / total if total > 0 else _uniform(classes)
    return RelationDistribution(classes=tuple(classes), probs=probs)


def train_preference(
    model: PreferenceModel,
    train_samples: Sequence[tuple[int, np.ndarray]],
    valid_samples: Sequence[tuple[int, np.ndarray]],
    epochs: int = 1,
    learning_rate: float = 1e-3,
    batch_size: int = 32,
    validate_every: int = 100,
    patience: int = 20,
) -> PreferenceModel:
    """SGD on cross-entropy vs. surrogate targets; periodic validation with
    early stopping; the best-validation parameters win.
    """
    if not train_samples:
        raise ValueError("no training samples")
    rng = derive_rng(model.seed, "pref-train-order")
    drop_rng = derive_rng(model.seed, "pref-train-dropout")

    def validation_loss() -> float:
        if not valid_samples:
            return float("nan")
        idx = [u for u, _ in valid_samples]
        targets = np.stack([t for _, t in valid_samples])
        loss, _ = loss_and_grads(model, idx, targets, dropout_masks=None)
        return loss

    best_loss = validation_loss() if valid_samples else np.inf
    best_params = copy.deepcopy(model.params())
    stale = 0
    iteration = 0
    stop = False
    for _epoch in range(epochs):
        if stop:
            break
        order = rng.permutation(len(train_samples))
        for start in range(0, len(order), batch_size):
            chunk = order[start:start + batch_size]
            idx = [train_samples[i][0] for i in chunk]
            targets = np.stack([train_samples[i][1] for i in chunk])
            masks = None
            if model.dropout > 0.0:
                masks = (
                    drop_rng.random((len(chunk), model.user_emb.shape[1])) >= model.dropout
                ) / (1.0 - model.dropout)
            loss, grads = loss_and_grads(model, idx, targets, dropout_masks=masks)
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"preference loss became non-finite at iteration {iteration}"
                )
            for name, grad in grads.items():
                model.params()[name] -= learning_rate * grad
            iteration += 1
            if valid_samples and iteration % validate_every == 0:
                vloss = validation_loss()
                if vloss < best_loss - 1e-12:
                    best_loss = vloss
                    best_params = copy.deepcopy(model.params())
                    stale = 0
                else:
                    stale += 1
                    if stale >= patience:
                        stop = True
                        break
    if valid_samples:
        vloss = validation_loss()
        if vloss < best_loss - 1e-12:
            best_loss = vloss
            best_params = copy.deepcopy(model.params())
        for name, arr in model.params().items():
            arr[...] = best_params[name]
    return model


def build_training_data(
    splits,
    kg: KnowledgeGraph,
    user_vocab: UserVocab,
    classes: Sequence[Relation],
    seed: int,
    max_history: int = 20,
    max_depth: int = 6,
) -> tuple[list[tuple[int, np.ndarray]], list[tuple[int, np.ndarray]], list[PathSet]]:
    """Surrogate samples per user plus the training path sets (IDF corpus).

    The training sample predicts the last train item from the items before
    it; the validation sample predicts the validation target from the whole
    train sequence.
    """
    train_samples: list[tuple[int, np.ndarray]] = []
    valid_samples: list[tuple[int, np.ndarray]] = []
    train_sets: list[PathSet] = []
    for split in splits:
        uidx = user_vocab.index(split.user_id)
        if len(split.train) >= 2:
            rng = derive_rng(seed, "surrogate", split.user_id, "train")
            pset = training_path_set(
                kg, split.user_id, split.train[:-1], split.train[-1], classes, rng,
                max_history=max_history, max_depth=max_depth,
            )
            train_sets.append(pset)
            train_samples.append((uidx, _targets_from_path_set(pset, classes)))
        rng = derive_rng(seed, "surrogate", split.user_id, "valid")
        vset = training_path_set(
            kg, split.user_id, split.train, split.valid_target, classes, rng,
            max_history=max_history, max_depth=max_depth,
        )
        valid_samples.append((uidx, _targets_from_path_set(vset, classes)))
    return train_samples, valid_samples, train_sets


def _targets_from_path_set(path_set: PathSet, classes: Sequence[Relation]) -> np.ndarray:
    counts = np.zeros(len(classes))
    class_index = {cls: i for i, cls in enumerate(classes)}
    for path in path_set.paths:
        for rel in path.relations:
            counts[class_index[CANONICAL_CLASS[rel]]] += 1
    total = counts.sum()
    return counts / total if total > 0 else _uniform(classes)


def save_preference(
    model: PreferenceModel,
    path: str | Path,
    user_vocab: UserVocab,
    config_hash: Optional[str] = None,
) -> None:
    header = {
        "kind": CHECKPOINT_KIND,
        "d_u": model.user_emb.shape[1],
        "classes": [c.value for c in model.classes],
        "dropout": model.dropout,
        "seed": model.seed,
        "config_hash": config_hash,
        "users": user_vocab.users(),
    }
    save_params(path, header, model.params())


def load_preference(
    path: str | Path, expected_config_hash: Optional[str] = None
) -> tuple[PreferenceModel, UserVocab]:
    header, params = load_params(path, CHECKPOINT_KIND, expected_config_hash)
    model = PreferenceModel(
        user_emb=params["user_emb"],
        gain=params["gain"],
        bias=params["bias"],
        w=params["w"],
        b=params["b"],
        classes=tuple(Relation(c) for c in header["classes"]),
        dropout=header["dropout"],
        seed=header["seed"],
    )
    return model, UserVocab(header["users"])
