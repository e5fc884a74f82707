"""Sequential candidate retriever: a minimal diagonal linear recurrent unit.

The model keeps a fixed-length state h updated as a per-dimension convex
combination

    h_t = s * h_{t-1} + (1 - s) * (W_in @ e(x_t)),   s = sigmoid(decay)

with tied item embeddings for input and output: logits = E @ h_T. Training
minimizes mean next-item cross-entropy at every position of each sequence
via plain SGD with exact backpropagation through the recurrence.

Item ids are contiguous integers from 1; index 0 is padding and never
scores (logit -inf).
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .checkpoint import load_params, save_params
from .errors import DivergenceError
from .seeding import derive_rng

CHECKPOINT_KIND = "retriever"


@dataclass(frozen=True)
class RetrieverConfig:
    dim: int = 64
    max_seq_len: int = 50
    learning_rate: float = 0.01
    epochs: int = 3


@dataclass
class RetrieverModel:
    emb: np.ndarray          # (num_items + 1, dim); row 0 = padding
    decay: np.ndarray        # (dim,) pre-squash
    w_in: np.ndarray         # (dim, dim)
    num_items: int
    config: RetrieverConfig
    seed: int

    def params(self) -> dict[str, np.ndarray]:
        return {"emb": self.emb, "decay": self.decay, "w_in": self.w_in}


class ItemVocab:
    """Bijection between raw item ids and contiguous 1-based indexes."""

    def __init__(self, item_ids: Iterable[str]) -> None:
        self._items = sorted(set(item_ids))
        self._index = {item: i + 1 for i, item in enumerate(self._items)}

    def __len__(self) -> int:
        return len(self._items)

    def index(self, item_id: str) -> int:
        return self._index[item_id]

    def item(self, index: int) -> str:
        return self._items[index - 1]

    def encode(self, items: Sequence[str]) -> list[int]:
        return [self._index[i] for i in items]

    def items(self) -> list[str]:
        return list(self._items)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def init_retriever(num_items: int, config: RetrieverConfig, seed: int) -> RetrieverModel:
    """Embeddings ~ U(-0.1, 0.1); decay pre-squash set so sigmoid ~= 0.9."""
    if config.dim < 1:
        raise ValueError("dim must be >= 1")
    rng = derive_rng(seed, "retriever-init")
    emb = rng.uniform(-0.1, 0.1, size=(num_items + 1, config.dim))
    w_in = rng.uniform(-0.1, 0.1, size=(config.dim, config.dim))
    decay = np.full(config.dim, np.log(9.0))  # sigmoid(ln 9) = 0.9
    return RetrieverModel(
        emb=emb, decay=decay, w_in=w_in, num_items=num_items, config=config, seed=seed
    )


def _states(model: RetrieverModel, seq: Sequence[int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Hidden state after each input position; also the projected inputs."""
    s = _sigmoid(model.decay)
    t_len = len(seq)
    proj = model.emb[list(seq)] @ model.w_in.T      # (T, dim)
    states = np.empty((t_len, model.config.dim))
    h = np.zeros(model.config.dim)
    for t in range(t_len):
        h = s * h + (1.0 - s) * proj[t]
        states[t] = h
    return states, proj, s


def forward(model: RetrieverModel, item_sequence: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Final state and logits over all item ids (padding id scores -inf).

    The sequence is truncated to its last `max_seq_len` items.
    """
    if len(item_sequence) == 0:
        raise ValueError("cannot run the retriever on an empty sequence")
    seq = list(item_sequence)[-model.config.max_seq_len:]
    states, _, _ = _states(model, seq)
    h = states[-1]
    logits = model.emb @ h
    logits[0] = -np.inf
    return h, logits


def loss_and_grads(
    model: RetrieverModel, sequence: Sequence[int]
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean next-item cross-entropy over every position, with exact grads.

    Uses inputs x_1..x_{T-1} against targets x_2..x_T after truncation to
    the last max_seq_len + 1 items.
    """
    seq = list(sequence)[-(model.config.max_seq_len + 1):]
    if len(seq) < 2:
        raise ValueError("need at least 2 items to form a training step")
    inputs = seq[:-1]
    targets = seq[1:]
    t_len = len(inputs)
    dim = model.config.dim

    states, proj, s = _states(model, inputs)
    logits = states @ model.emb.T                     # (T, V+1)
    logits[:, 0] = -np.inf
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    loss = float(-np.mean(shifted[np.arange(t_len), targets]
                          - np.log(exp.sum(axis=1))))

    dlogits = probs
    dlogits[np.arange(t_len), targets] -= 1.0
    dlogits /= t_len
    dlogits[:, 0] = 0.0

    d_emb = dlogits.T @ states                        # output-side embedding grad
    d_states = dlogits @ model.emb                    # (T, dim)

    d_proj = np.empty((t_len, dim))
    ds = np.zeros(dim)
    dh = np.zeros(dim)
    for t in range(t_len - 1, -1, -1):
        dh = dh + d_states[t]
        h_prev = states[t - 1] if t > 0 else np.zeros(dim)
        ds += dh * (h_prev - proj[t])
        d_proj[t] = dh * (1.0 - s)
        dh = dh * s
    d_decay = ds * s * (1.0 - s)
    in_emb = model.emb[inputs]
    d_w_in = d_proj.T @ in_emb
    d_in_emb = d_proj @ model.w_in
    np.add.at(d_emb, inputs, d_in_emb)                # tied embeddings: grads add

    return loss, {"emb": d_emb, "decay": d_decay, "w_in": d_w_in}


def train_retriever(
    model: RetrieverModel,
    train_sequences: Sequence[Sequence[int]],
    epochs: Optional[int] = None,
    learning_rate: Optional[float] = None,
) -> RetrieverModel:
    """Adam over per-user sequences, seeded order shuffle each epoch.

    Plain SGD stalls on the near-uniform softmax plateau at realistic item
    counts; Adam's per-parameter scaling escapes it in the first epoch.
    Optimizer state is fresh per call.
    """
    epochs = model.config.epochs if epochs is None else epochs
    lr = model.config.learning_rate if learning_rate is None else learning_rate
    usable = [list(seq) for seq in train_sequences if len(seq) >= 2]
    if not usable:
        raise ValueError("no training sequences of length >= 2")
    rng = derive_rng(model.seed, "retriever-train")
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    first = {k: np.zeros_like(v) for k, v in model.params().items()}
    second = {k: np.zeros_like(v) for k, v in model.params().items()}
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(usable))
        for pos, idx in enumerate(order):
            loss, grads = loss_and_grads(model, usable[idx])
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"retriever loss became non-finite at epoch {epoch}, step {pos} "
                    f"(lr={lr}); lower the learning rate"
                )
            step += 1
            params = model.params()
            for name, grad in grads.items():
                first[name] = beta1 * first[name] + (1 - beta1) * grad
                second[name] = beta2 * second[name] + (1 - beta2) * grad * grad
                m_hat = first[name] / (1 - beta1**step)
                v_hat = second[name] / (1 - beta2**step)
                params[name] -= lr * m_hat / (np.sqrt(v_hat) + eps)
    for name, arr in model.params().items():
        if not np.all(np.isfinite(arr)):
            raise DivergenceError(f"retriever parameter {name!r} is non-finite after training")
    return model


def retrieve_topk(
    model: RetrieverModel,
    item_sequence: Sequence[int],
    k: int = 20,
    exclude: Optional[set[int]] = None,
) -> tuple[list[int], list[float]]:
    """Top-k item indexes by logit, excluding history; ties prefer the
    smaller item index.
    """
    exclude = exclude or set()
    _, logits = forward(model, item_sequence)
    scores = logits.copy()
    for idx in exclude:
        scores[idx] = -np.inf
    rankable = int(np.sum(np.isfinite(scores)))
    if rankable < k:
        raise ValueError(f"only {rankable} rankable items for k={k}")
    order = np.lexsort((np.arange(scores.shape[0]), -scores))
    top = order[:k]
    return [int(i) for i in top], [float(scores[i]) for i in top]


def popularity_baseline(
    train_sequences: Sequence[Sequence[int]],
    k: int,
    excludes: Sequence[set[int]],
) -> list[list[int]]:
    """Per user: the k globally most-frequent training items not in that
    user's exclude set. Frequency ties prefer the smaller item index.
    """
    counts: Counter[int] = Counter()
    for seq in train_sequences:
        counts.update(seq)
    ranked = sorted(counts, key=lambda i: (-counts[i], i))
    out = []
    for exclude in excludes:
        picks = [i for i in ranked if i not in exclude][:k]
        if len(picks) < k:
            raise ValueError(f"only {len(picks)} popular items available for k={k}")
        out.append(picks)
    return out


def save_retriever(
    model: RetrieverModel,
    path: str | Path,
    vocab: ItemVocab,
    config_hash: Optional[str] = None,
) -> None:
    header = {
        "kind": CHECKPOINT_KIND,
        "num_items": model.num_items,
        "dim": model.config.dim,
        "max_seq_len": model.config.max_seq_len,
        "learning_rate": model.config.learning_rate,
        "epochs": model.config.epochs,
        "seed": model.seed,
        "config_hash": config_hash,
        "items": vocab.items(),
    }
    save_params(path, header, model.params())


def load_retriever(
    path: str | Path, expected_config_hash: Optional[str] = None
) -> tuple[RetrieverModel, ItemVocab]:
    header, params = load_params(path, CHECKPOINT_KIND, expected_config_hash)
    config = RetrieverConfig(
        dim=header["dim"],
        max_seq_len=header["max_seq_len"],
        learning_rate=header["learning_rate"],
        epochs=header["epochs"],
    )
    model = RetrieverModel(
        emb=params["emb"],
        decay=params["decay"],
        w_in=params["w_in"],
        num_items=header["num_items"],
        config=config,
        seed=header["seed"],
    )
    return model, ItemVocab(header["items"])
