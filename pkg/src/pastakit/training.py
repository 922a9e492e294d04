"""AdamW, classifier heads, and the frozen-backbone train/eval loops."""
from __future__ import annotations

import csv
import enum
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .adaptation import AdaptationBank, SpecialTokenSpec, build_batch_masks, locate_special_tokens
from .taskgen import Dataset, Example, IGNORE
from .tensor import Tensor
from .transformer import ModelConfig, TransformerWeights, encode

log = logging.getLogger(__name__)


class HeadKind(str, enum.Enum):
    SEQUENCE = "sequence"
    TOKEN = "token"


@dataclass
class ClassifierHead:
    kind: HeadKind
    weight: Tensor
    bias: Tensor

    @classmethod
    def create(cls, kind: HeadKind | str, hidden_size: int, num_classes: int, seed: int = 42) -> ClassifierHead:
        rng = np.random.default_rng(seed)
        w = Tensor(rng.normal(0.0, 0.02, size=(hidden_size, num_classes)), requires_grad=True, name="head.weight")
        b = Tensor(np.zeros(num_classes), requires_grad=True, name="head.bias")
        return cls(HeadKind(kind), w, b)

    @property
    def num_classes(self) -> int:
        return self.weight.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def num_parameters(self) -> int:
        return self.weight.size + self.bias.size

    def logits(self, final_hidden: Tensor, cls_positions: np.ndarray | None = None) -> Tensor:
        """Sequence heads read the [CLS] row per example; token heads read every row."""
        B, N, d = final_hidden.shape
        if self.kind is HeadKind.SEQUENCE:
            pos = np.zeros(B, dtype=np.int64) if cls_positions is None else np.asarray(cls_positions)
            x = T.gather(final_hidden, (np.arange(B), pos))
        else:
            x = T.reshape(final_hidden, (B * N, d))
        return T.add(T.matmul(x, self.weight), self.bias)

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "head.json").write_text(
            json.dumps({"kind": self.kind.value, "num_classes": self.num_classes}, sort_keys=True) + "\n"
        )
        T.save_tensor(directory / "weight.tns", self.weight)
        T.save_tensor(directory / "bias.tns", self.bias)

    @classmethod
    def load(cls, directory: str | Path) -> ClassifierHead:
        directory = Path(directory)
        meta = json.loads((directory / "head.json").read_text())
        w = T.load_tensor(directory / "weight.tns", requires_grad=True)
        b = T.load_tensor(directory / "bias.tns", requires_grad=True)
        return cls(HeadKind(meta["kind"]), w, b)


@dataclass
class TrainConfig:
    learning_rate: float = 5e-3
    batch_size: int = 32
    epochs: int = 50
    weight_decay: float = 0.0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 42
    max_len: int = 128
    max_steps: int | None = None

    def __post_init__(self):
        self.adam_betas = tuple(self.adam_betas)
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamWState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamWState,
               config: TrainConfig) -> AdamWState:
    """One in-place AdamW update with decoupled weight decay."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    beta1, beta2 = config.adam_betas
    lr, wd, eps = config.learning_rate, config.weight_decay, config.adam_eps
    state.step += 1
    t = state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise T.ShapeError(f"grad shape {g.shape} does not match param shape {p.shape}")
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g
        m_hat = state.m[i] / (1.0 - beta1**t)
        v_hat = state.v[i] / (1.0 - beta2**t)
        p.data -= lr * wd * p.data
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


# ---------------------------------------------------------------- batching

@dataclass
class Batch:
    ids: np.ndarray
    pad: np.ndarray
    labels: np.ndarray
    locations: list[list[tuple[int, int]]]


def make_batch(examples: Sequence[Example], spec: SpecialTokenSpec, pad_id: int, max_len: int) -> Batch:
    N = max(len(ex.token_ids) for ex in examples)
    if N > max_len:
        raise ValueError(f"example of length {N} exceeds max_len {max_len}")
    B = len(examples)
    ids = np.full((B, N), pad_id, dtype=np.int64)
    pad = np.ones((B, N), dtype=bool)
    token_task = isinstance(examples[0].label, list)
    labels = np.full((B, N), IGNORE, dtype=np.int64) if token_task else np.zeros(B, dtype=np.int64)
    locations = []
    for b, ex in enumerate(examples):
        n = len(ex.token_ids)
        ids[b, :n] = ex.token_ids
        pad[b, :n] = False
        if token_task:
            labels[b, :n] = ex.label
        else:
            labels[b] = ex.label
        locations.append(locate_special_tokens(ex.token_ids, spec))
    return Batch(ids, pad, labels, locations)


def batch_loss(weights: TransformerWeights, config: ModelConfig, bank: AdaptationBank, head: ClassifierHead,
               batch: Batch) -> tuple[Tensor, Tensor]:
    """Cross-entropy of one batch and the logits it was computed from."""
    B, N = batch.ids.shape
    masks = build_batch_masks(batch.locations, bank, N, config.num_layers, config.hidden_size)
    trace = encode(weights, config, batch.ids, masks, batch.pad)
    cls_pos = np.array([locs[0][0] if locs else 0 for locs in batch.locations])
    logits = head.logits(trace.output, cls_pos)
    labels = batch.labels.reshape(-1)
    return T.cross_entropy(logits, labels, ignore_index=IGNORE), logits


# ---------------------------------------------------------------- metrics

def accuracy(pred: Sequence[int], gold: Sequence[int]) -> float:
    pred, gold = np.asarray(pred), np.asarray(gold)
    return float((pred == gold).mean()) if gold.size else 0.0


def token_prf(pred: Sequence[int], gold: Sequence[int], outside: int = 0) -> tuple[float, float, float]:
    """Micro precision/recall/F1 over entity tags; ``outside`` is the non-entity tag."""
    pred, gold = np.asarray(pred), np.asarray(gold)
    tp = int(((pred == gold) & (gold != outside)).sum())
    n_pred = int((pred != outside).sum())
    n_gold = int((gold != outside).sum())
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_gold if n_gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def evaluate(weights: TransformerWeights, config: ModelConfig, bank: AdaptationBank, head: ClassifierHead,
             examples: Sequence[Example], spec: SpecialTokenSpec, pad_id: int, batch_size: int = 64,
             max_len: int = 128) -> dict[str, float]:
    preds: list[int] = []
    golds: list[int] = []
    with T.no_grad():
        for start in range(0, len(examples), batch_size):
            batch = make_batch(examples[start:start + batch_size], spec, pad_id, max_len)
            _, logits = batch_loss(weights, config, bank, head, batch)
            p = logits.data.argmax(axis=1)
            g = batch.labels.reshape(-1)
            keep = g != IGNORE
            preds.extend(p[keep].tolist())
            golds.extend(g[keep].tolist())
    metrics = {"accuracy": accuracy(preds, golds)}
    if head.kind is HeadKind.TOKEN:
        precision, recall, f1 = token_prf(preds, golds)
        metrics.update(precision=precision, recall=recall, f1=f1)
    return metrics


def dev_metric_name(kind: HeadKind) -> str:
    return "f1" if kind is HeadKind.TOKEN else "accuracy"


# ---------------------------------------------------------------- training

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    dev_metric: float


@dataclass
class TrainedArtifact:
    bank: AdaptationBank
    head: ClassifierHead
    history: list[EpochRecord]
    steps: int = 0

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "dev_metric"])
        for r in self.history:
            writer.writerow([r.epoch, f"{r.train_loss:.10f}", f"{r.dev_metric:.10f}"])
        return buf.getvalue()

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.bank.save(directory / "adaptation.pastaadp")
        self.head.save(directory / "head")
        (directory / "metrics.csv").write_text(self.metrics_csv())


def train(weights: TransformerWeights, config: ModelConfig, bank: AdaptationBank, head: ClassifierHead,
          dataset: Dataset, train_config: TrainConfig) -> TrainedArtifact:
    """Optimize only ``bank`` and ``head``; the backbone stays frozen."""
    if not dataset.train:
        raise ValueError("training set is empty")
    expected = HeadKind.TOKEN if dataset.task == "tok" else HeadKind.SEQUENCE
    if head.kind is not expected:
        raise ValueError(f"{head.kind.value} head cannot train on a {dataset.task!r} dataset")
    if any(t.requires_grad for _, t in weights.named_tensors()):
        raise ValueError("backbone weights must be frozen before training")
    spec = dataset.special_spec(bank.num_slots)
    pad_id = dataset.vocab.pad_id
    rng = np.random.default_rng(train_config.seed)
    params = bank.parameters() + head.parameters()
    state = AdamWState()
    history: list[EpochRecord] = []
    n = len(dataset.train)
    steps = 0
    metric = dev_metric_name(head.kind)
    for epoch in range(1, train_config.epochs + 1):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, train_config.batch_size):
            if train_config.max_steps is not None and steps >= train_config.max_steps:
                break
            chunk = [dataset.train[i] for i in order[start:start + train_config.batch_size]]
            batch = make_batch(chunk, spec, pad_id, train_config.max_len)
            T.zero_grads(params)
            loss, _ = batch_loss(weights, config, bank, head, batch)
            loss.backward()
            adamw_step(params, [p.grad for p in params], state, train_config)
            total += float(loss.data) * len(chunk)
            count += len(chunk)
            steps += 1
        dev = dataset.dev or dataset.train
        score = evaluate(weights, config, bank, head, dev, spec, pad_id, max_len=train_config.max_len)[metric]
        history.append(EpochRecord(epoch, total / max(count, 1), score))
        log.info("epoch %d loss %.4f dev %s %.4f", epoch, total / max(count, 1), metric, score)
    T.zero_grads(params)
    return TrainedArtifact(bank, head, history, steps)
