"""Deterministic synthetic tasks over a toy integer vocabulary."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from .adaptation import SpecialTokenSpec

IGNORE = -100


@dataclass(frozen=True)
class ToyVocab:
    size: int = 64
    pad_id: int = 0
    cls_id: int = 1
    sep_id: int = 2

    def __post_init__(self):
        reserved = (self.pad_id, self.cls_id, self.sep_id)
        if len(set(reserved)) != 3:
            raise ValueError(f"reserved ids must be distinct, got {reserved}")
        if max(reserved) >= self.size or min(reserved) < 0:
            raise ValueError(f"reserved ids {reserved} must lie in [0, {self.size})")

    @property
    def content_ids(self) -> np.ndarray:
        reserved = {self.pad_id, self.cls_id, self.sep_id}
        return np.array([i for i in range(self.size) if i not in reserved], dtype=np.int64)

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset({self.cls_id, self.sep_id})

    def encode(self, content) -> list[int]:
        return [self.cls_id, *[int(t) for t in content], self.sep_id]

    def to_dict(self) -> dict:
        return {"size": self.size, "pad_id": self.pad_id, "cls_id": self.cls_id, "sep_id": self.sep_id}


@dataclass
class Example:
    token_ids: list[int]
    label: Union[int, list[int]]

    def to_json(self) -> str:
        return json.dumps({"token_ids": self.token_ids, "label": self.label}, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> Example:
        d = json.loads(line)
        return cls([int(t) for t in d["token_ids"]], d["label"])


@dataclass
class Dataset:
    task: str  # "seq" or "tok"
    vocab: ToyVocab
    num_classes: int
    train: list[Example]
    dev: list[Example]
    params: dict = field(default_factory=dict)

    def special_spec(self, max_slots: int) -> SpecialTokenSpec:
        return SpecialTokenSpec(self.vocab.special_ids, max_slots)

    @property
    def max_special(self) -> int:
        return max(sum(t in self.vocab.special_ids for t in ex.token_ids) for ex in self.train + self.dev)

    def manifest(self) -> dict:
        return {
            "task": self.task,
            "vocab": self.vocab.to_dict(),
            "num_classes": self.num_classes,
            "params": self.params,
            "counts": {"train": len(self.train), "dev": len(self.dev)},
        }

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for split in ("train", "dev"):
            lines = [ex.to_json() for ex in getattr(self, split)]
            (directory / f"{split}.jsonl").write_text("".join(line + "\n" for line in lines))
        (directory / "dataset.json").write_text(json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory: str | Path) -> Dataset:
        directory = Path(directory)
        meta = json.loads((directory / "dataset.json").read_text())
        splits = {}
        for split in ("train", "dev"):
            text = (directory / f"{split}.jsonl").read_text()
            splits[split] = [Example.from_json(line) for line in text.splitlines() if line.strip()]
        return cls(meta["task"], ToyVocab(**meta["vocab"]), int(meta["num_classes"]), splits["train"],
                   splits["dev"], meta.get("params", {}))


def split_examples(examples: list[Example], train_fraction: float = 0.8) -> tuple[list[Example], list[Example]]:
    cut = int(round(len(examples) * train_fraction))
    return examples[:cut], examples[cut:]


def _balanced_labels(rng: np.random.Generator, n: int, num_classes: int) -> np.ndarray:
    return rng.permutation(np.arange(n) % num_classes)


def gen_seq_task(
    seed: int,
    n_examples: int,
    seq_len: int = 12,
    num_classes: int = 2,
    difficulty: int = 1,
    vocab_size: int = 256,
    max_len: int = 128,
) -> Dataset:
    """Majority vote over a handful of planted key tokens.

    Each class owns two key tokens. An example carries an odd number of keys
    (1, 3, ... up to ``2 * difficulty + 1``) scattered among distractors, and
    its label is the class holding the most of them. Which tokens are keys is
    drawn from the seed, so the label is a fixed function of the bag of
    content tokens that a random backbone's CLS state does not expose
    linearly. Labels are assigned up front, so classes are exactly balanced
    up to ``n_examples % num_classes``.
    """
    if seq_len + 2 > max_len:
        raise ValueError(f"seq_len {seq_len} + 2 special tokens exceeds max_len {max_len}")
    if num_classes < 2:
        raise ValueError("num_classes must be at least 2")
    if difficulty < 0:
        raise ValueError("difficulty must be non-negative")
    vocab = ToyVocab(vocab_size)
    plant_sizes = np.arange(1, 2 * difficulty + 2, 2)
    if plant_sizes[-1] > seq_len:
        raise ValueError(f"difficulty {difficulty} plants more keys than seq_len {seq_len} holds")
    content_ids = vocab.content_ids
    if len(content_ids) < 2 * num_classes + 1:
        raise ValueError(f"vocab_size {vocab_size} is too small for {num_classes} classes")

    task_rng = np.random.default_rng([seed, 1])
    keys = task_rng.choice(content_ids, size=2 * num_classes, replace=False)
    key_class = np.arange(2 * num_classes) % num_classes
    distractors = np.setdiff1d(content_ids, keys)

    rng = np.random.default_rng([seed, 0])
    labels = _balanced_labels(rng, n_examples, num_classes)
    examples = []
    for label in labels:
        content = rng.choice(distractors, size=seq_len)
        k = int(rng.choice(plant_sizes))
        while True:
            picks = rng.integers(0, len(keys), size=k)
            votes = np.bincount(key_class[picks], minlength=num_classes)
            winners = np.flatnonzero(votes == votes.max())
            if len(winners) == 1 and winners[0] == label:
                break
        content[rng.choice(seq_len, size=k, replace=False)] = keys[picks]
        examples.append(Example(vocab.encode(content), int(label)))
    train, dev = split_examples(examples)
    params = {"generator": "seq", "seed": seed, "n_examples": n_examples, "seq_len": seq_len,
              "num_classes": num_classes, "difficulty": difficulty, "vocab_size": vocab_size}
    return Dataset("seq", vocab, num_classes, train, dev, params)


def gen_tok_task(
    seed: int,
    n_examples: int,
    seq_len: int = 12,
    num_entity_types: int = 2,
    vocab_size: int = 64,
    max_len: int = 128,
) -> Dataset:
    """Entity tagging where the tag depends on context, not just the token.

    A seeded set of entity tokens each has a base type. Every sentence also
    holds one trigger token from one of two trigger families; the second
    family shifts every entity's tag to the next type (mod the number of
    types). The same entity token therefore carries different tags in
    different sentences, and reading its tag requires information from
    elsewhere in the sequence. Tag 0 is "outside"; tags 1..K are the types.
    """
    if seq_len + 2 > max_len:
        raise ValueError(f"seq_len {seq_len} + 2 special tokens exceeds max_len {max_len}")
    if num_entity_types < 1:
        raise ValueError("num_entity_types must be positive")
    if seq_len < 4:
        raise ValueError("seq_len must leave room for a trigger and entities")
    K = num_entity_types
    vocab = ToyVocab(vocab_size)
    n_entities, n_triggers = 4 * K, 2
    pool = np.random.default_rng([seed, 1]).permutation(vocab.content_ids)
    if len(pool) < n_entities + 2 * n_triggers + 1:
        raise ValueError(f"vocab_size {vocab_size} is too small for {K} entity types")
    entities = pool[:n_entities]
    entity_type = {int(t): i % K for i, t in enumerate(entities)}
    triggers = pool[n_entities:n_entities + 2 * n_triggers].reshape(2, n_triggers)
    fillers = pool[n_entities + 2 * n_triggers:]
    max_entities = min(5, seq_len - 1)

    rng = np.random.default_rng([seed, 0])
    contexts = _balanced_labels(rng, n_examples, 2)
    examples = []
    for c in contexts:
        content = rng.choice(fillers, size=seq_len)
        k = int(rng.integers(3, max_entities + 1)) if max_entities >= 3 else max_entities
        pos = rng.choice(seq_len, size=k + 1, replace=False)
        content[pos[0]] = rng.choice(triggers[c])
        content[pos[1:]] = rng.choice(entities, size=k)
        tags = [1 + (entity_type[int(t)] + int(c)) % K if int(t) in entity_type else 0 for t in content]
        examples.append(Example(vocab.encode(content), [IGNORE, *tags, IGNORE]))
    train, dev = split_examples(examples)
    params = {"generator": "tok", "seed": seed, "n_examples": n_examples, "seq_len": seq_len,
              "num_entity_types": K, "vocab_size": vocab_size}
    return Dataset("tok", vocab, K + 1, train, dev, params)
