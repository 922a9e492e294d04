"""Special-token adaptation: trainable per-layer vectors added to the hidden
states of special tokens before self-attention."""
from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor
from .transformer import ModelConfig

ADAPTER_MAGIC = b"PASTAADP"


class CapacityError(ValueError):
    """More special tokens in a sequence than the bank has slots."""


class AblationMode(str, enum.Enum):
    FULL = "full"
    NO_CLS = "no-cls"
    NO_SEP = "no-sep"
    SHARED = "shared"
    CLASSIFIER_ONLY = "classifier-only"

    @property
    def label(self) -> str:
        return _LABELS[self]


_LABELS = {
    AblationMode.FULL: "PASTA",
    AblationMode.NO_CLS: "- w/o [CLS]",
    AblationMode.NO_SEP: "- w/o [SEP]",
    AblationMode.SHARED: "- shared vector",
    AblationMode.CLASSIFIER_ONLY: "- classifier only",
}

# The CLS-type token opens every sequence, so it always lands in slot 0.
CLS_SLOT = 0


@dataclass(frozen=True)
class SpecialTokenSpec:
    special_token_ids: frozenset[int]
    max_slots: int

    def __init__(self, special_token_ids: Iterable[int], max_slots: int):
        ids = frozenset(int(i) for i in special_token_ids)
        if not ids:
            raise ValueError("special_token_ids must be nonempty")
        if max_slots < 1:
            raise ValueError(f"max_slots must be >= 1, got {max_slots}")
        object.__setattr__(self, "special_token_ids", ids)
        object.__setattr__(self, "max_slots", int(max_slots))


def locate_special_tokens(token_ids: Sequence[int], spec: SpecialTokenSpec) -> list[tuple[int, int]]:
    """(position, slot) for each special token; the p-th one seen takes slot p."""
    found = [i for i, tok in enumerate(token_ids) if int(tok) in spec.special_token_ids]
    if len(found) > spec.max_slots:
        raise CapacityError(f"sequence has {len(found)} special tokens but only P={spec.max_slots} slots")
    return [(pos, p) for p, pos in enumerate(found)]


def enabled_slots(mode: AblationMode, num_slots: int) -> list[int]:
    if mode is AblationMode.CLASSIFIER_ONLY:
        return []
    if mode is AblationMode.NO_CLS:
        return [p for p in range(num_slots) if p != CLS_SLOT]
    if mode is AblationMode.NO_SEP:
        return [CLS_SLOT]
    return list(range(num_slots))


class AdaptationBank:
    """The trainable vectors, indexed ``vectors[layer][slot]``.

    Disabled slots hold ``None``. In shared mode every slot of a layer points
    at the same tensor.
    """

    def __init__(self, num_layers: int, num_slots: int, hidden_size: int, mode: AblationMode = AblationMode.FULL,
                 seed: int = 42):
        self.num_layers = num_layers
        self.num_slots = num_slots
        self.hidden_size = hidden_size
        self.mode = AblationMode(mode)
        self.seed = seed
        self.vectors: list[list[Tensor | None]] = []
        on = set(enabled_slots(self.mode, num_slots))
        for l in range(num_layers):
            if self.mode is AblationMode.SHARED:
                shared = Tensor(np.zeros(hidden_size), requires_grad=True, name=f"e[{l}]")
                row = [shared] * num_slots
            else:
                row = [
                    Tensor(np.zeros(hidden_size), requires_grad=True, name=f"e[{l},{p}]") if p in on else None
                    for p in range(num_slots)
                ]
            self.vectors.append(row)

    @classmethod
    def for_model(cls, config: ModelConfig, spec: SpecialTokenSpec, mode: AblationMode = AblationMode.FULL,
                  seed: int | None = None) -> AdaptationBank:
        return cls(config.num_layers, spec.max_slots, config.hidden_size, mode,
                   config.seed if seed is None else seed)

    def parameters(self) -> list[Tensor]:
        out, seen = [], set()
        for row in self.vectors:
            for t in row:
                if t is not None and id(t) not in seen:
                    seen.add(id(t))
                    out.append(t)
        return out

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters())

    def vector(self, layer: int, slot: int) -> Tensor | None:
        return self.vectors[layer][slot]

    def norms(self) -> np.ndarray:
        out = np.zeros((self.num_layers, self.num_slots))
        for l, row in enumerate(self.vectors):
            for p, t in enumerate(row):
                if t is not None:
                    out[l, p] = float(np.linalg.norm(t.data))
        return out

    def copy(self) -> AdaptationBank:
        other = AdaptationBank(self.num_layers, self.num_slots, self.hidden_size, self.mode, self.seed)
        for mine, theirs in zip(self.parameters(), other.parameters()):
            theirs.data[...] = mine.data
        return other

    def to_bytes(self) -> bytes:
        header = {"L": self.num_layers, "P": self.num_slots, "d": self.hidden_size,
                  "mode": self.mode.value, "seed": self.seed}
        blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        parts = [ADAPTER_MAGIC, struct.pack("<Q", len(blob)), blob]
        parts += [np.ascontiguousarray(t.data, dtype="<f8").tobytes() for t in self.parameters()]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, raw: bytes) -> AdaptationBank:
        if raw[:8] != ADAPTER_MAGIC:
            raise ValueError(f"bad magic {raw[:8]!r}, expected {ADAPTER_MAGIC!r}")
        (n,) = struct.unpack("<Q", raw[8:16])
        header = json.loads(raw[16:16 + n].decode("utf-8"))
        bank = cls(header["L"], header["P"], header["d"], AblationMode(header["mode"]), header["seed"])
        payload = np.frombuffer(raw[16 + n:], dtype="<f8")
        params = bank.parameters()
        if payload.size != len(params) * bank.hidden_size:
            raise ValueError(f"adapter payload holds {payload.size} values, expected {len(params) * bank.hidden_size}")
        for i, t in enumerate(params):
            t.data[...] = payload[i * bank.hidden_size:(i + 1) * bank.hidden_size]
        return bank

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> AdaptationBank:
        return cls.from_bytes(Path(path).read_bytes())


def build_masks(locations: Sequence[tuple[int, int]], bank: AdaptationBank, N: int, L: int, d: int) -> list[Tensor]:
    """One [N, d] additive mask per layer for a single sequence."""
    masks = build_batch_masks([locations], bank, N, L, d)
    return [T.reshape(m, (N, d)) for m in masks]


def build_batch_masks(batch_locations: Sequence[Sequence[tuple[int, int]]], bank: AdaptationBank, N: int, L: int,
                      d: int) -> list[Tensor]:
    """One [B, N, d] mask per layer; rows reference the bank's tensors."""
    if bank.num_layers != L or bank.hidden_size != d:
        raise ShapeError(f"bank is L={bank.num_layers}, d={bank.hidden_size}; model is L={L}, d={d}")
    B = len(batch_locations)
    for locs in batch_locations:
        for pos, slot in locs:
            if slot >= bank.num_slots:
                raise CapacityError(f"slot {slot} exceeds bank capacity P={bank.num_slots}")
            if not 0 <= pos < N:
                raise ShapeError(f"position {pos} outside sequence length {N}")
    masks = []
    for l in range(L):
        groups: dict[int, tuple[Tensor, list[tuple[int, int]]]] = {}
        for b, locs in enumerate(batch_locations):
            for pos, slot in locs:
                vec = bank.vectors[l][slot]
                if vec is None:
                    continue
                groups.setdefault(id(vec), (vec, []))[1].append((b, pos))
        vecs = [g[0] for g in groups.values()]
        rows = [g[1] for g in groups.values()]
        masks.append(T.scatter_rows((B, N, d), vecs, rows))
    return masks


def adaptation_param_count(config: ModelConfig, num_slots: int, mode: AblationMode) -> int:
    L, d = config.num_layers, config.hidden_size
    if AblationMode(mode) is AblationMode.SHARED:
        return L * d
    return L * d * len(enabled_slots(AblationMode(mode), num_slots))


@dataclass(frozen=True)
class TrainableCount:
    adaptation_count: int
    total_trainable: int

    def fraction_of(self, backbone_total: int, include_head: bool = False) -> float:
        count = self.total_trainable if include_head else self.adaptation_count
        return count / backbone_total


def trainable_param_count(config: ModelConfig, spec: SpecialTokenSpec, mode: AblationMode,
                          head_params: int = 0) -> TrainableCount:
    adapt = adaptation_param_count(config, spec.max_slots, mode)
    return TrainableCount(adapt, adapt + head_params)
