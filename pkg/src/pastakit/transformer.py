"""Pre-LN Transformer encoder used as the frozen backbone."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

LN_EPS = 1e-5
NEG_INF = -1e9


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 4
    hidden_size: int = 32
    num_heads: int = 4
    ffn_size: int = 128
    vocab_size: int = 64
    max_len: int = 128
    seed: int = 42
    init_std: float = 0.02

    def __post_init__(self):
        for name in ("num_layers", "hidden_size", "num_heads", "ffn_size", "vocab_size", "max_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"ModelConfig.{name} must be positive, got {getattr(self, name)}")
        if self.hidden_size % self.num_heads:
            raise ValueError(f"hidden_size {self.hidden_size} is not divisible by num_heads {self.num_heads}")
        if self.seed < 0:
            raise ValueError("ModelConfig.seed must be unsigned")
        if not self.init_std > 0:
            raise ValueError(f"ModelConfig.init_std must be positive, got {self.init_std}")

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**{k: float(v) if k == "init_std" else int(v) for k, v in d.items()})


def toy_config(vocab_size: int = 256, **overrides) -> ModelConfig:
    """The small backbone the synthetic tasks are calibrated against.

    The wider init (0.25 rather than 0.02) makes attention logits large enough
    that steering the special-token states actually changes what CLS attends to.
    """
    base = dict(num_layers=2, hidden_size=32, num_heads=2, ffn_size=128, vocab_size=vocab_size, init_std=0.25)
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class LayerWeights:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    w1: Tensor
    w2: Tensor
    ln1_gamma: Tensor
    ln1_beta: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor


@dataclass
class TransformerWeights:
    token_embedding: Tensor
    position_embedding: Tensor
    layers: list[LayerWeights]
    final_gamma: Tensor
    final_beta: Tensor

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        yield "token_embedding", self.token_embedding
        yield "position_embedding", self.position_embedding
        for i, layer in enumerate(self.layers):
            for name, t in vars(layer).items():
                yield f"layer{i}.{name}", t
        yield "final_gamma", self.final_gamma
        yield "final_beta", self.final_beta

    def num_parameters(self) -> int:
        return sum(t.size for _, t in self.named_tensors())

    def freeze(self) -> TransformerWeights:
        for _, t in self.named_tensors():
            t.requires_grad = False
            t.grad = None
        return self

    def snapshot(self) -> dict[str, bytes]:
        return {name: T.tensor_to_bytes(t) for name, t in self.named_tensors()}


@dataclass
class LayerTrace:
    """Hidden states entering each layer (after adaptation) plus the final output,
    and the attention probabilities of every layer."""

    hidden_states: list[Tensor] = field(default_factory=list)
    attention_probs: list[Tensor] = field(default_factory=list)

    @property
    def output(self) -> Tensor:
        return self.hidden_states[-1]


def init_model(config: ModelConfig, std: float | None = None) -> TransformerWeights:
    """Seeded Gaussian init with identity layer norms; returned frozen."""
    std = config.init_std if std is None else std
    rng = np.random.default_rng(config.seed)
    d, m = config.hidden_size, config.ffn_size

    def normal(*shape):
        return Tensor(rng.normal(0.0, std, size=shape))

    tok = normal(config.vocab_size, d)
    pos = normal(config.max_len, d)
    layers = [
        LayerWeights(
            wq=normal(d, d),
            wk=normal(d, d),
            wv=normal(d, d),
            wo=normal(d, d),
            w1=normal(d, m),
            w2=normal(m, d),
            ln1_gamma=Tensor(np.ones(d)),
            ln1_beta=Tensor(np.zeros(d)),
            ln2_gamma=Tensor(np.ones(d)),
            ln2_beta=Tensor(np.zeros(d)),
        )
        for _ in range(config.num_layers)
    ]
    weights = TransformerWeights(tok, pos, layers, Tensor(np.ones(d)), Tensor(np.zeros(d)))
    return weights.freeze()


def parameter_count(config: ModelConfig) -> int:
    """Closed-form size of :func:`init_model`'s output."""
    d, m, L = config.hidden_size, config.ffn_size, config.num_layers
    per_layer = 4 * d * d + 2 * d * m + 4 * d
    return config.vocab_size * d + config.max_len * d + L * per_layer + 2 * d


def _linear(x: Tensor, w: Tensor) -> Tensor:
    lead = x.shape[:-1]
    y = T.matmul(T.reshape(x, (-1, x.shape[-1])), w)
    return T.reshape(y, (*lead, w.shape[1]))


def _attention(x: Tensor, layer: LayerWeights, config: ModelConfig, key_mask: np.ndarray | None):
    B, N, d = x.shape
    H, dh = config.num_heads, config.head_dim

    def heads(t):
        return T.transpose(T.reshape(t, (B, N, H, dh)), (0, 2, 1, 3))

    q = heads(_linear(x, layer.wq))
    k = heads(_linear(x, layer.wk))
    v = heads(_linear(x, layer.wv))
    scores = T.scale(T.bmm(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if key_mask is not None:
        scores = T.add(scores, Tensor(key_mask))
    probs = T.softmax(scores, axis=-1)
    ctx = T.reshape(T.transpose(T.bmm(probs, v), (0, 2, 1, 3)), (B, N, d))
    return _linear(ctx, layer.wo), probs


def _key_mask(pad: np.ndarray, num_heads: int) -> np.ndarray:
    B, N = pad.shape
    bias = np.where(pad, NEG_INF, 0.0)[:, None, None, :]
    return np.broadcast_to(bias, (B, num_heads, N, N)).copy()


def encode(
    weights: TransformerWeights,
    config: ModelConfig,
    token_ids: np.ndarray,
    adaptation: Sequence[Tensor] | None = None,
    pad_mask: np.ndarray | None = None,
) -> LayerTrace:
    """Batched forward pass over ``token_ids`` of shape [B, N].

    ``adaptation`` holds one [B, N, d] additive mask per layer, applied to the
    layer input before the attention sublayer. ``pad_mask`` marks padded key
    positions, which receive no attention.
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 2:
        raise ShapeError(f"encode expects [B, N] token ids, got shape {ids.shape}")
    B, N = ids.shape
    d, L = config.hidden_size, config.num_layers
    if N > config.max_len:
        raise ValueError(f"sequence length {N} exceeds max_len {config.max_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise ValueError(f"token ids must lie in [0, {config.vocab_size})")
    if adaptation is not None:
        if len(adaptation) != L:
            raise ShapeError(f"adaptation has {len(adaptation)} entries, expected {L}")
        for l, m in enumerate(adaptation):
            if m.shape != (B, N, d):
                raise ShapeError(f"adaptation[{l}] has shape {m.shape}, expected {(B, N, d)}")
    key_mask = None
    if pad_mask is not None and np.any(pad_mask):
        key_mask = _key_mask(np.asarray(pad_mask, dtype=bool), config.num_heads)

    tok = T.embedding(weights.token_embedding, ids)
    pos = T.embedding(weights.position_embedding, np.broadcast_to(np.arange(N), (B, N)))
    h = T.add(tok, pos)
    trace = LayerTrace()
    for l, layer in enumerate(weights.layers):
        if adaptation is not None:
            h = T.add(h, adaptation[l])
        trace.hidden_states.append(h)
        attn_out, probs = _attention(T.layer_norm(h, layer.ln1_gamma, layer.ln1_beta, LN_EPS), layer, config, key_mask)
        trace.attention_probs.append(probs)
        h = T.add(h, attn_out)
        x = T.layer_norm(h, layer.ln2_gamma, layer.ln2_beta, LN_EPS)
        h = T.add(h, _linear(T.gelu(_linear(x, layer.w1)), layer.w2))
    trace.hidden_states.append(T.layer_norm(h, weights.final_gamma, weights.final_beta, LN_EPS))
    return trace


def forward(
    weights: TransformerWeights,
    config: ModelConfig,
    token_ids: Sequence[int],
    adaptation: Sequence[Tensor] | None = None,
) -> LayerTrace:
    """Single-sequence forward pass; adaptation masks are [N, d] per layer."""
    ids = np.asarray(token_ids, dtype=np.int64)
    N = len(ids)
    d = config.hidden_size
    batched = None
    if adaptation is not None:
        if len(adaptation) != config.num_layers:
            raise ShapeError(f"adaptation has {len(adaptation)} entries, expected {config.num_layers}")
        for l, m in enumerate(adaptation):
            if m.shape != (N, d):
                raise ShapeError(f"adaptation[{l}] has shape {m.shape}, expected {(N, d)}")
        batched = [T.reshape(m, (1, N, d)) for m in adaptation]
    trace = encode(weights, config, ids[None, :], batched)
    return LayerTrace(
        hidden_states=[T.reshape(h, (N, d)) for h in trace.hidden_states],
        attention_probs=[T.reshape(p, p.shape[1:]) for p in trace.attention_probs],
    )


def save_model(directory: str | Path, weights: TransformerWeights, config: ModelConfig) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    for name, t in weights.named_tensors():
        T.save_tensor(directory / f"{name}.tns", t)


def load_model(directory: str | Path) -> tuple[TransformerWeights, ModelConfig]:
    directory = Path(directory)
    config = ModelConfig.from_dict(json.loads((directory / "config.json").read_text()))
    template = init_model(config)
    loaded: dict[str, Tensor] = {}
    for name, t in template.named_tensors():
        got = T.load_tensor(directory / f"{name}.tns")
        if got.shape != t.shape:
            raise ShapeError(f"{name}: checkpoint shape {got.shape} does not match config {t.shape}")
        loaded[name] = got
    layers = [
        LayerWeights(**{k: loaded[f"layer{i}.{k}"] for k in vars(template.layers[0])})
        for i in range(config.num_layers)
    ]
    weights = TransformerWeights(
        loaded["token_embedding"], loaded["position_embedding"], layers, loaded["final_gamma"], loaded["final_beta"]
    )
    return weights.freeze(), config
