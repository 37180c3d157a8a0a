"""Toy decoder-only language model with delta-injectable linear layers.

Every linear in a decoder block (q, k, v, o, up, down) is an
InjectableLinear: it computes xW by default, and xW + (x ΔW_A) ΔW_B when a
per-sample low-rank delta is attached. The bypass form never materializes
W + ΔW_A ΔW_B, but equals it to float precision; with ΔW_B = 0 the output is
bit-identical to the base model, which is what makes a freshly initialized
delta generator a no-op.

Deltas are passed to the forward as a plain dict {(layer, name): (dwa, dwb)}
with names from TARGET_NAMES, where dwa is [B, d_in, r] (one per sample) and
dwb is [r, d_out] or [B, r, d_out].
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .nn import attention, causal_mask, init_param
from .optim import AdamW, TrainingError
from .tensor import (
    Rng,
    ShapeError,
    Tensor,
    cross_entropy_logits,
    index_select,
    matmul,
    no_grad,
    reshape,
    rms_norm,
    select_position,
    sigmoid,
    silu,
    take_columns,
    transpose,
)

TARGET_NAMES = ("q", "k", "v", "o", "up", "down")


class InjectionError(RuntimeError):
    pass


class LengthError(ValueError):
    pass


@dataclass
class LmConfig:
    vocab_size: int
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 4
    d_ff: int = 512
    max_len: int = 256

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.d_ff < self.d_model:
            raise ValueError("d_ff must be >= d_model")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_json(self) -> str:
        return json.dumps(self.__dict__)

    @staticmethod
    def from_json(text: str) -> "LmConfig":
        return LmConfig(**json.loads(text))


class InjectableLinear:
    """y = xW, or xW + (x ΔW_A) ΔW_B when a delta is attached."""

    def __init__(self, weight: Tensor):
        self.weight = weight

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]

    def forward(self, x: Tensor, delta=None) -> Tensor:
        base = matmul(x, self.weight)
        if delta is None:
            return base
        dwa, dwb = delta
        if dwa.shape[-2] != self.d_in or dwb.shape[-1] != self.d_out \
                or dwa.shape[-1] != dwb.shape[-2]:
            raise InjectionError(
                f"delta {dwa.shape}x{dwb.shape} does not fit weight "
                f"[{self.d_in}, {self.d_out}]")
        return base + matmul(matmul(x, dwa), dwb)


class LmWeights:
    """All parameters of the toy LM; output projection is tied to token_emb."""

    def __init__(self, cfg: LmConfig, rng: Rng):
        self.cfg = cfg
        d, f = cfg.d_model, cfg.d_ff
        self.token_emb = init_param(rng, (cfg.vocab_size, d))
        self.pos_emb = init_param(rng, (cfg.max_len, d))
        self.layers = []
        for _ in range(cfg.n_layers):
            self.layers.append({
                "q": InjectableLinear(init_param(rng, (d, d))),
                "k": InjectableLinear(init_param(rng, (d, d))),
                "v": InjectableLinear(init_param(rng, (d, d))),
                "o": InjectableLinear(init_param(rng, (d, d))),
                "up": InjectableLinear(init_param(rng, (d, f))),
                "down": InjectableLinear(init_param(rng, (f, d))),
                "g1": Tensor(np.ones(d), requires_grad=True),
                "g2": Tensor(np.ones(d), requires_grad=True),
            })
        self.g_final = Tensor(np.ones(d), requires_grad=True)

    def target_shape(self, name: str) -> tuple[int, int]:
        if name not in TARGET_NAMES:
            raise InjectionError(f"unknown target {name!r}")
        lin = self.layers[0][name]
        return lin.d_in, lin.d_out

    def params(self) -> dict[str, Tensor]:
        out = {"token_emb": self.token_emb, "pos_emb": self.pos_emb}
        for j, layer in enumerate(self.layers):
            for name, obj in layer.items():
                out[f"layer{j}.{name}"] = obj.weight if isinstance(obj, InjectableLinear) else obj
        out["g_final"] = self.g_final
        return out

    def checksum(self) -> str:
        return ckpt.checksum_params({k: p.data for k, p in self.params().items()})

    def save(self, path) -> None:
        path = Path(path)
        ckpt.save_checkpoint(path, {k: p.data for k, p in self.params().items()})
        path.with_suffix(".json").write_text(self.cfg.to_json())

    @staticmethod
    def load(path) -> "LmWeights":
        path = Path(path)
        cfg = LmConfig.from_json(path.with_suffix(".json").read_text())
        arrays = ckpt.load_checkpoint(path)
        lm = LmWeights(cfg, Rng(0))
        for k, p in lm.params().items():
            if k not in arrays:
                raise ckpt.CheckpointError(f"checkpoint missing parameter {k}")
            if arrays[k].shape != p.data.shape:
                raise ckpt.CheckpointError(f"shape mismatch for {k}")
            p.data[...] = arrays[k]
        return lm


def _delta_for(deltas, layer: int, name: str):
    if deltas is None:
        return None
    return deltas.get((layer, name))


def lm_forward(ids: np.ndarray, lm: LmWeights, deltas=None) -> Tensor:
    """Logits [B, L, vocab] for right-padded token id batches [B, L].

    Trailing pads combined with the causal mask cannot influence earlier
    positions, so no padding mask is needed as long as scores are read at
    real positions.
    """
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise ShapeError("ids must be [batch, length]")
    b, length = ids.shape
    cfg = lm.cfg
    if length > cfg.max_len:
        raise LengthError(f"sequence length {length} exceeds max {cfg.max_len}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise LengthError("token id out of vocabulary range")

    x = reshape(index_select(lm.token_emb, ids.reshape(-1)), (b, length, cfg.d_model))
    x = x + index_select(lm.pos_emb, np.arange(length))
    mask = causal_mask(length)
    for layer_idx, layer in enumerate(lm.layers):
        h = rms_norm(x, layer["g1"])
        q = layer["q"].forward(h, _delta_for(deltas, layer_idx, "q"))
        k = layer["k"].forward(h, _delta_for(deltas, layer_idx, "k"))
        v = layer["v"].forward(h, _delta_for(deltas, layer_idx, "v"))
        out, _ = attention(q, k, v, cfg.n_heads, mask=mask)
        x = x + layer["o"].forward(out, _delta_for(deltas, layer_idx, "o"))
        h = rms_norm(x, layer["g2"])
        up = silu(layer["up"].forward(h, _delta_for(deltas, layer_idx, "up")))
        x = x + layer["down"].forward(up, _delta_for(deltas, layer_idx, "down"))
    h = rms_norm(x, lm.g_final)
    return matmul(h, transpose(lm.token_emb, (1, 0)))


def score_yes_no(ids: np.ndarray, lengths: np.ndarray, lm: LmWeights,
                 yes_id: int, no_id: int, deltas=None) -> Tensor:
    """P(Yes) per sample: two-way softmax over the Yes/No logits at each
    sample's final real position, i.e. sigmoid(logit_yes - logit_no)."""
    for tok_id, label in ((yes_id, "yes"), (no_id, "no")):
        if not 0 <= tok_id < lm.cfg.vocab_size:
            raise InjectionError(f"{label} token id {tok_id} outside vocabulary")
    logits = lm_forward(ids, lm, deltas)
    last = select_position(logits, np.asarray(lengths) - 1)
    pair = take_columns(last, np.array([yes_id, no_id]))
    diff = take_columns(pair, np.array([0])) - take_columns(pair, np.array([1]))
    return sigmoid(reshape(diff, (ids.shape[0],)))


# -- pretraining -------------------------------------------------------------------


@dataclass
class LmTrainConfig:
    lr: float = 1e-3
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    weight_decay: float = 0.0


def pad_batch(seqs: list[list[int]], pad_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad to the longest sequence; returns (ids [B, L], lengths [B])."""
    lengths = np.array([len(s) for s in seqs], dtype=np.intp)
    out = np.full((len(seqs), int(lengths.max())), pad_id, dtype=np.intp)
    for j, s in enumerate(seqs):
        out[j, :len(s)] = s
    return out, lengths


def pretrain_lm(corpus: list[list[int]], lm_cfg: LmConfig, train_cfg: LmTrainConfig,
                pad_id: int = 0):
    """Next-token cross-entropy over the corpus; returns (LmWeights, curves).

    Pad targets are excluded from the loss. The model is meant to be frozen
    by the caller after this returns.
    """
    if not corpus:
        raise TrainingError("empty corpus")
    if any(len(s) < 2 for s in corpus):
        raise TrainingError("corpus sequences need at least 2 tokens")
    rng = Rng(train_cfg.seed)
    lm = LmWeights(lm_cfg, rng)
    params = lm.params()
    opt = AdamW(list(params.values()), lr=train_cfg.lr,
                weight_decay=train_cfg.weight_decay, decoupled=False)
    curves = []
    order = list(range(len(corpus)))
    for epoch in range(train_cfg.epochs):
        rng.shuffle(order)
        total, count = 0.0, 0
        for lo in range(0, len(order), train_cfg.batch_size):
            batch = [corpus[j] for j in order[lo:lo + train_cfg.batch_size]]
            ids, lengths = pad_batch(batch, pad_id)
            inputs, targets = ids[:, :-1], ids[:, 1:]
            mask = np.arange(targets.shape[1])[None, :] < (lengths - 1)[:, None]
            logits = lm_forward(inputs, lm)
            loss = cross_entropy_logits(logits, targets, mask=mask)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch start {lo}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            n_tok = int(mask.sum())
            total += value * n_tok
            count += n_tok
        curves.append({"epoch": epoch, "train_loss": total / max(count, 1)})
    return lm, curves


def batched_scores(samples: list[list[int]], lm: LmWeights, yes_id: int, no_id: int,
                   batch_size: int = 64, pad_id: int = 0,
                   delta_fn=None) -> np.ndarray:
    """score_yes_no over a list of token sequences, without building tapes.

    delta_fn(lo, hi) may supply the delta dict for samples [lo, hi).
    """
    out = np.empty(len(samples), dtype=np.float64)
    with no_grad():
        for lo in range(0, len(samples), batch_size):
            hi = min(lo + batch_size, len(samples))
            ids, lengths = pad_batch(samples[lo:hi], pad_id)
            deltas = delta_fn(lo, hi) if delta_fn is not None else None
            p = score_yes_no(ids, lengths, lm, yes_id, no_id, deltas)
            out[lo:hi] = p.data
    return out
