"""Collaborative delta generator: (e_u, e_i) -> low-rank LM weight deltas.

k learnable queries pass through N blocks of self-attention, cross-attention
against a two-token memory (user and item embeddings lifted d_c -> d_g by one
shared projection), and a SiLU FFN; the k outputs are mean-pooled into
q_c in R^{d_g} with d_g = 2 d_c. One delta head per targeted weight type maps
q_c to dwa = reshape(q_c W_FC, [d_in, r]) while dwb = W_proj is the head's own
trainable matrix, zero-initialized so a fresh generator is an exact no-op on
the LM. This module owns the only parameters that train during CoRA runs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .nn import attention, init_param
from .tensor import (
    Rng,
    Tensor,
    broadcast_to,
    concat,
    matmul,
    mean,
    reshape,
    rms_norm,
    silu,
)

VALID_TARGETS = ("q", "k", "v", "o", "up", "down")
SHARING_MODES = ("shared", "per-layer")


class GeneratorConfigError(ValueError):
    pass


@dataclass
class GeneratorConfig:
    d_c: int
    k: int = 4
    n_blocks: int = 8
    heads: int = 4
    r: int = 16
    targets: tuple = VALID_TARGETS
    sharing: str = "shared"

    def __post_init__(self):
        self.targets = tuple(self.targets)
        if not self.targets:
            raise GeneratorConfigError("targets must be non-empty")
        for t in self.targets:
            if t not in VALID_TARGETS:
                raise GeneratorConfigError(f"unknown target {t!r}")
        if self.r < 1:
            raise GeneratorConfigError("rank r must be >= 1")
        if self.d_g % self.heads:
            raise GeneratorConfigError("2*d_c must be divisible by heads")
        if self.sharing not in SHARING_MODES:
            raise GeneratorConfigError(f"sharing must be one of {SHARING_MODES}")

    @property
    def d_g(self) -> int:
        return 2 * self.d_c


@dataclass
class DeltaSet:
    """Per-sample deltas keyed by (layer | None, target name).

    Under shared heads the layer key is None and `for_lm` hands the same
    tensor pair to every LM layer.
    """

    entries: dict
    n_lm_layers: int
    sharing: str

    def for_lm(self) -> dict:
        out = {}
        for (layer, name), pair in self.entries.items():
            if layer is None:
                for j in range(self.n_lm_layers):
                    out[(j, name)] = pair
            else:
                out[(layer, name)] = pair
        return out


class DeltaHead:
    """Maps q_c to one (dwa, dwb) pair for a weight of shape (d_in, d_out)."""

    def __init__(self, cfg: GeneratorConfig, d_in: int, d_out: int, rng: Rng):
        self.d_in, self.d_out = d_in, d_out
        self.r = cfg.r
        self.w_fc = init_param(rng, (cfg.d_g, d_in * cfg.r))
        # zero init keeps W_c = dwa @ dwb = 0 until training moves it
        self.w_proj = Tensor(np.zeros((cfg.r, d_out)), requires_grad=True)


def make_delta(q_c: Tensor, head: DeltaHead) -> tuple[Tensor, Tensor]:
    """dwa = reshape(q_c W_FC, [B, d_in, r]) (row-major); dwb = W_proj."""
    b = q_c.shape[0]
    dwa = reshape(matmul(q_c, head.w_fc), (b, head.d_in, head.r))
    return dwa, head.w_proj


class Generator:
    def __init__(self, cfg: GeneratorConfig, target_shapes: dict, n_lm_layers: int,
                 seed: int = 0):
        """target_shapes maps target name -> (d_in, d_out) of the host weight."""
        for t in cfg.targets:
            if t not in target_shapes:
                raise GeneratorConfigError(f"no host shape provided for target {t!r}")
        self.cfg = cfg
        self.n_lm_layers = n_lm_layers
        self.target_shapes = {t: tuple(target_shapes[t]) for t in cfg.targets}
        rng = Rng(seed)
        d = cfg.d_g
        self.queries = init_param(rng, (cfg.k, d))
        self.lift = init_param(rng, (cfg.d_c, d))
        # memory tokens are normalized after the lift so the cross-attention
        # signal has unit scale regardless of how large the CF encoder's
        # embeddings happen to be; one gain for both tokens keeps the
        # user/item roles interchangeable when their embeddings coincide
        self.g_mem = Tensor(np.ones(d), requires_grad=True)
        self.g_out = Tensor(np.ones(d), requires_grad=True)
        self.blocks = []
        for _ in range(cfg.n_blocks):
            self.blocks.append({
                "sq": init_param(rng, (d, d)), "sk": init_param(rng, (d, d)),
                "sv": init_param(rng, (d, d)), "so": init_param(rng, (d, d)),
                "cq": init_param(rng, (d, d)), "ck": init_param(rng, (d, d)),
                "cv": init_param(rng, (d, d)), "co": init_param(rng, (d, d)),
                "w_up": init_param(rng, (d, 4 * d)), "w_down": init_param(rng, (4 * d, d)),
                "g_attn": Tensor(np.ones(d), requires_grad=True),
                "g_ffn": Tensor(np.ones(d), requires_grad=True),
            })
        self.heads = {}
        for t in cfg.targets:
            d_in, d_out = self.target_shapes[t]
            if cfg.sharing == "shared":
                self.heads[(None, t)] = DeltaHead(cfg, d_in, d_out, rng)
            else:
                for j in range(n_lm_layers):
                    self.heads[(j, t)] = DeltaHead(cfg, d_in, d_out, rng)

    def params(self) -> dict[str, Tensor]:
        out = {"queries": self.queries, "lift": self.lift,
               "g_mem": self.g_mem, "g_out": self.g_out}
        for j, blk in enumerate(self.blocks):
            for name, p in blk.items():
                out[f"block{j}.{name}"] = p
        for (layer, t), head in self.heads.items():
            tag = t if layer is None else f"layer{layer}.{t}"
            out[f"head.{tag}.w_fc"] = head.w_fc
            out[f"head.{tag}.w_proj"] = head.w_proj
        return out

    def checksum(self) -> str:
        return ckpt.checksum_params({k: p.data for k, p in self.params().items()})

    def forward(self, e_u, e_i) -> Tensor:
        """q_c [B, d_g] from user/item embedding batches [B, d_c]."""
        e_u = e_u if isinstance(e_u, Tensor) else Tensor(np.asarray(e_u, dtype=np.float64))
        e_i = e_i if isinstance(e_i, Tensor) else Tensor(np.asarray(e_i, dtype=np.float64))
        if e_u.ndim != 2 or e_u.shape != e_i.shape or e_u.shape[1] != self.cfg.d_c:
            raise GeneratorConfigError(
                f"embedding batches must be [B, {self.cfg.d_c}], got {e_u.shape} / {e_i.shape}")
        b = e_u.shape[0]
        cfg = self.cfg
        d = cfg.d_g
        # two memory tokens per sample, one shared lift so identical embeddings
        # give identical tokens
        mem_u = reshape(matmul(e_u, self.lift), (b, 1, d))
        mem_i = reshape(matmul(e_i, self.lift), (b, 1, d))
        memory = rms_norm(concat([mem_u, mem_i], axis=1), self.g_mem)
        x = broadcast_to(reshape(self.queries, (1, cfg.k, d)), (b, cfg.k, d))
        for blk in self.blocks:
            h = rms_norm(x, blk["g_attn"])
            out, _ = attention(matmul(h, blk["sq"]), matmul(h, blk["sk"]),
                               matmul(h, blk["sv"]), cfg.heads)
            x = x + matmul(out, blk["so"])
            h = rms_norm(x, blk["g_attn"])
            out, _ = attention(matmul(h, blk["cq"]), matmul(memory, blk["ck"]),
                               matmul(memory, blk["cv"]), cfg.heads)
            x = x + matmul(out, blk["co"])
            h = rms_norm(x, blk["g_ffn"])
            x = x + matmul(silu(matmul(h, blk["w_up"])), blk["w_down"])
        return rms_norm(reshape(mean(x, axis=1), (b, d)), self.g_out)

    def generate(self, e_u, e_i) -> DeltaSet:
        q_c = self.forward(e_u, e_i)
        entries = {key: make_delta(q_c, head) for key, head in self.heads.items()}
        return DeltaSet(entries, self.n_lm_layers, self.cfg.sharing)

    def save(self, path, seed: int | None = None) -> None:
        path = Path(path)
        ckpt.save_checkpoint(path, {k: p.data for k, p in self.params().items()})
        meta = {"config": self.cfg.__dict__ | {"targets": list(self.cfg.targets)},
                "target_shapes": {t: list(s) for t, s in self.target_shapes.items()},
                "n_lm_layers": self.n_lm_layers}
        if seed is not None:
            meta["seed"] = seed
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2))

    @staticmethod
    def load(path) -> "Generator":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        cfg = GeneratorConfig(**meta["config"])
        gen = Generator(cfg, {t: tuple(s) for t, s in meta["target_shapes"].items()},
                        meta["n_lm_layers"])
        arrays = ckpt.load_checkpoint(path)
        for k, p in gen.params().items():
            if k not in arrays:
                raise ckpt.CheckpointError(f"checkpoint missing parameter {k}")
            if arrays[k].shape != p.data.shape:
                raise ckpt.CheckpointError(f"shape mismatch for {k}")
            p.data[...] = arrays[k]
        return gen


def expand_target_spec(spec: str) -> tuple[str, ...]:
    """Compact target strings: letters from {q,k,v,o,f}, f = both FFN linears."""
    out = []
    for ch in spec:
        if ch == "f":
            out.extend(["up", "down"])
        elif ch in ("q", "k", "v", "o"):
            out.append(ch)
        else:
            raise GeneratorConfigError(f"unknown target letter {ch!r} in {spec!r}")
    return tuple(out)
