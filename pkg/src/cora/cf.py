"""Collaborative-filtering encoders and their pretraining loop.

Three encoder kinds produce d_c-dimensional user/item vectors:
  * mf       — plain embedding tables.
  * lightgcn — embedding tables smoothed over the normalized bipartite graph
               D^{-1/2} A D^{-1/2}, final vectors = mean of layers 0..K.
  * sasrec   — causal self-attention over the user's liked-item history;
               the user vector is the hidden state at the last real position.

All kinds train pointwise: BCE on sigmoid(e_u . e_i) over liked interactions
plus one sampled unobserved item per positive per epoch, early-stopped on
validation AUC. Exported embeddings are read-only; downstream training never
touches them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import checkpoint as ckpt
from .data import DatasetSplits, Interaction, build_histories
from .metrics import auc
from .nn import attention, causal_mask, init_param
from .optim import AdamW, TrainingError
from .tensor import (
    Rng,
    Tensor,
    bce_loss,
    index_select,
    matmul,
    mul,
    no_grad,
    reshape,
    rms_norm,
    select_position,
    sigmoid,
    silu,
    sparse_matmul,
    sum_,
)

CF_KINDS = ("mf", "lightgcn", "sasrec")


@dataclass
class CfConfig:
    model: str
    n_users: int
    n_items: int
    d_c: int = 32
    lightgcn_layers: int = 2
    sasrec_blocks: int = 1
    sasrec_heads: int = 2
    max_hist: int = 10
    lr: float = 1e-3
    weight_decay: float = 0.0
    epochs: int = 200
    batch_size: int = 256
    patience: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.model not in CF_KINDS:
            raise ValueError(f"unknown CF kind {self.model!r}; expected one of {CF_KINDS}")
        if self.d_c < 1 or self.n_users < 1 or self.n_items < 1:
            raise ValueError("n_users, n_items, d_c must be positive")
        if self.model == "sasrec" and self.d_c % self.sasrec_heads:
            raise ValueError("d_c must be divisible by sasrec_heads")


@dataclass
class CfEmbeddings:
    """Frozen user/item vectors handed to the delta generator."""

    user_vecs: np.ndarray
    item_vecs: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.user_vecs = np.ascontiguousarray(self.user_vecs, dtype=np.float64)
        self.item_vecs = np.ascontiguousarray(self.item_vecs, dtype=np.float64)
        self.user_vecs.setflags(write=False)
        self.item_vecs.setflags(write=False)

    @property
    def d_c(self) -> int:
        return self.user_vecs.shape[1]

    def checksum(self) -> str:
        return ckpt.checksum_params({"user_vecs": self.user_vecs, "item_vecs": self.item_vecs})

    def save(self, path) -> None:
        path = Path(path)
        ckpt.save_checkpoint(path, {"user_vecs": self.user_vecs, "item_vecs": self.item_vecs})
        sidecar = dict(self.meta)
        sidecar["d_c"] = self.d_c
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))

    @staticmethod
    def load(path) -> "CfEmbeddings":
        path = Path(path)
        arrays = ckpt.load_checkpoint(path)
        meta = {}
        sidecar = path.with_suffix(".json")
        if sidecar.exists():
            meta = json.loads(sidecar.read_text())
        return CfEmbeddings(arrays["user_vecs"], arrays["item_vecs"], meta)


# -- models -----------------------------------------------------------------------


class MfModel:
    def __init__(self, cfg: CfConfig, rng: Rng):
        self.cfg = cfg
        self.user_emb = init_param(rng, (cfg.n_users, cfg.d_c))
        self.item_emb = init_param(rng, (cfg.n_items, cfg.d_c))

    def params(self) -> dict[str, Tensor]:
        return {"user_emb": self.user_emb, "item_emb": self.item_emb}

    def tables(self) -> tuple[Tensor, Tensor]:
        return self.user_emb, self.item_emb


def build_adjacency(train: list[Interaction], n_users: int, n_items: int) -> sp.csr_matrix:
    """Symmetrically normalized bipartite adjacency over liked train edges.

    Node order: users 0..U-1 then items U..U+I-1. Isolated nodes keep zero
    rows (their embeddings pick up nothing from propagation).
    """
    edges = {(r.user_id, r.item_id) for r in train if r.label == 1}
    n = n_users + n_items
    if not edges:
        return sp.csr_matrix((n, n))
    rows = np.array([u for u, _ in edges] + [n_users + i for u, i in edges])
    cols = np.array([n_users + i for _, i in edges] + [u for u, i in edges])
    adj = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
    deg = np.asarray(adj.sum(axis=1)).ravel()
    inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(np.maximum(deg, 1e-12)), 0.0)
    d_half = sp.diags(inv_sqrt)
    return (d_half @ adj @ d_half).tocsr()


class LightGcnModel:
    def __init__(self, cfg: CfConfig, rng: Rng, train: list[Interaction]):
        self.cfg = cfg
        self.base_emb = init_param(rng, (cfg.n_users + cfg.n_items, cfg.d_c))
        self.norm_adj = build_adjacency(train, cfg.n_users, cfg.n_items)

    def params(self) -> dict[str, Tensor]:
        return {"base_emb": self.base_emb}

    def propagate(self) -> Tensor:
        """Mean of layer-0..K embeddings under repeated graph smoothing."""
        acc = self.base_emb
        cur = self.base_emb
        for _ in range(self.cfg.lightgcn_layers):
            cur = sparse_matmul(self.norm_adj, cur)
            acc = acc + cur
        return acc * (1.0 / (self.cfg.lightgcn_layers + 1))

    def tables(self) -> tuple[Tensor, Tensor]:
        out = self.propagate()
        u = index_select(out, np.arange(self.cfg.n_users))
        i = index_select(out, np.arange(self.cfg.n_users, self.cfg.n_users + self.cfg.n_items))
        return u, i


class SasRecModel:
    """Causal transformer over liked-item histories; pad row index = n_items."""

    def __init__(self, cfg: CfConfig, rng: Rng):
        self.cfg = cfg
        d = cfg.d_c
        self.item_emb = init_param(rng, (cfg.n_items + 1, d))
        self.pos_emb = init_param(rng, (cfg.max_hist, d))
        self.blocks = []
        for _ in range(cfg.sasrec_blocks):
            self.blocks.append({
                "wq": init_param(rng, (d, d)), "wk": init_param(rng, (d, d)),
                "wv": init_param(rng, (d, d)), "wo": init_param(rng, (d, d)),
                "w_up": init_param(rng, (d, 4 * d)), "w_down": init_param(rng, (4 * d, d)),
                "g1": Tensor(np.ones(d), requires_grad=True),
                "g2": Tensor(np.ones(d), requires_grad=True),
            })
        self.g_final = Tensor(np.ones(d), requires_grad=True)

    @property
    def pad_id(self) -> int:
        return self.cfg.n_items

    def params(self) -> dict[str, Tensor]:
        out = {"item_emb": self.item_emb, "pos_emb": self.pos_emb}
        for j, blk in enumerate(self.blocks):
            for name, p in blk.items():
                out[f"block{j}.{name}"] = p
        out["g_final"] = self.g_final
        return out

    def encode(self, hist_ids: np.ndarray, lengths: np.ndarray,
               return_attn: bool = False):
        """hist_ids [B, max_hist] with trailing pads; returns e_u [B, d_c].

        Empty histories yield exact zero vectors.
        """
        b, length = hist_ids.shape
        d = self.cfg.d_c
        x = reshape(index_select(self.item_emb, hist_ids.reshape(-1)), (b, length, d))
        x = x + self.pos_emb
        mask = causal_mask(length)
        attn_probs = []
        for blk in self.blocks:
            h = rms_norm(x, blk["g1"])
            out, probs = attention(matmul(h, blk["wq"]), matmul(h, blk["wk"]),
                                   matmul(h, blk["wv"]), self.cfg.sasrec_heads, mask=mask)
            attn_probs.append(probs)
            x = x + matmul(out, blk["wo"])
            h = rms_norm(x, blk["g2"])
            x = x + matmul(silu(matmul(h, blk["w_up"])), blk["w_down"])
        h = rms_norm(x, self.g_final)
        pos = np.maximum(lengths - 1, 0)
        e_u = select_position(h, pos)
        e_u = mul(e_u, (lengths > 0).astype(np.float64)[:, None])
        if return_attn:
            return e_u, attn_probs
        return e_u


def pad_histories(histories: list[list[int]], max_hist: int, pad_id: int):
    """Trailing-pad each (already truncated-from-the-left) history."""
    b = len(histories)
    ids = np.full((b, max_hist), pad_id, dtype=np.intp)
    lengths = np.zeros(b, dtype=np.intp)
    for j, h in enumerate(histories):
        h = h[-max_hist:]
        ids[j, :len(h)] = h
        lengths[j] = len(h)
    return ids, lengths


# -- training ----------------------------------------------------------------------


def _sample_negatives(rng: Rng, users: np.ndarray, observed: dict[int, set],
                      n_items: int) -> np.ndarray:
    neg = rng.randints(n_items, users.size)
    for _ in range(100):
        bad = np.array([neg[j] in observed.get(int(users[j]), ()) for j in range(users.size)])
        if not bad.any():
            break
        neg[bad] = rng.randints(n_items, int(bad.sum()))
    return neg


def _sasrec_train_histories(train: list[Interaction], max_hist: int):
    """History for each liked record: the user's liked items strictly before it."""
    by_user: dict[int, list[tuple[int, int]]] = {}
    for rec in train:
        if rec.label == 1:
            by_user.setdefault(rec.user_id, []).append((rec.timestamp, rec.item_id))
    hist_of: dict[tuple[int, int, int], list[int]] = {}
    for u, pairs in by_user.items():
        pairs.sort()
        for j, (t, i) in enumerate(pairs):
            hist_of[(u, i, t)] = [item for _, item in pairs[:j]][-max_hist:]
    return hist_of


def pretrain_cf(splits: DatasetSplits, cfg: CfConfig):
    """Train one CF encoder; returns (CfEmbeddings, model, curves).

    curves is a list of {epoch, train_loss, val_auc} dicts. Early stopping
    restores the best-validation parameters before export.
    """
    if not splits.train:
        raise TrainingError("empty training split")
    rng = Rng(cfg.seed)
    if cfg.model == "mf":
        model = MfModel(cfg, rng)
    elif cfg.model == "lightgcn":
        model = LightGcnModel(cfg, rng, splits.train)
    else:
        model = SasRecModel(cfg, rng)

    params = model.params()
    opt = AdamW(list(params.values()), lr=cfg.lr, weight_decay=cfg.weight_decay,
                decoupled=False)

    positives = [r for r in splits.train if r.label == 1]
    if not positives:
        raise TrainingError("no positive interactions to train on")
    observed: dict[int, set] = {}
    for rec in splits.train:
        observed.setdefault(rec.user_id, set()).add(rec.item_id)

    pos_u = np.array([r.user_id for r in positives], dtype=np.intp)
    pos_i = np.array([r.item_id for r in positives], dtype=np.intp)
    sas_hist = _sasrec_train_histories(splits.train, cfg.max_hist) if cfg.model == "sasrec" else None
    full_hist = build_histories(splits.train)

    best_auc = -1.0
    best_state = None
    best_epoch = -1
    curves = []
    stale = 0

    for epoch in range(cfg.epochs):
        neg_i = _sample_negatives(rng, pos_u, observed, cfg.n_items)
        users = np.concatenate([pos_u, pos_u])
        items = np.concatenate([pos_i, neg_i])
        labels = np.concatenate([np.ones(pos_u.size), np.zeros(pos_u.size)])
        if cfg.model == "sasrec":
            hist_all = [sas_hist[(int(r.user_id), int(r.item_id), int(r.timestamp))]
                        for r in positives] * 2
        order = rng.permutation(users.size)
        users, items, labels = users[order], items[order], labels[order]
        if cfg.model == "sasrec":
            hist_all = [hist_all[j] for j in order]

        total = 0.0
        for lo in range(0, users.size, cfg.batch_size):
            hi = min(lo + cfg.batch_size, users.size)
            u_b, i_b, y_b = users[lo:hi], items[lo:hi], labels[lo:hi]
            if cfg.model == "sasrec":
                ids, lengths = pad_histories(hist_all[lo:hi], cfg.max_hist, model.pad_id)
                e_u = model.encode(ids, lengths)
                e_i = index_select(model.item_emb, i_b)
            else:
                u_tab, i_tab = model.tables()
                e_u = index_select(u_tab, u_b)
                e_i = index_select(i_tab, i_b)
            p = sigmoid(sum_(mul(e_u, e_i), axis=1))
            loss = bce_loss(p, y_b)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch start {lo}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += value * (hi - lo)
        train_loss = total / users.size

        val_auc = _validate(model, cfg, splits, full_hist)
        curves.append({"epoch": epoch, "train_loss": train_loss, "val_auc": val_auc})
        if val_auc > best_auc:
            best_auc = val_auc
            best_epoch = epoch
            best_state = {k: p.data.copy() for k, p in params.items()}
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break

    if best_state is not None:
        for k, p in params.items():
            p.data[...] = best_state[k]

    emb = export_embeddings(model, cfg, splits)
    emb.meta.update({"model": cfg.model, "seed": cfg.seed, "best_epoch": best_epoch,
                     "best_val_auc": best_auc})
    return emb, model, curves


def _score_pairs(model, cfg: CfConfig, records: list[Interaction],
                 full_hist: dict[int, list[int]]) -> np.ndarray:
    """sigmoid(e_u . e_i) for given records with current parameters, no tape."""
    with no_grad():
        u_ids = np.array([r.user_id for r in records], dtype=np.intp)
        i_ids = np.array([r.item_id for r in records], dtype=np.intp)
        if cfg.model == "sasrec":
            uniq, inverse = np.unique(u_ids, return_inverse=True)
            hists = [[x for x in full_hist.get(int(u), [])] for u in uniq]
            ids, lengths = pad_histories(hists, cfg.max_hist, model.pad_id)
            e_uniq = model.encode(ids, lengths).data
            e_u = e_uniq[inverse]
            e_i = model.item_emb.data[i_ids]
        else:
            u_tab, i_tab = model.tables()
            e_u = u_tab.data[u_ids]
            e_i = i_tab.data[i_ids]
        z = (e_u * e_i).sum(axis=1)
        return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                        np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def _validate(model, cfg: CfConfig, splits: DatasetSplits,
              full_hist: dict[int, list[int]]) -> float:
    scores = _score_pairs(model, cfg, splits.valid, full_hist)
    labels = np.array([r.label for r in splits.valid])
    try:
        return auc(labels, scores)
    except ValueError:
        return 0.5


def export_embeddings(model, cfg: CfConfig, splits: DatasetSplits) -> CfEmbeddings:
    """Freeze the trained encoder into plain user/item matrices."""
    with no_grad():
        if cfg.model == "sasrec":
            full_hist = build_histories(splits.train)
            hists = [full_hist.get(u, []) for u in range(cfg.n_users)]
            ids, lengths = pad_histories(hists, cfg.max_hist, model.pad_id)
            user_vecs = model.encode(ids, lengths).data
            item_vecs = model.item_emb.data[:cfg.n_items].copy()
        else:
            u_tab, i_tab = model.tables()
            user_vecs = u_tab.data.copy()
            item_vecs = i_tab.data.copy()
    return CfEmbeddings(user_vecs, item_vecs, {"model": cfg.model, "d_c": cfg.d_c})


def save_cf_checkpoint(path, model, cfg: CfConfig) -> None:
    path = Path(path)
    ckpt.save_checkpoint(path, {k: p.data for k, p in model.params().items()})
    path.with_suffix(".json").write_text(json.dumps(cfg.__dict__, indent=2))


def load_cf_checkpoint(path, train: list[Interaction]):
    """Rebuild a trained CF model from checkpoint + config sidecar.

    The train split is needed to reconstruct the LightGCN graph."""
    path = Path(path)
    cfg = CfConfig(**json.loads(path.with_suffix(".json").read_text()))
    rng = Rng(cfg.seed)
    if cfg.model == "mf":
        model = MfModel(cfg, rng)
    elif cfg.model == "lightgcn":
        model = LightGcnModel(cfg, rng, train)
    else:
        model = SasRecModel(cfg, rng)
    arrays = ckpt.load_checkpoint(path)
    for k, p in model.params().items():
        if k not in arrays:
            raise ckpt.CheckpointError(f"checkpoint missing parameter {k}")
        if arrays[k].shape != p.data.shape:
            raise ckpt.CheckpointError(f"shape mismatch for {k}")
        p.data[...] = arrays[k]
    return model, cfg
