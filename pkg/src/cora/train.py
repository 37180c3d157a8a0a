"""Generator-only training loop, scoring paths, and ablation drivers.

The frozen pieces (CF embeddings, LM) are checksummed on entry and re-checked
on exit; any drift is a contamination error. Only the delta generator's
parameters receive optimizer updates, via AdamW with a linear warm-up from
1e-5 to the target rate over the first 5% of scheduled steps, early-stopped
on validation AUC and restored to the best epoch.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .cf import CfEmbeddings
from .data import Catalog, DatasetSplits, PromptSample, PromptBuilder, Vocabulary
from .generator import Generator, GeneratorConfig, expand_target_spec
from .lm import LmWeights, pad_batch, score_yes_no
from .metrics import MetricsReport, evaluate
from .optim import AdamW, TrainingError
from .tensor import Rng, bce_loss, no_grad

WARMUP_LR = 1e-5
WARMUP_FRAC = 0.05


class ContaminationError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 20
    seed: int = 0
    history_len: int = 10
    eval_batch_size: int = 64

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")


@dataclass
class TrainResult:
    generator: Generator
    report: MetricsReport
    curves: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_auc: float = float("nan")


def build_generator(gen_cfg: GeneratorConfig, lm: LmWeights, seed: int = 0) -> Generator:
    shapes = {t: lm.target_shape(t) for t in gen_cfg.targets}
    return Generator(gen_cfg, shapes, lm.cfg.n_layers, seed=seed)


def _sample_arrays(samples: list[PromptSample]):
    seqs = [s.token_ids for s in samples]
    labels = np.array([s.label for s in samples], dtype=np.float64)
    users = np.array([s.user_id for s in samples], dtype=np.intp)
    items = np.array([s.item_id for s in samples], dtype=np.intp)
    return seqs, labels, users, items


def score_samples(samples: list[PromptSample], lm: LmWeights, vocab: Vocabulary,
                  cf_emb: CfEmbeddings | None = None, generator: Generator | None = None,
                  batch_size: int = 64, threads: int = 1) -> np.ndarray:
    """P(Yes) for each sample; deltas applied when a generator is given.

    Threads fan out over disjoint sample ranges; each range is scored
    independently, so the result is identical at any thread count.
    """
    seqs, _, users, items = _sample_arrays(samples)
    out = np.empty(len(samples), dtype=np.float64)

    def run_range(lo: int, hi: int) -> None:
        with no_grad():
            for b_lo in range(lo, hi, batch_size):
                b_hi = min(b_lo + batch_size, hi)
                ids, lengths = pad_batch(seqs[b_lo:b_hi], vocab.pad_id)
                deltas = None
                if generator is not None:
                    dset = generator.generate(cf_emb.user_vecs[users[b_lo:b_hi]],
                                              cf_emb.item_vecs[items[b_lo:b_hi]])
                    deltas = dset.for_lm()
                p = score_yes_no(ids, lengths, lm, vocab.yes_id, vocab.no_id, deltas)
                out[b_lo:b_hi] = p.data

    if threads <= 1 or len(samples) <= batch_size:
        run_range(0, len(samples))
    else:
        # chunks are whole batches so batch boundaries (and therefore padding)
        # match the single-threaded sweep exactly
        n_batches = math.ceil(len(samples) / batch_size)
        chunk = math.ceil(n_batches / threads) * batch_size
        bounds = [(j, min(j + chunk, len(samples))) for j in range(0, len(samples), chunk)]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(lambda b: run_range(*b), bounds))
    return out


def predict(sample, cf_emb: CfEmbeddings, generator: Generator, lm: LmWeights,
            vocab: Vocabulary, builder: PromptBuilder) -> float:
    """Full single-record pipeline: prompt -> tokens -> deltas -> P(Yes)."""
    text = builder.prompt(sample.user_id, sample.item_id)
    seq = vocab.encode(text)
    with no_grad():
        ids, lengths = pad_batch([seq], vocab.pad_id)
        dset = generator.generate(cf_emb.user_vecs[[sample.user_id]],
                                  cf_emb.item_vecs[[sample.item_id]])
        p = score_yes_no(ids, lengths, lm, vocab.yes_id, vocab.no_id, dset.for_lm())
    return float(p.data[0])


def _val_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    from .metrics import MetricError, auc
    try:
        return auc(labels.astype(int), scores)
    except MetricError:
        return 0.5


def train_cora(splits: DatasetSplits, catalog: Catalog, vocab: Vocabulary,
               cf_emb: CfEmbeddings, generator: Generator, lm: LmWeights,
               cfg: TrainConfig, id_only: bool = False,
               epoch_hook: Callable | None = None) -> TrainResult:
    """Optimize the generator against BCE on train prompts; everything else
    stays frozen (verified by checksum)."""
    cf_sum_before = cf_emb.checksum()
    lm_sum_before = lm.checksum()
    # the LM is permanently frozen here: marking its tensors non-differentiable
    # means backward() cannot reach them even in principle
    for p in lm.params().values():
        p.requires_grad = False

    builder = PromptBuilder(catalog, splits.train, history_len=cfg.history_len,
                            id_only=id_only)
    train_samples = builder.render(splits.train, vocab)
    valid_samples = builder.render(splits.valid, vocab)
    seqs, labels, users, items = _sample_arrays(train_samples)
    v_labels = np.array([s.label for s in valid_samples], dtype=np.float64)

    params = generator.params()
    # short runs (a few hundred steps) need a faster-adapting second moment
    # than the Adam default or early plateaus never break
    opt = AdamW(list(params.values()), lr=cfg.lr, weight_decay=cfg.weight_decay,
                betas=(0.9, 0.98), decoupled=True)
    rng = Rng(cfg.seed)

    n = len(train_samples)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.max_epochs
    warmup_steps = max(1, int(WARMUP_FRAC * total_steps))

    best_auc, best_epoch, best_state, stale = -1.0, -1, None, 0
    curves = []
    step = 0
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(n)
        total_loss = 0.0
        for lo in range(0, n, cfg.batch_size):
            sel = order[lo:lo + cfg.batch_size]
            ids, lengths = pad_batch([seqs[j] for j in sel], vocab.pad_id)
            dset = generator.generate(cf_emb.user_vecs[users[sel]],
                                      cf_emb.item_vecs[items[sel]])
            p = score_yes_no(ids, lengths, lm, vocab.yes_id, vocab.no_id, dset.for_lm())
            loss = bce_loss(p, labels[sel])
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss at step {step} (epoch {epoch})")
            if cfg.lr <= WARMUP_LR:
                # degenerate schedule: a target at or below the warm-up floor
                # (notably lr=0) must apply exactly, never the ramp
                opt.lr = cfg.lr
            elif step < warmup_steps:
                opt.lr = WARMUP_LR + (cfg.lr - WARMUP_LR) * step / warmup_steps
            else:
                opt.lr = cfg.lr
            opt.zero_grad()
            loss.backward()
            opt.step()
            total_loss += value * sel.size
            step += 1
        train_loss = total_loss / n

        v_scores = score_samples(valid_samples, lm, vocab, cf_emb, generator,
                                 batch_size=cfg.eval_batch_size)
        val_auc = _val_auc(v_scores, v_labels)
        curves.append({"epoch": epoch, "loss": train_loss, "valid_auc": val_auc})
        if epoch_hook is not None:
            epoch_hook(epoch, train_loss, val_auc)
        if val_auc > best_auc:
            best_auc, best_epoch, stale = val_auc, epoch, 0
            best_state = {k: p.data.copy() for k, p in params.items()}
        else:
            stale += 1
            if stale >= cfg.patience:
                break

    if best_state is not None:
        for k, p in params.items():
            p.data[...] = best_state[k]

    if cf_emb.checksum() != cf_sum_before:
        raise ContaminationError("CF embeddings changed during generator training")
    if lm.checksum() != lm_sum_before:
        raise ContaminationError("LM weights changed during generator training")

    test_samples = builder.render(splits.test, vocab)
    t_scores = score_samples(test_samples, lm, vocab, cf_emb, generator,
                             batch_size=cfg.eval_batch_size)
    t_labels = np.array([s.label for s in test_samples])
    t_users = np.array([s.user_id for s in test_samples])
    report = evaluate(t_users, t_labels, t_scores, warm_flags=splits.test_warm)
    report.extra.update({"best_epoch": best_epoch, "best_valid_auc": best_auc})
    return TrainResult(generator, report, curves, best_epoch, best_auc)


# -- ablations ------------------------------------------------------------------------


def ablate_targets(splits: DatasetSplits, catalog: Catalog, vocab: Vocabulary,
                   cf_emb: CfEmbeddings, lm: LmWeights, target_specs: list[str],
                   seeds: list[int], gen_cfg: GeneratorConfig, train_cfg: TrainConfig,
                   progress: Callable | None = None) -> list[dict]:
    """One generator per (target set, seed) against shared frozen backbones.

    Returns per-run rows: variant, seed, split, auc, uauc. A 'text-only' row
    (no deltas, identical for every seed) is included as the reference."""
    import dataclasses

    rows = []
    builder = PromptBuilder(catalog, splits.train, history_len=train_cfg.history_len)
    test_samples = builder.render(splits.test, vocab)
    t_labels = np.array([s.label for s in test_samples])
    t_users = np.array([s.user_id for s in test_samples])
    base_scores = score_samples(test_samples, lm, vocab)
    base_report = evaluate(t_users, t_labels, base_scores, warm_flags=splits.test_warm)
    rows.extend(_report_rows("text-only", None, base_report))

    for spec in target_specs:
        targets = expand_target_spec(spec)
        for seed in seeds:
            cfg_v = dataclasses.replace(gen_cfg, targets=targets)
            tcfg_v = dataclasses.replace(train_cfg, seed=seed)
            gen = build_generator(cfg_v, lm, seed=seed)
            result = train_cora(splits, catalog, vocab, cf_emb, gen, lm, tcfg_v)
            rows.extend(_report_rows(spec, seed, result.report))
            if progress is not None:
                progress(spec, seed, result)
    return rows


def run_input_variants(splits: DatasetSplits, catalog: Catalog, vocab: Vocabulary,
                       cf_emb: CfEmbeddings, lm: LmWeights, seeds: list[int],
                       gen_cfg: GeneratorConfig, train_cfg: TrainConfig) -> dict:
    """Text-only vs ID-only vs combined, seed-averaged.

    text-only = frozen LM, no deltas (training-free, one value);
    id-only    = deltas trained on prompts with opaque placeholder titles;
    combined   = deltas trained on full prompts.
    Values are best-epoch validation AUCs.
    """
    import dataclasses

    builder = PromptBuilder(catalog, splits.train, history_len=train_cfg.history_len)
    valid_samples = builder.render(splits.valid, vocab)
    v_labels = np.array([s.label for s in valid_samples], dtype=np.float64)
    text_auc = _val_auc(score_samples(valid_samples, lm, vocab), v_labels)

    out = {"text_only": [text_auc] * len(seeds), "id_only": [], "combined": []}
    for seed in seeds:
        tcfg = dataclasses.replace(train_cfg, seed=seed)
        for key, id_only in (("id_only", True), ("combined", False)):
            gen = build_generator(gen_cfg, lm, seed=seed)
            result = train_cora(splits, catalog, vocab, cf_emb, gen, lm, tcfg,
                                id_only=id_only)
            out[key].append(result.best_val_auc)
    return out


def _report_rows(variant: str, seed, report: MetricsReport) -> list[dict]:
    rows = []
    for split, grp in (("all", report.overall), ("warm", report.warm), ("cold", report.cold)):
        if grp is None or grp.n == 0:
            continue
        rows.append({"variant": variant, "seed": seed, "split": split,
                     "auc": grp.auc, "uauc": grp.uauc, "n": grp.n})
    return rows
