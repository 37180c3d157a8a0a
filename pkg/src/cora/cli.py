"""Command-line pipeline for the package.

Commands compose through files only:

    cora gen-data    --out data/            synthetic interactions + titles
    cora train-cf    --data data/ --out cf/ CF encoder -> frozen embeddings
    cora pretrain-lm --data data/ --out lm/ toy LM + vocabulary, then frozen
    cora train-cora  --data data/ --cf-emb cf/cf_emb.ckpt --lm lm/lm.ckpt ...
    cora eval        --data data/ ... --split warm
    cora ablate      --variants qkvof,qkvo,qkv,qko,qk --seeds 0,1,2 ...
    cora export-emb  --checkpoint cf/cf.ckpt --data data/ --out emb/
    cora gradcheck                           finite-difference pipeline audit

Exit codes: 0 success, 1 usage error, 2 data error, 3 training failure,
4 contamination (a frozen artifact changed). Every artifact-producing command
writes a manifest.json with the resolved config, seeds, package version, and
SHA-256 checksums of its inputs, enough to replay the run bit for bit.

Config files: ``--config file.json`` supplies values for any long flag of the
same name (dashes as underscores); explicit flags win over the file, the file
wins over built-in defaults, unknown keys are rejected.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .cf import (
    CF_KINDS,
    CfConfig,
    CfEmbeddings,
    export_embeddings,
    load_cf_checkpoint,
    pretrain_cf,
    save_cf_checkpoint,
)
from .checkpoint import CheckpointError
from .data import (
    DataError,
    PromptBuilder,
    Vocabulary,
    build_prompt,
    build_splits,
    build_vocab,
    gen_synthetic,
    load_interactions,
    mark_warm_cold,
    placeholder_words,
    write_interactions,
)
from .generator import GeneratorConfig, GeneratorConfigError, expand_target_spec
from .lm import LmConfig, LmTrainConfig, LmWeights, lm_forward, pad_batch, pretrain_lm
from .metrics import MetricError
from .optim import TrainingError
from .report import (
    format_ablation_table,
    plot_ablation,
    plot_curves,
    plot_warm_cold,
    summarize_ablation,
    write_ablation_csv,
    write_ablation_summary,
    write_curves_csv,
    write_logits_csv,
    write_manifest,
    write_metrics_json,
)
from .tensor import NumericsError, Rng, Tensor, bce_loss, grad_check, no_grad
from .train import (
    ContaminationError,
    TrainConfig,
    ablate_targets,
    build_generator,
    score_samples,
    train_cora,
)


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; we use 1
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


# (dest, type, default, help); type "flag" marks store_true options.
SPLIT_OPTS = [
    ("valid_frac", float, 0.15, "fraction of records for validation"),
    ("test_frac", float, 0.15, "fraction of records for test"),
    ("warm_threshold", int, 10, "min train interactions for a warm user/item"),
]

OPTIONS: dict[str, list] = {
    "gen-data": [
        ("users", int, 64, "number of users"),
        ("items", int, 64, "number of items"),
        ("latent_dim", int, 2, "latent factor dimension"),
        ("density", float, 0.1, "fraction of the user-item grid observed"),
        ("seed", int, 0, "rng seed"),
        ("out", str, None, "output directory (required)"),
        *SPLIT_OPTS,
    ],
    "train-cf": [
        ("model", str, "mf", f"CF kind, one of {CF_KINDS}"),
        ("data", str, None, "data directory (required)"),
        ("out", str, None, "output directory (required)"),
        ("d_c", int, 256, "embedding width"),
        ("lightgcn_layers", int, 2, "propagation depth (lightgcn)"),
        ("sasrec_blocks", int, 1, "transformer blocks (sasrec)"),
        ("sasrec_heads", int, 2, "attention heads (sasrec)"),
        ("max_hist", int, 10, "history length (sasrec)"),
        ("lr", float, 1e-3, "learning rate"),
        ("weight_decay", float, 0.0, "L2 strength"),
        ("epochs", int, 200, "max epochs"),
        ("batch_size", int, 256, "batch size"),
        ("patience", int, 20, "early-stop patience (epochs)"),
        ("seed", int, 0, "rng seed"),
        *SPLIT_OPTS,
    ],
    "export-emb": [
        ("checkpoint", str, None, "CF model checkpoint (required)"),
        ("data", str, None, "data directory (required)"),
        ("out", str, None, "output directory (required)"),
        *SPLIT_OPTS,
    ],
    "pretrain-lm": [
        ("data", str, None, "data directory (required)"),
        ("out", str, None, "output directory (required)"),
        ("d_model", int, 128, "model width"),
        ("n_heads", int, 4, "attention heads"),
        ("n_layers", int, 4, "decoder blocks"),
        ("d_ff", int, 512, "FFN width"),
        ("max_len", int, 256, "max sequence length"),
        ("lr", float, 1e-3, "learning rate"),
        ("epochs", int, 10, "training epochs"),
        ("batch_size", int, 32, "batch size"),
        ("seed", int, 0, "rng seed"),
        ("history_len", int, 10, "titles per prompt history"),
        *SPLIT_OPTS,
    ],
    "train-cora": [
        ("data", str, None, "data directory (required)"),
        ("cf_emb", str, None, "frozen CF embeddings checkpoint (required)"),
        ("lm", str, None, "frozen LM checkpoint (required)"),
        ("vocab", str, None, "vocabulary JSON (default: vocab.json beside --lm)"),
        ("out", str, None, "output directory (required)"),
        ("targets", str, "qkvof", "delta targets, letters from q,k,v,o,f"),
        ("sharing", str, "shared", "delta head sharing: shared | per-layer"),
        ("k", int, 4, "learnable query count"),
        ("n_blocks", int, 8, "generator blocks"),
        ("gen_heads", int, 4, "generator attention heads"),
        ("r", int, 16, "delta rank"),
        ("lr", float, 1e-3, "target learning rate"),
        ("weight_decay", float, 1e-4, "decoupled weight decay"),
        ("batch_size", int, 64, "batch size"),
        ("epochs", int, 100, "max epochs"),
        ("patience", int, 20, "early-stop patience (epochs)"),
        ("seed", int, 0, "rng seed"),
        ("history_len", int, 10, "titles per prompt history"),
        ("id_only", "flag", False, "replace titles with opaque placeholders"),
        *SPLIT_OPTS,
    ],
    "eval": [
        ("data", str, None, "data directory (required)"),
        ("lm", str, None, "frozen LM checkpoint (required)"),
        ("vocab", str, None, "vocabulary JSON (default: vocab.json beside --lm)"),
        ("checkpoint", str, None, "generator checkpoint (omit for text-only)"),
        ("cf_emb", str, None, "CF embeddings (required with --checkpoint)"),
        ("split", str, "all", "report slice: all | warm | cold"),
        ("threads", int, 1, "evaluation fan-out threads"),
        ("out", str, None, "output directory (default: print JSON)"),
        ("history_len", int, 10, "titles per prompt history"),
        ("id_only", "flag", False, "replace titles with opaque placeholders"),
        ("dump_logits", int, 0, "write per-position logits CSV for N samples"),
        *SPLIT_OPTS,
    ],
    "ablate": [
        ("data", str, None, "data directory (required)"),
        ("cf_emb", str, None, "frozen CF embeddings checkpoint (required)"),
        ("lm", str, None, "frozen LM checkpoint (required)"),
        ("vocab", str, None, "vocabulary JSON (default: vocab.json beside --lm)"),
        ("out", str, None, "output directory (required)"),
        ("variants", str, "qkvof,qkvo,qkv,qko,qk", "comma-separated target sets"),
        ("seeds", str, "0,1,2", "comma-separated seeds per variant"),
        ("sharing", str, "shared", "delta head sharing: shared | per-layer"),
        ("k", int, 4, "learnable query count"),
        ("n_blocks", int, 8, "generator blocks"),
        ("gen_heads", int, 4, "generator attention heads"),
        ("r", int, 16, "delta rank"),
        ("lr", float, 1e-3, "target learning rate"),
        ("weight_decay", float, 1e-4, "decoupled weight decay"),
        ("batch_size", int, 64, "batch size"),
        ("epochs", int, 100, "max epochs per run"),
        ("patience", int, 20, "early-stop patience (epochs)"),
        ("history_len", int, 10, "titles per prompt history"),
        *SPLIT_OPTS,
    ],
    "gradcheck": [
        ("seed", int, 0, "rng seed"),
        ("d_model", int, 16, "LM width for the audit"),
        ("n_layers", int, 2, "LM depth for the audit"),
        ("step", float, 1e-5, "finite-difference step"),
        ("tolerance", float, 1e-4, "max relative error allowed"),
    ],
}

REQUIRED: dict[str, tuple] = {
    "gen-data": ("out",),
    "train-cf": ("data", "out"),
    "export-emb": ("checkpoint", "data", "out"),
    "pretrain-lm": ("data", "out"),
    "train-cora": ("data", "cf_emb", "lm", "out"),
    "eval": ("data", "lm"),
    "ablate": ("data", "cf_emb", "lm", "out"),
    "gradcheck": (),
}


def _build_parser() -> _Parser:
    parser = _Parser(prog="cora", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"cora {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")
    for name, opts in OPTIONS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", type=str, default=None,
                       help="JSON config file; explicit flags override it")
        for dest, typ, default, help_text in opts:
            flag = "--" + dest.replace("_", "-")
            if typ == "flag":
                p.add_argument(flag, dest=dest, action="store_true", default=None,
                               help=help_text)
            else:
                p.add_argument(flag, dest=dest, type=typ, default=None,
                               help=f"{help_text} (default {default})")
    return parser


def _resolve_config(command: str, args) -> dict:
    spec = OPTIONS[command]
    file_cfg = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        file_cfg = json.loads(path.read_text())
        known = {dest for dest, *_ in spec}
        unknown = sorted(set(file_cfg) - known)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    resolved = {}
    for dest, typ, default, _ in spec:
        flag_val = getattr(args, dest)
        if flag_val is not None:
            resolved[dest] = flag_val
        elif dest in file_cfg:
            value = file_cfg[dest]
            resolved[dest] = bool(value) if typ == "flag" else typ(value)
        else:
            resolved[dest] = default
    for dest in REQUIRED[command]:
        if resolved[dest] is None:
            raise UsageError(f"--{dest.replace('_', '-')} is required")
    return resolved


def _file_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _data_checksums(data_dir) -> dict:
    data_dir = Path(data_dir)
    out = {}
    for name in ("interactions.tsv", "titles.tsv"):
        p = data_dir / name
        if p.exists():
            out[str(p)] = _file_checksum(p)
    return out


def _manifest(out_dir, command: str, cfg: dict, inputs: dict) -> None:
    write_manifest(Path(out_dir) / "manifest.json", {
        "command": command,
        "version": __version__,
        "config": cfg,
        "inputs": inputs,
    })


def _load_dataset(cfg: dict):
    interactions, catalog = load_interactions(cfg["data"])
    splits = build_splits(interactions, cfg["valid_frac"], cfg["test_frac"])
    splits = mark_warm_cold(splits, cfg["warm_threshold"])
    return interactions, catalog, splits


def _counts(interactions, catalog) -> tuple[int, int]:
    n_users = max(r.user_id for r in interactions) + 1
    n_items = max(max(catalog.titles) + 1,
                  max(r.item_id for r in interactions) + 1)
    return n_users, n_items


def _vocab_path(cfg: dict) -> Path:
    if cfg.get("vocab"):
        return Path(cfg["vocab"])
    return Path(cfg["lm"]).parent / "vocab.json"


def _load_vocab(cfg: dict) -> Vocabulary:
    path = _vocab_path(cfg)
    if not path.exists():
        raise DataError(f"missing vocabulary file: {path}")
    return Vocabulary.from_json(path.read_text())


def _parse_seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s != ""]
    except ValueError:
        raise UsageError(f"bad seed list {text!r}") from None


# -- commands --------------------------------------------------------------------


def cmd_gen_data(cfg: dict) -> int:
    out = Path(cfg["out"])
    interactions, catalog, _ = gen_synthetic(cfg["users"], cfg["items"],
                                             cfg["latent_dim"], cfg["density"],
                                             cfg["seed"])
    write_interactions(out, interactions, catalog.titles)
    if interactions:
        try:
            splits = mark_warm_cold(build_splits(interactions, cfg["valid_frac"],
                                                 cfg["test_frac"]),
                                    cfg["warm_threshold"])
            (out / "splits.json").write_text(json.dumps(splits.manifest()))
        except DataError:
            pass  # too few records to split; files are still valid
    _manifest(out, "gen-data", cfg, {})
    print(f"wrote {len(interactions)} interactions over {cfg['users']} users x "
          f"{cfg['items']} items to {out}")
    return 0


def cmd_train_cf(cfg: dict) -> int:
    interactions, catalog, splits = _load_dataset(cfg)
    n_users, n_items = _counts(interactions, catalog)
    cf_cfg = CfConfig(model=cfg["model"], n_users=n_users, n_items=n_items,
                      d_c=cfg["d_c"], lightgcn_layers=cfg["lightgcn_layers"],
                      sasrec_blocks=cfg["sasrec_blocks"],
                      sasrec_heads=cfg["sasrec_heads"], max_hist=cfg["max_hist"],
                      lr=cfg["lr"], weight_decay=cfg["weight_decay"],
                      epochs=cfg["epochs"], batch_size=cfg["batch_size"],
                      patience=cfg["patience"], seed=cfg["seed"])
    emb, model, curves = pretrain_cf(splits, cf_cfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    save_cf_checkpoint(out / "cf.ckpt", model, cf_cfg)
    emb.meta["dataset_hash"] = _file_checksum(Path(cfg["data"]) / "interactions.tsv")
    emb.save(out / "cf_emb.ckpt")
    write_curves_csv(out / "curves.csv", curves)
    plot_curves(out / "curves.png", curves, title=f"{cfg['model']} pretraining")
    (out / "splits.json").write_text(json.dumps(splits.manifest()))
    _manifest(out, "train-cf", cfg, _data_checksums(cfg["data"]))
    best = max((c["val_auc"] for c in curves), default=float("nan"))
    print(f"{cfg['model']}: best valid AUC {best:.4f} over {len(curves)} epochs")
    return 0


def cmd_export_emb(cfg: dict) -> int:
    interactions, catalog, splits = _load_dataset(cfg)
    model, cf_cfg = load_cf_checkpoint(cfg["checkpoint"], splits.train)
    emb = export_embeddings(model, cf_cfg, splits)
    emb.meta["dataset_hash"] = _file_checksum(Path(cfg["data"]) / "interactions.tsv")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    emb.save(out / "cf_emb.ckpt")
    inputs = _data_checksums(cfg["data"])
    inputs[cfg["checkpoint"]] = _file_checksum(cfg["checkpoint"])
    _manifest(out, "export-emb", cfg, inputs)
    print(f"exported {emb.user_vecs.shape} user / {emb.item_vecs.shape} item embeddings")
    return 0


def _build_full_vocab(catalog, n_items: int) -> "Vocabulary":
    # every title must tokenize at eval time, plus the empty-history prompt,
    # a multi-title prompt (for the separator), and the placeholder lexicon
    titles = [catalog.titles[i] for i in sorted(catalog.titles)]
    texts = [build_prompt([], t) for t in titles]
    if len(titles) >= 2:
        texts.append(build_prompt(titles[:2], titles[0]))
    return build_vocab(texts, extra_words=placeholder_words(n_items))


def cmd_pretrain_lm(cfg: dict) -> int:
    interactions, catalog, splits = _load_dataset(cfg)
    _, n_items = _counts(interactions, catalog)
    vocab = _build_full_vocab(catalog, n_items)
    builder = PromptBuilder(catalog, splits.train, history_len=cfg["history_len"])
    samples = builder.render(splits.train, vocab)
    corpus = [vocab.encode(s.prompt + ("Yes" if s.label else "No")) for s in samples]
    lm_cfg = LmConfig(vocab_size=vocab.size, d_model=cfg["d_model"],
                      n_heads=cfg["n_heads"], n_layers=cfg["n_layers"],
                      d_ff=cfg["d_ff"], max_len=cfg["max_len"])
    train_cfg = LmTrainConfig(lr=cfg["lr"], epochs=cfg["epochs"],
                              batch_size=cfg["batch_size"], seed=cfg["seed"])
    lm, curves = pretrain_lm(corpus, lm_cfg, train_cfg, pad_id=vocab.pad_id)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    lm.save(out / "lm.ckpt")
    (out / "vocab.json").write_text(vocab.to_json())
    write_curves_csv(out / "curves.csv", curves)
    plot_curves(out / "curves.png", curves, title="LM pretraining")
    _manifest(out, "pretrain-lm", cfg, _data_checksums(cfg["data"]))
    print(f"pretrained LM (vocab {vocab.size}, d_model {cfg['d_model']}), "
          f"final loss {curves[-1]['train_loss']:.4f}")
    return 0


def _gen_config_from(cfg: dict, d_c: int, targets: tuple) -> GeneratorConfig:
    return GeneratorConfig(d_c=d_c, k=cfg["k"], n_blocks=cfg["n_blocks"],
                           heads=cfg["gen_heads"], r=cfg["r"], targets=targets,
                           sharing=cfg["sharing"])


def _train_inputs(cfg: dict) -> dict:
    inputs = _data_checksums(cfg["data"])
    for key in ("cf_emb", "lm"):
        inputs[cfg[key]] = _file_checksum(cfg[key])
    vocab_path = _vocab_path(cfg)
    if vocab_path.exists():
        inputs[str(vocab_path)] = _file_checksum(vocab_path)
    return inputs


def cmd_train_cora(cfg: dict) -> int:
    targets = expand_target_spec(cfg["targets"])
    interactions, catalog, splits = _load_dataset(cfg)
    cf_emb = CfEmbeddings.load(cfg["cf_emb"])
    lm = LmWeights.load(cfg["lm"])
    vocab = _load_vocab(cfg)
    gen_cfg = _gen_config_from(cfg, cf_emb.d_c, targets)
    generator = build_generator(gen_cfg, lm, seed=cfg["seed"])
    train_cfg = TrainConfig(lr=cfg["lr"], weight_decay=cfg["weight_decay"],
                            batch_size=cfg["batch_size"], max_epochs=cfg["epochs"],
                            patience=cfg["patience"], seed=cfg["seed"],
                            history_len=cfg["history_len"])
    result = train_cora(splits, catalog, vocab, cf_emb, generator, lm, train_cfg,
                        id_only=bool(cfg["id_only"]))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    result.generator.save(out / "generator.ckpt", seed=cfg["seed"])
    write_metrics_json(out / "metrics.json", result.report)
    write_curves_csv(out / "curves.csv", result.curves)
    plot_curves(out / "curves.png", result.curves, title=f"targets {cfg['targets']}")
    plot_warm_cold(out / "warm_cold.png", result.report)
    _manifest(out, "train-cora", cfg, _train_inputs(cfg))
    overall = result.report.overall
    print(f"targets {cfg['targets']}: best valid AUC {result.best_val_auc:.4f} "
          f"(epoch {result.best_epoch}), test AUC "
          f"{overall.auc if overall.auc is not None else float('nan'):.4f}")
    return 0


def cmd_eval(cfg: dict) -> int:
    if cfg["checkpoint"] and not cfg["cf_emb"]:
        raise UsageError("--cf-emb is required when --checkpoint is given")
    if cfg["split"] not in ("all", "warm", "cold"):
        raise UsageError(f"bad --split {cfg['split']!r}")
    interactions, catalog, splits = _load_dataset(cfg)
    lm = LmWeights.load(cfg["lm"])
    vocab = _load_vocab(cfg)
    generator = None
    cf_emb = None
    if cfg["checkpoint"]:
        from .generator import Generator
        generator = Generator.load(cfg["checkpoint"])
        cf_emb = CfEmbeddings.load(cfg["cf_emb"])
    builder = PromptBuilder(catalog, splits.train, history_len=cfg["history_len"],
                            id_only=bool(cfg["id_only"]))
    samples = builder.render(splits.test, vocab)
    scores = score_samples(samples, lm, vocab, cf_emb, generator,
                           threads=cfg["threads"])
    labels = np.array([s.label for s in samples])
    users = np.array([s.user_id for s in samples])
    from .metrics import evaluate
    report = evaluate(users, labels, scores, warm_flags=splits.test_warm)
    group = {"all": report.overall, "warm": report.warm, "cold": report.cold}[cfg["split"]]
    if group is None or group.n == 0 or group.auc is None:
        sys.stderr.write(f"warning: split {cfg['split']!r} has no usable records; "
                         "metrics absent\n")
    if cfg["out"]:
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        write_metrics_json(out / "metrics.json", report)
        plot_warm_cold(out / "warm_cold.png", report)
        if cfg["dump_logits"] > 0:
            n = min(cfg["dump_logits"], len(samples))
            seqs = [samples[j].token_ids for j in range(n)]
            ids, lengths = pad_batch(seqs, vocab.pad_id)
            with no_grad():
                logits = lm_forward(ids, lm).data
            write_logits_csv(out / "logits.csv", logits, lengths)
        _manifest(out, "eval", cfg, _data_checksums(cfg["data"]))
    if cfg["split"] == "all":
        print(report.to_json())
    else:
        # a single requested slice is emitted alone; the file artifact keeps all
        print(json.dumps({cfg["split"]: None if group is None else group.to_dict()},
                         indent=2))
    return 0


def cmd_ablate(cfg: dict) -> int:
    variants = [v for v in cfg["variants"].split(",") if v]
    if not variants:
        raise UsageError("no variants given")
    for v in variants:
        expand_target_spec(v)  # validate before any training
    seeds = _parse_seeds(cfg["seeds"])
    interactions, catalog, splits = _load_dataset(cfg)
    cf_emb = CfEmbeddings.load(cfg["cf_emb"])
    lm = LmWeights.load(cfg["lm"])
    vocab = _load_vocab(cfg)
    gen_cfg = _gen_config_from(cfg, cf_emb.d_c, expand_target_spec(variants[0]))
    train_cfg = TrainConfig(lr=cfg["lr"], weight_decay=cfg["weight_decay"],
                            batch_size=cfg["batch_size"], max_epochs=cfg["epochs"],
                            patience=cfg["patience"], history_len=cfg["history_len"])

    def progress(spec, seed, result):
        print(f"  {spec} seed {seed}: best valid AUC {result.best_val_auc:.4f}",
              flush=True)

    rows = ablate_targets(splits, catalog, vocab, cf_emb, lm, variants, seeds,
                          gen_cfg, train_cfg, progress=progress)
    summary = summarize_ablation(rows, variants)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_ablation_csv(out / "ablation.csv", rows)
    write_ablation_summary(out / "ablation_summary.csv", summary)
    plot_ablation(out / "ablation.png", summary)
    _manifest(out, "ablate", cfg, _train_inputs(cfg))
    print(format_ablation_table(summary))
    return 0


def cmd_gradcheck(cfg: dict) -> int:
    """Finite-difference audit of the full trainable pipeline:
    (e_u, e_i) -> generator -> delta-injected LM -> BCE loss."""
    seed = cfg["seed"]
    rng = Rng(seed + 1000)
    interactions, catalog, _ = gen_synthetic(8, 8, 2, 0.5, seed)
    vocab = _build_full_vocab(catalog, 8)
    lm_cfg = LmConfig(vocab_size=vocab.size, d_model=cfg["d_model"], n_heads=2,
                      n_layers=cfg["n_layers"], d_ff=2 * cfg["d_model"], max_len=128)
    lm = LmWeights(lm_cfg, Rng(seed))
    gen_cfg = GeneratorConfig(d_c=4, k=2, n_blocks=1, heads=2, r=2)
    generator = build_generator(gen_cfg, lm, seed=seed)
    # zero-init W_proj blocks gradient flow into W_FC, so the audit moves it
    # off zero first
    for (_, _t), head in generator.heads.items():
        head.w_proj.data[...] = rng.normal(head.w_proj.shape, std=0.05)

    builder = PromptBuilder(catalog, interactions, history_len=2)
    recs = interactions[:2]
    seqs = [vocab.encode(builder.prompt(r.user_id, r.item_id)) for r in recs]
    ids, lengths = pad_batch(seqs, vocab.pad_id)
    labels = np.array([float(r.label) for r in recs])
    e_u = Tensor(rng.normal((2, gen_cfg.d_c)), requires_grad=True)
    e_i = Tensor(rng.normal((2, gen_cfg.d_c)), requires_grad=True)

    from .lm import score_yes_no

    def loss_fn():
        deltas = generator.generate(e_u, e_i).for_lm()
        p = score_yes_no(ids, lengths, lm, vocab.yes_id, vocab.no_id, deltas)
        return bce_loss(p, labels)

    params = [e_u, e_i] + list(generator.params().values())
    n_entries = sum(p.size for p in params)
    err = grad_check(loss_fn, params, step=cfg["step"])
    ok = err < cfg["tolerance"]
    print(f"gradcheck: {n_entries} parameter entries, max rel. err {err:.3e} "
          f"({'PASS' if ok else 'FAIL'} at {cfg['tolerance']:.0e})")
    return 0 if ok else 3


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-cf": cmd_train_cf,
    "export-emb": cmd_export_emb,
    "pretrain-lm": cmd_pretrain_lm,
    "train-cora": cmd_train_cora,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # from _Parser.error or --help/--version
        return int(exc.code or 0)
    if not args.command:
        parser.print_usage(sys.stderr)
        return 1
    try:
        cfg = _resolve_config(args.command, args)
        return COMMANDS[args.command](cfg)
    except (UsageError, GeneratorConfigError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1
    except (DataError, CheckpointError, MetricError, FileNotFoundError,
            json.JSONDecodeError) as exc:
        sys.stderr.write(f"data error: {exc}\n")
        return 2
    except ContaminationError as exc:
        sys.stderr.write(f"contamination: {exc}\n")
        return 4
    except (TrainingError, NumericsError) as exc:
        sys.stderr.write(f"training failure: {exc}\n")
        return 3


if __name__ == "__main__":
    sys.exit(main())
