"""Shared fixtures and the acceptance-verdict summary hook.

Two pipelines are built once per session:

* ``pipeline`` -- the canonical 64x64 dataset plus CF embeddings and a
  briefly pretrained LM, all produced through the CLI so the artifact layout
  is exercised the same way a user would produce it.
* ``tiny`` -- a 16x16 in-library pipeline for unit tests that need working
  backbones but do not care about their quality.

Acceptance tests register a one-line verdict via the ``record_criterion``
fixture; the lines are replayed in a dedicated section at the end of the run.
"""

from __future__ import annotations

from types import SimpleNamespace

import pytest

from cora import cli
from cora.cf import CfConfig, pretrain_cf
from cora.data import PromptBuilder, build_splits, gen_synthetic, mark_warm_cold
from cora.lm import LmConfig, LmTrainConfig, pretrain_lm

_CRITERION_LINES: list[str] = []


@pytest.fixture
def record_criterion():
    """Return a callable that stores one acceptance verdict line."""

    def _record(line: str) -> None:
        _CRITERION_LINES.append(line)

    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERION_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(_CRITERION_LINES):
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    """CLI-built artifacts: dataset, MF embeddings, pretrained LM."""
    root = tmp_path_factory.mktemp("pipeline")
    data = root / "data"
    cf = root / "cf"
    lm = root / "lm"
    assert cli.main(["gen-data", "--out", str(data)]) == 0
    assert cli.main([
        "train-cf", "--model", "mf", "--data", str(data), "--out", str(cf),
        "--d-c", "2", "--lr", "5e-3", "--weight-decay", "7e-3",
        "--epochs", "400", "--batch-size", "256", "--patience", "20",
    ]) == 0
    # two epochs only: enough for structural tests; quality-sensitive tests
    # pretrain their own LM in-process
    assert cli.main([
        "pretrain-lm", "--data", str(data), "--out", str(lm),
        "--d-model", "32", "--n-heads", "2", "--n-layers", "2",
        "--d-ff", "64", "--max-len", "160",
        "--lr", "3e-3", "--epochs", "2", "--batch-size", "32",
    ]) == 0
    return SimpleNamespace(
        root=root,
        data=data,
        cf=cf,
        lm=lm,
        cf_ckpt=cf / "cf.ckpt",
        cf_emb=cf / "cf_emb.ckpt",
        lm_ckpt=lm / "lm.ckpt",
        vocab=lm / "vocab.json",
    )


@pytest.fixture(scope="session")
def tiny():
    """Small in-memory pipeline: 16x16 dataset, MF embeddings, 1-epoch LM."""
    interactions, catalog, _ = gen_synthetic(16, 16, 2, 0.5, seed=1)
    splits = mark_warm_cold(build_splits(interactions, 0.15, 0.15), 4)
    cf_emb, _, _ = pretrain_cf(splits, CfConfig(
        model="mf", n_users=16, n_items=16, d_c=2, lr=5e-3, weight_decay=0.0,
        epochs=60, batch_size=256, patience=20, seed=0))
    vocab = cli._build_full_vocab(catalog, 16)
    builder = PromptBuilder(catalog, splits.train, history_len=10)
    corpus = [vocab.encode(s.prompt + ("Yes" if s.label else "No"))
              for s in builder.render(splits.train, vocab)]
    lm_cfg = LmConfig(vocab_size=vocab.size, d_model=16, n_heads=2,
                      n_layers=1, d_ff=32, max_len=160)
    lm, _ = pretrain_lm(corpus, lm_cfg,
                        LmTrainConfig(lr=3e-3, epochs=1, batch_size=32, seed=0),
                        pad_id=vocab.pad_id)
    return SimpleNamespace(
        interactions=interactions, catalog=catalog, splits=splits,
        vocab=vocab, cf_emb=cf_emb, lm=lm, lm_cfg=lm_cfg)
