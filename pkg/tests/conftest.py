"""Session-scoped trained models shared by the acceptance and harness tests.

Training is the expensive part of the suite, so each stage runs once per
session and later tests load the resulting checkpoints.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from pathlib import Path

import pytest

from vqbiart.harness.config import make_config
from vqbiart.harness.container import file_sha256
from vqbiart.harness.data import load_manifest
from vqbiart.harness.train import train
from vqbiart.synthetic import write_manifest

# memorization recipes (fixed batch, no crop so the targets do not move)
ML_OVERFIT = dict(
    image_side=64, batch_size=8, base_lr=1.25e-4, crop_ratio=1.0, max_steps=2000,
    target_mse=0.01, perceptual_weight=0.0, plateau_every=0, log_every=0,
)
SL_FINETUNE = dict(
    image_side=64, batch_size=8, base_lr=1.25e-4, crop_ratio=1.0, max_steps=200,
    perceptual_weight=0.0, plateau_every=0, log_every=0,
)
BIART_MEMORIZE = dict(
    n_layer=4, batch_size=4, base_lr=2.5e-4, crop_ratio=1.0, max_steps=1000, bpe_dropout=0.0,
    embd_pdrop=0.0, resid_pdrop=0.0, attn_pdrop=0.0, plateau_every=0, log_every=0,
    lr_decay="cosine", grad_clip=1.0, mixed_precision=True,
)


VERDICTS: dict[int, str] = {}


@contextlib.contextmanager
def record_verdict(number: int, title: str):
    """Run a criterion body, remembering a PASS/FAIL line (plus notes) for the summary."""
    notes: list[str] = []
    try:
        yield notes.append
    except BaseException:
        VERDICTS[number] = _line(number, "FAIL", title, notes)
        raise
    VERDICTS[number] = _line(number, "PASS", title, notes)


def _line(number, status, title, notes):
    tail = f" ({'; '.join(notes)})" if notes else ""
    return f"[{status}] criterion {number:2d}: {title}{tail}"


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[n])


@dataclass
class Run:
    out: Path
    trainer: object
    sha256: str = ""

    @property
    def checkpoint(self) -> Path:
        return self.out / "checkpoint.vqb"


@pytest.fixture(scope="session")
def manifest8(tmp_path_factory):
    return write_manifest(tmp_path_factory.mktemp("data8"), 8, side=64, seed=0)


@pytest.fixture(scope="session")
def manifest16(tmp_path_factory):
    return write_manifest(tmp_path_factory.mktemp("data16"), 16, side=256, seed=1)


@pytest.fixture(scope="session")
def ml_run(tmp_path_factory, manifest8):
    out = tmp_path_factory.mktemp("ml")
    cfg = make_config("augvae_ml", "desk", **ML_OVERFIT)
    trainer = train(cfg, load_manifest(manifest8), out)
    return Run(out, trainer, file_sha256(out / "checkpoint.vqb"))


@pytest.fixture(scope="session")
def sl_run(tmp_path_factory, manifest8, ml_run):
    out = tmp_path_factory.mktemp("sl")
    cfg = make_config("augvae_sl", "desk", source_checkpoint=str(ml_run.checkpoint), **SL_FINETUNE)
    return Run(out, train(cfg, load_manifest(manifest8), out))


@pytest.fixture(scope="session")
def biart_run(tmp_path_factory, manifest16, sl_run):
    out = tmp_path_factory.mktemp("biart")
    cfg = make_config("biart", "desk", augvae_checkpoint=str(sl_run.checkpoint), **BIART_MEMORIZE)
    return Run(out, train(cfg, load_manifest(manifest16), out))
