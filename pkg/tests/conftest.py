from __future__ import annotations

import numpy as np
import pytest

from idleak.corpus import CorpusManifest, render_corpus
from idleak.embedder import EmbedderModel, EmbedderNet, Source, TeacherConfig, train_teacher

SMALL_WIDTHS = (8, 16, 32, 32)
SMALL_DIM = 128


@pytest.fixture(scope="session")
def tiny_manifest() -> CorpusManifest:
    return CorpusManifest(seed=3, n_identities=16, images_per_identity=6)


@pytest.fixture(scope="session")
def tiny_corpus(tiny_manifest):
    return render_corpus(tiny_manifest)


@pytest.fixture(scope="session")
def small_teacher(tiny_corpus) -> EmbedderModel:
    cfg = TeacherConfig(steps=150, batch_size=32, widths=SMALL_WIDTHS, embed_dim=SMALL_DIM)
    return train_teacher(tiny_corpus.split("train"), cfg)


@pytest.fixture
def random_teacher() -> EmbedderModel:
    import torch

    torch.manual_seed(0)
    return EmbedderModel(EmbedderNet(3, 64, SMALL_DIM, SMALL_WIDTHS), Source.TEACHER)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
