import sys

import numpy as np
import pytest
import torch

from sharedlatent.datagen import GlyphDatasetSpec, make_glyph_dataset
from sharedlatent.metrics import train_classifier_bank


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def glyphs_small():
    return make_glyph_dataset(GlyphDatasetSpec.default(3, 3000, seed=11))


@pytest.fixture(scope="session")
def glyph_classifiers(glyphs_small):
    return train_classifier_bank(glyphs_small, seed=0, iterations=500)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def trained_glyph_model(glyphs_small, glyph_classifiers):
    """A small stage-1 model fitted on glyph tuples: (model, train, test, classifiers)."""
    from sharedlatent.generator import ModelConfig, Stage1Config, train_stage1

    torch.set_num_threads(1)
    train, test = glyphs_small.split(2500)
    cfg = ModelConfig(train.modality_shapes, latent_dim=16, embed_dim=64, fused_dim=128, width=16)
    model, _ = train_stage1(train, cfg, Stage1Config(iterations=800, batch_size=64, lr_encoder=2e-3,
                                                      lr_decoder=2e-3, seed=0))
    return model.eval(), train, test, glyph_classifiers


@pytest.fixture(scope="session")
def tiny_pipeline(trained_glyph_model):
    """Stage-1 model plus a briefly trained 50-step prior."""
    from sharedlatent.diffusion import Stage2Config, train_stage2
    from sharedlatent.workflows import Pipeline

    torch.set_num_threads(1)
    model, train, test, classifiers = trained_glyph_model
    prior, _ = train_stage2(train, model, Stage2Config(iterations=600, steps=50, width=64, depth=2, seed=0))
    return Pipeline(model, prior.eval())


def pytest_terminal_summary(terminalreporter):
    lines = getattr(sys.modules.get("test_acceptance"), "LINES", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
