import numpy as np
import pytest
import torch

from sharedlatent.datagen import Dataset, corrupt_dataset
from sharedlatent.workflows import (
    WorkflowError,
    cross_modal_generate,
    joint_generate,
    latent_correct,
    reconstruct,
    stage1_prior_generate,
    stream,
    style_transfer,
)


def _same(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def test_streams_are_independent_and_repeatable():
    a = torch.randn(4, generator=stream(3, 0))
    assert torch.equal(a, torch.randn(4, generator=stream(3, 0)))
    assert not torch.equal(a, torch.randn(4, generator=stream(3, 1)))
    assert not torch.equal(a, torch.randn(4, generator=stream(4, 0)))


def test_joint_empty_request(tiny_pipeline):
    res = joint_generate(tiny_pipeline, 0, seed=1)
    assert len(res) == 0 and res.nfe == 0
    assert [s.shape[0] for s in res.samples] == [0, 0, 0]


def test_joint_shapes_nfe_and_determinism(tiny_pipeline):
    a = joint_generate(tiny_pipeline, 12, seed=5)
    b = joint_generate(tiny_pipeline, 12, seed=5)
    c = joint_generate(tiny_pipeline, 12, seed=6)
    assert a.nfe == tiny_pipeline.T + 1
    assert [s.shape for s in a.samples] == [(12, 16, 16, 3)] * 3
    assert _same(a.samples, b.samples)
    assert not _same(a.samples, c.samples)
    assert a.provenance[3] == {"index": 3, "mode": "joint", "seed": 5, "K": None, "guidance": None,
                               "conditioning_modality": None}


def test_rerun_from_provenance_is_bit_exact(tiny_pipeline, trained_glyph_model):
    _, _, test, _ = trained_glyph_model
    obs = test.subset(np.arange(10))
    first = cross_modal_generate(tiny_pipeline, obs, seed=9, guidance=2.0)
    req = first.request
    again = cross_modal_generate(tiny_pipeline, obs, seed=req["seed"], guidance=req["guidance"])
    assert _same(first.samples, again.samples)
    assert first.provenance == again.provenance


def test_cross_with_zero_guidance_is_the_joint_path(tiny_pipeline, trained_glyph_model):
    _, _, test, _ = trained_glyph_model
    obs = test.subset(np.arange(8))
    cross = cross_modal_generate(tiny_pipeline, obs, seed=4, guidance=0.0)
    joint = joint_generate(tiny_pipeline, 8, seed=4)
    assert _same(cross.samples, joint.samples)


def test_cross_needs_an_observed_modality(tiny_pipeline, trained_glyph_model):
    _, _, test, _ = trained_glyph_model
    obs = test.subset(np.arange(4))
    presence = obs.presence.copy()
    presence[2] = False
    with pytest.raises(WorkflowError):
        cross_modal_generate(tiny_pipeline, Dataset(obs.modalities, obs.labels, presence), seed=0)


def test_cross_conditions_on_present_modalities_uniformly(tiny_pipeline, trained_glyph_model):
    _, _, test, _ = trained_glyph_model
    obs = test.subset(np.arange(300))
    presence = np.ones_like(obs.presence)
    presence[:150, 1] = False
    res = cross_modal_generate(tiny_pipeline, Dataset(obs.modalities, obs.labels, presence), seed=0)
    j = np.array([p["conditioning_modality"] for p in res.provenance])
    assert not np.any(j[:150] == 1)
    assert res.nfe == tiny_pipeline.T + 1
    # 150 draws over three modalities: each share within 4 standard errors of 1/3
    se = np.sqrt(1 / 3 * 2 / 3 / 150)
    for m in range(3):
        assert abs(np.mean(j[150:] == m) - 1 / 3) < 4 * se


def test_correct_with_zero_steps_is_plain_reconstruction(tiny_pipeline, trained_glyph_model):
    _, _, test, _ = trained_glyph_model
    obs = test.subset(np.arange(10))
    mask = np.array([False, True, False])
    bad = corrupt_dataset(obs, mask, "blank")
    res = latent_correct(tiny_pipeline, bad, mask, 0, seed=3)
    assert res.nfe == 1
    assert _same(res.samples, reconstruct(tiny_pipeline.model, bad, seed=3, use_mean=False))


def test_correct_uses_k_denoiser_calls(tiny_pipeline, trained_glyph_model):
    _, _, test, _ = trained_glyph_model
    obs = test.subset(np.arange(6))
    mask = [True, False, False]
    res = latent_correct(tiny_pipeline, corrupt_dataset(obs, mask, "noise", seed=1), mask, 12, seed=0)
    assert res.nfe == 13
    assert all(p["conditioning_modality"] == 1 for p in res.provenance)


def test_correct_validates_inputs(tiny_pipeline, trained_glyph_model):
    _, _, test, _ = trained_glyph_model
    obs = test.subset(np.arange(4))
    with pytest.raises(WorkflowError):
        latent_correct(tiny_pipeline, obs, [True, False, False], tiny_pipeline.T + 1)
    with pytest.raises(WorkflowError):
        latent_correct(tiny_pipeline, obs, [True, False, False], -1)
    with pytest.raises(WorkflowError):
        latent_correct(tiny_pipeline, obs, [True, True, True], 5)


def test_style_zero_steps_reconstructs_source(tiny_pipeline, trained_glyph_model):
    _, _, test, _ = trained_glyph_model
    src, ref = test.subset(np.arange(8)), test.subset(np.arange(8, 16))
    res = style_transfer(tiny_pipeline, src, ref, 0, seed=2)
    assert _same(res.samples, reconstruct(tiny_pipeline.model, src, seed=2, use_mean=False))


def test_style_full_noise_forgets_the_source(tiny_pipeline, trained_glyph_model):
    _, _, test, _ = trained_glyph_model
    ref = test.subset(np.arange(8))
    a = style_transfer(tiny_pipeline, test.subset(np.arange(8, 16)), ref, tiny_pipeline.T, seed=2)
    b = style_transfer(tiny_pipeline, test.subset(np.arange(16, 24)), ref, tiny_pipeline.T, seed=2)
    assert _same(a.samples, b.samples)
    assert a.nfe == tiny_pipeline.T + 1


def test_style_validates_inputs(tiny_pipeline, trained_glyph_model):
    _, _, test, _ = trained_glyph_model
    with pytest.raises(WorkflowError):
        style_transfer(tiny_pipeline, test.subset(np.arange(3)), test.subset(np.arange(4)), 5)
    with pytest.raises(WorkflowError):
        style_transfer(tiny_pipeline, test.subset(np.arange(3)), test.subset(np.arange(3)), tiny_pipeline.T + 1)


def test_generation_result_to_dataset(tiny_pipeline):
    res = joint_generate(tiny_pipeline, 5, seed=0)
    ds = res.to_dataset()
    assert len(ds) == 5 and ds.presence.all()
    assert ds.spec["params"]["mode"] == "joint"


def test_stage1_prior_baseline_is_seeded(tiny_pipeline):
    a, za = stage1_prior_generate(tiny_pipeline.model, 6, seed=1)
    b, zb = stage1_prior_generate(tiny_pipeline.model, 6, seed=1)
    assert np.array_equal(za, zb) and _same(a, b)
