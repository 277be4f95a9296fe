import numpy as np
import torch

from sharedlatent.baselines import MoEModel, moe_cross_generate, moe_joint_generate, train_moe
from sharedlatent.datagen import LinearGaussianSpec, make_linear_gaussian_dataset
from sharedlatent.diffusion import state_digest
from sharedlatent.generator import ModelConfig, Stage1Config, log_likelihood
from sharedlatent.posterior import moe_log_prob


def _linear_setup(n=64, seed=0):
    spec = LinearGaussianSpec.orthogonal(2, (4, 3), n, seed, 0.5)
    ds, _ = make_linear_gaussian_dataset(spec)
    cfg = ModelConfig([[4], [3]], latent_dim=2, embed_dim=8, width=8, obs_scales=[0.5, 0.5], decoder="linear",
                      linear_weights=[np.asarray(A) for A in spec.matrices], decoder_trainable=False)
    return spec, ds, cfg


def _log_marginal(spec, xs):
    A = np.concatenate([np.asarray(a) for a in spec.matrices])
    x = np.concatenate(xs, axis=1)
    cov = A @ A.T + 0.25 * np.eye(A.shape[0])
    _, logdet = np.linalg.slogdet(cov)
    quad = np.einsum("ni,ij,nj->n", x, np.linalg.inv(cov), x)
    return -0.5 * (quad + logdet + A.shape[0] * np.log(2 * np.pi))


def test_mixture_elbo_is_a_lower_bound():
    spec, ds, cfg = _linear_setup(8)
    torch.manual_seed(0)
    model = MoEModel(cfg).double()
    xs = [torch.as_tensor(m) for m in ds.modalities]
    g = torch.Generator().manual_seed(0)
    # per-row Monte Carlo average of the bound
    draws = []
    for _ in range(400):
        qs = model.experts(xs)
        total = 0.0
        for q in qs:
            z = q.sample(g)
            ll = log_likelihood(model.decoders, xs, z).sum(-1)
            log_p = -0.5 * (z**2).sum(-1) - z.shape[-1] * 0.5 * np.log(2 * np.pi)
            total = total + (ll + log_p - moe_log_prob(qs, z)).detach()
        draws.append((total / len(qs)).numpy())
    draws = np.stack(draws)
    mean, se = draws.mean(0), draws.std(0) / np.sqrt(len(draws))
    assert np.all(mean <= _log_marginal(spec, ds.modalities) + 4 * se)


def test_zero_iterations_returns_fresh_model():
    _, ds, cfg = _linear_setup()
    model, history = train_moe(ds, cfg, Stage1Config(iterations=0))
    assert history == [] and isinstance(model, MoEModel)


def test_training_is_seeded_and_improves_the_bound():
    _, ds, cfg = _linear_setup(256)
    scfg = Stage1Config(iterations=150, batch_size=64, lr_encoder=5e-3, seed=3, log_every=10)
    a, hist = train_moe(ds, cfg, scfg)
    b, _ = train_moe(ds, cfg, scfg)
    assert state_digest(a) == state_digest(b)
    assert np.mean([h["elbo"] for h in hist[-3:]]) > np.mean([h["elbo"] for h in hist[:3]])


def test_cross_and_joint_generation(glyphs_small):
    data = glyphs_small.subset(np.arange(20))
    cfg = ModelConfig(data.modality_shapes, latent_dim=4, embed_dim=8, width=4)
    torch.manual_seed(0)
    model = MoEModel(cfg).eval()
    a = moe_cross_generate(model, data, 1, seed=2)
    b = moe_cross_generate(model, data, 1, seed=2)
    assert [x.shape for x in a] == [(20, 16, 16, 3)] * 3
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    joint = moe_joint_generate(model, 5, seed=0)
    assert [x.shape for x in joint] == [(5, 16, 16, 3)] * 3
    assert all((x >= 0).all() and (x <= 1).all() for x in joint)
