"""Generation pipelines over a trained stage-1 model and stage-2 prior.

Each request is reproducible from (mode, seed, K, guidance, inputs). Random streams are
split from the request seed: stream 0 drives diffusion noise, stream 1 the choice of
conditioning modality, stream 2 posterior draws.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .batching import chunks, to_tensors
from .datagen import Dataset
from .diffusion import ConditionalPrior, forward_marginal, noise_latent, sample_prior
from .generator import SharedLatentModel

MODES = ("joint", "cross", "correct", "style")


class WorkflowError(ValueError):
    pass


def stream(seed: int, k: int) -> torch.Generator:
    state = np.random.SeedSequence([int(seed), int(k)]).generate_state(2, dtype=np.uint64)
    return torch.Generator().manual_seed(int(state[0] % (2**63)))


@dataclass
class Pipeline:
    model: SharedLatentModel
    prior: ConditionalPrior
    guidance: float = 1.0

    @property
    def T(self) -> int:
        return self.prior.T

    @property
    def n_modalities(self) -> int:
        return self.model.n_modalities

    @torch.no_grad()
    def conditions(self, xs, presence=None) -> list:
        """Per-modality conditioning vectors for the prior."""
        if self.prior.raw_encoders is not None:
            return self.prior.condition_vectors(xs)
        return self.model.embed(xs, presence)


@dataclass
class GenerationResult:
    samples: list                 # per-modality arrays (N, ...)
    provenance: list              # one dict per sample
    request: dict
    nfe: int = 0
    latents: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.provenance)

    def to_dataset(self, labels=None) -> Dataset:
        n = len(self)
        m = len(self.samples)
        lab = np.zeros(n, dtype=np.int64) if labels is None else np.asarray(labels)
        return Dataset([np.asarray(s, dtype=np.float32) for s in self.samples], lab,
                       np.ones((n, m), dtype=bool), {"generator": "workflow", "params": self.request})


def _provenance(request: dict, n: int, cond_idx=None) -> list:
    out = []
    for i in range(n):
        rec = {"index": i, "mode": request["mode"], "seed": request["seed"], "K": request.get("K"),
               "guidance": request.get("guidance"),
               "conditioning_modality": None if cond_idx is None else int(cond_idx[i])}
        out.append(rec)
    return out


@torch.no_grad()
def _decode(model: SharedLatentModel, z: torch.Tensor) -> list:
    outs = [[o.numpy() for o in model.decode(z[sl])] for sl in chunks(len(z), 512)]
    if not outs:
        return [np.zeros((0, *s), dtype=np.float32) for s in model.cfg.shapes]
    return [np.concatenate([o[j] for o in outs]) for j in range(model.n_modalities)]


def nfe_total(denoiser_calls: int) -> int:
    """Denoiser passes plus the single decoder pass."""
    return denoiser_calls + 1


@torch.no_grad()
def joint_generate(pipe: Pipeline, n: int, seed: int = 0, guidance: float | None = None) -> GenerationResult:
    """Unconditional joint synthesis: z_0 from the prior's null-condition branch, decoded by every decoder."""
    request = {"mode": "joint", "n": n, "seed": seed, "K": None, "guidance": guidance}
    if n == 0:
        return GenerationResult([np.zeros((0, *s), np.float32) for s in pipe.model.cfg.shapes], [], request,
                                nfe=0, latents=np.zeros((0, pipe.model.latent_dim), np.float32))
    z, calls = sample_prior(pipe.prior, n, generator=stream(seed, 0))
    return GenerationResult(_decode(pipe.model, z), _provenance(request, n), request, nfe_total(calls),
                            z.numpy())


@torch.no_grad()
def cross_modal_generate(pipe: Pipeline, observed: Dataset, seed: int = 0,
                         guidance: float | None = None) -> GenerationResult:
    """Condition on one present modality per row (uniform among present ones) and decode all modalities.

    Observed slots are re-decoded, not copied through.
    """
    w = pipe.guidance if guidance is None else guidance
    if (~observed.presence.any(-1)).any():
        raise WorkflowError("every row needs at least one observed modality")
    n = len(observed)
    request = {"mode": "cross", "n": n, "seed": seed, "K": None, "guidance": w}
    xs, presence, _ = to_tensors(observed)
    conds = pipe.conditions(xs, presence)
    weights = presence.to(torch.float64)
    j = torch.multinomial(weights, 1, generator=stream(seed, 1))[:, 0]
    cond = torch.stack(conds)[j, torch.arange(n)]
    z, calls = sample_prior(pipe.prior, n, cond, w, stream(seed, 0))
    return GenerationResult(_decode(pipe.model, z), _provenance(request, n, j.numpy()), request,
                            nfe_total(calls), z.numpy())


@torch.no_grad()
def _partial_regenerate(pipe: Pipeline, z0: torch.Tensor, k: int, cond, w: float, seed: int):
    gen = stream(seed, 0)
    if k == 0:
        return z0, 0
    if k == pipe.T:
        # full noising: start from the terminal distribution itself
        zk = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
    else:
        zk = noise_latent(pipe.prior, z0, k, gen)
    return sample_prior(pipe.prior, len(z0), cond, w, gen, z_start=zk, start=k)


@torch.no_grad()
def latent_correct(pipe: Pipeline, corrupted: Dataset, corrupted_mask, k: int, seed: int = 0,
                   guidance: float | None = None) -> GenerationResult:
    """Encode the corrupted tuple, noise its latent k steps, and denoise conditioned on the first clean modality."""
    w = pipe.guidance if guidance is None else guidance
    if not 0 <= k <= pipe.T:
        raise WorkflowError(f"K must lie in [0, {pipe.T}]")
    n = len(corrupted)
    mask = np.broadcast_to(np.asarray(corrupted_mask, dtype=bool), (n, corrupted.n_modalities))
    clean = ~mask & corrupted.presence
    if (~clean.any(-1)).any():
        raise WorkflowError("every row needs an uncorrupted modality")
    request = {"mode": "correct", "n": n, "seed": seed, "K": k, "guidance": w}
    xs, presence, _ = to_tensors(corrupted)
    _, q = pipe.model.posterior(xs, presence)
    z_hat = q.sample(stream(seed, 2))
    j = torch.as_tensor(np.argmax(clean, axis=-1))
    cond = torch.stack(pipe.conditions(xs, presence))[j, torch.arange(n)]
    z, calls = _partial_regenerate(pipe, z_hat, k, cond, w, seed)
    return GenerationResult(_decode(pipe.model, z), _provenance(request, n, j.numpy()), request,
                            nfe_total(calls), z.numpy())


@torch.no_grad()
def style_transfer(pipe: Pipeline, source: Dataset, reference: Dataset, k: int, seed: int = 0,
                   guidance: float | None = None) -> GenerationResult:
    """Noise the source latent k steps, then denoise conditioned on one embedding of the reference tuple.

    The same reference embedding conditions every reverse step.
    """
    w = pipe.guidance if guidance is None else guidance
    if not 0 <= k <= pipe.T:
        raise WorkflowError(f"K must lie in [0, {pipe.T}]")
    if len(source) != len(reference):
        raise WorkflowError("source and reference must pair up row by row")
    n = len(source)
    request = {"mode": "style", "n": n, "seed": seed, "K": k, "guidance": w}
    xs, presence, _ = to_tensors(source)
    _, q = pipe.model.posterior(xs, presence)
    z_src = q.sample(stream(seed, 2))
    xr, pr, _ = to_tensors(reference)
    j = torch.multinomial(pr.to(torch.float64), 1, generator=stream(seed, 1))[:, 0]
    cond = torch.stack(pipe.conditions(xr, pr))[j, torch.arange(n)]
    z, calls = _partial_regenerate(pipe, z_src, k, cond, w, seed)
    return GenerationResult(_decode(pipe.model, z), _provenance(request, n, j.numpy()), request,
                            nfe_total(calls), z.numpy())


@torch.no_grad()
def reconstruct(model: SharedLatentModel, data: Dataset, seed: int = 0, use_mean: bool = True) -> list:
    xs, presence, _ = to_tensors(data)
    _, q = model.posterior(xs, presence)
    z = q.mean if use_mean else q.sample(stream(seed, 2))
    return _decode(model, z)


@torch.no_grad()
def stage1_prior_generate(model: SharedLatentModel, n: int, seed: int = 0) -> tuple[list, np.ndarray]:
    """Decode z ~ N(0, I): the stage-1-only sampling baseline."""
    z = torch.randn((n, model.latent_dim), generator=stream(seed, 0))
    return _decode(model, z), z.numpy()
