"""Factorized decoders p(x_1|z)...p(x_M|z) p0(z) and the stage-1 ELBO trainer."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .batching import iterate_minibatches, to_tensors
from .datagen import Dataset
from .posterior import ArchitecturalInference, GaussianPosterior

log = logging.getLogger(__name__)

LIKELIHOODS = ("gaussian", "categorical")
IMAGE_OBS_SCALE = 0.1


class TrainingDiverged(RuntimeError):
    """Raised on a non-finite loss; carries the last finite parameter snapshot."""

    def __init__(self, message: str, last_good_state: dict, history: list):
        super().__init__(message)
        self.last_good_state = last_good_state
        self.history = history


@dataclass
class ModelConfig:
    shapes: list
    latent_dim: int = 64
    embed_dim: int = 256
    fused_dim: int = 256
    fusion: str = "concat"
    width: int = 32
    likelihoods: list | None = None       # per modality, default gaussian
    obs_scales: list | None = None        # per modality gaussian scale
    decoder: str = "auto"                 # auto | linear
    linear_weights: list | None = None    # fixed A_i for decoder="linear"
    decoder_trainable: bool = True

    def __post_init__(self):
        self.shapes = [list(s) for s in self.shapes]
        m = len(self.shapes)
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.likelihoods is None:
            self.likelihoods = ["gaussian"] * m
        if self.obs_scales is None:
            self.obs_scales = [IMAGE_OBS_SCALE] * m
        if len(self.likelihoods) != m or len(self.obs_scales) != m:
            raise ValueError("need one likelihood kind and one scale per modality")
        for k in self.likelihoods:
            if k not in LIKELIHOODS:
                raise ValueError(f"unknown likelihood {k!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.linear_weights is not None:
            d["linear_weights"] = [np.asarray(w, dtype=np.float64).tolist() for w in self.linear_weights]
        return d


@dataclass
class Stage1Config:
    iterations: int = 2000
    batch_size: int = 64
    lr_decoder: float = 1e-3
    lr_encoder: float = 1e-3
    kl_warmup: float = 0.1          # fraction of iterations for the 0 -> 1 ramp
    kl_weight: float = 1.0          # final weight
    seed: int = 0
    log_every: int = 50
    lr_decay: bool = True           # cosine decay to 10% over the run

    def __post_init__(self):
        if self.iterations < 0 or self.batch_size <= 0 or self.lr_decoder <= 0 or self.lr_encoder <= 0:
            raise ValueError("stage-1 counts and rates must be positive")

    def kl_weight_at(self, it: int) -> float:
        ramp = int(self.kl_warmup * self.iterations)
        if ramp <= 0:
            return self.kl_weight
        return self.kl_weight * min(1.0, (it + 1) / ramp)


# ---------------------------------------------------------------------------
# decoders


class ImageDecoder(nn.Module):
    def __init__(self, latent_dim: int, side: int, channels: int, width: int = 32):
        super().__init__()
        self.shape = (side, side, channels)
        self.base = side // 4
        self.width = width
        self.fc = nn.Sequential(nn.Linear(latent_dim, 4 * width), nn.SiLU(),
                                nn.Linear(4 * width, 2 * width * self.base**2), nn.SiLU())
        self.up = nn.Sequential(
            nn.ConvTranspose2d(2 * width, width, 4, 2, 1), nn.SiLU(),
            nn.ConvTranspose2d(width, channels, 4, 2, 1),
        )

    def forward(self, z):
        h = self.fc(z).view(-1, 2 * self.width, self.base, self.base)
        return torch.sigmoid(self.up(h)).permute(0, 2, 3, 1)


class VectorDecoder(nn.Module):
    def __init__(self, latent_dim: int, dim: int, hidden: int = 64, squash: bool = False):
        super().__init__()
        self.shape = (dim,)
        self.net = nn.Sequential(nn.Linear(latent_dim, hidden), nn.SiLU(), nn.Linear(hidden, hidden), nn.SiLU(),
                                 nn.Linear(hidden, dim))

    def forward(self, z):
        return self.net(z)


class LinearDecoder(nn.Module):
    """x_hat = A z + b."""

    def __init__(self, latent_dim: int, dim: int, weight=None, trainable: bool = True):
        super().__init__()
        self.shape = (dim,)
        self.lin = nn.Linear(latent_dim, dim)
        if weight is not None:
            with torch.no_grad():
                self.lin.weight.copy_(torch.as_tensor(np.asarray(weight)))
                self.lin.bias.zero_()
        self.lin.requires_grad_(trainable)

    def forward(self, z):
        return self.lin(z)


class DecoderBank(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.shapes = [tuple(s) for s in cfg.shapes]
        self.likelihoods = list(cfg.likelihoods)
        self.register_buffer("obs_scales", torch.tensor(cfg.obs_scales, dtype=torch.float64))
        decs = []
        for i, s in enumerate(self.shapes):
            if cfg.decoder == "linear":
                w = cfg.linear_weights[i] if cfg.linear_weights is not None else None
                decs.append(LinearDecoder(cfg.latent_dim, s[0], w, cfg.decoder_trainable))
            elif len(s) == 3:
                decs.append(ImageDecoder(cfg.latent_dim, s[0], s[2], cfg.width))
            else:
                decs.append(VectorDecoder(cfg.latent_dim, s[0], hidden=2 * cfg.width))
        self.decoders = nn.ModuleList(decs)
        self.latent_dim = cfg.latent_dim

    def forward(self, z) -> list:
        if z.shape[-1] != self.latent_dim:
            raise ValueError(f"latent has width {z.shape[-1]}, decoder expects {self.latent_dim}")
        outs = []
        for kind, dec in zip(self.likelihoods, self.decoders):
            out = dec(z)
            outs.append(out)  # categorical decoders emit logits
        return outs

    def decode_values(self, z) -> list:
        """Decoded modalities in data space (softmax probabilities for categorical modalities)."""
        return [o.softmax(-1) if k == "categorical" else o for k, o in zip(self.likelihoods, self(z))]


def log_likelihood(decoders: DecoderBank, xs: Sequence[torch.Tensor], z: torch.Tensor,
                   presence: torch.Tensor | None = None) -> torch.Tensor:
    """Per-modality log p(x_i | z), shape (B, M); absent modalities contribute 0."""
    outs = decoders(z)
    terms = []
    for i, (kind, x, out) in enumerate(zip(decoders.likelihoods, xs, outs)):
        if kind == "gaussian":
            s = decoders.obs_scales[i].to(out.dtype)
            resid = (x - out).reshape(x.shape[0], -1)
            n = resid.shape[1]
            ll = -(resid**2).sum(-1) / (2 * s**2) - 0.5 * n * torch.log(2 * math.pi * s**2)
        else:
            ll = (x * F.log_softmax(out, -1)).sum(-1)
        if presence is not None:
            ll = ll * presence[:, i].to(ll.dtype)
        if not torch.isfinite(ll).all():
            raise FloatingPointError(f"non-finite log-likelihood for modality {i}")
        terms.append(ll)
    return torch.stack(terms, -1)


def gaussian_log_likelihood_constant(n: int, scale: float) -> float:
    return -0.5 * n * math.log(2 * math.pi * scale**2)


class SharedLatentModel(nn.Module):
    """Stage-1 model: architectural inference q(z|X) plus factorized decoders."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.inference = ArchitecturalInference(cfg.shapes, cfg.latent_dim, cfg.embed_dim, cfg.fused_dim,
                                                cfg.fusion, cfg.width)
        self.decoders = DecoderBank(cfg)

    @property
    def latent_dim(self) -> int:
        return self.cfg.latent_dim

    @property
    def n_modalities(self) -> int:
        return len(self.cfg.shapes)

    def posterior(self, xs, presence=None):
        return self.inference(xs, presence)

    def embed(self, xs, presence=None):
        return self.inference.embed(xs, presence)

    def decode(self, z) -> list:
        return self.decoders.decode_values(z)

    def encoder_parameters(self):
        return self.inference.parameters()

    def decoder_parameters(self):
        return self.decoders.parameters()


def decode(model: SharedLatentModel, z: torch.Tensor) -> list:
    return model.decode(z)


def elbo(model: SharedLatentModel, xs, presence=None, kl_weight: float = 1.0,
         generator: torch.Generator | None = None, eps: torch.Tensor | None = None):
    """Single-sample reparameterized ELBO averaged over the batch.

    Returns (elbo, components) with components ``recon`` (per modality, batch mean),
    ``kl`` (batch mean) and the posterior ``q``.
    """
    _, q = model.posterior(xs, presence)
    z = q.sample(generator, eps)
    ll = log_likelihood(model.decoders, xs, z, presence)
    kl = q.kl_standard_normal()
    value = (ll.sum(-1) - kl_weight * kl).mean()
    if not torch.isfinite(value):
        raise FloatingPointError(
            f"non-finite ELBO (recon={ll.mean(0).tolist()}, kl={kl.mean().item()})"
        )
    return value, {"recon": ll.mean(0), "kl": kl.mean(), "q": q}


# ---------------------------------------------------------------------------
# linear-Gaussian closed forms (decoder="linear", gaussian likelihoods)


def _linear_params(model: SharedLatentModel):
    mats, biases, scales = [], [], []
    for i, dec in enumerate(model.decoders.decoders):
        if not isinstance(dec, LinearDecoder) or model.decoders.likelihoods[i] != "gaussian":
            raise TypeError("closed forms need linear decoders with gaussian likelihoods")
        mats.append(dec.lin.weight.detach().double())
        biases.append(dec.lin.bias.detach().double())
        scales.append(float(model.decoders.obs_scales[i]))
    return mats, biases, scales


def linear_log_marginal(model: SharedLatentModel, xs) -> torch.Tensor:
    """Exact log p(X) = log N(X; b, A A^T + S) for a linear-Gaussian decoder bank."""
    mats, biases, scales = _linear_params(model)
    A = torch.cat(mats, 0)
    b = torch.cat(biases, 0)
    s2 = torch.cat([torch.full((m.shape[0],), s**2, dtype=torch.float64) for m, s in zip(mats, scales)])
    cov = A @ A.T + torch.diag(s2)
    x = torch.cat([x.double() for x in xs], -1)
    dist = torch.distributions.MultivariateNormal(b, covariance_matrix=cov)
    return dist.log_prob(x)


def linear_true_posterior(model: SharedLatentModel, xs) -> GaussianPosterior | tuple:
    """Exact p(z|X) under the model's linear decoders: returns (means (B,d), covariance (d,d))."""
    mats, biases, scales = _linear_params(model)
    d = mats[0].shape[1]
    prec = torch.eye(d, dtype=torch.float64)
    rhs = 0
    for A, b, s, x in zip(mats, biases, scales, xs):
        prec = prec + A.T @ A / s**2
        rhs = rhs + (x.double() - b) @ A / s**2
    cov = torch.linalg.inv(prec)
    return rhs @ cov, cov


def linear_analytic_elbo(model: SharedLatentModel, xs, q: GaussianPosterior | None = None) -> torch.Tensor:
    """Exact expectation of the ELBO integrand under q, per sample (linear decoders only)."""
    mats, biases, scales = _linear_params(model)
    if q is None:
        _, q = model.posterior([x.to(next(model.parameters()).dtype) for x in xs])
    mu, var = q.mean.double(), q.variance.double()
    total = 0
    for A, b, s, x in zip(mats, biases, scales, xs):
        resid = x.double() - mu @ A.T - b
        trace = (var @ (A**2).T).sum(-1)
        n = A.shape[0]
        total = total - ((resid**2).sum(-1) + trace) / (2 * s**2) - 0.5 * n * math.log(2 * math.pi * s**2)
    kl = 0.5 * (var + mu**2 - 1.0 - var.log()).sum(-1)
    return total - kl


# ---------------------------------------------------------------------------
# training


def _lr_factor(cfg: Stage1Config, it: int) -> float:
    if not cfg.lr_decay or cfg.iterations == 0:
        return 1.0
    return 0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * it / cfg.iterations))


def train_stage1(dataset: Dataset, model_cfg: ModelConfig, cfg: Stage1Config,
                 model: SharedLatentModel | None = None, curve_path=None):
    """Maximize the ELBO over encoders, fusion, posterior head and decoders.

    Training always uses the full modality set. Returns ``(model, history)`` where
    history is a list of curve records.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    torch.manual_seed(cfg.seed)
    model = model if model is not None else SharedLatentModel(model_cfg)
    if cfg.iterations == 0:
        return model, []
    opt = torch.optim.Adam([
        {"params": [p for p in model.decoder_parameters() if p.requires_grad], "lr": cfg.lr_decoder},
        {"params": list(model.encoder_parameters()), "lr": cfg.lr_encoder},
    ])
    base_lrs = [g["lr"] for g in opt.param_groups]
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    batches = iterate_minibatches(len(dataset), min(cfg.batch_size, len(dataset)), rng)
    dtype = next(model.parameters()).dtype
    history = []
    last_good = {k: v.detach().clone() for k, v in model.state_dict().items()}
    curve = open(curve_path, "a") if curve_path is not None else None
    try:
        for it in range(cfg.iterations):
            xs, _, _ = to_tensors(dataset, next(batches), dtype)
            w = cfg.kl_weight_at(it)
            for g, lr in zip(opt.param_groups, base_lrs):
                g["lr"] = lr * _lr_factor(cfg, it)
            try:
                value, comps = elbo(model, xs, None, w, gen)
            except FloatingPointError as err:
                raise TrainingDiverged(f"stage-1 diverged at iteration {it}: {err}", last_good, history) from err
            opt.zero_grad()
            (-value).backward()
            opt.step()
            if it % cfg.log_every == 0 or it == cfg.iterations - 1:
                rec = {"iteration": it, "elbo": value.item(), "kl": comps["kl"].item(),
                       "kl_weight": w, "recon": comps["recon"].tolist()}
                history.append(rec)
                if curve is not None:
                    curve.write(json.dumps(rec) + "\n")
                last_good = {k: v.detach().clone() for k, v in model.state_dict().items()}
    finally:
        if curve is not None:
            curve.close()
    return model, history


@torch.no_grad()
def encode_dataset(model: SharedLatentModel, dataset: Dataset, batch_size: int = 512,
                   presence=None) -> tuple[list, GaussianPosterior]:
    """Embeddings h_1..h_M (list of (N, E)) and q(z|X) for every row."""
    from .batching import chunks

    dtype = next(model.parameters()).dtype
    hs_all, means, vars_ = [], [], []
    for sl in chunks(len(dataset), batch_size):
        xs, pres, _ = to_tensors(dataset, sl, dtype)
        if presence is not None:
            pres = torch.as_tensor(presence[sl])
        hs, q = model.posterior(xs, pres if presence is not None else None)
        hs_all.append(hs)
        means.append(q.mean)
        vars_.append(q.variance)
    hs = [torch.cat([h[i] for h in hs_all]) for i in range(model.n_modalities)]
    return hs, GaussianPosterior(torch.cat(means), torch.cat(vars_))


@torch.no_grad()
def decode_batched(model: SharedLatentModel, z: torch.Tensor, batch_size: int = 512) -> list:
    from .batching import chunks

    outs = [model.decode(z[sl]) for sl in chunks(len(z), batch_size)]
    if not outs:
        return [torch.zeros((0, *s)) for s in model.cfg.shapes]
    return [torch.cat([o[i] for o in outs]) for i in range(model.n_modalities)]
