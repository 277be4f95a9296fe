"""Joint inference: deterministic per-modality embeddings fused into one Gaussian.

Also holds the product- and mixture-of-experts posteriors used by baselines.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

FUSION_VARIANTS = ("concat", "sum", "gated")
LOGVAR_CLAMP = (-8.0, 8.0)


@dataclass
class GaussianPosterior:
    """Diagonal Gaussian with ``mean`` and ``variance`` of shape (..., d)."""

    mean: torch.Tensor
    variance: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.variance.shape:
            raise ValueError(f"mean {tuple(self.mean.shape)} vs variance {tuple(self.variance.shape)}")

    def validate(self) -> "GaussianPosterior":
        if not (torch.isfinite(self.mean).all() and torch.isfinite(self.variance).all()):
            raise ValueError("non-finite posterior parameters")
        if (self.variance <= 0).any():
            raise ValueError("posterior variance must be strictly positive")
        return self

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def sample(self, generator: torch.Generator | None = None, eps: torch.Tensor | None = None) -> torch.Tensor:
        if eps is None:
            eps = torch.randn(self.mean.shape, generator=generator, dtype=self.mean.dtype)
        return self.mean + self.variance.sqrt() * eps

    def log_prob(self, z: torch.Tensor) -> torch.Tensor:
        return -0.5 * (((z - self.mean) ** 2) / self.variance + self.variance.log()
                       + torch.log(torch.tensor(2 * torch.pi, dtype=z.dtype))).sum(-1)

    def kl_standard_normal(self) -> torch.Tensor:
        """KL(q || N(0, I)), summed over the latent dimension."""
        return 0.5 * (self.variance + self.mean**2 - 1.0 - self.variance.log()).sum(-1)

    def kl(self, other: "GaussianPosterior") -> torch.Tensor:
        return 0.5 * (
            other.variance.log() - self.variance.log()
            + (self.variance + (self.mean - other.mean) ** 2) / other.variance - 1.0
        ).sum(-1)

    def __getitem__(self, idx) -> "GaussianPosterior":
        return GaussianPosterior(self.mean[idx], self.variance[idx])


def sample_posterior(q: GaussianPosterior, generator: torch.Generator | None = None) -> torch.Tensor:
    """Reparameterized draw z = mean + sqrt(variance) * eps."""
    return q.validate().sample(generator)


# ---------------------------------------------------------------------------
# encoders


def to_channels_first(x: torch.Tensor) -> torch.Tensor:
    return x.permute(0, 3, 1, 2)


class ImageEncoder(nn.Module):
    def __init__(self, side: int, channels: int, embed_dim: int, width: int = 32):
        super().__init__()
        if side % 4:
            raise ValueError("image side must be divisible by 4")
        self.shape = (side, side, channels)
        self.net = nn.Sequential(
            nn.Conv2d(channels, width, 4, 2, 1), nn.SiLU(),
            nn.Conv2d(width, 2 * width, 4, 2, 1), nn.SiLU(),
            nn.Flatten(),
            nn.Linear(2 * width * (side // 4) ** 2, embed_dim), nn.SiLU(),
            nn.Linear(embed_dim, embed_dim),
        )

    def forward(self, x):
        return self.net(to_channels_first(x))


class VectorEncoder(nn.Module):
    def __init__(self, dim: int, embed_dim: int, hidden: int = 64):
        super().__init__()
        self.shape = (dim,)
        self.net = nn.Sequential(
            nn.Linear(dim, hidden), nn.SiLU(), nn.Linear(hidden, hidden), nn.SiLU(), nn.Linear(hidden, embed_dim)
        )

    def forward(self, x):
        return self.net(x)


def make_encoder(shape: Sequence[int], embed_dim: int, width: int = 32) -> nn.Module:
    if len(shape) == 3:
        return ImageEncoder(shape[0], shape[2], embed_dim, width)
    if len(shape) == 1:
        return VectorEncoder(shape[0], embed_dim, hidden=2 * width)
    raise ValueError(f"unsupported modality shape {tuple(shape)}")


class ModalityEncoderBank(nn.Module):
    """One deterministic encoder per modality plus a learned null embedding each."""

    def __init__(self, shapes: Sequence[Sequence[int]], embed_dim: int = 256, width: int = 32):
        super().__init__()
        self.shapes = [tuple(s) for s in shapes]
        self.embed_dim = embed_dim
        self.encoders = nn.ModuleList(make_encoder(s, embed_dim, width) for s in self.shapes)
        self.null = nn.Parameter(0.02 * torch.randn(len(self.shapes), embed_dim))

    @property
    def n_modalities(self) -> int:
        return len(self.shapes)

    def encode_one(self, i: int, x: torch.Tensor) -> torch.Tensor:
        if tuple(x.shape[1:]) != self.shapes[i]:
            raise ValueError(f"modality {i}: expected shape {self.shapes[i]}, got {tuple(x.shape[1:])}")
        return self.encoders[i](x)

    def forward(self, xs: Sequence[torch.Tensor], presence: torch.Tensor | None = None) -> list:
        if len(xs) != self.n_modalities:
            raise ValueError(f"expected {self.n_modalities} modalities, got {len(xs)}")
        hs = []
        for i, x in enumerate(xs):
            h = self.encode_one(i, x)
            if presence is not None:
                keep = presence[:, i : i + 1].to(h.dtype)
                h = keep * h + (1.0 - keep) * self.null[i].to(h.dtype)
            hs.append(h)
        return hs


def encode_modalities(bank: ModalityEncoderBank, xs, presence=None) -> list:
    return bank(xs, presence)


# ---------------------------------------------------------------------------
# fusion and posterior head


def _trunk(in_dim: int, hidden: int, out_dim: int) -> nn.Sequential:
    # four affine layers
    return nn.Sequential(
        nn.Linear(in_dim, hidden), nn.SiLU(),
        nn.Linear(hidden, hidden), nn.SiLU(),
        nn.Linear(hidden, hidden), nn.SiLU(),
        nn.Linear(hidden, out_dim),
    )


class Gate(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.lin = nn.Linear(dim, dim)

    def forward(self, h):
        return h * torch.sigmoid(self.lin(h))


class FusionHead(nn.Module):
    """concat: F([h_1..h_M]); sum: F(sum h_i); gated: F([g_1(h_1)..g_M(h_M)])."""

    def __init__(self, variant: str, n_modalities: int, embed_dim: int, fused_dim: int = 256,
                 hidden: int | None = None):
        super().__init__()
        if variant not in FUSION_VARIANTS:
            raise ValueError(f"unknown fusion variant {variant!r}")
        self.variant = variant
        self.n_modalities = n_modalities
        self.embed_dim = embed_dim
        self.fused_dim = fused_dim
        in_dim = embed_dim if variant == "sum" else n_modalities * embed_dim
        self.in_dim = in_dim
        self.trunk = _trunk(in_dim, hidden or fused_dim, fused_dim)
        self.gates = nn.ModuleList(Gate(embed_dim) for _ in range(n_modalities)) if variant == "gated" else None

    def forward(self, hs: Sequence[torch.Tensor]) -> torch.Tensor:
        if len(hs) != self.n_modalities:
            raise ValueError(f"fusion head configured for {self.n_modalities} embeddings, got {len(hs)}")
        if self.variant == "sum":
            x = torch.stack(list(hs)).sum(0)
        elif self.variant == "gated":
            x = torch.cat([g(h) for g, h in zip(self.gates, hs)], -1)
        else:
            x = torch.cat(list(hs), -1)
        return self.trunk(x)


def fuse(hs, head: FusionHead) -> torch.Tensor:
    return head(hs)


class PosteriorHead(nn.Module):
    def __init__(self, fused_dim: int, latent_dim: int, clamp=LOGVAR_CLAMP):
        super().__init__()
        self.fused_dim = fused_dim
        self.clamp = tuple(clamp)
        self.mean = nn.Linear(fused_dim, latent_dim)
        self.logvar = nn.Linear(fused_dim, latent_dim)

    def forward(self, hbar: torch.Tensor) -> GaussianPosterior:
        if hbar.shape[-1] != self.fused_dim:
            raise ValueError(f"fused vector width {hbar.shape[-1]} != {self.fused_dim}")
        logvar = self.logvar(hbar).clamp(*self.clamp)
        q = GaussianPosterior(self.mean(hbar), logvar.exp())
        if not (torch.isfinite(q.mean).all() and torch.isfinite(q.variance).all()):
            raise FloatingPointError("non-finite posterior parameters")
        return q


def posterior_params(hbar: torch.Tensor, head: PosteriorHead) -> GaussianPosterior:
    return head(hbar)


class ArchitecturalInference(nn.Module):
    """encoders -> fusion -> Gaussian head, i.e. q(z | X) from fused deterministic embeddings."""

    def __init__(self, shapes, latent_dim: int = 64, embed_dim: int = 256, fused_dim: int = 256,
                 fusion: str = "concat", width: int = 32):
        super().__init__()
        self.bank = ModalityEncoderBank(shapes, embed_dim, width)
        self.fusion = FusionHead(fusion, len(self.bank.shapes), embed_dim, fused_dim)
        self.head = PosteriorHead(fused_dim, latent_dim)
        self.latent_dim = latent_dim

    def embed(self, xs, presence=None) -> list:
        return self.bank(xs, presence)

    def forward(self, xs, presence=None):
        hs = self.bank(xs, presence)
        q = self.head(self.fusion(hs))
        return hs, q


# ---------------------------------------------------------------------------
# product / mixture of experts


def poe_posterior(experts: Sequence[GaussianPosterior], include_prior: bool = True) -> GaussianPosterior:
    """Precision-weighted product of Gaussian experts, with N(0, I) as an extra expert."""
    if not experts:
        raise ValueError("product of experts needs at least one expert")
    for q in experts:
        if (q.variance <= 0).any():
            raise ValueError("expert variances must be positive")
    prec = sum(1.0 / q.variance for q in experts)
    weighted = sum(q.mean / q.variance for q in experts)
    if include_prior:
        prec = prec + 1.0
    return GaussianPosterior(weighted / prec, 1.0 / prec)


def moe_mixture_stats(experts: Sequence[GaussianPosterior]) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean and variance of the uniform mixture (law of total variance)."""
    if not experts:
        raise ValueError("mixture of experts needs at least one expert")
    mean = sum(q.mean for q in experts) / len(experts)
    second = sum(q.variance + q.mean**2 for q in experts) / len(experts)
    return mean, second - mean**2


def moe_sample(experts: Sequence[GaussianPosterior], generator: torch.Generator | None = None) -> torch.Tensor:
    """Pick a component uniformly per row, then draw from it."""
    if not experts:
        raise ValueError("mixture of experts needs at least one expert")
    means = torch.stack([q.mean for q in experts])
    vars_ = torch.stack([q.variance for q in experts])
    batch_shape = means.shape[1:-1]
    k = torch.randint(len(experts), batch_shape, generator=generator)
    idx = k.reshape(1, *batch_shape, 1).expand(1, *means.shape[1:])
    mu = means.gather(0, idx)[0]
    var = vars_.gather(0, idx)[0]
    return mu + var.sqrt() * torch.randn(mu.shape, generator=generator, dtype=mu.dtype)


def moe_log_prob(experts: Sequence[GaussianPosterior], z: torch.Tensor) -> torch.Tensor:
    lp = torch.stack([q.log_prob(z) for q in experts])
    return torch.logsumexp(lp, 0) - torch.log(torch.tensor(float(len(experts)), dtype=z.dtype))
