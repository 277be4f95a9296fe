"""Stage-2 conditional diffusion prior over the shared latent.

Step indices are 1-based: ``abar[t]`` is the cumulative signal coefficient after
t forward steps, with ``abar[0] == 1``. The reverse step ``denoise_step(z_{t+1}, t)``
evaluates the noise predictor at time ``t + 1`` and returns z_t.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .posterior import make_encoder

SCHEDULE_KINDS = ("linear", "cosine")
TERMINAL_ABAR = 1e-2


class ScheduleError(ValueError):
    pass


@dataclass
class NoiseSchedule:
    """Per-step noise scales sigma_t, alpha_t = sqrt(1 - sigma_t^2), abar_t = prod alpha_s."""

    sigmas: np.ndarray
    kind: str = "custom"

    def __post_init__(self):
        self.sigmas = np.asarray(self.sigmas, dtype=np.float64)
        if self.sigmas.ndim != 1 or len(self.sigmas) < 1:
            raise ScheduleError("need at least one step")
        if ((self.sigmas < 0) | (self.sigmas >= 1)).any():
            raise ScheduleError("sigma_t must lie in [0, 1)")
        self.alphas = np.sqrt(1.0 - self.sigmas**2)
        self.abar = np.concatenate([[1.0], np.cumprod(self.alphas)])

    @property
    def T(self) -> int:
        return len(self.sigmas)

    def sigma(self, t):
        return self.sigmas[np.asarray(t) - 1]

    def alpha(self, t):
        return self.alphas[np.asarray(t) - 1]

    def posterior_variance(self, t: int) -> float:
        """Variance of q(z_{t-1} | z_t, z_0) for 1 <= t <= T."""
        return float(self.sigmas[t - 1] ** 2 * (1.0 - self.abar[t - 1] ** 2) / (1.0 - self.abar[t] ** 2))

    def check(self) -> "NoiseSchedule":
        if np.any(np.diff(self.sigmas) < 0):
            raise ScheduleError("sigma_t must be non-decreasing")
        if (self.sigmas <= 0).any():
            raise ScheduleError("sigma_t must be positive")
        if self.abar[-1] > TERMINAL_ABAR:
            raise ScheduleError(f"terminal abar_T = {self.abar[-1]:.4g} exceeds {TERMINAL_ABAR}")
        return self

    def to_dict(self) -> dict:
        return {"sigmas": self.sigmas.tolist(), "kind": self.kind}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return cls(np.asarray(d["sigmas"]), d.get("kind", "custom"))


def build_schedule(T: int = 250, kind: str = "linear") -> NoiseSchedule:
    """Linear: sigma_t^2 spaced linearly, rescaled by 1000/T so short schedules still reach noise.

    Cosine: squared signal coefficient follows cos^2 with offset 0.008, per-step sigma^2 capped at 0.999.
    """
    if T < 1:
        raise ScheduleError("T must be >= 1")
    if kind == "linear":
        scale = 1000.0 / T
        lo, hi = min(scale * 1e-4, 0.9999), min(scale * 0.02, 0.9999)
        var = np.array([hi]) if T == 1 else np.linspace(lo, hi, T)
    elif kind == "cosine":
        s = 0.008
        f = np.cos((np.arange(T + 1) / T + s) / (1 + s) * math.pi / 2) ** 2
        var = np.clip(1.0 - f[1:] / f[:-1], 0.0, 0.999)
    else:
        raise ScheduleError(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(np.sqrt(var), kind).check()


def forward_marginal(z0: torch.Tensor, t, schedule: NoiseSchedule, generator: torch.Generator | None = None,
                     eps: torch.Tensor | None = None) -> torch.Tensor:
    """z_t = abar_t z_0 + sqrt(1 - abar_t^2) eps, with t an int or a (B,) tensor in [1, T]."""
    t_arr = np.asarray(t.cpu() if torch.is_tensor(t) else t)
    if (t_arr < 1).any() or (t_arr > schedule.T).any():
        raise ScheduleError(f"t must lie in [1, {schedule.T}]")
    a = torch.as_tensor(schedule.abar[t_arr], dtype=z0.dtype)
    if a.ndim == 1:
        a = a[:, None]
    if eps is None:
        eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    return a * z0 + torch.sqrt(1.0 - a**2) * eps


def forward_step(z: torch.Tensor, t: int, schedule: NoiseSchedule, generator=None) -> torch.Tensor:
    """One forward kernel q(z_t | z_{t-1})."""
    return float(schedule.alpha(t)) * z + float(schedule.sigma(t)) * torch.randn(z.shape, generator=generator,
                                                                                   dtype=z.dtype)


# ---------------------------------------------------------------------------
# denoiser


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.double()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], -1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResidualBlock(nn.Module):
    def __init__(self, width: int, emb_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(width)
        self.fc1 = nn.Linear(width, width)
        self.shift = nn.Linear(emb_dim, width)
        self.fc2 = nn.Linear(width, width)

    def forward(self, x, emb):
        h = F.silu(self.fc1(self.norm(x)) + self.shift(emb))
        return x + self.fc2(h)


class Denoiser(nn.Module):
    """Noise predictor eps(z_t, t, h); the condition enters as an additive shift of the time embedding."""

    def __init__(self, latent_dim: int, cond_dim: int, width: int = 128, depth: int = 3, time_dim: int = 64):
        super().__init__()
        self.latent_dim = latent_dim
        self.cond_dim = cond_dim
        self.time_dim = time_dim
        self.time_mlp = nn.Sequential(nn.Linear(time_dim, width), nn.SiLU(), nn.Linear(width, width))
        self.cond_proj = nn.Sequential(nn.Linear(cond_dim, width), nn.SiLU(), nn.Linear(width, width))
        self.null_token = nn.Parameter(torch.zeros(cond_dim))
        self.inp = nn.Linear(latent_dim, width)
        self.blocks = nn.ModuleList(ResidualBlock(width, width) for _ in range(depth))
        self.out_norm = nn.LayerNorm(width)
        self.out = nn.Linear(width, latent_dim)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, z, t, cond=None, null_mask=None):
        b = z.shape[0]
        if cond is None:
            cond = self.null_token.expand(b, -1)
        elif null_mask is not None:
            keep = (~null_mask).to(z.dtype)[:, None]
            cond = keep * cond + (1.0 - keep) * self.null_token
        emb = self.time_mlp(timestep_embedding(t, self.time_dim).to(z.dtype)) + self.cond_proj(cond)
        emb = F.silu(emb)
        x = self.inp(z)
        for blk in self.blocks:
            x = blk(x, emb)
        return self.out(F.silu(self.out_norm(x)))


@dataclass
class ConditioningPolicy:
    source: str = "embedding"         # embedding | raw
    drop_probability: float = 0.1

    def __post_init__(self):
        if self.source not in ("embedding", "raw"):
            raise ValueError(f"unknown conditioning source {self.source!r}")
        if not 0.0 <= self.drop_probability < 1.0:
            raise ValueError("drop_probability must lie in [0, 1)")


@dataclass
class PriorConfig:
    latent_dim: int
    cond_dim: int
    n_modalities: int
    steps: int = 250
    schedule: str = "linear"
    width: int = 128
    depth: int = 3
    source: str = "embedding"
    raw_shapes: list | None = None     # modality shapes for source="raw"
    raw_width: int = 8

    def to_dict(self) -> dict:
        return asdict(self)


class ConditionalPrior(nn.Module):
    """Denoiser + schedule + latent normalization (+ thin raw encoders when conditioning on raw inputs)."""

    def __init__(self, cfg: PriorConfig):
        super().__init__()
        self.cfg = cfg
        self.schedule = build_schedule(cfg.steps, cfg.schedule)
        self.denoiser = Denoiser(cfg.latent_dim, cfg.cond_dim, cfg.width, cfg.depth)
        self.register_buffer("shift", torch.zeros(cfg.latent_dim))
        self.register_buffer("scale", torch.ones(()))
        if cfg.source == "raw":
            if cfg.raw_shapes is None:
                raise ValueError("raw conditioning needs modality shapes")
            self.raw_encoders = nn.ModuleList(make_encoder(s, cfg.cond_dim, cfg.raw_width) for s in cfg.raw_shapes)
        else:
            self.raw_encoders = None
        self.nfe = 0

    @property
    def T(self) -> int:
        return self.schedule.T

    def fit_normalization(self, z: torch.Tensor):
        with torch.no_grad():
            self.shift.copy_(z.mean(0))
            self.scale.copy_((z - z.mean(0)).std().clamp_min(1e-6))

    def normalize(self, z):
        return (z - self.shift) / self.scale

    def denormalize(self, z):
        return z * self.scale + self.shift

    def predict_eps(self, z, t, cond=None, null_mask=None):
        if not torch.is_tensor(t):
            t = torch.full((z.shape[0],), int(t), dtype=torch.long)
        self.nfe += 1
        return self.denoiser(z, t, cond, null_mask)

    def condition_vectors(self, inputs: Sequence[torch.Tensor]) -> list:
        """Per-modality conditioning vectors: identity for embeddings, thin encoders for raw inputs."""
        if self.raw_encoders is None:
            return list(inputs)
        return [enc(x) for enc, x in zip(self.raw_encoders, inputs)]


def pick_condition(cond_list: Sequence[torch.Tensor], presence: torch.Tensor | None,
                   generator: torch.Generator | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Uniformly pick one present modality per row; returns (condition (B, E), index (B,))."""
    stacked = torch.stack(list(cond_list))
    b = stacked.shape[1]
    weights = torch.ones(b, len(cond_list)) if presence is None else presence.to(torch.float64)
    if (weights.sum(-1) == 0).any():
        raise ValueError("every row needs at least one present modality")
    j = torch.multinomial(weights, 1, generator=generator)[:, 0]
    return stacked[j, torch.arange(b)], j


def prior_loss(prior, z0: torch.Tensor, cond_inputs: Sequence[torch.Tensor] | None, presence=None,
               policy: ConditioningPolicy | None = None, generator: torch.Generator | None = None,
               return_info: bool = False):
    """Time-averaged noise-prediction loss ||eps - eps_hat(z_t, t, h_j)||^2.

    ``z0`` is in normalized latent space. ``cond_inputs`` are per-modality embeddings
    (or raw modalities when the prior conditions on raw inputs); ``None`` trains the
    unconditional branch only.
    """
    policy = policy or ConditioningPolicy()
    b = z0.shape[0]
    sched = prior.schedule
    t = torch.randint(1, sched.T + 1, (b,), generator=generator)
    eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    zt = forward_marginal(z0, t, sched, eps=eps)
    if cond_inputs is None:
        cond, null, j = None, torch.ones(b, dtype=torch.bool), None
    else:
        cond, j = pick_condition(prior.condition_vectors(cond_inputs), presence, generator)
        null = torch.rand(b, generator=generator) < policy.drop_probability
    pred = prior.predict_eps(zt, t, cond, null if cond is not None else None)
    loss = ((eps - pred) ** 2).sum(-1).mean()
    if return_info:
        return loss, {"t": t, "null": null, "index": j}
    return loss


def combine_guidance(eps_uncond: torch.Tensor, eps_cond: torch.Tensor, w: float) -> torch.Tensor:
    """(1 - w) eps_u + w eps_c, i.e. eps_u + w (eps_c - eps_u); exact at w = 0 and w = 1."""
    return (1.0 - w) * eps_uncond + w * eps_cond


def guided_eps(prior, z, t: int, cond=None, guidance: float = 0.0, null_mask=None):
    """Noise estimate at time index t (1-based); one batched network pass either way."""
    if cond is None or guidance == 0.0:
        return prior.predict_eps(z, t)
    b = z.shape[0]
    both = prior.predict_eps(
        torch.cat([z, z]), t, torch.cat([cond, cond]),
        torch.cat([torch.zeros(b, dtype=torch.bool), torch.ones(b, dtype=torch.bool)]),
    )
    eps_c, eps_u = both[:b], both[b:]
    if null_mask is not None:
        # rows without a condition fall back to the unconditional estimate
        eps_c = torch.where(null_mask[:, None], eps_u, eps_c)
    return combine_guidance(eps_u, eps_c, guidance)


def denoise_step(prior, z_next: torch.Tensor, t: int, cond=None, guidance: float = 0.0,
                 generator: torch.Generator | None = None, null_mask=None) -> torch.Tensor:
    """Sample z_t from z_{t+1} with the DDPM posterior mean and fixed variance; t = 0 returns the mean."""
    sched = prior.schedule
    if not 0 <= t < sched.T:
        raise ScheduleError(f"step index must lie in [0, {sched.T - 1}]")
    s = t + 1
    eps = guided_eps(prior, z_next, s, cond, guidance, null_mask)
    sig2 = float(sched.sigmas[s - 1] ** 2)
    mean = (z_next - sig2 / math.sqrt(1.0 - sched.abar[s] ** 2) * eps) / float(sched.alphas[s - 1])
    if t == 0:
        out = mean
    else:
        noise = torch.randn(z_next.shape, generator=generator, dtype=z_next.dtype)
        out = mean + math.sqrt(sched.posterior_variance(s)) * noise
    if not torch.isfinite(out).all():
        raise FloatingPointError(f"non-finite state at reverse step {t}")
    return out


@torch.no_grad()
def sample_prior(prior: ConditionalPrior, n: int, cond=None, guidance: float = 0.0,
                 generator: torch.Generator | None = None, z_start: torch.Tensor | None = None,
                 start: int | None = None, null_mask=None) -> tuple[torch.Tensor, int]:
    """Run the reverse chain from ``start`` (default T) to 0.

    ``z_start`` is the normalized state at step ``start`` (drawn from N(0, I) when omitted).
    Returns (z_0 in latent space, number of denoiser evaluations).
    """
    start = prior.T if start is None else start
    if not 0 <= start <= prior.T:
        raise ScheduleError(f"start step must lie in [0, {prior.T}]")
    dtype = prior.shift.dtype
    z = z_start if z_start is not None else torch.randn((n, prior.cfg.latent_dim), generator=generator, dtype=dtype)
    before = prior.nfe
    for t in range(start - 1, -1, -1):
        z = denoise_step(prior, z, t, cond, guidance, generator, null_mask)
    return prior.denormalize(z), prior.nfe - before


@torch.no_grad()
def noise_latent(prior: ConditionalPrior, z0: torch.Tensor, k: int, generator=None) -> torch.Tensor:
    """Forward-diffuse latent-space z0 by k steps, returning the normalized state."""
    zn = prior.normalize(z0)
    if k == 0:
        return zn
    return forward_marginal(zn, k, prior.schedule, generator)


# ---------------------------------------------------------------------------
# training


@dataclass
class Stage2Config:
    iterations: int = 3000
    batch_size: int = 128
    lr: float = 1e-3
    steps: int = 250
    schedule: str = "linear"
    width: int = 128
    depth: int = 3
    source: str = "embedding"
    drop_probability: float = 0.1
    guidance: float = 1.0
    ema_decay: float = 0.995
    normalize: bool = True
    seed: int = 0
    log_every: int = 100
    stage1_digest: str | None = None

    def __post_init__(self):
        if self.iterations < 0 or self.batch_size <= 0 or self.lr <= 0:
            raise ValueError("stage-2 counts and rates must be positive")

    @property
    def policy(self) -> ConditioningPolicy:
        return ConditioningPolicy(self.source, self.drop_probability)


def _lr_factor(it: int, total: int) -> float:
    return 0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * it / max(total, 1)))


def train_prior(prior: ConditionalPrior, latent_mean: torch.Tensor, cfg: Stage2Config,
                latent_var: torch.Tensor | None = None, cond_inputs: Sequence[torch.Tensor] | None = None,
                presence: torch.Tensor | None = None, curve_path=None) -> list:
    """Fit the denoiser to latents z ~ N(latent_mean, latent_var) (fresh draw every batch).

    Only the prior's parameters are updated; an EMA copy replaces them at the end.
    """
    torch.manual_seed(cfg.seed)
    n = latent_mean.shape[0]
    if cfg.normalize:
        prior.fit_normalization(latent_mean)
    if cfg.iterations == 0:
        return []
    params = [p for p in prior.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.lr)
    ema = {k: v.detach().clone() for k, v in prior.named_parameters()}
    gen = torch.Generator().manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    policy = cfg.policy
    history = []
    last_good = copy.deepcopy(prior.state_dict())
    curve = open(curve_path, "a") if curve_path is not None else None
    try:
        perm, pos = rng.permutation(n), 0
        bs = min(cfg.batch_size, n)
        for it in range(cfg.iterations):
            if pos + bs > n:
                perm, pos = rng.permutation(n), 0
            idx = torch.as_tensor(perm[pos : pos + bs])
            pos += bs
            z0 = latent_mean[idx]
            if latent_var is not None:
                z0 = z0 + latent_var[idx].sqrt() * torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
            z0 = prior.normalize(z0)
            conds = None if cond_inputs is None else [c[idx] for c in cond_inputs]
            pres = None if presence is None else presence[idx]
            for g in opt.param_groups:
                g["lr"] = cfg.lr * _lr_factor(it, cfg.iterations)
            loss = prior_loss(prior, z0, conds, pres, policy, gen)
            if not torch.isfinite(loss):
                from .generator import TrainingDiverged

                raise TrainingDiverged(f"stage-2 diverged at iteration {it}", last_good, history)
            opt.zero_grad()
            loss.backward()
            opt.step()
            with torch.no_grad():
                for k, v in prior.named_parameters():
                    ema[k].mul_(cfg.ema_decay).add_(v, alpha=1 - cfg.ema_decay)
            if it % cfg.log_every == 0 or it == cfg.iterations - 1:
                rec = {"iteration": it, "loss": loss.item()}
                history.append(rec)
                if curve is not None:
                    curve.write(json.dumps(rec) + "\n")
                last_good = copy.deepcopy(prior.state_dict())
    finally:
        if curve is not None:
            curve.close()
    with torch.no_grad():
        for k, v in prior.named_parameters():
            v.copy_(ema[k])
    return history


def state_digest(module: nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for k, v in sorted(module.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def train_stage2(dataset, model, cfg: Stage2Config, curve_path=None):
    """Fit the conditional prior to the frozen stage-1 aggregated posterior.

    Returns ``(prior, history)``; the stage-1 parameters are never handed to the optimizer.
    """
    from .batching import to_tensors
    from .generator import encode_dataset

    before = state_digest(model)
    model.requires_grad_(False)
    hs, q = encode_dataset(model, dataset)
    shapes = [list(s) for s in model.cfg.shapes]
    pcfg = PriorConfig(model.latent_dim, model.cfg.embed_dim, model.n_modalities, cfg.steps, cfg.schedule,
                       cfg.width, cfg.depth, cfg.source, shapes if cfg.source == "raw" else None)
    torch.manual_seed(cfg.seed)
    prior = ConditionalPrior(pcfg)
    if cfg.source == "raw":
        cond_inputs, presence, _ = to_tensors(dataset)
    else:
        cond_inputs, presence = hs, torch.as_tensor(dataset.presence)
    history = train_prior(prior, q.mean, cfg, q.variance, cond_inputs, presence, curve_path)
    model.requires_grad_(True)
    if state_digest(model) != before:
        raise RuntimeError("stage-1 parameters changed during stage-2 training")
    return prior, history
