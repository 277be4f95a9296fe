"""Mixture-of-experts multimodal VAE used as the comparison pipeline.

Each modality has its own stochastic encoder q_i(z|x_i); the joint posterior is their
uniform mixture. Training uses the stratified mixture ELBO

    1/M sum_i E_{z ~ q_i} [ sum_j log p(x_j|z) + log p0(z) - log q_mix(z|X) ],

and cross-modal generation decodes z ~ q_i(z|x_i).
"""

from __future__ import annotations

import json
import math

import numpy as np
import torch
import torch.nn as nn

from .batching import chunks, iterate_minibatches, to_tensors
from .datagen import Dataset
from .generator import DecoderBank, ModelConfig, Stage1Config, TrainingDiverged, _lr_factor, log_likelihood
from .posterior import PosteriorHead, make_encoder, moe_log_prob


class MoEModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoders = nn.ModuleList(make_encoder(s, cfg.embed_dim, cfg.width) for s in cfg.shapes)
        self.heads = nn.ModuleList(PosteriorHead(cfg.embed_dim, cfg.latent_dim) for _ in cfg.shapes)
        self.decoders = DecoderBank(cfg)

    @property
    def n_modalities(self) -> int:
        return len(self.cfg.shapes)

    @property
    def latent_dim(self) -> int:
        return self.cfg.latent_dim

    def expert(self, i: int, x: torch.Tensor):
        return self.heads[i](self.encoders[i](x))

    def experts(self, xs):
        return [self.expert(i, x) for i, x in enumerate(xs)]

    def decode(self, z):
        return self.decoders.decode_values(z)

    def mixture_elbo(self, xs, generator=None, kl_weight: float = 1.0):
        qs = self.experts(xs)
        total, recon = 0.0, 0.0
        for q in qs:
            z = q.sample(generator)
            ll = log_likelihood(self.decoders, xs, z).sum(-1)
            log_p = -0.5 * (z**2).sum(-1) - 0.5 * z.shape[-1] * math.log(2 * math.pi)
            total = total + ll - kl_weight * (moe_log_prob(qs, z) - log_p)
            recon = recon + ll
        value = (total / len(qs)).mean()
        if not torch.isfinite(value):
            raise FloatingPointError("non-finite mixture ELBO")
        return value, {"recon": (recon / len(qs)).mean()}


def train_moe(dataset: Dataset, model_cfg: ModelConfig, cfg: Stage1Config, curve_path=None):
    torch.manual_seed(cfg.seed)
    model = MoEModel(model_cfg)
    if cfg.iterations == 0:
        return model, []
    opt = torch.optim.Adam([
        {"params": list(model.decoders.parameters()), "lr": cfg.lr_decoder},
        {"params": list(model.encoders.parameters()) + list(model.heads.parameters()), "lr": cfg.lr_encoder},
    ])
    base = [g["lr"] for g in opt.param_groups]
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    batches = iterate_minibatches(len(dataset), min(cfg.batch_size, len(dataset)), rng)
    history = []
    last_good = {k: v.detach().clone() for k, v in model.state_dict().items()}
    for it in range(cfg.iterations):
        xs, _, _ = to_tensors(dataset, next(batches))
        for g, lr in zip(opt.param_groups, base):
            g["lr"] = lr * _lr_factor(cfg, it)
        try:
            value, comps = model.mixture_elbo(xs, gen, cfg.kl_weight_at(it))
        except FloatingPointError as err:
            raise TrainingDiverged(f"MoE baseline diverged at iteration {it}", last_good, history) from err
        opt.zero_grad()
        (-value).backward()
        opt.step()
        if it % cfg.log_every == 0 or it == cfg.iterations - 1:
            rec = {"iteration": it, "elbo": value.item(), "recon": comps["recon"].item()}
            history.append(rec)
            last_good = {k: v.detach().clone() for k, v in model.state_dict().items()}
            if curve_path is not None:
                with open(curve_path, "a") as f:
                    f.write(json.dumps(rec) + "\n")
    return model, history


@torch.no_grad()
def moe_cross_generate(model: MoEModel, dataset: Dataset, source: int, seed: int = 0,
                       batch_size: int = 512) -> list:
    """Decode every modality from z ~ q_source(z | x_source); returns per-modality arrays."""
    gen = torch.Generator().manual_seed(seed)
    outs = []
    for sl in chunks(len(dataset), batch_size):
        x = torch.as_tensor(np.ascontiguousarray(dataset.modalities[source][sl]), dtype=torch.float32)
        z = model.expert(source, x).sample(gen)
        outs.append([o.numpy() for o in model.decode(z)])
    return [np.concatenate([o[j] for o in outs]) for j in range(model.n_modalities)]


@torch.no_grad()
def moe_joint_generate(model: MoEModel, n: int, seed: int = 0) -> list:
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn((n, model.latent_dim), generator=gen)
    return [o.numpy() for o in model.decode(z)]
