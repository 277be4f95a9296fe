"""Evaluation harness: toy classifiers, coherence, Frechet feature distance, PSNR/SSIM, latent gaps."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .posterior import GaussianPosterior, to_channels_first

ACCURACY_GATE = 0.98
FRECHET_EPS = 1e-6
PSNR_CAP = 100.0


class ClassifierGateError(RuntimeError):
    pass


class MetricError(ValueError):
    pass


# ---------------------------------------------------------------------------
# toy classifiers


class ToyClassifier(nn.Module):
    def __init__(self, side: int, channels: int, n_classes: int = 10, feature_width: int = 64):
        super().__init__()
        self.side, self.channels = side, channels
        self.n_classes = n_classes
        self.feature_width = feature_width
        self.features_net = nn.Sequential(
            nn.Conv2d(channels, 16, 3, padding=1), nn.SiLU(), nn.MaxPool2d(2),
            nn.Conv2d(16, 32, 3, padding=1), nn.SiLU(), nn.MaxPool2d(2),
            nn.Flatten(), nn.Linear(32 * (side // 4) ** 2, feature_width), nn.SiLU(),
        )
        self.head = nn.Linear(feature_width, n_classes)
        self.accuracy = float("nan")

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.features_net(to_channels_first(x))

    def forward(self, x):
        return self.head(self.features(x))

    @torch.no_grad()
    def logits_np(self, images: np.ndarray, batch: int = 1024) -> np.ndarray:
        out = [self(torch.as_tensor(np.asarray(images[i : i + batch], dtype=np.float32))).numpy()
               for i in range(0, len(images), batch)]
        return np.concatenate(out) if out else np.zeros((0, self.n_classes))

    def predict(self, images: np.ndarray) -> np.ndarray:
        # np.argmax returns the first maximal index: ties go to the lowest class
        return np.argmax(self.logits_np(images), axis=-1)

    @torch.no_grad()
    def features_np(self, images: np.ndarray, batch: int = 1024) -> np.ndarray:
        out = [self.features(torch.as_tensor(np.asarray(images[i : i + batch], dtype=np.float32))).double().numpy()
               for i in range(0, len(images), batch)]
        return np.concatenate(out)


def train_toy_classifier(images: np.ndarray, labels: np.ndarray, n_classes: int = 10, seed: int = 0,
                         iterations: int = 600, batch_size: int = 128, holdout: float = 0.2,
                         gate: float | None = ACCURACY_GATE) -> ToyClassifier:
    """Train on a random (1 - holdout) split and gate on held-out accuracy."""
    if len(images) != len(labels) or len(images) < 10:
        raise MetricError("need at least 10 labelled images")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(images))
    n_hold = max(1, int(holdout * len(images)))
    hold, train = perm[:n_hold], perm[n_hold:]
    side, _, ch = images.shape[1:]
    clf = ToyClassifier(side, ch, n_classes)
    opt = torch.optim.Adam(clf.parameters(), lr=2e-3)
    x_all = torch.as_tensor(np.asarray(images, dtype=np.float32))
    y_all = torch.as_tensor(np.asarray(labels, dtype=np.int64))
    for it in range(iterations):
        idx = torch.as_tensor(rng.choice(train, size=min(batch_size, len(train)), replace=False))
        loss = F.cross_entropy(clf(x_all[idx]), y_all[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    clf.eval()
    clf.accuracy = float((clf.predict(images[hold]) == labels[hold]).mean())
    if gate is not None and clf.accuracy < gate:
        raise ClassifierGateError(f"held-out accuracy {clf.accuracy:.3f} below gate {gate}")
    return clf


def train_classifier_bank(dataset, seed: int = 0, iterations: int = 600, gate: float | None = ACCURACY_GATE):
    return [train_toy_classifier(m, dataset.labels, dataset.n_classes, seed + i, iterations, gate=gate)
            for i, m in enumerate(dataset.modalities)]


# ---------------------------------------------------------------------------
# coherence


def predict_all(samples: Sequence[np.ndarray], classifiers) -> np.ndarray:
    """(N, M) predicted labels."""
    return np.stack([clf.predict(x) for x, clf in zip(samples, classifiers)], -1)


def joint_coherence(samples: Sequence[np.ndarray], classifiers) -> float:
    """Fraction of tuples whose M predicted labels are all identical."""
    if len(samples) == 0 or len(samples[0]) == 0:
        raise MetricError("empty sample set")
    preds = predict_all(samples, classifiers)
    return float((preds == preds[:, :1]).all(-1).mean())


def conditional_coherence(generated: dict, labels: np.ndarray, classifiers) -> float:
    """Macro average over ordered pairs (i, j) of P(classifier_j(generated x_j) == label of observed x_i).

    ``generated`` maps (i, j) to the (N, ...) images of modality j generated from modality i.
    """
    if not generated:
        raise MetricError("no modality pairs")
    rates = []
    for (i, j), x in sorted(generated.items()):
        if len(x) == 0:
            raise MetricError("empty sample set")
        rates.append(float((classifiers[j].predict(x) == labels).mean()))
    return float(np.mean(rates))


# ---------------------------------------------------------------------------
# Frechet / energy distances


def _sqrtm_psd(s: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (s + s.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_from_stats(mu1, s1, mu2, s2, eps: float = FRECHET_EPS) -> float:
    """||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2)) with eps*I added to both covariances."""
    mu1, mu2 = np.atleast_1d(mu1), np.atleast_1d(mu2)
    s1 = np.atleast_2d(s1) + eps * np.eye(len(mu1))
    s2 = np.atleast_2d(s2) + eps * np.eye(len(mu1))
    r1 = _sqrtm_psd(s1)
    cross = _sqrtm_psd(r1 @ s2 @ r1)
    val = float(((mu1 - mu2) ** 2).sum() + np.trace(s1) + np.trace(s2) - 2.0 * np.trace(cross))
    return max(val, 0.0)


def gaussian_fit(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    return x.mean(0), np.atleast_2d(np.cov(x, rowvar=False))


def frechet_distance(x: np.ndarray, y: np.ndarray, eps: float = FRECHET_EPS) -> float:
    return frechet_from_stats(*gaussian_fit(x), *gaussian_fit(y), eps=eps)


def frechet_feature_distance(gen: np.ndarray, real: np.ndarray, classifier: ToyClassifier,
                             eps: float = FRECHET_EPS) -> float:
    """Frechet distance between Gaussian fits of the classifier's penultimate features."""
    need = 2 * classifier.feature_width
    if len(gen) < need or len(real) < need:
        raise MetricError(f"need at least {need} samples per set")
    return frechet_distance(classifier.features_np(gen), classifier.features_np(real), eps)


def energy_distance(x: np.ndarray, y: np.ndarray) -> float:
    """Unbiased estimate of 2 E|X - Y| - E|X - X'| - E|Y - Y'| (squared energy distance)."""
    from scipy.spatial.distance import cdist

    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    y = np.asarray(y, dtype=np.float64).reshape(len(y), -1)
    n, m = len(x), len(y)
    if n < 2 or m < 2:
        raise MetricError("need at least two samples per set")
    xy = cdist(x, y).mean()
    xx = cdist(x, x).sum() / (n * (n - 1))
    yy = cdist(y, y).sum() / (m * (m - 1))
    return float(2.0 * xy - xx - yy)


# ---------------------------------------------------------------------------
# image similarity


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    g = np.exp(-((np.arange(size) - size // 2) ** 2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim_batch(a: np.ndarray, b: np.ndarray, k1: float = 0.01, k2: float = 0.03, window: int = 11,
               sigma: float = 1.5) -> np.ndarray:
    """Per-image SSIM for (N, H, W[, C]) arrays in [0, 1]; Gaussian window, valid filtering, channel mean."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a, b = a[..., None], b[..., None]
    n, h, w, c = a.shape
    if h < window or w < window:
        raise MetricError(f"images smaller than the {window}x{window} window")
    win = torch.as_tensor(_gaussian_window(window, sigma))[None, None]
    ta = torch.as_tensor(a).permute(0, 3, 1, 2).reshape(n * c, 1, h, w)
    tb = torch.as_tensor(b).permute(0, 3, 1, 2).reshape(n * c, 1, h, w)
    mu_a, mu_b = F.conv2d(ta, win), F.conv2d(tb, win)
    saa = F.conv2d(ta * ta, win) - mu_a**2
    sbb = F.conv2d(tb * tb, win) - mu_b**2
    sab = F.conv2d(ta * tb, win) - mu_a * mu_b
    c1, c2 = k1**2, k2**2
    smap = ((2 * mu_a * mu_b + c1) * (2 * sab + c2)) / ((mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2))
    return smap.reshape(n, c, -1).mean(-1).mean(-1).numpy()


def ssim(a: np.ndarray, b: np.ndarray, **kw) -> float:
    return float(ssim_batch(np.asarray(a)[None], np.asarray(b)[None], **kw)[0])


def mean_psnr(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean([psnr(x, y) for x, y in zip(a, b)]))


# ---------------------------------------------------------------------------
# latent-space gaps


def gaussian_kl_full(mu_p, cov_p, mu_q, cov_q) -> float:
    """KL(N(mu_p, cov_p) || N(mu_q, cov_q)) for full covariances."""
    mu_p, mu_q = np.atleast_1d(mu_p), np.atleast_1d(mu_q)
    cov_p, cov_q = np.atleast_2d(cov_p), np.atleast_2d(cov_q)
    d = len(mu_p)
    prec_q = np.linalg.inv(cov_q)
    diff = mu_q - mu_p
    _, ld_p = np.linalg.slogdet(cov_p)
    _, ld_q = np.linalg.slogdet(cov_q)
    return float(0.5 * (np.trace(prec_q @ cov_p) + diff @ prec_q @ diff - d + ld_q - ld_p))


def moment_matched_kl(samples: np.ndarray, reference: np.ndarray | None = None) -> float:
    """KL(fit(samples) || fit(reference)), or || N(0, I) without a reference."""
    samples = np.asarray(samples, dtype=np.float64)
    d = samples.shape[1]
    if len(samples) < d + 1 or (reference is not None and len(reference) < d + 1):
        raise MetricError(f"need at least d + 1 = {d + 1} samples")
    mu, cov = gaussian_fit(samples)
    if reference is None:
        return gaussian_kl_full(mu, cov, np.zeros(d), np.eye(d))
    return gaussian_kl_full(mu, cov, *gaussian_fit(reference))


def prior_gap(model, dataset, prior_samples: np.ndarray | None = None, seed: int = 0) -> float:
    """Moment-matched KL between the aggregated posterior and a prior.

    The aggregated posterior is represented by one draw z ~ q(z|X) per row. Without
    ``prior_samples`` the prior is N(0, I); otherwise it is the Gaussian fit of the samples.
    """
    from .generator import encode_dataset

    _, q = encode_dataset(model, dataset)
    z = q.sample(torch.Generator().manual_seed(seed)).double().numpy()
    return moment_matched_kl(z, prior_samples)


def oracle_posterior_kl(q: GaussianPosterior, means: np.ndarray, covariance: np.ndarray) -> float:
    """Average closed-form KL(q(z|X) || p(z|X)) over rows; p has a shared full covariance."""
    mu_q = q.mean.detach().double().numpy()
    var_q = q.variance.detach().double().numpy()
    means = np.asarray(means, dtype=np.float64)
    if mu_q.shape != means.shape or covariance.shape != (mu_q.shape[1],) * 2:
        raise MetricError("dimension mismatch between learned and analytic posteriors")
    prec = np.linalg.inv(covariance)
    d = mu_q.shape[1]
    _, ld_p = np.linalg.slogdet(covariance)
    diff = means - mu_q
    kl = 0.5 * (var_q @ np.diag(prec) + np.einsum("ni,ij,nj->n", diff, prec, diff) - d + ld_p
                - np.log(var_q).sum(-1))
    return float(kl.mean())


# ---------------------------------------------------------------------------
# records


@dataclass
class MetricRecord:
    name: str
    value: float
    n: int
    config_digest: str = ""
    seed: int = 0
    estimator: str = ""

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise MetricError(f"metric {self.name} is not finite")
        if self.n <= 0:
            raise MetricError(f"metric {self.name} needs a positive sample count")

    def to_json(self) -> str:
        d = asdict(self)
        d["value"] = float(f"{self.value:.10g}")
        return json.dumps(d, sort_keys=True)


def append_records(path, records: Sequence[MetricRecord]):
    with open(path, "a") as f:
        for r in records:
            f.write(r.to_json() + "\n")


def read_records(path) -> list:
    return [MetricRecord(**json.loads(line)) for line in Path(path).read_text().splitlines() if line.strip()]
