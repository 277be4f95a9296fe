"""Checkpoint bundles: named raw arrays plus a JSON manifest.

Layout of a bundle directory::

    manifest.json        format_version, stage, digest, meta, array table
    <name>.bin           raw little-endian array bytes
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

FORMAT_VERSION = 1
STAGES = ("stage1", "stage2", "classifiers", "moe")


class CheckpointError(RuntimeError):
    pass


@dataclass
class CheckpointBundle:
    stage: str
    arrays: dict
    meta: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        if self.stage not in STAGES:
            raise CheckpointError(f"unknown stage tag {self.stage!r}")

    def digest(self) -> str:
        h = hashlib.sha256(self.stage.encode())
        for name in sorted(self.arrays):
            arr = np.ascontiguousarray(self.arrays[name])
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            h.update(name.encode())
            h.update(le.dtype.str.encode())
            h.update(str(arr.shape).encode())
            h.update(le.tobytes())
        return h.hexdigest()

    @classmethod
    def from_module(cls, module: torch.nn.Module, stage: str, meta: dict | None = None) -> "CheckpointBundle":
        arrays = {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}
        return cls(stage, arrays, dict(meta or {}))

    def load_into(self, module: torch.nn.Module) -> torch.nn.Module:
        state = {k: torch.as_tensor(np.array(v)) for k, v in self.arrays.items()}
        module.load_state_dict(state)
        return module

    def save(self, path) -> Path:
        root = Path(path)
        root.mkdir(parents=True, exist_ok=True)
        table = []
        for i, name in enumerate(sorted(self.arrays)):
            arr = np.ascontiguousarray(self.arrays[name])
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            fname = f"a{i:04d}.bin"
            (root / fname).write_bytes(le.tobytes())
            table.append({"name": name, "file": fname, "dtype": le.dtype.str, "shape": list(arr.shape)})
        manifest = {
            "format_version": self.format_version,
            "stage": self.stage,
            "digest": self.digest(),
            "meta": self.meta,
            "arrays": table,
        }
        (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return root

    @classmethod
    def load(cls, path) -> "CheckpointBundle":
        root = Path(path)
        mf = root / "manifest.json"
        if not mf.exists():
            raise CheckpointError(f"no checkpoint manifest in {root}")
        manifest = json.loads(mf.read_text())
        version = manifest.get("format_version")
        if version != FORMAT_VERSION:
            raise CheckpointError(
                f"checkpoint format version {version} != supported {FORMAT_VERSION}; "
                "re-export the checkpoint with a matching release or retrain"
            )
        arrays = {}
        for e in manifest["arrays"]:
            raw = (root / e["file"]).read_bytes()
            dtype = np.dtype(e["dtype"])
            if len(raw) != int(np.prod(e["shape"])) * dtype.itemsize:
                raise CheckpointError(f"array {e['name']} truncated")
            arrays[e["name"]] = np.frombuffer(raw, dtype=dtype).reshape(e["shape"]).astype(dtype.newbyteorder("="))
        bundle = cls(manifest["stage"], arrays, manifest.get("meta", {}), version)
        if bundle.digest() != manifest["digest"]:
            raise CheckpointError("checkpoint digest does not match its arrays")
        return bundle


def config_digest(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()


# ---------------------------------------------------------------------------
# module <-> bundle helpers


def stage1_bundle(model, train_cfg: dict, history: list, cfg_digest: str) -> CheckpointBundle:
    return CheckpointBundle.from_module(model, "stage1", {
        "model_config": model.cfg.to_dict(), "train_config": train_cfg, "history": history,
        "config_digest": cfg_digest,
    })


def build_stage1(bundle: CheckpointBundle):
    from .generator import ModelConfig, SharedLatentModel

    if bundle.stage != "stage1":
        raise CheckpointError(f"expected a stage1 bundle, got {bundle.stage}")
    model = SharedLatentModel(ModelConfig(**bundle.meta["model_config"]))
    return bundle.load_into(model).eval()


def stage2_bundle(prior, train_cfg: dict, history: list, cfg_digest: str, parent: CheckpointBundle) -> CheckpointBundle:
    return CheckpointBundle.from_module(prior, "stage2", {
        "prior_config": prior.cfg.to_dict(), "train_config": train_cfg, "history": history,
        "config_digest": cfg_digest, "stage1_digest": parent.digest(),
    })


def build_stage2(bundle: CheckpointBundle, stage1: CheckpointBundle | None = None):
    from .diffusion import ConditionalPrior, PriorConfig

    if bundle.stage != "stage2":
        raise CheckpointError(f"expected a stage2 bundle, got {bundle.stage}")
    if stage1 is not None and bundle.meta.get("stage1_digest") != stage1.digest():
        raise CheckpointError(
            f"stage2 bundle was trained on stage1 digest {bundle.meta.get('stage1_digest')}, "
            f"got {stage1.digest()}"
        )
    prior = ConditionalPrior(PriorConfig(**bundle.meta["prior_config"]))
    return bundle.load_into(prior).eval()


def classifiers_bundle(classifiers, cfg_digest: str) -> CheckpointBundle:
    arrays, specs = {}, []
    for i, clf in enumerate(classifiers):
        for k, v in clf.state_dict().items():
            arrays[f"m{i}.{k}"] = v.detach().numpy().copy()
        specs.append({"side": clf.side, "channels": clf.channels, "n_classes": clf.n_classes,
                      "feature_width": clf.feature_width, "accuracy": clf.accuracy})
    return CheckpointBundle("classifiers", arrays, {"classifiers": specs, "config_digest": cfg_digest})


def build_classifiers(bundle: CheckpointBundle) -> list:
    from .metrics import ToyClassifier

    out = []
    for i, s in enumerate(bundle.meta["classifiers"]):
        clf = ToyClassifier(s["side"], s["channels"], s["n_classes"], s["feature_width"])
        prefix = f"m{i}."
        clf.load_state_dict({k[len(prefix):]: torch.as_tensor(np.array(v))
                             for k, v in bundle.arrays.items() if k.startswith(prefix)})
        clf.accuracy = s["accuracy"]
        out.append(clf.eval())
    return out
