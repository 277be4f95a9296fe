"""Command-line entry point: train-stage1, train-stage2, generate, evaluate, reproduce.

Exit codes: 0 success, 2 configuration or usage error, 3 failed assertion
(suite threshold, classifier accuracy gate).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np
import torch

from .checkpoint import (
    CheckpointBundle,
    CheckpointError,
    build_classifiers,
    build_stage1,
    build_stage2,
    classifiers_bundle,
    stage1_bundle,
    stage2_bundle,
)
from .config import ConfigError, ExperimentConfig, build_datasets, build_model_config, load_config
from .datagen import Dataset, DatasetError, corrupt_dataset, load_dataset, persist_dataset
from .metrics import (
    ClassifierGateError,
    MetricError,
    MetricRecord,
    frechet_feature_distance,
    joint_coherence,
    predict_all,
    read_records,
    train_classifier_bank,
)
from .workflows import (
    Pipeline,
    WorkflowError,
    cross_modal_generate,
    joint_generate,
    latent_correct,
    style_transfer,
)

EXIT_OK, EXIT_USAGE, EXIT_ASSERT = 0, 2, 3
ABSENT = "absent"


class UsageError(ValueError):
    pass


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))


def _records_text(records) -> str:
    return "".join(r.to_json() + "\n" for r in records)


# ---------------------------------------------------------------------------
# training


def cmd_train_stage1(cfg: ExperimentConfig) -> Path:
    from .generator import elbo, train_stage1
    from .batching import to_tensors

    torch.set_num_threads(1)
    out = cfg.output_path()
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    train, test = build_datasets(cfg)
    ck = out / "stage1"
    ck.mkdir(exist_ok=True)
    curve = ck / "curve.jsonl"
    curve.write_text("")
    model, history = train_stage1(train, build_model_config(cfg, train.modality_shapes), cfg.stage1,
                                  curve_path=curve)
    model.eval()
    bundle = stage1_bundle(model, cfg.to_dict()["stage1"], history, cfg.digest())
    bundle.save(ck)
    with torch.no_grad():
        xs, _, _ = to_tensors(test)
        value, _ = elbo(model, xs, None, 1.0, torch.Generator().manual_seed(cfg.seed))
    rec = MetricRecord("stage1/test_elbo", value.item(), len(test), cfg.digest(), cfg.seed,
                       "single-draw Monte Carlo ELBO per sample")
    (ck / "metrics.jsonl").write_text(_records_text([rec]))
    print(f"stage-1 checkpoint: {ck} (digest {bundle.digest()[:16]})")
    return ck


def _load_stage1(run: Path) -> CheckpointBundle:
    return CheckpointBundle.load(run / "stage1")


def cmd_train_stage2(cfg: ExperimentConfig, stage1_dir=None) -> Path:
    from .diffusion import train_stage2

    torch.set_num_threads(1)
    out = cfg.output_path()
    s1 = CheckpointBundle.load(Path(stage1_dir) if stage1_dir else out / "stage1")
    expected = cfg.stage2.stage1_digest
    if expected is not None and expected != s1.digest():
        raise CheckpointError(f"stage-1 digest mismatch: config expects {expected}, bundle has {s1.digest()}")
    model = build_stage1(s1)
    train, _ = build_datasets(cfg)
    ck = out / "stage2"
    ck.mkdir(parents=True, exist_ok=True)
    curve = ck / "curve.jsonl"
    curve.write_text("")
    prior, history = train_stage2(train, model, cfg.stage2, curve_path=curve)
    prior.eval()
    bundle = stage2_bundle(prior, cfg.to_dict()["stage2"], history, cfg.digest(), s1)
    bundle.save(ck)
    records = [MetricRecord("stage2/final_loss", history[-1]["loss"], len(train), cfg.digest(), cfg.seed,
                            "noise-prediction loss, last logged minibatch")] if history else []
    (ck / "metrics.jsonl").write_text(_records_text(records))
    print(f"stage-2 checkpoint: {ck} (digest {bundle.digest()[:16]})")
    return ck


def load_pipeline(cfg: ExperimentConfig, guidance: float | None = None) -> tuple[Pipeline, dict]:
    run = cfg.output_path()
    s1 = _load_stage1(run)
    s2 = CheckpointBundle.load(run / "stage2")
    pipe = Pipeline(build_stage1(s1), build_stage2(s2, s1), cfg.stage2.guidance if guidance is None else guidance)
    return pipe, {"stage1": s1.digest(), "stage2": s2.digest()}


# ---------------------------------------------------------------------------
# generation


def save_grid(images: np.ndarray, path: Path, per_row: int = 8, max_items: int = 64) -> bool:
    """Tile up to ``max_items`` images into a PNG; returns False for non-image modalities."""
    from PIL import Image

    images = np.asarray(images)[:max_items]
    if images.ndim != 4 or images.shape[-1] not in (1, 3) or len(images) == 0:
        return False
    n, h, w, c = images.shape
    rows = -(-n // per_row)
    canvas = np.zeros((rows * (h + 1) + 1, per_row * (w + 1) + 1, c), dtype=np.float32)
    for k, img in enumerate(images):
        r, q = divmod(k, per_row)
        canvas[1 + r * (h + 1): 1 + r * (h + 1) + h, 1 + q * (w + 1): 1 + q * (w + 1) + w] = img
    pixels = (np.clip(canvas, 0.0, 1.0) * 255).round().astype(np.uint8)
    Image.fromarray(pixels[..., 0] if c == 1 else pixels).save(path)
    return True


def _parse_indices(text: str | None, m: int, flag: str) -> list:
    if not text:
        return []
    try:
        idx = sorted({int(t) for t in text.split(",") if t.strip()})
    except ValueError as err:
        raise UsageError(f"{flag} expects comma-separated modality indices") from err
    if any(not 0 <= i < m for i in idx):
        raise UsageError(f"{flag} indices must lie in [0, {m - 1}]")
    return idx


def cmd_generate(cfg: ExperimentConfig, mode: str, n: int, seed: int, k: int | None = None,
                 guidance: float | None = None, input_dir=None, reference_dir=None, mask: str | None = None,
                 corruption: str = "blank", name: str | None = None) -> Path:
    torch.set_num_threads(1)
    if mode == "style" and reference_dir is None:
        raise UsageError("--style needs --reference DIR")
    if mode in ("joint", "cross") and k is not None:
        raise UsageError(f"--k does not apply to --{mode}")
    if n < 0:
        raise UsageError("--n must be non-negative")
    pipe, digests = load_pipeline(cfg, guidance)
    m = pipe.n_modalities
    if mode in ("correct", "style") and k is None:
        k = pipe.T // 4
    masked = _parse_indices(mask, m, "--mask")

    def source_rows() -> Dataset:
        if input_dir is not None:
            ds = load_dataset(input_dir)
        else:
            ds = build_datasets(cfg)[1]
        if ds.n_modalities != m:
            raise UsageError(f"input has {ds.n_modalities} modalities, the model expects {m}")
        return ds.subset(np.arange(min(n, len(ds))))

    labels = None
    if mode == "joint":
        res = joint_generate(pipe, n, seed, guidance)
    elif mode == "cross":
        if len(masked) == m:
            raise UsageError("--cross with every modality masked leaves nothing to condition on")
        src = source_rows()
        presence = src.presence.copy()
        presence[:, masked] = False
        if len(src) and (~presence.any(-1)).any():
            raise UsageError("--cross input rows with no observed modality")
        labels = src.labels
        res = cross_modal_generate(pipe, Dataset(src.modalities, src.labels, presence, src.spec), seed, guidance)
    elif mode == "correct":
        if not masked:
            raise UsageError("--correct needs --mask listing the corrupted modalities")
        if len(masked) == m:
            raise UsageError("--correct needs at least one clean modality")
        src = source_rows()
        flags = np.zeros(m, dtype=bool)
        flags[masked] = True
        bad = corrupt_dataset(src, flags, corruption, seed) if input_dir is None and len(src) else src
        labels = src.labels
        res = latent_correct(pipe, bad, flags, k, seed, guidance)
    else:
        src = source_rows()
        ref = load_dataset(reference_dir)
        if len(ref) < len(src):
            raise UsageError(f"reference has {len(ref)} rows, need {len(src)}")
        labels = src.labels
        res = style_transfer(pipe, src, ref.subset(np.arange(len(src))), k, seed, guidance)

    tag = name or (f"{mode}-seed{seed}" + (f"-k{k}" if k is not None else ""))
    out = cfg.output_path() / "generate" / tag
    figures = []
    if len(res):
        out.mkdir(parents=True, exist_ok=True)
        for i, s in enumerate(res.samples):
            if save_grid(s, out / f"grid_m{i}.png"):
                figures.append({"file": f"grid_m{i}.png", "config_digest": cfg.digest(), "seed": seed})
    persist_dataset(res.to_dataset(labels), out / "samples")
    manifest = {
        "request": res.request, "nfe": res.nfe, "config_digest": cfg.digest(), "seed": seed,
        "checkpoints": digests, "figures": figures, "provenance": res.provenance,
        "inputs": {"input": None if input_dir is None else str(input_dir),
                   "reference": None if reference_dir is None else str(reference_dir),
                   "mask": masked, "corruption": corruption if mode == "correct" else None},
    }
    _write_json(out / "manifest.json", manifest)
    print(f"NFE: {res.nfe}")
    print(f"wrote {len(res)} samples to {out}")
    return out


# ---------------------------------------------------------------------------
# evaluation


def _classifiers(cfg: ExperimentConfig, train: Dataset) -> list:
    path = cfg.output_path() / "classifiers"
    if (path / "manifest.json").exists():
        return build_classifiers(CheckpointBundle.load(path))
    torch.manual_seed(cfg.seed)
    clfs = train_classifier_bank(train, cfg.seed, cfg.eval.classifier_iterations, cfg.eval.classifier_gate)
    classifiers_bundle(clfs, cfg.digest()).save(path)
    return clfs


def _evaluate_records(cfg: ExperimentConfig) -> list:
    train, test = build_datasets(cfg)
    digest, seed = cfg.digest(), cfg.seed
    records = []
    if cfg.dataset.kind == "linear_gaussian":
        from .datagen import linear_gaussian_posterior, LinearGaussianSpec
        from .generator import encode_dataset
        from .metrics import oracle_posterior_kl

        d = cfg.dataset
        spec = LinearGaussianSpec.orthogonal(d.latent_dim, (d.obs_dim,) * d.n_modalities,
                                             d.n_train + d.n_test, d.seed, d.noise_scale)
        post = linear_gaussian_posterior(spec, test.modalities)
        _, q = encode_dataset(build_stage1(_load_stage1(cfg.output_path())), test)
        records.append(MetricRecord("stage1/oracle_kl", oracle_posterior_kl(q, post.means, post.covariance),
                                    len(test), digest, seed, "closed-form KL(q || exact posterior), row mean"))
        return records
    clfs = _classifiers(cfg, train)
    records.append(MetricRecord("ground_truth/joint_coherence", joint_coherence(test.modalities, clfs), len(test),
                                digest, seed, "toy-classifier agreement over all modalities"))
    gen_root = cfg.output_path() / "generate"
    for sub in sorted(p for p in gen_root.glob("*") if (p / "samples" / "manifest.json").exists()):
        ds = load_dataset(sub / "samples")
        if len(ds) == 0:
            continue
        mode = json.loads((sub / "manifest.json").read_text())["request"]["mode"]
        records.append(MetricRecord(f"{sub.name}/joint_coherence", joint_coherence(ds.modalities, clfs), len(ds),
                                    digest, seed, "toy-classifier agreement over all modalities"))
        if mode != "joint":
            agree = float((predict_all(ds.modalities, clfs) == ds.labels[:, None]).mean())
            records.append(MetricRecord(f"{sub.name}/label_agreement", agree, len(ds), digest, seed,
                                        "classifier prediction == source label, mean over modalities"))
        else:
            try:
                fd = np.mean([frechet_feature_distance(g, r, c) for g, r, c in zip(ds.modalities, test.modalities,
                                                                                   clfs)])
                records.append(MetricRecord(f"{sub.name}/frechet_feature_distance", float(fd), len(ds), digest,
                                            seed, "Frechet distance of classifier features, mean over modalities"))
            except MetricError:
                pass
    return records


def _comparison_table(cfg: ExperimentConfig, records: list) -> tuple[list, list]:
    columns = ["this_run"] + sorted(cfg.eval.baselines)
    values = {"this_run": {r.name: r.value for r in records}}
    for name in sorted(cfg.eval.baselines):
        path = Path(cfg.eval.baselines[name]) / "eval" / "metrics.jsonl"
        values[name] = {r.name: r.value for r in read_records(path)} if path.exists() else None
    names = sorted({r.name for r in records} | {k for v in values.values() if v for k in v})
    rows = []
    for metric in names:
        row = [metric]
        for col in columns:
            v = values[col]
            row.append(ABSENT if v is None or metric not in v else f"{v[metric]:.6g}")
        rows.append(row)
    return ["metric"] + columns, rows


def cmd_evaluate(cfg: ExperimentConfig) -> Path:
    torch.set_num_threads(1)
    out = cfg.output_path() / "eval"
    records = _evaluate_records(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.jsonl").write_text(_records_text(records))
    header, rows = _comparison_table(cfg, records)
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    text = "\n".join("  ".join(str(x).ljust(w) for x, w in zip(r, widths)) for r in [header] + rows) + "\n"
    (out / "table.txt").write_text(text)
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows([header] + rows)
    (out / "table.csv").write_text(buf.getvalue())
    _write_json(out / "manifest.json", {
        "config_digest": cfg.digest(), "seed": cfg.seed,
        "tables": [{"file": f, "config_digest": cfg.digest(), "seed": cfg.seed} for f in ("table.txt", "table.csv")],
        "baselines": {k: str(v) for k, v in sorted(cfg.eval.baselines.items())},
    })
    print(text, end="")
    return out


# ---------------------------------------------------------------------------
# suites


def cmd_reproduce(suite: str, seed: int = 0, out_dir=None):
    """Run a suite, write its metrics under ``out_dir`` and print one line per criterion; returns the report."""
    from .config import OUTPUT_ROOT_ENV
    from .suites import SUITES, run_suite
    import os

    if suite not in SUITES:
        raise UsageError(f"unknown suite {suite!r}; choose from {', '.join(SUITES)}")
    torch.set_num_threads(1)
    if out_dir is None:
        root = os.environ.get(OUTPUT_ROOT_ENV, "runs")
        out_dir = Path(root) / "reproduce" / f"{suite}-seed{seed}"
    report = run_suite(suite, seed)
    report.write(out_dir)
    for r in report.results:
        print(r.line())
    print(f"{suite}: {'PASS' if report.passed else 'FAIL'} (metrics in {Path(out_dir) / 'metrics.jsonl'})")
    return report


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    from .suites import SUITES

    p = argparse.ArgumentParser(prog="sharedlatent", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="verb", required=True)
    s1 = sub.add_parser("train-stage1", help="fit encoders, fusion, posterior head and decoders")
    s1.add_argument("--config", required=True)
    s2 = sub.add_parser("train-stage2", help="fit the conditional diffusion prior on frozen stage-1 latents")
    s2.add_argument("--config", required=True)
    s2.add_argument("--stage1", help="stage-1 checkpoint directory (default: <output>/stage1)")
    g = sub.add_parser("generate", help="sample from trained checkpoints")
    g.add_argument("--config", required=True)
    mode = g.add_mutually_exclusive_group(required=True)
    for m in ("joint", "cross", "correct", "style"):
        mode.add_argument(f"--{m}", dest="mode", action="store_const", const=m)
    g.add_argument("--n", type=int, default=16)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--k", type=int, help="forward steps for --correct/--style (default T/4)")
    g.add_argument("--guidance", type=float)
    g.add_argument("--input", help="dataset directory with source tuples (default: test split)")
    g.add_argument("--reference", help="dataset directory with style references (--style)")
    g.add_argument("--mask", help="comma-separated modalities: absent for --cross, corrupted for --correct")
    g.add_argument("--corruption", default="blank", choices=("blank", "noise", "swap"))
    g.add_argument("--name", help="output subdirectory name")
    e = sub.add_parser("evaluate", help="score generation outputs and write comparison tables")
    e.add_argument("--config", required=True)
    r = sub.add_parser("reproduce", help="run an acceptance suite end to end")
    r.add_argument("suite", choices=SUITES)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.verb == "reproduce":
            return EXIT_OK if cmd_reproduce(args.suite, args.seed, args.out).passed else EXIT_ASSERT
        cfg = load_config(args.config)
        if args.verb == "train-stage1":
            cmd_train_stage1(cfg)
        elif args.verb == "train-stage2":
            cmd_train_stage2(cfg, args.stage1)
        elif args.verb == "generate":
            cmd_generate(cfg, args.mode, args.n, args.seed, args.k, args.guidance, args.input, args.reference,
                         args.mask, args.corruption, args.name)
        else:
            cmd_evaluate(cfg)
    except ClassifierGateError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_ASSERT
    except (ConfigError, CheckpointError, UsageError, WorkflowError, DatasetError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
