"""Command-line surface: dataset generation, training, sampling sweeps,
evaluation, and region analysis.

Exit codes: 0 success, 2 usage or validation failure, 3 numerical failure
(non-finite loss abort).  Every command writes a ``manifest.json`` into
its output directory recording the arguments, seeds and input hashes it
ran from.  Set ``CCPC_THREADS`` before launching to cap both the BLAS
pool and the metric evaluation workers.
"""

from __future__ import annotations

import os

if "CCPC_THREADS" in os.environ:
    os.environ.setdefault("OPENBLAS_NUM_THREADS", os.environ["CCPC_THREADS"])

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

import numpy as np
from jsonschema import Draft202012Validator

import ccpc
import ccpc.tensor as T
from ccpc import conditioning as cond
from ccpc import metrics as M
from ccpc import shapes
from ccpc.baselines import b1_resample, b2_scale
from ccpc.models import GeneratorConfig, init_generator, load_model_config
from ccpc.training import TrainConfig, TrainingDiverged, TrainingError, evaluate_regions, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3

REGION_COLORS = {1: "#2ca02c", 2: "#ff7f0e", 3: "#1f77b4"}  # green, orange, blue


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# run-config schema

_TRAIN_PROPS = {
    "lr": {"type": "number"},
    "beta1": {"type": "number"},
    "beta2": {"type": "number"},
    "lambda_gp": {"type": "number"},
    "critic_iters": {"type": "integer"},
    "batch_size": {"type": "integer"},
    "epochs": {"type": "integer"},
    "sampling": {"enum": ["uniform", "dataset", "kde"]},
    "variant": {"enum": ["main", "variant_a", "variant_b", "vanilla_cgan",
                         "regression_cgan", "backbone"]},
    "seed": {"type": "integer"},
    "eval_every": {"type": "integer"},
    "lambda_reg": {"type": "number"},
    "eval_fraction": {"type": "number"},
    "extractor_seed": {"type": "integer"},
    "discriminator_variant": {"type": ["string", "null"]},
}

_GENERATOR_PROPS = {
    "latent_dim": {"type": "integer"},
    "label_dim": {"type": "integer"},
    "latent_embed": {"type": "integer"},
    "label_embed": {"type": "integer"},
    "features": {"type": "array", "items": {"type": "integer"}},
    "branching": {"type": "array", "items": {"type": "integer"}},
    "support": {"type": "integer"},
    "leaky_slope": {"type": "number"},
}

RUN_CONFIG_SCHEMA = {
    "type": "object",
    "properties": {
        "dataset": {"type": "string"},
        "out": {"type": "string"},
        "train": {"type": "object", "properties": _TRAIN_PROPS, "additionalProperties": False},
        "generator": {"type": "object", "properties": _GENERATOR_PROPS,
                      "additionalProperties": False},
    },
    "required": ["dataset", "out", "train"],
    "additionalProperties": False,
}


def load_run_config(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise UsageError(f"cannot read run config {path}: {e}") from e
    errors = sorted(Draft202012Validator(RUN_CONFIG_SCHEMA).iter_errors(doc),
                    key=lambda e: list(e.path))
    if errors:
        msgs = "; ".join(f"{'/'.join(str(p) for p in e.path) or '<root>'}: {e.message}"
                         for e in errors)
        raise UsageError(f"invalid run config: {msgs}")
    return doc


def _hash_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def dataset_dir_hash(path) -> str:
    path = Path(path)
    h = hashlib.sha256()
    for name in ("meta.jsonl", "points.bin"):
        p = path / name
        if p.exists():
            h.update(_hash_file(p).encode())
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, args: dict, hashes: dict | None = None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "args": args, "version": ccpc.__version__}
    if hashes:
        doc["input_hashes"] = hashes
    (out_dir / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# plotting (hand-rolled SVG; a CSV always accompanies it)

def write_scatter_svg(path, points: np.ndarray, regions: np.ndarray,
                      xlabel: str, ylabel: str, size: int = 420) -> None:
    pad = 40
    span = size - 2 * pad
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect x="{pad}" y="{pad}" width="{span}" height="{span}" fill="white" '
        f'stroke="black" stroke-width="1"/>',
    ]
    for p, r in zip(points, regions):
        cx = pad + float(np.clip(p[0], 0, 1)) * span
        cy = size - pad - float(np.clip(p[1], 0, 1)) * span
        parts.append(f'<circle cx="{cx:.1f}" cy="{cy:.1f}" r="3" '
                     f'fill="{REGION_COLORS[int(r)]}" fill-opacity="0.75"/>')
    parts.append(f'<text x="{size / 2:.0f}" y="{size - 8}" text-anchor="middle" '
                 f'font-size="13">{xlabel}</text>')
    parts.append(f'<text x="14" y="{size / 2:.0f}" text-anchor="middle" font-size="13" '
                 f'transform="rotate(-90 14 {size / 2:.0f})">{ylabel}</text>')
    for v in (0.0, 0.5, 1.0):
        x = pad + v * span
        y = size - pad - v * span
        parts.append(f'<text x="{x:.0f}" y="{size - pad + 16}" text-anchor="middle" '
                     f'font-size="10">{v:.1f}</text>')
        parts.append(f'<text x="{pad - 6}" y="{y + 4:.0f}" text-anchor="end" '
                     f'font-size="10">{v:.1f}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts))


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args) -> int:
    fam = shapes.ShapeFamily(kind=args.family, extent_law=args.extent_law)
    clouds = shapes.generate_dataset(fam, args.count, args.n_points, args.seed,
                                     label=args.label)
    out = Path(args.out)
    shapes.write_dataset(out, clouds)
    write_manifest(out, "gen-data", {
        "family": args.family, "count": args.count, "n_points": args.n_points,
        "seed": args.seed, "label": args.label, "extent_law": args.extent_law,
    })
    labels = shapes.dataset_labels(clouds)
    print(f"wrote {len(clouds)} clouds to {out}")
    if len(clouds):
        lo = labels.min(axis=0)
        hi = labels.max(axis=0)
        mean = labels.mean(axis=0)
        for j in range(labels.shape[1]):
            print(f"  label[{j}]: min={lo[j]:.3f} mean={mean[j]:.3f} max={hi[j]:.3f}")
    return EXIT_OK


def cmd_train(args) -> int:
    doc = load_run_config(args.config)
    train_doc = dict(doc.get("train", {}))
    if args.seed is not None:
        train_doc["seed"] = args.seed
    out = Path(args.out or doc["out"])
    try:
        config = TrainConfig.from_json(train_doc)
        gen_cfg = GeneratorConfig.from_json(doc["generator"]) if "generator" in doc else None
        clouds = shapes.read_dataset(doc["dataset"])
        result = train(config, clouds, out, gen_config=gen_cfg, quiet=args.quiet)
    except TrainingDiverged as e:
        print(f"training aborted on non-finite loss: {e.diagnostics}", file=sys.stderr)
        return EXIT_NUMERIC
    except (TrainingError, shapes.DatasetFormatError, cond.ConditioningError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    manifest = json.loads((out / "manifest.json").read_text())
    manifest["run_config"] = doc
    manifest["input_hashes"] = {"dataset": dataset_dir_hash(doc["dataset"])}
    manifest["version"] = ccpc.__version__
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    print(f"run complete: selected epoch {result.selected.epoch} "
          f"(fpd={result.selected.fpd:.4f}, mse={result.selected.mse:.4f}) -> {out}")
    return EXIT_OK


def _load_run_generator(run_dir: Path):
    run_dir = Path(run_dir)
    manifest_path = run_dir / "manifest.json"
    model_path = run_dir / "model.json"
    if not manifest_path.exists() or not model_path.exists():
        raise UsageError(f"{run_dir} is not a training run directory")
    manifest = json.loads(manifest_path.read_text())
    gen_cfg, _, _ = load_model_config(model_path)
    ckpt = manifest.get("selected_checkpoint")
    if ckpt is None or not Path(ckpt).exists():
        raise UsageError(f"selected checkpoint missing in {run_dir}")
    gen = init_generator(gen_cfg, seed=0)
    arrays = T.load_checkpoint(ckpt)
    for p in gen.parameters():
        if p.name not in arrays:
            raise UsageError(f"checkpoint {ckpt} lacks generator parameter {p.name}")
        p.value.data[...] = arrays[p.name]
    return gen, gen_cfg, manifest


def _parse_floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v != ""]
    except ValueError as e:
        raise UsageError(f"bad float list {text!r}") from e


def _sample_csv_row(writer, idx, mode, y_req, cloud, ply, extra=()):
    ext = M.extents(cloud)
    writer.writerow([idx, mode, *[f"{v:.6f}" for v in y_req], *[f"{v:.6f}" for v in ext],
                     ply, *extra])


def cmd_sample(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    gen, gen_cfg, run_manifest = _load_run_generator(args.checkpoint)
    d = gen_cfg.label_dim
    rng = np.random.default_rng(args.seed)
    rows = []
    clouds_out = []

    def emit(idx, mode, y_req, cloud, extra=()):
        ply = out / f"{mode}_{idx:03d}.ply"
        shapes.write_ply(ply, cloud)
        rows.append((idx, mode, y_req, cloud, ply.name, extra))
        clouds_out.append(shapes.LabeledCloud(points=cloud.astype(np.float32),
                                              y=np.asarray(y_req, dtype=np.float64)))

    if args.mode in ("fixed_z_sweep_y", "grid") and d == 0:
        raise UsageError("checkpoint is an unconditioned generator; it cannot sweep labels")

    if args.mode == "fixed_z_sweep_y":
        base = np.asarray(_parse_floats(args.y) if args.y else [0.5] * d)
        if len(base) != d:
            raise UsageError(f"--y needs {d} components")
        values = _parse_floats(args.values) if args.values else [0.4, 0.5, 0.6, 0.7, 0.8]
        z = rng.normal(size=gen_cfg.latent_dim)
        for i, v in enumerate(values):
            y = base.copy()
            y[args.axis] = v
            emit(i, args.mode, y, gen.generate(z, y))
    elif args.mode == "fixed_y_sweep_z":
        y = np.asarray(_parse_floats(args.y) if args.y else [0.5] * d) if d else None
        for i in range(args.count):
            z = rng.normal(size=gen_cfg.latent_dim)
            emit(i, args.mode, y if y is not None else [], gen.generate(z, y))
    elif args.mode == "grid":
        values = _parse_floats(args.values) if args.values else [0.36, 0.48, 0.60, 0.72, 0.84]
        ax1, ax2 = (int(v) for v in args.axes.split(","))
        base = np.asarray(_parse_floats(args.y) if args.y else [0.5] * d)
        z = rng.normal(size=gen_cfg.latent_dim)
        idx = 0
        for v1 in values:
            for v2 in values:
                y = base.copy()
                y[ax1] = v1
                y[ax2] = v2
                emit(idx, args.mode, y, gen.generate(z, y))
                idx += 1
    elif args.mode == "region":
        if not args.dataset:
            raise UsageError("region mode needs --dataset to fit the label density")
        labels = shapes.dataset_labels(shapes.read_dataset(args.dataset))
        kde = cond.fit_kde(labels)
        model = cond.fit_regions(kde, labels)
        for i in range(args.count):
            y = cond.sample_from_region(model, kde, args.region, rng)
            cloud = gen.generate(rng.normal(size=gen_cfg.latent_dim), y)
            emit(i, args.mode, y, cloud, extra=(args.region, cond.classify_region(model, y)))
    elif args.mode == "baseline":
        if args.dataset:
            labels = shapes.dataset_labels(shapes.read_dataset(args.dataset))
            targets = labels[rng.integers(len(labels), size=args.count)]
        elif args.y:
            targets = np.tile(_parse_floats(args.y), (args.count, 1))
        else:
            raise UsageError("baseline mode needs --dataset or --y for targets")
        for i, y in enumerate(targets):
            if args.baseline == "b1":
                if d != 0:
                    raise UsageError("baseline b1 needs an unconditioned checkpoint")
                cloud = b1_resample(gen, y, k=args.k, rng=rng)
            else:
                if d == 0:
                    cloud = gen.generate(rng.normal(size=gen_cfg.latent_dim))
                else:
                    cloud = gen.generate(rng.normal(size=gen_cfg.latent_dim),
                                         rng.uniform(size=d))
                cloud = b2_scale(cloud, y)
            emit(i, f"baseline_{args.baseline}", y, cloud)
    else:
        raise UsageError(f"unknown mode {args.mode!r}")

    with open(out / "samples.csv", "w", newline="") as f:
        writer = csv.writer(f)
        dim = len(rows[0][2]) if rows else 0
        writer.writerow(["index", "mode", *[f"y_req_{j}" for j in range(dim)],
                         "ext_x", "ext_y", "ext_z", "ply", "region", "classified"])
        for idx, mode, y_req, cloud, ply, extra in rows:
            _sample_csv_row(writer, idx, mode, y_req, cloud, ply, extra)
    shapes.write_dataset(out / "as_dataset", clouds_out)
    write_manifest(out, "sample", {
        "checkpoint": str(args.checkpoint), "mode": args.mode, "seed": args.seed,
        "count": args.count, "y": args.y, "values": args.values, "axis": args.axis,
        "axes": args.axes, "region": args.region, "baseline": args.baseline, "k": args.k,
        "dataset": args.dataset,
    }, hashes={"run": run_manifest.get("dataset_hash", "")})
    print(f"wrote {len(rows)} samples to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    gen_clouds = shapes.read_dataset(args.gen_dir)
    ref_clouds = shapes.read_dataset(args.ref_dir)
    if not gen_clouds or not ref_clouds:
        raise UsageError("both directories must contain clouds")
    sizes = {c.points.shape[0] for c in gen_clouds} | {c.points.shape[0] for c in ref_clouds}
    if len(sizes) != 1:
        majority = max(sizes, key=lambda n: sum(c.points.shape[0] == n
                                                for c in gen_clouds + ref_clouds))
        offenders = [f"{tag}#{i}(n={c.points.shape[0]})"
                     for tag, group in (("gen", gen_clouds), ("ref", ref_clouds))
                     for i, c in enumerate(group) if c.points.shape[0] != majority]
        raise UsageError(
            f"EMD needs equal point counts everywhere, found sizes {sorted(sizes)}; "
            "offending clouds: " + ", ".join(offenders[:8])
        )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = M.evaluate_sets(
        [c.points.astype(np.float64) for c in gen_clouds],
        [c.points.astype(np.float64) for c in ref_clouds],
        y_cond=np.stack([c.y for c in gen_clouds]),
        extractor=M.FeatureExtractor(seed=args.extractor_seed),
    )
    report.write_csv(out / "report.csv")
    report.write_json(out / "report.json")
    write_manifest(out, "evaluate", {
        "gen_dir": str(args.gen_dir), "ref_dir": str(args.ref_dir),
        "extractor_seed": args.extractor_seed,
    }, hashes={"gen": dataset_dir_hash(args.gen_dir), "ref": dataset_dir_hash(args.ref_dir)})
    for k, v in report.to_dict().items():
        print(f"{k}: {v:.6f}")
    return EXIT_OK


def cmd_region_report(args) -> int:
    clouds = shapes.read_dataset(args.dataset)
    if len(clouds) < 2:
        raise UsageError("dataset too small for a region report")
    labels = shapes.dataset_labels(clouds)
    try:
        kde = cond.fit_kde(labels)
        model = cond.fit_regions(kde, labels, k=min(cond.DEFAULT_KNN, len(labels)))
    except cond.ConditioningError as e:
        raise UsageError(str(e)) from e
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    with open(out / "regions.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([f"y_{j}" for j in range(labels.shape[1])] + ["density", "region"])
        for y, dens, reg in zip(labels, model.densities, model.regions):
            w.writerow([*[f"{v:.6f}" for v in y], f"{dens:.6e}", int(reg)])

    dims = [int(v) for v in args.dims.split(",")]
    if len(dims) != 2 or any(not 0 <= v < labels.shape[1] for v in dims):
        raise UsageError(f"--dims must name two label axes, got {args.dims!r}")
    write_scatter_svg(out / "regions.svg", labels[:, dims], model.regions,
                      xlabel=f"label[{dims[0]}]", ylabel=f"label[{dims[1]}]")
    cond.save_region_model(out / "region_model.json", model, kde)

    counts = model.region_counts()
    total = counts.sum()
    print("region fractions: " + "  ".join(
        f"{i + 1}-sigma: {c}/{total} ({100 * c / total:.1f}%)" for i, c in enumerate(counts)))

    if args.generate:
        if not args.checkpoint:
            raise UsageError("--generate needs --checkpoint")
        gen, gen_cfg, _ = _load_run_generator(args.checkpoint)
        if gen_cfg.label_dim != labels.shape[1]:
            raise UsageError("checkpoint label dimension does not match the dataset")
        ref = [c.points.astype(np.float64) for c in clouds[: min(len(clouds), 200)]]
        results = evaluate_regions(gen, kde, model, args.per_region, seed=args.seed,
                                   ref_clouds=ref,
                                   extractor=M.FeatureExtractor(seed=args.extractor_seed))
        with open(out / "region_metrics.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["region", "mse_percent", "fpd"])
            for region in (1, 2, 3):
                w.writerow([region, f"{results[region]['mse']:.6f}",
                            f"{results[region]['fpd']:.6f}"])
        for region in (1, 2, 3):
            print(f"region {region}: mse={results[region]['mse']:.4f} "
                  f"fpd={results[region]['fpd']:.4f}")

    write_manifest(out, "region-report", {
        "dataset": str(args.dataset), "dims": args.dims, "generate": args.generate,
        "checkpoint": args.checkpoint, "per_region": args.per_region, "seed": args.seed,
    }, hashes={"dataset": dataset_dir_hash(args.dataset)})
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ccpc",
                                description="continuous-conditional point cloud GAN")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic shape dataset")
    g.add_argument("--family", choices=shapes.FAMILY_KINDS, default="box")
    g.add_argument("--count", type=int, default=500)
    g.add_argument("--n-points", type=int, default=256)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--label", choices=["dims", "part-ratio"], default="dims")
    g.add_argument("--extent-law", choices=["longtail", "uniform"], default="longtail")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a model from a JSON run config")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int, default=None, help="override the config seed")
    t.add_argument("--out", default=None, help="override the config output directory")
    t.add_argument("--verbose", dest="quiet", action="store_false", default=True)
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("sample", help="sample clouds from a trained run directory")
    s.add_argument("--checkpoint", required=True, help="training run directory")
    s.add_argument("--mode", required=True,
                   choices=["fixed_z_sweep_y", "fixed_y_sweep_z", "grid", "region", "baseline"])
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--count", type=int, default=8)
    s.add_argument("--y", default=None, help="comma-separated base label")
    s.add_argument("--values", default=None, help="comma-separated sweep values")
    s.add_argument("--axis", type=int, default=2)
    s.add_argument("--axes", default="1,2", help="grid mode: the two label axes")
    s.add_argument("--region", type=int, default=3, choices=[1, 2, 3])
    s.add_argument("--baseline", choices=["b1", "b2"], default="b2")
    s.add_argument("--k", type=int, default=10, help="b1 candidate count")
    s.add_argument("--dataset", default=None,
                   help="dataset directory for region fitting / baseline targets")
    s.set_defaults(fn=cmd_sample)

    e = sub.add_parser("evaluate", help="metric report of generated vs reference sets")
    e.add_argument("--gen-dir", required=True)
    e.add_argument("--ref-dir", required=True)
    e.add_argument("--extractor-seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_evaluate)

    r = sub.add_parser("region-report", help="density regions of a dataset's labels")
    r.add_argument("--dataset", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--dims", default="1,2", help="two label axes for the scatter plot")
    r.add_argument("--generate", action="store_true",
                   help="also sample per region from a checkpoint and report metrics")
    r.add_argument("--checkpoint", default=None)
    r.add_argument("--per-region", type=int, default=100)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--extractor-seed", type=int, default=0)
    r.set_defaults(fn=cmd_region_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except cond.RegionUnsampleable as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (shapes.DatasetFormatError, cond.ConditioningError, T.TensorError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
