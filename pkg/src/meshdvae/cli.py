"""Command line interface.

Subcommands cover the whole pipeline: ``gen`` (synthetic population),
``align`` (Procrustes to a reference), ``train`` (dvae / vae / c / crecon),
``cv`` (nested cross-validation), ``transform`` (class-swap a mesh),
``saliency``, ``missing-bench`` and ``report``.

Configuration comes from an optional YAML file (--config) whose keys mirror
the long option names; unknown keys are rejected.  Explicit command line
flags win over the file.  The effective configuration is echoed to the run
directory.  DVAE_MESH_OUT sets the default output root.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from .evaluation import (DEFAULT_MISSING_FRACTIONS, FoldPlan, HyperGrid,
                         compute_metrics, consistency_check, local_distance_map,
                         missing_data_benchmark, nested_cv, saliency,
                         sex_change, sex_preserve, stratified_split)
from .hierarchy import (build_sampling_hierarchy, load_hierarchy,
                        save_hierarchy)
from .mesh import NormalizationStats, TemplateConnectivity, procrustes_align
from .meshio import load_mesh, save_mesh, save_ply
from .model import (CKPT_VERSION, MODEL_KINDS, ModelError, _MeshNetwork,
                    one_hot)
from .synthetic import (PopulationSpec, generate, pre_alignment_perturb,
                        save_dataset, load_dataset)
from .training import (MissingDataPolicy, TrainConfig, train_classifier,
                       train_crecon, train_dvae, train_vae)


class CliError(Exception):
    pass


# -- configuration plumbing -----------------------------------------------------


def _load_config_file(path, known_keys):
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise CliError(f"config file {path} must hold a mapping")
    unknown = sorted(set(data) - set(known_keys))
    if unknown:
        raise CliError(
            f"unknown config keys {unknown}; known keys: {sorted(known_keys)}")
    return data


def _merge_config(args, defaults):
    """File values override defaults; explicit CLI flags override the file.

    Overridable options carry no argparse default (None, or False for
    switches), so a non-empty value on ``args`` means the flag was given.
    """
    merged = dict(defaults)
    if getattr(args, "config", None):
        merged.update(_load_config_file(args.config, defaults.keys()))
    for key in defaults:
        cli_val = getattr(args, key, None)
        if isinstance(cli_val, bool):
            if cli_val:
                merged[key] = True
        elif cli_val is not None:
            merged[key] = cli_val
    return merged


def _out_dir(args, command="run"):
    """--out wins; otherwise a timestamped directory under the output root
    (DVAE_MESH_OUT or the working directory) keeps runs apart."""
    root = getattr(args, "out", None)
    if root:
        path = Path(root)
    else:
        base = Path(os.environ.get("DVAE_MESH_OUT") or ".")
        path = base / f"{command}-{time.strftime('%Y%m%d-%H%M%S')}"
    path.mkdir(parents=True, exist_ok=True)
    return path

def _echo_config(out_dir, command, effective):
    text = yaml.safe_dump({"command": command, **effective},
                          sort_keys=True, default_flow_style=False)
    (Path(out_dir) / "effective_config.yaml").write_text(text)
    sys.stdout.write(text)


def _cap_threads(jobs):
    if jobs is None:
        return
    if jobs < 1:
        raise CliError("--jobs must be >= 1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(jobs)


def _load_normalized_dataset(dataset_dir):
    coords, labels, conn, regions = load_dataset(dataset_dir)
    stats = NormalizationStats.from_dataset(coords)
    x = np.stack([stats.apply(m) for m in coords])
    return x, labels, conn, regions, stats, coords


def _hierarchy_for(dataset_dir, conn, coords, factors=(4, 4, 4, 4)):
    """Build (or reuse a cached) pooling hierarchy for the dataset template.

    The decimation geometry is the mean shape of the dataset.
    """
    cache = Path(dataset_dir) / "hierarchy.bin"
    if cache.exists():
        hier = load_hierarchy(cache)
        if hier.level_sizes[0] == conn.n_vertices:
            return hier
    template = np.asarray(coords).mean(axis=0)
    usable = []
    n = conn.n_vertices
    for f in factors:
        if n // f >= 4:
            usable.append(f)
            n = -(-n // f)
    hier = build_sampling_hierarchy(conn, template, tuple(usable) or (1,))
    save_hierarchy(cache, hier)
    return hier


def _load_model(path, hierarchy, expect_kind=None):
    descriptor = _MeshNetwork.read_descriptor(path)
    kind = descriptor["kind"]
    if expect_kind and kind != expect_kind:
        raise CliError(f"checkpoint {path} holds a {kind!r} model, "
                       f"expected {expect_kind!r}")
    return MODEL_KINDS[kind].load(path, hierarchy)


# -- subcommands -----------------------------------------------------------------


GEN_DEFAULTS = {
    "seed": 0, "subjects": 600, "subdivisions": 3, "class_amplitude": None,
    "class_patch_radius": None, "nuisance_scale": None, "noise_sigma": None,
    "perturb": False,
}


def cmd_gen(args, parser):
    cfg = _merge_config(args, GEN_DEFAULTS)
    out = _out_dir(args, "gen")
    overrides = {k: cfg[k] for k in ("class_amplitude", "class_patch_radius",
                                     "nuisance_scale", "noise_sigma")
                 if cfg[k] is not None}
    spec = PopulationSpec(subdivisions=cfg["subdivisions"],
                          n_subjects=cfg["subjects"], seed=cfg["seed"],
                          **overrides)
    samples, conn, regions = generate(spec)
    if cfg["perturb"]:
        rng = np.random.default_rng(np.random.SeedSequence(
            entropy=spec.seed, spawn_key=(11,)))
        samples = [pre_alignment_perturb(s, rng) for s in samples]
    save_dataset(out, samples, conn, regions, spec=spec)
    _echo_config(out, "gen", cfg)
    print(f"wrote {len(samples)} meshes to {out}")
    return 0


def cmd_align(args, parser):
    out = _out_dir(args, "align")
    coords, labels, conn, regions = load_dataset(args.dataset)
    ref_idx = args.reference
    if not (0 <= ref_idx < len(coords)):
        raise CliError(f"--reference {ref_idx} outside dataset of {len(coords)}")
    from .mesh import CorrespondedMesh
    target = CorrespondedMesh(coords[ref_idx], conn, int(labels[ref_idx]))
    residuals = []
    aligned_samples = []
    from .synthetic import LabeledSample
    for k in range(len(coords)):
        src = CorrespondedMesh(coords[k], conn, int(labels[k]))
        _, mesh, residual = procrustes_align(src, target)
        residuals.append(residual)
        aligned_samples.append(LabeledSample(mesh, int(labels[k]), k,
                                             np.zeros(0)))
    save_dataset(out, aligned_samples, conn, regions)
    print(f"aligned {len(coords)} meshes to subject {ref_idx}; "
          f"mean residual {np.mean(residuals):.6g}")
    return 0


TRAIN_DEFAULTS = {
    "alpha": 1.0, "v": 1.0, "epochs": 600, "batch_size": 16, "latent": 16,
    "seed": 0, "augment": False, "dvae_checkpoint": None,
}


def cmd_train(args, parser):
    cfg = _merge_config(args, TRAIN_DEFAULTS)
    _cap_threads(args.jobs)
    out = _out_dir(args, "train")
    x, labels, conn, regions, stats, coords = _load_normalized_dataset(args.dataset)
    hier = _hierarchy_for(args.dataset, conn, coords)

    aug = MissingDataPolicy() if cfg["augment"] else None
    tc = TrainConfig(alpha=cfg["alpha"], v=cfg["v"], latent=cfg["latent"],
                     batch_size=cfg["batch_size"], epochs=cfg["epochs"],
                     seed=cfg["seed"], augmentation=aug)
    _echo_config(out, f"train {args.model}", cfg)
    log_path = out / "training_log.csv"

    if args.model == "dvae":
        model, _ = train_dvae(x, labels, hier, tc, log_path=log_path,
                              checkpoint_dir=out)
    elif args.model == "vae":
        model, _, _ = train_vae(x, hier, tc, log_path=log_path,
                                checkpoint_dir=out)
    elif args.model == "c":
        model, _ = train_classifier(x, labels, hier, tc, log_path=log_path,
                                    checkpoint_dir=out)
    elif args.model == "crecon":
        if not cfg["dvae_checkpoint"]:
            raise CliError("crecon needs --dvae-checkpoint")
        dvae = _load_model(cfg["dvae_checkpoint"], hier, expect_kind="dvae")
        model, _ = train_crecon(x, labels, dvae, hier, tc, log_path=log_path,
                                checkpoint_dir=out)
    else:
        raise CliError(f"unknown model {args.model}")

    ckpt = out / f"{args.model}.ckpt"
    model.save(ckpt)
    stats.save(out / "normalization.npz")
    print(f"saved {ckpt}")
    return 0


CV_DEFAULTS = {
    "alphas": "0.5,1,2,3,4,5", "sqrt_vs": "0.7,1,1.3,1.6,1.9",
    "folds": 5, "epochs": 600, "seed": 0,
}


def cmd_cv(args, parser):
    cfg = _merge_config(args, CV_DEFAULTS)
    _cap_threads(args.jobs)
    out = _out_dir(args, "cv")
    coords, labels, conn, regions = load_dataset(args.dataset)
    hier = _hierarchy_for(args.dataset, conn, coords)
    grid = HyperGrid(
        alphas=tuple(float(a) for a in str(cfg["alphas"]).split(",")),
        sqrt_vs=tuple(float(v) for v in str(cfg["sqrt_vs"]).split(",")))
    plan = FoldPlan(n_outer=cfg["folds"], seed=cfg["seed"])
    base = TrainConfig(epochs=cfg["epochs"], seed=cfg["seed"])
    _echo_config(out, "cv", cfg)

    def progress(fold, alpha, v, osrsr):
        print(f"fold {fold} alpha={alpha:g} v={v:g}: inner OSRSR {100 * osrsr:.1f}%")

    report, records = nested_cv(coords, labels, hier, grid, plan, base,
                                progress=progress)
    text = report.to_text()
    (out / "cv_report.txt").write_text(text + "\n")
    print(text)
    return 0


CLASS_NAMES = ("male", "female")  # class 0, class 1


def cmd_transform(args, parser):
    out = _out_dir(args, "transform")
    hier = load_hierarchy(args.hierarchy)
    dvae = _load_model(args.checkpoint, hier, expect_kind="dvae")
    stats = NormalizationStats.load(args.stats) if args.stats else None
    mesh = load_mesh(args.mesh)
    x = stats.apply(mesh.coords) if stats else mesh.coords

    if args.label is None:
        label = int(dvae.classify(x)[0])
        print(f"no label given; using the model's own estimate ({label})")
    else:
        label = args.label

    recon = {label: sex_preserve(dvae, x, label),
             1 - label: sex_change(dvae, x, label)}
    if stats:
        recon = {c: stats.invert(r) for c, r in recon.items()}
    wanted = (0, 1) if args.emit == "both" else (CLASS_NAMES.index(args.emit),)
    from .mesh import CorrespondedMesh
    written = []
    for c in wanted:
        path = out / f"xhat_{CLASS_NAMES[c]}.ply"
        save_mesh(path, CorrespondedMesh(recon[c], mesh.connectivity, c))
        written.append(path)
    displacement = np.linalg.norm(recon[1 - label] - recon[label], axis=-1)
    path = out / "displacement.ply"
    save_ply(path, CorrespondedMesh(recon[label], mesh.connectivity, label),
             quality=displacement)
    written.append(path)
    print("wrote " + ", ".join(str(p) for p in written))
    return 0


def cmd_saliency(args, parser):
    out = _out_dir(args, "saliency")
    x, labels, conn, regions, stats, coords = _load_normalized_dataset(args.dataset)
    hier = _hierarchy_for(args.dataset, conn, coords)
    model = _load_model(args.checkpoint, hier)
    maps = [saliency(model, m, variant=args.variant).values for m in x]
    mean_map = np.mean(maps, axis=0)
    from .mesh import CorrespondedMesh
    save_ply(out / "saliency.ply",
             CorrespondedMesh(coords.mean(axis=0), conn), quality=mean_map)
    np.savetxt(out / "saliency.csv", mean_map, fmt="%.10g")
    print(f"wrote per-vertex map ({len(mean_map)} vertices) to {out}")
    return 0


BENCH_DEFAULTS = {"epochs": 600, "seed": 0, "test_fraction": 0.2}


def cmd_missing_bench(args, parser):
    cfg = _merge_config(args, BENCH_DEFAULTS)
    _cap_threads(args.jobs)
    out = _out_dir(args, "missing-bench")
    coords, labels, conn, regions = load_dataset(args.dataset)
    hier = _hierarchy_for(args.dataset, conn, coords)
    _echo_config(out, "missing-bench", cfg)

    rng = np.random.default_rng(cfg["seed"])
    tr, te = stratified_split(labels, cfg["test_fraction"], rng)
    stats = NormalizationStats.from_dataset(coords[tr])
    xtr = np.stack([stats.apply(m) for m in coords[tr]])
    xte = np.stack([stats.apply(m) for m in coords[te]])

    aug = MissingDataPolicy()
    tc = TrainConfig(alpha=2.0, v=1.0, epochs=cfg["epochs"], seed=cfg["seed"],
                     augmentation=aug)
    print("training DVAE (augmented) ...")
    dvae, _ = train_dvae(xtr, labels[tr], hier, tc)
    print("training C (augmented) ...")
    c, _ = train_classifier(xtr, labels[tr], hier, tc)
    print("training VAE (augmented) ...")
    vae, _, _ = train_vae(xtr, hier, tc)
    print("training C_recon (augmented) ...")
    crecon, _ = train_crecon(xtr, labels[tr], dvae, hier, tc)

    results = missing_data_benchmark(xte, labels[te], classifier=c, dvae=dvae,
                                     vae=vae, crecon=crecon)
    lines = ["method," + ",".join(f"{f:g}" for f in DEFAULT_MISSING_FRACTIONS)]
    for name, accs in results.items():
        lines.append(name + "," + ",".join(
            f"{accs[float(f)]:.2f}" for f in DEFAULT_MISSING_FRACTIONS))
    table = "\n".join(lines)
    (out / "missing_bench.csv").write_text(table + "\n")
    print(table)
    return 0


def cmd_report(args, parser):
    _cap_threads(args.jobs)
    out = _out_dir(args, "report")
    x, labels, conn, regions, stats, coords = _load_normalized_dataset(args.dataset)
    hier = _hierarchy_for(args.dataset, conn, coords)
    dvae = _load_model(args.checkpoint, hier, expect_kind="dvae")
    c = _load_model(args.classifier, hier, expect_kind="classifier")

    metrics = compute_metrics(dvae, c, x, labels, stats)
    agreement = consistency_check(dvae, c, x)
    preserved = sex_preserve(dvae, x, labels)
    swapped = sex_change(dvae, x, labels)
    dmap = local_distance_map(preserved, swapped)

    from .mesh import CorrespondedMesh
    save_ply(out / "swap_distance_map.ply",
             CorrespondedMesh(coords.mean(axis=0), conn), quality=dmap)
    lines = [
        f"CA {metrics.ca:.2f}%",
        f"OSRSR {metrics.osrsr:.2f}%",
        f"SSRSR {metrics.ssrsr:.2f}%",
        f"RE {metrics.re:.4f}mm",
        f"consistency {100 * agreement:.2f}%",
    ]
    if regions and regions.get("all"):
        r = np.asarray(regions["all"], dtype=np.int64)
        lines.append(f"swap-map mass on R {dmap[r].sum() / dmap.sum():.3f}")
    text = "\n".join(lines)
    (out / "report.txt").write_text(text + "\n")
    print(text)
    return 0


# -- parser ----------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="meshdvae",
        description="Disentangled shape analysis of corresponded meshes.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--jobs", type=int, default=None,
                       help="cap on numeric library threads")
        p.add_argument("--out", help="output directory "
                       "(default: $DVAE_MESH_OUT or the working directory)")

    p = sub.add_parser("gen", help="generate a synthetic labeled population")
    common(p)
    p.add_argument("--subjects", type=int)
    p.add_argument("--subdivisions", type=int)
    p.add_argument("--class-amplitude", dest="class_amplitude", type=float)
    p.add_argument("--class-patch-radius", dest="class_patch_radius", type=float)
    p.add_argument("--nuisance-scale", dest="nuisance_scale", type=float)
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    p.add_argument("--perturb", action="store_true",
                   help="apply random similarity transforms (exercises align)")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("align", help="Procrustes-align a dataset to a reference")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--reference", type=int, default=0,
                   help="subject index used as the alignment target")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("train", help="train one model")
    common(p)
    p.add_argument("model", choices=["dvae", "vae", "c", "crecon"])
    p.add_argument("--dataset", required=True)
    p.add_argument("--alpha", type=float)
    p.add_argument("--v", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--latent", type=int)
    p.add_argument("--augment", action="store_true",
                   help="missing-data augmentation during training")
    p.add_argument("--dvae-checkpoint", dest="dvae_checkpoint",
                   help="trained DVAE (required for crecon)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("cv", help="nested cross-validation with grid search")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--alphas")
    p.add_argument("--sqrt-vs", dest="sqrt_vs")
    p.add_argument("--folds", type=int)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("transform", help="class-swap one mesh")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--hierarchy", required=True)
    p.add_argument("--stats", help="normalization statistics (.npz)")
    p.add_argument("--mesh", required=True)
    p.add_argument("--label", type=int, choices=[0, 1],
                   help="true class; omitted, the model estimates it")
    p.add_argument("--as", dest="emit", choices=["male", "female", "both"],
                   default="both",
                   help="which reconstruction(s) to write (male = class 0, "
                        "female = class 1)")
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("saliency", help="mean per-vertex saliency over a dataset")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--variant", choices=["probability", "unnormalized"],
                   default="probability")
    p.set_defaults(func=cmd_saliency)

    p = sub.add_parser("missing-bench",
                       help="accuracy sweep over amputation fractions 0..0.7")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--test-fraction", dest="test_fraction", type=float)
    p.set_defaults(func=cmd_missing_bench)

    p = sub.add_parser("report", help="metrics and distance maps on a dataset")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True, help="trained DVAE")
    p.add_argument("--classifier", required=True, help="trained C")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, parser)
    except (CliError, ModelError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
