"""Class-swap procedures, the four metrics, nested cross-validation with grid
search, gradient saliency and local average distance maps.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .mesh import NormalizationStats
from .model import ClassifierC, ClassifierCRecon, DvaeModel, VaeModel, one_hot
from .training import (SIDE_NAMES, TrainConfig, TrainingDivergence,
                       crecon_inputs, mask_side, train_classifier, train_dvae)


class EvaluationError(Exception):
    pass


# -- class-swap procedures ---------------------------------------------------------


def sex_change(dvae: DvaeModel, x, y=None):
    """Re-decode with the label flipped: same z (= mu), opposite class.

    ``y`` is the true label; when None the q0 estimate is used instead.
    """
    if y is None:
        y = dvae.classify(np.asarray(x))
        if np.asarray(x).ndim == 2:
            y = int(y[0])
    return dvae.reconstruct(x, y, flip=True)


def sex_preserve(dvae: DvaeModel, x, y=None):
    """Same procedure as sex_change except the label is kept."""
    if y is None:
        y = dvae.classify(np.asarray(x))
        if np.asarray(x).ndim == 2:
            y = int(y[0])
    return dvae.reconstruct(x, y, flip=False)


# -- metrics ------------------------------------------------------------------------


@dataclass
class FoldMetrics:
    ca: float      # classification accuracy of q0, percent
    osrsr: float   # opposite sex reconstruction success rate, percent
    ssrsr: float   # same sex reconstruction success rate, percent
    re: float      # reconstruction error, mm


@dataclass
class MetricsReport:
    folds: list = field(default_factory=list)  # FoldMetrics per fold
    chosen: list = field(default_factory=list)  # (alpha, v) per fold, optional

    def aggregate(self):
        out = {}
        for name in ("ca", "osrsr", "ssrsr", "re"):
            vals = np.array([getattr(f, name) for f in self.folds])
            out[name] = (float(vals.mean()), float(vals.std()))
        return out

    def to_text(self):
        lines = []
        for i, f in enumerate(self.folds):
            chosen = ""
            if i < len(self.chosen) and self.chosen[i] is not None:
                a, v = self.chosen[i]
                chosen = f" alpha={a} v={v:g}"
            lines.append(
                f"fold {i}: CA={f.ca:.2f}% OSRSR={f.osrsr:.2f}% "
                f"SSRSR={f.ssrsr:.2f}% RE={f.re:.4f}mm{chosen}")
        agg = self.aggregate()
        lines.append(
            "aggregate: "
            f"CA={agg['ca'][0]:.2f}+-{agg['ca'][1]:.2f}% "
            f"OSRSR={agg['osrsr'][0]:.2f}+-{agg['osrsr'][1]:.2f}% "
            f"SSRSR={agg['ssrsr'][0]:.2f}+-{agg['ssrsr'][1]:.2f}% "
            f"RE={agg['re'][0]:.4f}+-{agg['re'][1]:.4f}mm")
        return "\n".join(lines)


def compute_metrics(dvae: DvaeModel, classifier_c: ClassifierC,
                    x_test: np.ndarray, y_test: np.ndarray,
                    stats: Optional[NormalizationStats]) -> FoldMetrics:
    """CA / OSRSR / SSRSR / RE on one fold.

    True labels feed the latent computation for the three reconstruction
    metrics (isolates reconstruction/disentanglement errors from
    classification errors).  RE is measured after denormalizing back to the
    raw coordinate space.
    """
    x_test = np.asarray(x_test)
    y_test = np.asarray(y_test, dtype=np.int64)
    if len(x_test) == 0:
        raise EvaluationError("empty test fold")

    ca = 100.0 * float((dvae.classify(x_test) == y_test).mean())

    swapped = sex_change(dvae, x_test, y_test)
    preserved = sex_preserve(dvae, x_test, y_test)
    osrsr = 100.0 * float((classifier_c.classify(swapped) == 1 - y_test).mean())
    ssrsr = 100.0 * float((classifier_c.classify(preserved) == y_test).mean())

    if stats is not None:
        orig = np.stack([stats.invert(m) for m in x_test])
        recon = np.stack([stats.invert(m) for m in preserved])
    else:
        orig, recon = x_test, preserved
    re = float(np.linalg.norm(orig - recon, axis=-1).mean(axis=-1).mean())
    return FoldMetrics(ca=ca, osrsr=osrsr, ssrsr=ssrsr, re=re)


def consistency_check(dvae: DvaeModel, classifier_c: ClassifierC, x_test) -> float:
    """Fraction of samples where C agrees with q0 on the reconstruction made
    with the q0-estimated label ("C is wrong iff q0 is wrong")."""
    x_test = np.asarray(x_test)
    y_est = dvae.classify(x_test)
    recon = sex_preserve(dvae, x_test, y_est)
    return float((classifier_c.classify(recon) == y_est).mean())


def local_distance_map(set_a: np.ndarray, set_b: np.ndarray) -> np.ndarray:
    """Per-vertex mean Euclidean distance between paired mesh sets."""
    set_a = np.asarray(set_a)
    set_b = np.asarray(set_b)
    if set_a.shape != set_b.shape:
        raise EvaluationError(f"paired sets differ: {set_a.shape} vs {set_b.shape}")
    if set_a.ndim == 2:
        set_a, set_b = set_a[None], set_b[None]
    return np.linalg.norm(set_a - set_b, axis=-1).mean(axis=0)


# -- cross-validation ----------------------------------------------------------------


@dataclass
class FoldPlan:
    n_outer: int = 5
    inner_validation_fraction: float = 0.2
    seed: int = 0


@dataclass
class HyperGrid:
    alphas: tuple = (0.5, 1, 2, 3, 4, 5)
    sqrt_vs: tuple = (0.7, 1, 1.3, 1.6, 1.9)

    def cells(self):
        return [(a, sv ** 2) for a, sv in itertools.product(self.alphas, self.sqrt_vs)]


def stratified_folds(labels: np.ndarray, k: int, rng) -> list:
    """k stratified partitions; class proportion per fold within +-1 sample."""
    labels = np.asarray(labels)
    folds = [[] for _ in range(k)]
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(len(idx))]
        for i, j in enumerate(idx):
            folds[i % k].append(int(j))
    return [np.sort(np.array(f, dtype=np.int64)) for f in folds]


def stratified_split(labels: np.ndarray, fraction: float, rng):
    """Split into (train, validation) with the validation share stratified."""
    labels = np.asarray(labels)
    val = []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(len(idx))]
        n_val = int(round(fraction * len(idx)))
        val.extend(idx[:n_val].tolist())
    val = np.sort(np.array(val, dtype=np.int64))
    train = np.setdiff1d(np.arange(len(labels)), val)
    return train, val


def nested_cv(dataset_x, dataset_y, hierarchy, grid: HyperGrid, plan: FoldPlan,
              base_config: TrainConfig, progress=None):
    """Outer stratified K-fold; per fold, a single 80/20 inner split selects
    (alpha, v) by the highest class-swap success rate on V, then one retrain
    on the full TR is evaluated on TE.

    Normalization statistics are recomputed from each training split.  Ties
    break toward larger alpha, then smaller v.  Cells whose training diverges
    are excluded from selection with a warning.
    """
    dataset_x = np.asarray(dataset_x)
    dataset_y = np.asarray(dataset_y, dtype=np.int64)
    rng = np.random.default_rng(plan.seed)
    folds = stratified_folds(dataset_y, plan.n_outer, rng)
    report = MetricsReport()
    records = []

    for fold_idx, te in enumerate(folds):
        tr = np.setdiff1d(np.arange(len(dataset_y)), te)
        t_idx_local, v_idx_local = stratified_split(
            dataset_y[tr], plan.inner_validation_fraction, rng)
        t_idx, v_idx = tr[t_idx_local], tr[v_idx_local]

        stats_t = NormalizationStats.from_dataset(dataset_x[t_idx])
        xt = np.stack([stats_t.apply(m) for m in dataset_x[t_idx]])
        xv = np.stack([stats_t.apply(m) for m in dataset_x[v_idx]])

        c_cfg = _with(base_config, alpha=0.0, v=1.0)
        c_model, _ = train_classifier(xt, dataset_y[t_idx], hierarchy, c_cfg)

        best = None  # (osrsr, alpha, -v, model-independent key)
        for alpha, v in grid.cells():
            cfg = _with(base_config, alpha=alpha, v=v)
            try:
                dvae, _ = train_dvae(xt, dataset_y[t_idx], hierarchy, cfg)
            except TrainingDivergence as exc:
                warnings.warn(
                    f"fold {fold_idx}: cell alpha={alpha} v={v:g} diverged ({exc}); "
                    "excluded from selection")
                continue
            swapped = sex_change(dvae, xv, dataset_y[v_idx])
            osrsr = float((c_model.classify(swapped) == 1 - dataset_y[v_idx]).mean())
            key = (osrsr, alpha, -v)
            if best is None or key > best[0]:
                best = (key, alpha, v)
            if progress:
                progress(fold_idx, alpha, v, osrsr)
        if best is None:
            raise EvaluationError(f"fold {fold_idx}: every grid cell diverged")
        _, alpha, v = best

        stats_tr = NormalizationStats.from_dataset(dataset_x[tr])
        xtr = np.stack([stats_tr.apply(m) for m in dataset_x[tr]])
        xte = np.stack([stats_tr.apply(m) for m in dataset_x[te]])
        final_cfg = _with(base_config, alpha=alpha, v=v)
        dvae, _ = train_dvae(xtr, dataset_y[tr], hierarchy, final_cfg)
        c_model, _ = train_classifier(xtr, dataset_y[tr], hierarchy, c_cfg)
        metrics = compute_metrics(dvae, c_model, xte, dataset_y[te], stats_tr)

        report.folds.append(metrics)
        report.chosen.append((alpha, v))
        records.append({
            "fold": fold_idx, "test_indices": te, "alpha": alpha, "v": v,
            "metrics": metrics,
        })
    return report, records


def _with(config: TrainConfig, **overrides):
    d = dict(config.__dict__)
    d.update(overrides)
    return TrainConfig(**d)


# -- missing data benchmark ---------------------------------------------------------


DEFAULT_MISSING_FRACTIONS = tuple(round(0.1 * k, 1) for k in range(8))


def missing_data_benchmark(x_test, y_test, classifier=None, dvae=None, vae=None,
                           crecon=None, fractions=DEFAULT_MISSING_FRACTIONS,
                           sides=None):
    """Classification accuracy under amputated test meshes.

    Masks one side at a time at each missing fraction and averages the
    accuracy over all sides.  Methods (any subset, by passing models):

    - ``C``: the direct classifier on the masked mesh.
    - ``DVAE``: the DVAE's label head q0 on the masked mesh.
    - ``VAE+C``: the VAE repairs the mesh, then C classifies the repair.
    - ``DVAE+C_recon``: C_recon on the DVAE reconstruction differences.

    Returns {method: {fraction: accuracy percent}}.
    """
    x_test = np.asarray(x_test)
    y_test = np.asarray(y_test, dtype=np.int64)
    sides = tuple(sides) if sides is not None else SIDE_NAMES

    methods = {}
    if classifier is not None:
        methods["C"] = lambda xm: classifier.classify(xm)
    if dvae is not None:
        methods["DVAE"] = lambda xm: dvae.classify(xm)
    if vae is not None and classifier is not None:
        methods["VAE+C"] = lambda xm: classifier.classify(vae.reconstruct(xm))
    if crecon is not None and dvae is not None:
        methods["DVAE+C_recon"] = lambda xm: crecon.classify(crecon_inputs(dvae, xm))
    if not methods:
        raise EvaluationError("no models supplied")

    results = {name: {} for name in methods}
    for fraction in fractions:
        if fraction <= 0:
            variants = [x_test]
        else:
            variants = [np.stack([mask_side(m, side, fraction) for m in x_test])
                        for side in sides]
        for name, predict in methods.items():
            accs = [100.0 * float((predict(xm) == y_test).mean()) for xm in variants]
            results[name][float(fraction)] = float(np.mean(accs))
    return results


# -- saliency --------------------------------------------------------------------


@dataclass
class SaliencyMap:
    values: np.ndarray          # per-vertex, nonnegative
    aggregation: str = "max"
    variant: str = "probability"
    class_index: Optional[int] = None


def saliency(classifier: ClassifierC, x, variant="probability",
             class_index=0) -> SaliencyMap:
    """Per-vertex importance from absolute input gradients.

    probability variant: gradient of p(y=0|x) (identical, up to sign, to the
    p(y=1|x) map since the two probabilities sum to 1).  unnormalized variant:
    gradient of the pre-softmax score of ``class_index``.  Per-vertex values
    aggregate the 3 coordinate importances with max.
    """
    x = np.asarray(x, dtype=classifier.dtype)
    if x.ndim == 2:
        x = x[None]
    tx = ad.Tensor(x, requires_grad=True, op="input")
    logits = classifier.label_logits_tensor(tx)
    if variant == "probability":
        # Two classes: d p_c / dx = p_0 p_1 d(l_c - l_{1-c}) / dx.  Computing
        # the gradient through the logit difference makes the two class maps
        # equal by construction, the float realization of p_0 = 1 - p_1.
        shifted = logits.data[0] - logits.data[0].max()
        e = np.exp(shifted)
        p = e / e.sum()
        ad.backward(logits[0, class_index] - logits[0, 1 - class_index])
        per_coord = np.abs(tx.grad[0]) * (p[0] * p[1])
    elif variant == "unnormalized":
        ad.backward(logits[0, class_index])
        per_coord = np.abs(tx.grad[0])
    else:
        raise EvaluationError(f"unknown saliency variant {variant!r}")
    values = per_coord.max(axis=-1)
    return SaliencyMap(values=values, variant=variant,
                       class_index=class_index if variant == "unnormalized" else None)


def saliency_repeatability(train_fn, x_set, seeds=(1, 2), widen=1.5):
    """Intra/inter-architecture repeatability harness.

    Re-trains the classifier under reseeded weights and under a
    widened-channel variant, and reports the Pearson correlation of the mean
    saliency maps.  No threshold is asserted; this reproduces the experiment,
    not a number.
    """
    def mean_map(model):
        maps = [saliency(model, x).values for x in x_set]
        return np.mean(maps, axis=0)

    base = mean_map(train_fn(seed=seeds[0], widen=1.0))
    reseeded = mean_map(train_fn(seed=seeds[1], widen=1.0))
    widened = mean_map(train_fn(seed=seeds[0], widen=widen))

    def corr(a, b):
        a = a - a.mean()
        b = b - b.mean()
        denom = np.sqrt((a * a).sum() * (b * b).sum())
        return float((a * b).sum() / denom) if denom > 0 else 0.0

    return {"intra_architecture": corr(base, reseeded),
            "inter_architecture": corr(base, widened)}
