"""Loss assembly and training loops for the DVAE, the vanilla VAE and the two
classifiers, plus the missing-data augmentation policy.

Sign convention: LossBreakdown.total is the minimized objective
-(ELBO + alpha * log q(y|x)); the constant terms ((3N/2) log(2 pi v), log 1/2)
are kept in the reported numbers so the breakdown matches the analytic
expressions exactly, even though they are inert for optimization at fixed v.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor
from .model import (Architecture, ClassifierC, ClassifierCRecon, DvaeModel,
                    VaeModel, one_hot)


class TrainingDivergence(Exception):
    def __init__(self, epoch):
        super().__init__(f"non-finite loss at epoch {epoch}")
        self.epoch = epoch


SIDES = {
    # side -> (axis, from_min_side)
    "left": (0, True),
    "right": (0, False),
    "front": (1, True),
    "rear": (1, False),
    "lower": (2, True),
    "upper": (2, False),
}
SIDE_NAMES = tuple(SIDES)


@dataclass
class MissingDataPolicy:
    keep_probability: float = 0.6
    max_fraction: float = 0.40


@dataclass
class TrainConfig:
    alpha: float = 1.0
    v: float = 1.0
    latent: int = 16
    batch_size: int = 16
    epochs: int = 600
    lr_values: tuple = (0.0006, 0.0003, 0.0001)
    seed: int = 0
    augmentation: Optional[MissingDataPolicy] = None
    dtype: str = "float32"

    def __post_init__(self):
        if self.v <= 0:
            raise ValueError("v must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")

    def learning_rate(self, epoch: int) -> float:
        """Stepwise schedule; with 600 epochs the boundaries are exactly
        200/400 (0.0006, then 0.0003, then 0.0001)."""
        b1 = self.epochs // 3
        b2 = 2 * self.epochs // 3
        if epoch <= b1:
            return self.lr_values[0]
        if epoch <= b2:
            return self.lr_values[1]
        return self.lr_values[2]


@dataclass
class LossBreakdown:
    kl_term: float
    recon_term: float      # reconstruction log-likelihood (to maximize)
    prior_y_term: float
    class_term: float      # log q(y|x) (to maximize)
    total: float


# -- loss pieces ----------------------------------------------------------------


def kl_gaussian(mu, logvar):
    """Analytic KL(q(z) || N(0, I)) = 1/2 sum(mu^2 + sigma^2 - 1 - log sigma^2).

    Accepts Tensors (differentiable) or arrays; batched inputs are averaged
    over the batch after summing over the latent axis.
    """
    if isinstance(mu, Tensor) or isinstance(logvar, Tensor):
        per = (mu * mu + ad.exp(logvar) - logvar - 1.0) * 0.5
        if per.data.ndim > 1:
            return per.sum(axis=-1).mean()
        return per.sum()
    mu = np.asarray(mu)
    logvar = np.asarray(logvar)
    per = 0.5 * (mu ** 2 + np.exp(logvar) - logvar - 1.0)
    if per.ndim > 1:
        return float(per.sum(axis=-1).mean())
    return float(per.sum())


def gaussian_recon_loglik(sq_err_sum, n_coords, v, include_constants=True):
    """log N(x | xhat, vI) summed over coordinates.

    ``sq_err_sum`` is ||x - xhat||^2 (Tensor or float), ``n_coords`` = 3 N_p.
    """
    ll = sq_err_sum * (-1.0 / (2.0 * v))
    if include_constants:
        ll = ll - (n_coords / 2.0) * math.log(2.0 * math.pi * v)
    return ll


def dvae_loss(model: DvaeModel, x, y, config: TrainConfig, eps):
    """Single-sample SGVB estimate of -(ELBO + alpha log q(y|x)) on a batch.

    Returns (total Tensor, LossBreakdown).  ``x`` is (B, N, 3) in normalized
    space, ``y`` integer labels, ``eps`` (B, L) fixed noise.
    """
    x = np.asarray(x, dtype=model.dtype)
    if x.ndim == 2:
        x = x[None]
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    eps = np.asarray(eps, dtype=model.dtype)
    if eps.ndim == 1:
        eps = eps[None]
    return _dvae_step(model, x, x, y, config, eps)


def vae_loss(model: VaeModel, x, config: TrainConfig, eps, recon_target=None):
    """VAE objective with per-batch automatic variance: v is re-estimated as
    the batch mean squared reconstruction error before the loss is formed."""
    x = np.asarray(x, dtype=model.dtype)
    if x.ndim == 2:
        x = x[None]
    target = x if recon_target is None else np.asarray(recon_target, dtype=model.dtype)
    if target.ndim == 2:
        target = target[None]
    eps = np.asarray(eps, dtype=model.dtype)
    batch = x.shape[0]
    n_coords = x.shape[1] * x.shape[2]

    tx = ad.constant(x)
    mu, logvar = model.encode_latent_tensor(tx)
    kl = kl_gaussian(mu, logvar)
    z = model.reparameterize(mu, logvar, eps)
    xhat = model.decode_tensor(z)
    diff = xhat - ad.constant(target)
    sse = (diff * diff).reshape(batch, n_coords).sum(axis=-1).mean()

    v_batch = max(float(sse.item()) / n_coords, 1e-8)
    recon = gaussian_recon_loglik(sse, n_coords, v_batch)
    total = kl - recon
    breakdown = LossBreakdown(
        kl_term=kl.item(), recon_term=recon.item(), prior_y_term=0.0,
        class_term=0.0, total=total.item())
    return total, breakdown, v_batch


def classifier_loss(model: ClassifierC, x, y):
    """Binary cross entropy on the softmax head."""
    x = np.asarray(x, dtype=model.dtype)
    if x.ndim == 2:
        x = x[None]
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    tx = ad.constant(x)
    log_p = ad.log_softmax(model.label_logits_tensor(tx), axis=-1)
    nll = -(log_p * ad.constant(one_hot(y, model.dtype))).sum(axis=-1).mean()
    breakdown = LossBreakdown(0.0, 0.0, 0.0, class_term=-nll.item(), total=nll.item())
    return nll, breakdown


# -- missing-data augmentation ----------------------------------------------------


def augment_missing(coords: np.ndarray, policy: MissingDataPolicy, rng) -> np.ndarray:
    """Zero out one extremal band of vertices, with probability 0.4.

    Operates in normalized space, where 0 is the per-vertex mean, so zeroing
    is mean imputation.  Draw order: keep test, side, fraction.
    """
    coords = np.array(coords, copy=True)
    if rng.random() < policy.keep_probability:
        return coords
    side = SIDE_NAMES[int(rng.integers(len(SIDE_NAMES)))]
    fraction = float(rng.uniform(0.0, policy.max_fraction))
    return mask_side(coords, side, fraction)


def mask_side(coords: np.ndarray, side: str, fraction: float) -> np.ndarray:
    """Zero the vertices whose coordinate lies in the extremal band of
    relative extent ``fraction`` along the side's axis."""
    coords = np.array(coords, copy=True)
    if fraction <= 0:
        return coords
    axis, from_min = SIDES[side]
    lo = coords[:, axis].min()
    hi = coords[:, axis].max()
    if from_min:
        mask = coords[:, axis] <= lo + fraction * (hi - lo)
    else:
        mask = coords[:, axis] >= hi - fraction * (hi - lo)
    coords[mask] = 0.0
    return coords


def _augment_rng(seed, epoch, index):
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(7, epoch, int(index))))


# -- training loops ----------------------------------------------------------------


def _epoch_log_line(epoch, agg, lr):
    return (f"{epoch},{agg['kl']:.6f},{agg['recon']:.6f},"
            f"{agg['class']:.6f},{agg['total']:.6f},{lr:.6g}")


class _Logger:
    def __init__(self, log_path):
        self.fh = open(log_path, "w") if log_path else None
        if self.fh:
            self.fh.write("epoch,kl,recon,class,total,lr\n")

    def write(self, line):
        if self.fh:
            self.fh.write(line + "\n")
            self.fh.flush()

    def close(self):
        if self.fh:
            self.fh.close()


def _run_training(dataset_x, dataset_y, config, step_fn, model,
                  log_path=None, checkpoint_dir=None, tag="model"):
    """Shared epoch/batch loop: shuffling, augmentation, Adam, logging."""
    n = len(dataset_x)
    ss = np.random.SeedSequence(config.seed)
    shuffle_rng, eps_rng = [np.random.default_rng(s) for s in ss.spawn(2)]
    opt = Adam(model.parameters())
    logger = _Logger(log_path)
    history = []
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    for epoch in range(1, config.epochs + 1):
        lr = config.learning_rate(epoch)
        order = shuffle_rng.permutation(n)
        sums = {"kl": 0.0, "recon": 0.0, "class": 0.0, "total": 0.0}
        n_batches = 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            xb = dataset_x[idx]
            yb = dataset_y[idx] if dataset_y is not None else None
            if config.augmentation is not None:
                xa = np.stack([
                    augment_missing(xb[i], config.augmentation,
                                    _augment_rng(config.seed, epoch, idx[i]))
                    for i in range(len(idx))])
            else:
                xa = xb
            loss, breakdown = step_fn(xa, xb, yb, eps_rng)
            if not math.isfinite(breakdown.total):
                logger.close()
                raise TrainingDivergence(epoch)
            ad.backward(loss)
            opt.step(lr)
            sums["kl"] += breakdown.kl_term
            sums["recon"] += breakdown.recon_term
            sums["class"] += breakdown.class_term
            sums["total"] += breakdown.total
            n_batches += 1
        agg = {k: s / n_batches for k, s in sums.items()}
        agg["lr"] = lr
        agg["epoch"] = epoch
        history.append(agg)
        logger.write(_epoch_log_line(epoch, agg, lr))
        if ckpt_dir and (epoch % 100 == 0 or epoch == config.epochs):
            model.save(ckpt_dir / f"{tag}_epoch{epoch:04d}.ckpt")
    logger.close()
    return history


def _make_arch(config, hierarchy, in_channels=3):
    n_trans = hierarchy.n_levels - 1
    return Architecture(
        n_vertices=hierarchy.level_sizes[0],
        level_factors=tuple(
            -(-hierarchy.level_sizes[i] // hierarchy.level_sizes[i + 1])
            for i in range(n_trans)),
        channels=_default_channels(n_trans),
        in_channels=in_channels,
        latent=config.latent)


def _default_channels(n_trans):
    if n_trans >= 2:
        return tuple([16] * (n_trans - 1) + [32])
    return (32,)


def train_dvae(dataset_x, dataset_y, hierarchy, config: TrainConfig,
               arch: Architecture = None, log_path=None, checkpoint_dir=None):
    """Train the DVAE; deterministic given config.seed (init, data order,
    noise draws and augmentation).  When augmentation is active the
    reconstruction target stays the original mesh."""
    dataset_x = np.asarray(dataset_x)
    dataset_y = np.asarray(dataset_y, dtype=np.int64)
    dtype = np.dtype(config.dtype)
    arch = arch or _make_arch(config, hierarchy)
    init_rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(3)[2])
    model = DvaeModel.init(arch, hierarchy, init_rng, dtype=dtype)

    def step(xa, xb, yb, eps_rng):
        eps = eps_rng.standard_normal((len(xa), arch.latent)).astype(dtype)
        # Reconstruction targets the clean mesh; the encoder and the label
        # head consume the augmented one.
        return _dvae_step(model, xa, xb, yb, config, eps)

    history = _run_training(dataset_x, dataset_y, config, step, model,
                            log_path, checkpoint_dir, tag="dvae")
    return model, history


def _dvae_step(model, x_in, x_target, y, config, eps):
    x_in = np.asarray(x_in, dtype=model.dtype)
    x_target = np.asarray(x_target, dtype=model.dtype)
    batch = x_in.shape[0]
    n_coords = x_in.shape[1] * x_in.shape[2]
    ty = ad.constant(one_hot(y, model.dtype))
    tx = ad.constant(x_in)

    log_p = ad.log_softmax(model.label_logits_tensor(tx), axis=-1)
    class_term = (log_p * ty).sum(axis=-1).mean()
    mu, logvar = model.encode_latent_tensor(tx, ty)
    kl = kl_gaussian(mu, logvar)
    z = model.reparameterize(mu, logvar, eps)
    xhat = model.decode_tensor(z, ty)
    diff = xhat - ad.constant(x_target)
    sse = (diff * diff).reshape(batch, n_coords).sum(axis=-1).mean()
    recon = gaussian_recon_loglik(sse, n_coords, config.v)
    prior_y = math.log(0.5)
    total = kl - recon - prior_y - class_term * config.alpha
    breakdown = LossBreakdown(kl.item(), recon.item(), prior_y,
                              class_term.item(), total.item())
    return total, breakdown


def train_vae(dataset_x, hierarchy, config: TrainConfig,
              arch: Architecture = None, log_path=None, checkpoint_dir=None):
    """Train the vanilla VAE (latent L+2, per-batch automatic variance)."""
    dataset_x = np.asarray(dataset_x)
    dtype = np.dtype(config.dtype)
    arch = arch or _make_arch(config, hierarchy)
    init_rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(3)[2])
    model = VaeModel.init(arch, hierarchy, init_rng, dtype=dtype)
    v_trace = []

    def step(xa, xb, yb, eps_rng):
        eps = eps_rng.standard_normal((len(xa), arch.latent + 2)).astype(dtype)
        loss, breakdown, v_batch = vae_loss(model, xa, config, eps, recon_target=xb)
        v_trace.append(v_batch)
        return loss, breakdown

    history = _run_training(dataset_x, None, config, step, model,
                            log_path, checkpoint_dir, tag="vae")
    return model, history, v_trace


def train_classifier(dataset_x, dataset_y, hierarchy, config: TrainConfig,
                     arch: Architecture = None, log_path=None, checkpoint_dir=None):
    """Train the direct classifier C with binary cross entropy."""
    dataset_x = np.asarray(dataset_x)
    dataset_y = np.asarray(dataset_y, dtype=np.int64)
    dtype = np.dtype(config.dtype)
    arch = arch or _make_arch(config, hierarchy)
    init_rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(3)[2])
    model = ClassifierC.init(arch, hierarchy, init_rng, dtype=dtype)

    def step(xa, xb, yb, eps_rng):
        return classifier_loss(model, xa, yb)

    history = _run_training(dataset_x, dataset_y, config, step, model,
                            log_path, checkpoint_dir, tag="c")
    return model, history


def crecon_inputs(dvae: DvaeModel, x_batch: np.ndarray) -> np.ndarray:
    """Assemble the 6-channel difference inputs for C_recon.

    z is computed with the label estimated by q0 (the true label is not
    available at C_recon's inference time); the batch is reconstructed once
    per class.
    """
    x_batch = np.asarray(x_batch, dtype=dvae.dtype)
    if x_batch.ndim == 2:
        x_batch = x_batch[None]
    y_est = dvae.classify(x_batch)
    mu, _ = dvae.encode_latent(x_batch, one_hot(y_est, dvae.dtype))
    n = len(x_batch)
    xhat0 = dvae.decode(mu, one_hot(np.zeros(n, dtype=np.int64), dvae.dtype))
    xhat1 = dvae.decode(mu, one_hot(np.ones(n, dtype=np.int64), dvae.dtype))
    return ClassifierCRecon.assemble_input(x_batch, xhat0, xhat1)


def train_crecon(dataset_x, dataset_y, dvae: DvaeModel, hierarchy,
                 config: TrainConfig, arch: Architecture = None,
                 log_path=None, checkpoint_dir=None):
    """Train C_recon on DVAE reconstruction differences; augmented meshes
    flow through the DVAE, so C_recon sees augmentation indirectly."""
    dataset_x = np.asarray(dataset_x)
    dataset_y = np.asarray(dataset_y, dtype=np.int64)
    dtype = np.dtype(config.dtype)
    arch = arch or _make_arch(config, hierarchy, in_channels=6)
    init_rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(3)[2])
    model = ClassifierCRecon.init(arch, hierarchy, init_rng, dtype=dtype)

    def step(xa, xb, yb, eps_rng):
        x6 = crecon_inputs(dvae, xa)
        return classifier_loss(model, x6, yb)

    history = _run_training(dataset_x, dataset_y, config, step, model,
                            log_path, checkpoint_dir, tag="crecon")
    return model, history
