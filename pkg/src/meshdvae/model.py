"""Network definitions: label head q0, latent heads q1/q2, decoder f, the
vanilla VAE, the direct classifier C and the reconstruction-difference
classifier C_recon.

All networks share one trunk shape: a stack of Chebyshev mesh convolutions,
each followed by one hierarchy downsample, then a flatten.  The label y is
injected at the dense bottleneck (encoder heads) and concatenated to z
(decoder), not broadcast per vertex.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .hierarchy import SamplingHierarchy

CKPT_MAGIC = b"DVAECKPT"
CKPT_VERSION = 1


class ModelError(Exception):
    pass


@dataclass(frozen=True)
class Architecture:
    """Channel plan shared by every network in the family."""

    n_vertices: int
    level_factors: tuple = (4, 4, 4, 4)
    channels: tuple = (16, 16, 16, 32)
    in_channels: int = 3
    cheb_order: int = 6
    latent: int = 16

    def __post_init__(self):
        if len(self.channels) != len(self.level_factors):
            raise ModelError("need one channel width per hierarchy transition")

    def to_dict(self):
        d = asdict(self)
        d["level_factors"] = list(self.level_factors)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["level_factors"] = tuple(d["level_factors"])
        d["channels"] = tuple(d["channels"])
        return cls(**d)


def one_hot(labels, dtype=np.float64):
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.min() < 0 or labels.max() > 1:
        raise ModelError("labels must be 0 or 1")
    out = np.zeros((labels.size, 2), dtype=dtype)
    out[np.arange(labels.size), labels] = 1.0
    return out


def _check_one_hot(y):
    y = np.asarray(y)
    if y.ndim == 1:
        y = y[None, :]
    if y.shape[-1] != 2 or not np.all((y == 0) | (y == 1)) or not np.all(y.sum(axis=-1) == 1):
        raise ModelError(f"y must be one-hot 2-vectors, got {y!r}")
    return y


def cheb_conv(x: Tensor, lt, weight: Tensor, bias: Tensor, order: int) -> Tensor:
    """Chebyshev graph convolution on (B, N, Cin) signals.

    Builds the K polynomial slabs by the three-term recurrence, concatenates
    them along channels and applies a per-vertex dense map.
    """
    slabs = [x]
    if order > 1:
        slabs.append(ad.spmm(lt, x))
    for _ in range(2, order):
        slabs.append(ad.spmm(lt, slabs[-1]) * 2.0 - slabs[-2])
    stacked = ad.concatenate(slabs, axis=-1)
    return ad.matmul(stacked, weight) + bias


def _init_dense(rng, fan_in, fan_out, name, params, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)
    params[f"{name}.W"] = ad.parameter(w)
    params[f"{name}.W"].name = f"{name}.W"
    b = np.zeros(fan_out, dtype=dtype)
    params[f"{name}.b"] = ad.parameter(b)
    params[f"{name}.b"].name = f"{name}.b"


class _MeshNetwork:
    """Shared plumbing: parameter store, trunk, checkpointing."""

    kind = "base"

    def __init__(self, arch: Architecture, hierarchy: SamplingHierarchy,
                 params: dict, dtype=np.float64):
        self.arch = arch
        self.hierarchy = hierarchy
        self.params = params
        self.dtype = np.dtype(dtype)
        self._laps = [l.astype(self.dtype) for l in hierarchy.laplacians]
        self._downs = [d.astype(self.dtype) for d in hierarchy.downs]
        self._ups = [u.astype(self.dtype) for u in hierarchy.ups]
        n_levels = len(arch.level_factors)
        if hierarchy.n_levels < n_levels + 1:
            raise ModelError("hierarchy has fewer levels than the architecture expects")
        self.flat_size = hierarchy.level_sizes[n_levels] * arch.channels[-1]

    # -- construction ---------------------------------------------------------

    @classmethod
    def _init_trunk(cls, arch, params, rng, dtype, in_channels=None, prefix="enc"):
        cin = in_channels if in_channels is not None else arch.in_channels
        for i, cout in enumerate(arch.channels):
            _init_dense(rng, arch.cheb_order * cin, cout, f"{prefix}.conv{i}", params, dtype)
            cin = cout

    def parameters(self, prefix=None):
        if prefix is None:
            return list(self.params.values())
        return [t for n, t in self.params.items() if n.startswith(prefix)]

    # -- forward pieces --------------------------------------------------------

    def _trunk(self, x: Tensor, prefix="enc") -> Tensor:
        h = x
        for i in range(len(self.arch.channels)):
            h = ad.relu(cheb_conv(h, self._laps[i], self.params[f"{prefix}.conv{i}.W"],
                                  self.params[f"{prefix}.conv{i}.b"], self.arch.cheb_order))
            h = ad.spmm(self._downs[i], h)
        batch = h.shape[0]
        return h.reshape(batch, self.flat_size)

    def _as_batch_tensor(self, x):
        if isinstance(x, Tensor):
            return x, x.data.ndim == 3
        x = np.asarray(x, dtype=self.dtype)
        batched = x.ndim == 3
        if not batched:
            x = x[None]
        if x.shape[1] != self.arch.n_vertices or x.shape[2] != self.arch.in_channels:
            raise ModelError(
                f"expected (B, {self.arch.n_vertices}, {self.arch.in_channels}) input, "
                f"got {x.shape}")
        return ad.constant(x), batched

    # -- checkpoints -----------------------------------------------------------

    def save(self, path):
        descriptor = {
            "kind": self.kind,
            "arch": self.arch.to_dict(),
            "names": list(self.params.keys()),
            "shapes": {n: list(t.shape) for n, t in self.params.items()},
        }
        blob = json.dumps(descriptor).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(CKPT_MAGIC)
            fh.write(struct.pack("<B", CKPT_VERSION))
            fh.write(struct.pack("<q", len(blob)))
            fh.write(blob)
            for name in descriptor["names"]:
                fh.write(np.ascontiguousarray(
                    self.params[name].data, dtype="<f4").tobytes())

    @staticmethod
    def read_descriptor(path):
        with open(path, "rb") as fh:
            magic = fh.read(8)
            if magic != CKPT_MAGIC:
                raise ModelError(f"bad checkpoint magic {magic!r}")
            (version,) = struct.unpack("<B", fh.read(1))
            if version != CKPT_VERSION:
                raise ModelError(
                    f"checkpoint format version {version}, this build reads {CKPT_VERSION}")
            (blob_len,) = struct.unpack("<q", fh.read(8))
            return json.loads(fh.read(blob_len).decode("utf-8"))

    @classmethod
    def load(cls, path, hierarchy, dtype=np.float64):
        descriptor = cls.read_descriptor(path)
        kind = descriptor["kind"]
        model_cls = MODEL_KINDS.get(kind)
        if model_cls is None:
            raise ModelError(f"unknown model kind {kind!r}")
        arch = Architecture.from_dict(descriptor["arch"])
        rng = np.random.default_rng(0)
        model = model_cls.init(arch, hierarchy, rng, dtype=dtype)
        with open(path, "rb") as fh:
            fh.read(8 + 1)
            (blob_len,) = struct.unpack("<q", fh.read(8))
            fh.read(blob_len)
            for name in descriptor["names"]:
                shape = tuple(descriptor["shapes"][name])
                count = int(np.prod(shape))
                arr = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(shape)
                model.params[name].data = arr.astype(model.dtype)
        return model


class ClassifierC(_MeshNetwork):
    """Direct mesh classifier: trunk plus the P_y head."""

    kind = "classifier"

    @classmethod
    def init(cls, arch, hierarchy, rng, dtype=np.float64):
        params = {}
        cls._init_trunk(arch, params, rng, dtype)
        flat = hierarchy.level_sizes[len(arch.level_factors)] * arch.channels[-1]
        _init_dense(rng, flat, 2, "q0", params, dtype)
        return cls(arch, hierarchy, params, dtype)

    def _logits(self, x: Tensor) -> Tensor:
        flat = self._trunk(x)
        return ad.matmul(flat, self.params["q0.W"]) + self.params["q0.b"]

    def label_logits_tensor(self, x: Tensor) -> Tensor:
        return self._logits(x)

    def encode_label_tensor(self, x: Tensor) -> Tensor:
        return ad.softmax(self._logits(x), axis=-1)

    def encode_label(self, x) -> np.ndarray:
        tx, batched = self._as_batch_tensor(x)
        p = self.encode_label_tensor(tx).data
        return p if batched else p[0]

    def classify(self, x) -> np.ndarray:
        p = np.atleast_2d(self.encode_label(x))
        # argmax breaks ties toward class 0 (first maximal index).
        return np.argmax(p, axis=-1)


class ClassifierCRecon(ClassifierC):
    """C with a 6-channel first layer fed reconstruction differences."""

    kind = "classifier_recon"

    @classmethod
    def init(cls, arch, hierarchy, rng, dtype=np.float64):
        arch6 = Architecture(**{**arch.to_dict(), "in_channels": 6})
        params = {}
        cls._init_trunk(arch6, params, rng, dtype)
        flat = hierarchy.level_sizes[len(arch6.level_factors)] * arch6.channels[-1]
        _init_dense(rng, flat, 2, "q0", params, dtype)
        return cls(arch6, hierarchy, params, dtype)

    @staticmethod
    def assemble_input(x, xhat_class0, xhat_class1):
        """Per-vertex 6-vector [x - xhat_class0 || x - xhat_class1]."""
        x = np.asarray(x)
        a = np.asarray(xhat_class0)
        b = np.asarray(xhat_class1)
        if x.shape != a.shape or x.shape != b.shape:
            raise ModelError("the three meshes must have equal shapes")
        return np.concatenate([x - a, x - b], axis=-1)

    def classify_recon(self, x, xhat_class0, xhat_class1) -> np.ndarray:
        return self.encode_label(self.assemble_input(x, xhat_class0, xhat_class1))


class DvaeModel(ClassifierC):
    """Supervised disentangled VAE.

    q0 owns a full network (its own convolution trunk plus the softmax head):
    the q1/q2 trunk learns class-invariant features by design, since y is
    supplied separately, so a label head sharing that trunk would be starved
    of class information.  The parameter set phi0 is everything prefixed
    ``q0``; only the classification loss term touches it.
    """

    kind = "dvae"

    @classmethod
    def init(cls, arch, hierarchy, rng, dtype=np.float64):
        params = {}
        cls._init_trunk(arch, params, rng, dtype)
        n_levels = len(arch.level_factors)
        flat = hierarchy.level_sizes[n_levels] * arch.channels[-1]
        cls._init_trunk(arch, params, rng, dtype, prefix="q0t")
        _init_dense(rng, flat, 2, "q0", params, dtype)
        _init_dense(rng, flat + 2, arch.latent, "q1", params, dtype)
        _init_dense(rng, flat + 2, arch.latent, "q2", params, dtype)
        cls._init_decoder(arch, hierarchy, params, rng, dtype, z_width=arch.latent + 2)
        return cls(arch, hierarchy, params, dtype)

    def _logits(self, x: Tensor) -> Tensor:
        flat = self._trunk(x, prefix="q0t")
        return ad.matmul(flat, self.params["q0.W"]) + self.params["q0.b"]

    @staticmethod
    def _init_decoder(arch, hierarchy, params, rng, dtype, z_width):
        n_levels = len(arch.level_factors)
        coarsest = hierarchy.level_sizes[n_levels]
        _init_dense(rng, z_width, coarsest * arch.channels[-1], "dec.fc", params, dtype)
        cin = arch.channels[-1]
        widths = list(arch.channels[:-1][::-1]) + [3]  # e.g. 32 -> 16,16,16,3
        for i, cout in enumerate(widths):
            _init_dense(rng, arch.cheb_order * cin, cout, f"dec.conv{i}", params, dtype)
            cin = cout

    # -- encoder heads ----------------------------------------------------------

    def encode_latent_tensor(self, x: Tensor, y: Tensor):
        flat = self._trunk(x)
        feats = ad.concatenate([flat, y], axis=-1)
        mu = ad.matmul(feats, self.params["q1.W"]) + self.params["q1.b"]
        logvar = ad.matmul(feats, self.params["q2.W"]) + self.params["q2.b"]
        return mu, logvar

    def encode_latent(self, x, y):
        y1h = _check_one_hot(y).astype(self.dtype)
        tx, batched = self._as_batch_tensor(x)
        mu, logvar = self.encode_latent_tensor(tx, ad.constant(y1h))
        if batched:
            return mu.data, logvar.data
        return mu.data[0], logvar.data[0]

    @staticmethod
    def reparameterize(mu, logvar, eps):
        """z = mu + exp(logvar / 2) * eps, differentiable through mu/logvar."""
        if isinstance(mu, Tensor):
            return mu + ad.exp(logvar * 0.5) * eps
        return mu + np.exp(0.5 * np.asarray(logvar)) * np.asarray(eps)

    # -- decoder -----------------------------------------------------------------

    def decode_tensor(self, z: Tensor, y: Tensor) -> Tensor:
        zy = ad.concatenate([z, y], axis=-1)
        return self._decode_core(zy)

    def _decode_core(self, zy: Tensor) -> Tensor:
        n_levels = len(self.arch.level_factors)
        coarsest = self.hierarchy.level_sizes[n_levels]
        h = ad.matmul(zy, self.params["dec.fc.W"]) + self.params["dec.fc.b"]
        h = h.reshape(h.shape[0], coarsest, self.arch.channels[-1])
        n_convs = n_levels
        for i in range(n_convs):
            level = n_levels - 1 - i
            h = ad.spmm(self._ups[level], h)
            h = cheb_conv(h, self._laps[level], self.params[f"dec.conv{i}.W"],
                          self.params[f"dec.conv{i}.b"], self.arch.cheb_order)
            if i < n_convs - 1:
                h = ad.relu(h)
        return h

    def decode(self, z, y):
        y1h = _check_one_hot(y).astype(self.dtype)
        z = np.asarray(z, dtype=self.dtype)
        batched = z.ndim == 2
        if not batched:
            z = z[None]
        out = self.decode_tensor(ad.constant(z), ad.constant(y1h)).data
        return out if batched else out[0]

    def reconstruct(self, x, y, flip=False):
        """Test-mode reconstruction: z = mu, optionally with the label flipped
        in the decoder (the class-swap procedure)."""
        y = np.atleast_1d(np.asarray(y, dtype=np.int64))
        mu, _ = self.encode_latent(np.asarray(x), one_hot(y, self.dtype))
        dec_y = 1 - y if flip else y
        out = self.decode(np.atleast_2d(mu), one_hot(dec_y, self.dtype))
        return out if np.asarray(x).ndim == 3 else out[0]


class VaeModel(DvaeModel):
    """DVAE with the label y and the P_y computation removed; latent L+2."""

    kind = "vae"

    @classmethod
    def init(cls, arch, hierarchy, rng, dtype=np.float64):
        params = {}
        cls._init_trunk(arch, params, rng, dtype)
        n_levels = len(arch.level_factors)
        flat = hierarchy.level_sizes[n_levels] * arch.channels[-1]
        width = arch.latent + 2
        _init_dense(rng, flat, width, "q1", params, dtype)
        _init_dense(rng, flat, width, "q2", params, dtype)
        cls._init_decoder(arch, hierarchy, params, rng, dtype, z_width=width)
        return cls(arch, hierarchy, params, dtype)

    @property
    def latent_size(self):
        return self.arch.latent + 2

    def encode_latent_tensor(self, x: Tensor, y=None):
        flat = self._trunk(x)
        mu = ad.matmul(flat, self.params["q1.W"]) + self.params["q1.b"]
        logvar = ad.matmul(flat, self.params["q2.W"]) + self.params["q2.b"]
        return mu, logvar

    def encode_latent(self, x, y=None):
        tx, batched = self._as_batch_tensor(x)
        mu, logvar = self.encode_latent_tensor(tx)
        if batched:
            return mu.data, logvar.data
        return mu.data[0], logvar.data[0]

    def decode_tensor(self, z: Tensor, y=None) -> Tensor:
        return self._decode_core(z)

    def decode(self, z, y=None):
        z = np.asarray(z, dtype=self.dtype)
        batched = z.ndim == 2
        if not batched:
            z = z[None]
        out = self.decode_tensor(ad.constant(z)).data
        return out if batched else out[0]

    def reconstruct(self, x, y=None, flip=False):
        mu, _ = self.encode_latent(np.asarray(x))
        out = self.decode(np.atleast_2d(mu))
        return out if np.asarray(x).ndim == 3 else out[0]

    def encode_label(self, x):
        raise ModelError("the VAE has no label head")


MODEL_KINDS = {
    "classifier": ClassifierC,
    "classifier_recon": ClassifierCRecon,
    "dvae": DvaeModel,
    "vae": VaeModel,
}
