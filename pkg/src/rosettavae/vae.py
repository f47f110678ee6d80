"""Gaussian VAE with full-covariance posteriors and anchored retraining.

The encoder is a fully connected trunk feeding three heads: the posterior
mean, the raw log-diagonal of the posterior Cholesky factor, and its
strict lower triangle. The decoder mirrors the trunk back to input space
with an identity output layer. Training minimizes

    mean_batch [ ||x - decode(z)||^2 + beta * KL(q(z|x) || N(0, I)) ]
        + rho_eff * sum_r [ ||x_r - decode(z_r)||^2 + ||z_r - mean(x_r)||^2 ]

where the second sum runs over the Rosetta anchor pairs and is applied on
every batch. rho_eff is rho scaled by (anchor count / batch size) when
anchor weighting is enabled.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import linalg
from ._kernels import get_impl
from ._kernels.common import ACT_CODES, build_layout

__all__ = [
    "ArchSpec",
    "EpochStats",
    "GaussianPosterior",
    "ModelState",
    "Provenance",
    "RosettaSet",
    "TrainConfig",
    "TrainingDivergence",
    "TrainResult",
    "decode",
    "elbo_loss",
    "encode",
    "init_model",
    "kl_to_standard_normal",
    "load_checkpoint",
    "mean_objective",
    "model_digest",
    "posterior_table",
    "rosetta_loss",
    "sample_reparam",
    "save_checkpoint",
    "train",
]

CHECKPOINT_FORMAT = "rvae-checkpoint-1"


class TrainingDivergence(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, step: int):
        super().__init__(f"non-finite loss at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step


@dataclass(frozen=True)
class ArchSpec:
    """Network sizes: input width, encoder trunk widths, latent dimension."""

    input_dim: int
    latent_dim: int = 2
    hidden: tuple[int, ...] = (32, 32)
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if self.latent_dim < 2:
            raise ValueError("latent_dim must be >= 2 (full-covariance posterior)")
        if self.activation not in ACT_CODES:
            raise ValueError(f"unknown activation '{self.activation}'")

    @property
    def n_lower(self) -> int:
        return self.latent_dim * (self.latent_dim - 1) // 2

    @property
    def trunk_out(self) -> int:
        return self.hidden[-1] if self.hidden else self.input_dim

    def trunk_spec(self) -> ad.MlpSpec:
        layers = tuple((h, self.activation) for h in self.hidden)
        return ad.MlpSpec(self.input_dim, layers, prefix="enc.")

    def head_spec(self, name: str, width: int) -> ad.MlpSpec:
        return ad.MlpSpec(self.trunk_out, ((width, "identity"),), prefix=f"{name}.")

    def decoder_spec(self) -> ad.MlpSpec:
        layers = tuple((h, self.activation) for h in reversed(self.hidden))
        layers += ((self.input_dim, "identity"),)
        return ad.MlpSpec(self.latent_dim, layers, prefix="dec.")

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "latent_dim": self.latent_dim,
            "hidden": list(self.hidden),
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(
            input_dim=int(d["input_dim"]),
            latent_dim=int(d["latent_dim"]),
            hidden=tuple(int(h) for h in d["hidden"]),
            activation=str(d["activation"]),
        )


@dataclass(frozen=True)
class Provenance:
    seed: int = 0
    config_digest: str = ""
    epochs: int = 0


@dataclass
class ModelState:
    arch: ArchSpec
    params: ad.ParamSet
    provenance: Provenance = field(default_factory=Provenance)


@dataclass(frozen=True)
class GaussianPosterior:
    """Latent Gaussian: mean vector and lower-triangular Cholesky factor."""

    mean: np.ndarray
    chol: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        chol = np.asarray(self.chol, dtype=np.float64)
        d = mean.shape[0]
        if chol.shape != (d, d):
            raise ValueError("chol must be square and match the mean dimension")
        if np.abs(np.triu(chol, k=1)).max(initial=0.0) != 0.0:
            raise ValueError("chol must be lower triangular")
        if (np.diag(chol) <= 0.0).any():
            raise ValueError("chol diagonal must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "chol", chol)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class RosettaSet:
    """Ordered anchor pairs (input vector, latent mean) from a source model."""

    inputs: np.ndarray  # (R, input_dim)
    latents: np.ndarray  # (R, latent_dim)
    selector: str = "kmeans"
    source_digest: str = ""

    def __post_init__(self):
        x = np.ascontiguousarray(self.inputs, dtype=np.float64)
        z = np.ascontiguousarray(self.latents, dtype=np.float64)
        if x.ndim != 2 or z.ndim != 2:
            raise ValueError("inputs and latents must be 2-d arrays")
        if x.shape[0] != z.shape[0]:
            raise ValueError("inputs and latents must pair up row for row")
        if x.shape[0] == 0:
            raise ValueError("a RosettaSet cannot be empty")
        if not (np.isfinite(x).all() and np.isfinite(z).all()):
            raise ValueError("RosettaSet entries must be finite")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "latents", z)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def latent_dim(self) -> int:
        return self.latents.shape[1]


@dataclass(frozen=True)
class TrainConfig:
    beta: float = 1.0
    rho: float = 0.0
    learning_rate: float = 1e-3
    batch_size: int = 128
    epochs: int = 200
    seed: int = 0
    eigen_floor: float = 1e-12
    rosetta_weighting: bool = True

    def __post_init__(self):
        if self.beta < 0.0 or self.rho < 0.0:
            raise ValueError("beta and rho must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.eigen_floor <= 0.0:
            raise ValueError("eigen_floor must be positive")

    def effective_rho(self, n_anchors: int) -> float:
        if self.rho == 0.0 or n_anchors == 0:
            return 0.0
        if self.rosetta_weighting:
            return self.rho * n_anchors / self.batch_size
        return self.rho


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float | None


@dataclass
class TrainResult:
    model: ModelState
    trace: list[EpochStats]


def _param_order(arch: ArchSpec) -> tuple[str, ...]:
    names: list[str] = []
    for i in range(len(arch.hidden)):
        names += [f"enc.W{i}", f"enc.b{i}"]
    for head in ("mu", "logdiag", "lower"):
        names += [f"{head}.W0", f"{head}.b0"]
    for i in range(len(arch.hidden) + 1):
        names += [f"dec.W{i}", f"dec.b{i}"]
    return tuple(names)


def init_model(
    arch: ArchSpec,
    seed: int | np.random.Generator = 0,
    config_digest: str = "",
) -> ModelState:
    """Freshly initialized model; weights come from the seeded generator."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    tensors.update(ad.init_mlp_params(arch.trunk_spec(), rng))
    tensors.update(ad.init_mlp_params(arch.head_spec("mu", arch.latent_dim), rng))
    tensors.update(ad.init_mlp_params(arch.head_spec("logdiag", arch.latent_dim), rng))
    tensors.update(ad.init_mlp_params(arch.head_spec("lower", arch.n_lower), rng))
    tensors.update(ad.init_mlp_params(arch.decoder_spec(), rng))
    ordered = {name: tensors[name] for name in _param_order(arch)}
    seed_val = int(seed) if not isinstance(seed, np.random.Generator) else -1
    return ModelState(
        arch=arch,
        params=ad.ParamSet(ordered),
        provenance=Provenance(seed=seed_val, config_digest=config_digest),
    )


def model_digest(model: ModelState) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(model.arch.to_dict(), sort_keys=True).encode())
    for name, arr in model.params.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# Plain forward passes (single row). The per-row path is also used to build
# embedding tables so that a table row is bitwise identical to encode().


def _act_single(a: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(a, 0.0)
    if activation == "tanh":
        return np.tanh(a)
    return a


def _trunk_single(model: ModelState, x: np.ndarray) -> np.ndarray:
    h = x
    for i in range(len(model.arch.hidden)):
        h = _act_single(model.params[f"enc.W{i}"] @ h + model.params[f"enc.b{i}"],
                        model.arch.activation)
    return h


def _heads_single(model: ModelState, h: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    p = model.params
    mean = p["mu.W0"] @ h + p["mu.b0"]
    d_raw = p["logdiag.W0"] @ h + p["logdiag.b0"]
    l_flat = p["lower.W0"] @ h + p["lower.b0"]
    return mean, d_raw, l_flat


def encode(model: ModelState, x) -> GaussianPosterior:
    """Posterior for a single input vector."""
    vec = np.asarray(x, dtype=np.float64)
    if vec.shape != (model.arch.input_dim,):
        raise ValueError(
            f"input has shape {vec.shape}, expected ({model.arch.input_dim},)"
        )
    mean, d_raw, l_flat = _heads_single(model, _trunk_single(model, vec))
    if not (np.isfinite(mean).all() and np.isfinite(d_raw).all() and np.isfinite(l_flat).all()):
        raise ValueError("encoder produced non-finite activations")
    return GaussianPosterior(mean=mean, chol=linalg.build_cholesky(d_raw, l_flat))


def decode(model: ModelState, z) -> np.ndarray:
    """Reconstruction mean for a single latent vector."""
    vec = np.asarray(z, dtype=np.float64)
    if vec.shape != (model.arch.latent_dim,):
        raise ValueError(
            f"latent has shape {vec.shape}, expected ({model.arch.latent_dim},)"
        )
    h = vec
    n_dec = len(model.arch.hidden) + 1
    for i in range(n_dec):
        h = model.params[f"dec.W{i}"] @ h + model.params[f"dec.b{i}"]
        if i != n_dec - 1:
            h = _act_single(h, model.arch.activation)
    if not np.isfinite(h).all():
        raise ValueError("decoder produced non-finite activations")
    return h


def posterior_table(model: ModelState, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Posterior means and flattened Cholesky factors for every row.

    The flattened factor is the lower triangle including the diagonal in
    row-major order.
    """
    rows = np.asarray(rows, dtype=np.float64)
    d = model.arch.latent_dim
    tri = np.tril_indices(d)
    means = np.empty((rows.shape[0], d))
    chols = np.empty((rows.shape[0], d * (d + 1) // 2))
    for i in range(rows.shape[0]):
        post = encode(model, rows[i])
        means[i] = post.mean
        chols[i] = post.chol[tri]
    return means, chols


def sample_reparam(post: GaussianPosterior, noise) -> np.ndarray:
    eps = np.asarray(noise, dtype=np.float64)
    if eps.shape != (post.dim,):
        raise ValueError(f"noise has shape {eps.shape}, expected ({post.dim},)")
    return post.mean + post.chol @ eps


def kl_to_standard_normal(post: GaussianPosterior) -> float:
    """KL(N(mean, L L^T) || N(0, I)) in closed form."""
    d = post.dim
    trace = float((post.chol**2).sum())
    logdet_half = float(np.log(np.diag(post.chol)).sum())
    return 0.5 * (trace + float(post.mean @ post.mean) - d) - logdet_half


# ---------------------------------------------------------------------------
# Loss graphs (tape based; the training loop uses the fused kernels and the
# two are tested against each other).


def _as_rows(data) -> np.ndarray:
    rows = getattr(data, "inputs", data)
    rows = np.ascontiguousarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise ValueError("expected a nonempty (n, input_dim) batch")
    return rows


def _draw_noise(source, batch: int, dim: int) -> np.ndarray:
    if isinstance(source, np.random.Generator):
        return source.standard_normal((batch, dim))
    eps = np.ascontiguousarray(source, dtype=np.float64)
    if eps.shape != (batch, dim):
        raise ValueError(f"noise has shape {eps.shape}, expected {(batch, dim)}")
    return eps


def _posterior_tensors(arch: ArchSpec, leaves, x: ad.Tensor):
    trunk = ad.mlp_chain(leaves, arch.trunk_spec(), x)
    mean = ad.mlp_chain(leaves, arch.head_spec("mu", arch.latent_dim), trunk)
    d_raw = ad.mlp_chain(leaves, arch.head_spec("logdiag", arch.latent_dim), trunk)
    l_flat = ad.mlp_chain(leaves, arch.head_spec("lower", arch.n_lower), trunk)
    return mean, d_raw, l_flat


def elbo_loss(model: ModelState, batch, beta: float, noise) -> ad.LossGraph:
    """Scalar loss graph: mean squared reconstruction plus beta-scaled KL."""
    rows = _as_rows(batch)
    arch = model.arch
    eps = _draw_noise(noise, rows.shape[0], arch.latent_dim)
    leaves = ad.make_leaves(model.params)
    mean, d_raw, l_flat = _posterior_tensors(arch, leaves, ad.leaf(rows))
    z = ad.reparam_chol(d_raw, l_flat, mean, eps)
    xhat = ad.mlp_chain(leaves, arch.decoder_spec(), z)
    recon = ad.sq_dist(xhat, rows)
    kl = ad.gaussian_kl(mean, d_raw, l_flat)
    per_sample = ad.add(recon, ad.scale(kl, float(beta)))
    return ad.LossGraph(ad.mean_all(per_sample), leaves)


def _check_rosetta(model: ModelState, rosetta: RosettaSet):
    if rosetta.input_dim != model.arch.input_dim:
        raise ValueError(
            f"anchor input dim {rosetta.input_dim} != model input dim "
            f"{model.arch.input_dim}"
        )
    if rosetta.latent_dim != model.arch.latent_dim:
        raise ValueError(
            f"anchor latent dim {rosetta.latent_dim} != model latent dim "
            f"{model.arch.latent_dim}"
        )


def rosetta_loss(
    model: ModelState,
    batch,
    rosetta: RosettaSet | None,
    config: TrainConfig,
    noise,
) -> ad.LossGraph:
    """ELBO loss plus the anchor penalty applied to the full anchor set.

    With rho == 0 this is exactly the graph elbo_loss builds, so the two
    agree bit for bit on identical noise.
    """
    base = elbo_loss(model, batch, config.beta, noise)
    if config.rho == 0.0:
        return base
    if rosetta is None or len(rosetta) == 0:
        raise ValueError("rho > 0 requires a nonempty RosettaSet")
    _check_rosetta(model, rosetta)
    rho_eff = config.effective_rho(len(rosetta))
    leaves = base.leaves
    arch = model.arch
    mean_r, _, _ = _posterior_tensors(arch, leaves, ad.leaf(rosetta.inputs))
    xhat_r = ad.mlp_chain(leaves, arch.decoder_spec(), ad.leaf(rosetta.latents))
    penalty = ad.add(
        ad.sum_all(ad.sq_dist(xhat_r, rosetta.inputs)),
        ad.sum_all(ad.sq_dist(mean_r, rosetta.latents)),
    )
    total = ad.add(base.root, ad.scale(penalty, rho_eff))
    return ad.LossGraph(total, leaves)


# ---------------------------------------------------------------------------
# Fused-kernel bridge and the training loop.


@lru_cache(maxsize=None)
def _layout_for(arch: ArchSpec):
    return build_layout(arch.activation, arch.input_dim, arch.hidden, arch.latent_dim)


def fused_loss_and_grad(
    model: ModelState,
    rows: np.ndarray,
    eps: np.ndarray,
    beta: float,
    rho_eff: float = 0.0,
    rosetta: RosettaSet | None = None,
    backend: str | None = None,
) -> tuple[float, ad.GradSet]:
    """Loss and gradients through the selected kernel backend."""
    impl = get_impl(backend)
    layout = _layout_for(model.arch)
    theta = layout.pack(model.params)
    rx = rosetta.inputs if rosetta is not None else None
    rz = rosetta.latents if rosetta is not None else None
    loss, grad_flat = impl.loss_and_grad(
        layout, theta, rows, eps, float(beta), float(rho_eff), rx, rz
    )
    return loss, ad.GradSet.matching(model.params, layout.unpack(grad_flat))


def mean_objective(
    arch: ArchSpec,
    params: ad.ParamSet,
    rows: np.ndarray,
    beta: float,
    rosetta: RosettaSet | None = None,
    rho_eff: float = 0.0,
    backend: str | None = None,
) -> float:
    """Deterministic objective with the latent fixed at the posterior mean.

    Used for validation traces, plateau detection, and grid scoring so
    those decisions never depend on sampling noise.
    """
    impl = get_impl(backend)
    rows = _as_rows(rows)
    layout = _layout_for(arch)
    theta = layout.pack(params)
    eps = np.zeros((rows.shape[0], arch.latent_dim))
    rx = rosetta.inputs if rosetta is not None else None
    rz = rosetta.latents if rosetta is not None else None
    loss, _ = impl.loss_and_grad(
        layout, theta, rows, eps, float(beta), float(rho_eff), rx, rz
    )
    return loss


def train(
    init: ModelState | ArchSpec,
    data,
    config: TrainConfig,
    rosetta: RosettaSet | None = None,
    val_data=None,
    progress: Callable[[EpochStats], None] | None = None,
    backend: str | None = None,
    config_digest: str = "",
) -> TrainResult:
    """Adam training over shuffled batches from one seeded stream.

    The generator seeded by config.seed drives, in order, the parameter
    initialization (when init is an ArchSpec), then each epoch's shuffle,
    then each batch's reparameterization noise, which makes runs bitwise
    reproducible for a fixed backend.
    """
    rows = _as_rows(data)
    val_rows = _as_rows(val_data) if val_data is not None else None
    rng = np.random.default_rng(config.seed)
    if isinstance(init, ArchSpec):
        model = init_model(init, rng, config_digest=config_digest)
        model = ModelState(
            arch=model.arch,
            params=model.params,
            provenance=Provenance(config.seed, config_digest, 0),
        )
    else:
        model = ModelState(
            arch=init.arch,
            params=init.params.copy(),
            provenance=Provenance(config.seed, config_digest, 0),
        )
    arch = model.arch
    if rows.shape[1] != arch.input_dim:
        raise ValueError(
            f"data width {rows.shape[1]} does not match model input {arch.input_dim}"
        )
    if config.rho > 0.0:
        if rosetta is None or len(rosetta) == 0:
            raise ValueError("rho > 0 requires a nonempty RosettaSet")
        _check_rosetta(model, rosetta)
    rho_eff = config.effective_rho(len(rosetta) if rosetta is not None else 0)
    rx = rosetta.inputs if rosetta is not None and rho_eff != 0.0 else None
    rz = rosetta.latents if rosetta is not None and rho_eff != 0.0 else None

    impl = get_impl(backend)
    layout = _layout_for(arch)
    theta = layout.pack(model.params)
    first = np.zeros_like(theta)
    second = np.zeros_like(theta)
    n = rows.shape[0]
    batch_size = min(config.batch_size, n)
    zeros_val = (
        np.zeros((val_rows.shape[0], arch.latent_dim)) if val_rows is not None else None
    )
    step_count = 0
    trace: list[EpochStats] = []
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            batch = rows[idx]
            eps = rng.standard_normal((batch.shape[0], arch.latent_dim))
            loss, grad = impl.loss_and_grad(
                layout, theta, batch, eps, config.beta, rho_eff, rx, rz
            )
            if not np.isfinite(loss):
                raise TrainingDivergence(epoch, start // batch_size)
            step_count += 1
            ad.adam_update_inplace(
                theta, grad, first, second, step_count, config.learning_rate
            )
            epoch_losses.append(loss)
        val_loss = None
        if val_rows is not None:
            val_loss, _ = impl.loss_and_grad(
                layout, theta, val_rows, zeros_val, config.beta, rho_eff, rx, rz
            )
        stats = EpochStats(epoch, float(np.mean(epoch_losses)), val_loss)
        trace.append(stats)
        if progress is not None:
            progress(stats)
    final = ModelState(
        arch=arch,
        params=ad.ParamSet({k: v.copy() for k, v in layout.unpack(theta).items()}),
        provenance=Provenance(config.seed, config_digest, config.epochs),
    )
    return TrainResult(model=final, trace=trace)


# ---------------------------------------------------------------------------
# Checkpoints: one JSON manifest line, then raw little-endian float64
# payload in manifest order. Round trips are bitwise exact.


def save_checkpoint(model: ModelState, path) -> None:
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "arch": model.arch.to_dict(),
        "provenance": {
            "seed": model.provenance.seed,
            "config_digest": model.provenance.config_digest,
            "epochs": model.provenance.epochs,
        },
        "tensors": [[name, list(arr.shape)] for name, arr in model.params.items()],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for _, arr in model.params.items():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> ModelState:
    with open(path, "rb") as fh:
        header = fh.readline()
        payload = fh.read()
    manifest = json.loads(header.decode("utf-8"))
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unrecognized checkpoint format in {path}")
    arch = ArchSpec.from_dict(manifest["arch"])
    prov = manifest["provenance"]
    tensors: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in manifest["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        chunk = payload[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise ValueError(f"checkpoint payload truncated at tensor '{name}'")
        tensors[name] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
        offset += nbytes
    if offset != len(payload):
        raise ValueError("checkpoint payload has trailing bytes")
    layout = _layout_for(arch)
    if tuple(tensors) != layout.names:
        raise ValueError("checkpoint tensors do not match the declared architecture")
    for name, shape in zip(layout.names, layout.shapes):
        if tensors[name].shape != shape:
            raise ValueError(
                f"checkpoint tensor '{name}' has shape {tensors[name].shape}, "
                f"expected {shape}"
            )
    return ModelState(
        arch=arch,
        params=ad.ParamSet(tensors),
        provenance=Provenance(
            seed=int(prov["seed"]),
            config_digest=str(prov["config_digest"]),
            epochs=int(prov["epochs"]),
        ),
    )
