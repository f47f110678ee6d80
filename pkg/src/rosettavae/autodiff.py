"""Reverse-mode gradients for the fixed family of graphs the models use.

This is deliberately not a general autodiff engine. The node set is
closed (affine layers, tanh/relu, the reparameterized Cholesky matvec,
the Gaussian KL against a standard normal, squared distances, and the
structural add/scale/mean/sum glue) and every node carries a hand-derived
vector-Jacobian product. That keeps the whole thing small enough to
verify against finite differences term by term.

Values inside the graph are batched: matrices of shape (batch, width).
Scalars are 0-d numpy values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import linalg

__all__ = [
    "AdamState",
    "GradSet",
    "LossGraph",
    "MlpSpec",
    "NonFiniteGraphError",
    "ParamSet",
    "Tensor",
    "adam_step",
    "adam_update_inplace",
    "add",
    "affine",
    "backward",
    "forward_mlp",
    "gaussian_kl",
    "identity",
    "leaf",
    "make_leaves",
    "mean_all",
    "mlp_chain",
    "relu",
    "reparam_chol",
    "scale",
    "sq_dist",
    "sum_all",
    "tanh",
]

ACTIVATIONS = ("relu", "tanh", "identity")


class NonFiniteGraphError(RuntimeError):
    """A graph node produced a NaN or infinite value."""

    def __init__(self, kind: str):
        super().__init__(f"non-finite value produced by '{kind}' node")
        self.kind = kind


class _NamedTensors:
    """Ordered mapping of unique names to float64 arrays."""

    __slots__ = ("_arrays",)

    def __init__(self, arrays: dict[str, np.ndarray]):
        out: dict[str, np.ndarray] = {}
        for name, value in arrays.items():
            arr = np.asarray(value, dtype=np.float64)
            if not np.isfinite(arr).all():
                raise ValueError(f"tensor '{name}' contains non-finite entries")
            out[name] = arr
        self._arrays = out

    def names(self) -> tuple[str, ...]:
        return tuple(self._arrays)

    def items(self):
        return self._arrays.items()

    def values(self):
        return self._arrays.values()

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __len__(self) -> int:
        return len(self._arrays)

    def __iter__(self):
        return iter(self._arrays)

    def as_dict(self) -> dict[str, np.ndarray]:
        return dict(self._arrays)

    def copy(self):
        return type(self)({k: v.copy() for k, v in self._arrays.items()})

    def __getstate__(self):
        return self._arrays

    def __setstate__(self, state):
        self._arrays = state


class ParamSet(_NamedTensors):
    """Named model parameters with a deterministic iteration order."""


class GradSet(_NamedTensors):
    """Gradients keyed exactly like the ParamSet they differentiate."""

    @classmethod
    def matching(cls, params: ParamSet, arrays: dict[str, np.ndarray]) -> "GradSet":
        if tuple(arrays) != params.names():
            raise ValueError("gradient keys do not match parameter keys")
        for name, g in arrays.items():
            if g.shape != params[name].shape:
                raise ValueError(f"gradient shape mismatch for '{name}'")
        return cls(arrays)


class Tensor:
    """One node of the computation graph."""

    __slots__ = ("value", "parents", "vjp", "grad", "kind")

    def __init__(self, value, parents=(), vjp=None, kind="leaf"):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.grad = None
        self.kind = kind
        if not np.isfinite(value).all():
            raise NonFiniteGraphError(kind)


def leaf(value) -> Tensor:
    return Tensor(np.asarray(value, dtype=np.float64))


def make_leaves(params: ParamSet) -> dict[str, Tensor]:
    return {name: leaf(value) for name, value in params.items()}


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w.T + b for a (batch, fan_in) input and (fan_out, fan_in) weight."""
    value = x.value @ w.value.T + b.value

    def vjp(g):
        return g @ w.value, g.T @ x.value, g.sum(axis=0)

    return Tensor(value, (x, w, b), vjp, "affine")


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0.0

    def vjp(g):
        return (g * mask,)

    return Tensor(np.where(mask, x.value, 0.0), (x,), vjp, "relu")


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.value)

    def vjp(g):
        return (g * (1.0 - t * t),)

    return Tensor(t, (x,), vjp, "tanh")


def identity(x: Tensor) -> Tensor:
    return x


_ACTIVATION_FNS = {"relu": relu, "tanh": tanh, "identity": identity}


def add(a: Tensor, b: Tensor) -> Tensor:
    def vjp(g):
        return g, g

    return Tensor(a.value + b.value, (a, b), vjp, "add")


def scale(a: Tensor, c: float) -> Tensor:
    def vjp(g):
        return (g * c,)

    return Tensor(a.value * c, (a,), vjp, "scale")


def reparam_chol(d_raw: Tensor, l_flat: Tensor, mean: Tensor, noise: np.ndarray) -> Tensor:
    """mean + L @ noise per row, L built from exp-diagonal and strict lower.

    noise is a constant (batch, dim) array; gradients flow to the mean and
    to both Cholesky parameterizations.
    """
    dim = mean.value.shape[1]
    rows, cols = linalg.lower_triangle_indices(dim)
    ed = np.exp(d_raw.value)
    z = mean.value + ed * noise
    for s in range(rows.shape[0]):
        z[:, rows[s]] += l_flat.value[:, s] * noise[:, cols[s]]

    def vjp(g):
        gd = g * noise * ed
        gl = np.empty_like(l_flat.value)
        for s in range(rows.shape[0]):
            gl[:, s] = g[:, rows[s]] * noise[:, cols[s]]
        return gd, gl, g

    return Tensor(z, (d_raw, l_flat, mean), vjp, "reparam_chol")


def gaussian_kl(mean: Tensor, d_raw: Tensor, l_flat: Tensor) -> Tensor:
    """Per-row KL(N(mean, L L^T) || N(0, I)) for the exp-diagonal Cholesky.

    With L_ii = exp(d_raw_i) the log-determinant term collapses to
    sum(d_raw), giving the closed form
    0.5*(sum exp(2 d) + sum l^2 + ||mean||^2 - dim) - sum d.
    """
    dim = mean.value.shape[1]
    e2 = np.exp(2.0 * d_raw.value)
    value = 0.5 * (
        e2.sum(axis=1)
        + (l_flat.value**2).sum(axis=1)
        + (mean.value**2).sum(axis=1)
        - dim
    ) - d_raw.value.sum(axis=1)

    def vjp(g):
        gcol = g[:, None]
        return gcol * mean.value, gcol * (e2 - 1.0), gcol * l_flat.value

    return Tensor(value, (mean, d_raw, l_flat), vjp, "gaussian_kl")


def sq_dist(pred: Tensor, target: np.ndarray) -> Tensor:
    """Per-row squared Euclidean distance to a constant target."""
    diff = pred.value - target

    def vjp(g):
        return (2.0 * diff * g[:, None],)

    return Tensor((diff * diff).sum(axis=1), (pred,), vjp, "sq_dist")


def mean_all(v: Tensor) -> Tensor:
    n = v.value.size

    def vjp(g):
        return (np.full(v.value.shape, float(g) / n),)

    return Tensor(np.float64(v.value.mean()), (v,), vjp, "mean")


def sum_all(v: Tensor) -> Tensor:
    def vjp(g):
        return (np.full(v.value.shape, float(g)),)

    return Tensor(np.float64(v.value.sum()), (v,), vjp, "sum")


@dataclass
class LossGraph:
    """A scalar root plus the parameter leaves it was built from."""

    root: Tensor
    leaves: dict[str, Tensor]

    @property
    def value(self) -> float:
        return float(self.root.value)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(graph: LossGraph, params: ParamSet) -> GradSet:
    """Gradient of the graph's scalar root with respect to every parameter.

    Parameters the loss does not touch get exact zero gradients.
    """
    root = graph.root
    if np.ndim(root.value) != 0:
        raise ValueError("backward requires a scalar loss root")
    if not np.isfinite(root.value):
        raise NonFiniteGraphError(root.kind)
    order = _topo_order(root)
    root.grad = 1.0
    for node in reversed(order):
        if node.grad is None or node.vjp is None:
            continue
        partials = node.vjp(node.grad)
        for parent, part in zip(node.parents, partials):
            if part is None:
                continue
            parent.grad = part if parent.grad is None else parent.grad + part
    grads: dict[str, np.ndarray] = {}
    for name in params.names():
        node = graph.leaves.get(name)
        if node is None or node.grad is None:
            grads[name] = np.zeros_like(params[name])
        else:
            g = np.asarray(node.grad, dtype=np.float64)
            if not np.isfinite(g).all():
                raise NonFiniteGraphError(f"grad:{name}")
            grads[name] = g
    return GradSet.matching(params, grads)


@dataclass(frozen=True)
class MlpSpec:
    """Fully connected stack: layer widths with an activation name each."""

    input_dim: int
    layers: tuple[tuple[int, str], ...]
    prefix: str = ""

    def __post_init__(self):
        for width, act in self.layers:
            if width < 1:
                raise ValueError(f"layer width must be >= 1, got {width}")
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation '{act}'")

    def param_names(self) -> tuple[str, ...]:
        names = []
        for i in range(len(self.layers)):
            names.append(f"{self.prefix}W{i}")
            names.append(f"{self.prefix}b{i}")
        return tuple(names)

    def widths(self) -> tuple[int, ...]:
        return (self.input_dim,) + tuple(w for w, _ in self.layers)


def init_mlp_params(spec: MlpSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Uniform(-a, a) weights with a = sqrt(6/(fan_in+fan_out)), zero biases."""
    widths = spec.widths()
    out: dict[str, np.ndarray] = {}
    for i, (width, _) in enumerate(spec.layers):
        fan_in = widths[i]
        bound = np.sqrt(6.0 / (fan_in + width))
        out[f"{spec.prefix}W{i}"] = rng.uniform(-bound, bound, size=(width, fan_in))
        out[f"{spec.prefix}b{i}"] = np.zeros(width)
    return out


def mlp_chain(leaves: dict[str, Tensor], spec: MlpSpec, x: Tensor) -> Tensor:
    """Run the stack on an already-batched tensor using shared leaves."""
    h = x
    for i, (_, act) in enumerate(spec.layers):
        h = affine(h, leaves[f"{spec.prefix}W{i}"], leaves[f"{spec.prefix}b{i}"])
        h = _ACTIVATION_FNS[act](h)
    return h


@dataclass
class MlpRun:
    """Result of a standalone MLP forward pass, retaining the graph."""

    output: np.ndarray
    tensor: Tensor
    leaves: dict[str, Tensor]

    def graph(self, reduce: str = "sum") -> LossGraph:
        red = sum_all if reduce == "sum" else mean_all
        return LossGraph(red(self.tensor), self.leaves)


def forward_mlp(params: ParamSet, spec: MlpSpec, x) -> MlpRun:
    """Forward pass of a fully connected stack on a vector or batch.

    The returned run keeps the activations alive so a loss built on top
    of `tensor` can be differentiated with `backward`.
    """
    arr = np.asarray(x, dtype=np.float64)
    squeeze = arr.ndim == 1
    if squeeze:
        arr = arr[None, :]
    if arr.shape[1] != spec.input_dim:
        raise ValueError(
            f"input width {arr.shape[1]} does not match spec input {spec.input_dim}"
        )
    widths = spec.widths()
    for i, (width, _) in enumerate(spec.layers):
        w_name, b_name = f"{spec.prefix}W{i}", f"{spec.prefix}b{i}"
        for name in (w_name, b_name):
            if name not in params:
                raise ValueError(f"missing parameter '{name}'")
        if params[w_name].shape != (width, widths[i]):
            raise ValueError(
                f"parameter '{w_name}' has shape {params[w_name].shape}, "
                f"expected {(width, widths[i])}"
            )
    leaves = make_leaves(params)
    out = mlp_chain(leaves, spec, leaf(arr))
    value = out.value[0] if squeeze else out.value
    return MlpRun(output=value.copy(), tensor=out, leaves=leaves)


@dataclass
class AdamState:
    """Adam moment accumulators plus the hyperparameters they belong to."""

    first: dict[str, np.ndarray]
    second: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    learning_rate: float = 1e-3

    @classmethod
    def init(cls, params: ParamSet, learning_rate: float = 1e-3, beta1: float = 0.9,
             beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(
            first={k: np.zeros_like(v) for k, v in params.items()},
            second={k: np.zeros_like(v) for k, v in params.items()},
            step=0,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
            learning_rate=learning_rate,
        )


def adam_update_inplace(
    theta: np.ndarray,
    grad: np.ndarray,
    first: np.ndarray,
    second: np.ndarray,
    step: int,
    learning_rate: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update applied in place.

    `step` is the 1-based index of the step being applied. This is the
    single source of the update rule; both the ParamSet API and the flat
    training loop go through it.
    """
    first *= beta1
    first += (1.0 - beta1) * grad
    second *= beta2
    second += (1.0 - beta2) * grad * grad
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    theta -= learning_rate * (first / c1) / (np.sqrt(second / c2) + eps)


def adam_step(params: ParamSet, grads: GradSet, state: AdamState) -> tuple[ParamSet, AdamState]:
    """One bias-corrected Adam update; returns fresh params and state."""
    if grads.names() != params.names():
        raise ValueError("gradient keys do not match parameter keys")
    t = state.step + 1
    new_params: dict[str, np.ndarray] = {}
    new_first: dict[str, np.ndarray] = {}
    new_second: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for '{name}'")
        theta = p.copy()
        m = state.first[name].copy()
        v = state.second[name].copy()
        adam_update_inplace(
            theta, g, m, v, t, state.learning_rate, state.beta1, state.beta2, state.eps
        )
        new_first[name] = m
        new_second[name] = v
        new_params[name] = theta
    next_state = AdamState(
        first=new_first,
        second=new_second,
        step=t,
        beta1=state.beta1,
        beta2=state.beta2,
        eps=state.eps,
        learning_rate=state.learning_rate,
    )
    return ParamSet(new_params), next_state
