"""FedAvg building blocks: dataset-size weights, plaintext and encrypted
weighted aggregation, and the local mini-batch SGD solver for an MLP
regressor with squared-error loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ckks
from ._fallback import mlp_loss_grad as _summed_loss_grad
from .backend import kernels
from .errors import DivergenceError, LayoutMismatchError, LevelExhaustedError
from .modelpack import PackedModel, flatten, unflatten

DEFAULT_MLP_SIZES = (32, 64, 32, 1)


@dataclass(frozen=True)
class AggregationWeights:
    """Contribution values p_k, normally the local training-set sizes."""

    contributions: tuple[float, ...]

    def __post_init__(self):
        if not self.contributions:
            raise ValueError("at least one learner contribution is required")
        if any(not p > 0 for p in self.contributions):
            raise ValueError("contributions must be positive")

    @classmethod
    def from_sizes(cls, sizes) -> AggregationWeights:
        return cls(tuple(float(s) for s in sizes))

    @property
    def total(self) -> float:
        return float(sum(self.contributions))

    @property
    def normalized(self) -> tuple[float, ...]:
        total = self.total
        return tuple(p / total for p in self.contributions)

    def __len__(self):
        return len(self.contributions)


@dataclass(frozen=True)
class TrainerSpec:
    epochs: int = 4
    learning_rate: float = 5e-5
    batch_size: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def mlp_layer_names(n_layers: int) -> list[tuple[str, str]]:
    return [(f"dense{i}/kernel", f"dense{i}/bias") for i in range(n_layers)]


def init_mlp(sizes=DEFAULT_MLP_SIZES, rng: np.random.Generator | None = None,
             output_bias: float = 0.0) -> dict[str, np.ndarray]:
    """He-normal kernels, zero hidden biases; the output bias is configurable
    so the regressor can start at a prior target mean."""
    rng = np.random.default_rng(0) if rng is None else rng
    model = {}
    names = mlp_layer_names(len(sizes) - 1)
    for i, (din, dout) in enumerate(zip(sizes[:-1], sizes[1:])):
        kname, bname = names[i]
        model[kname] = rng.normal(0.0, np.sqrt(2.0 / din), size=(din, dout))
        model[bname] = np.zeros(dout)
    model[names[-1][1]][:] = output_bias
    return model


def mlp_sizes(model) -> tuple[int, ...]:
    kernels_ = [arr for name, arr in model.items() if name.endswith("/kernel")]
    return (kernels_[0].shape[0],) + tuple(k.shape[1] for k in kernels_)


def mlp_predict(model, X: np.ndarray) -> np.ndarray:
    kernels_ = [arr for name, arr in model.items() if name.endswith("/kernel")]
    biases = [arr for name, arr in model.items() if name.endswith("/bias")]
    h = np.asarray(X, dtype=np.float64)
    for i, (w, b) in enumerate(zip(kernels_, biases)):
        h = h @ w + b
        if i < len(kernels_) - 1:
            h = np.maximum(h, 0.0)
    return h[:, 0]


def mlp_loss_grad(model, X: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean of 0.5 * (f(x) - y)**2 over the batch and its gradient, in flat
    parameter order."""
    _, flat = flatten(model)
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    loss, grad = _summed_loss_grad(flat, mlp_sizes(model), X, y)
    return loss / len(y), grad / len(y)


def local_sgd(model, X: np.ndarray, y: np.ndarray, spec: TrainerSpec, rng: np.random.Generator,
              epochs: int | None = None) -> dict[str, np.ndarray]:
    """Mini-batch SGD on the local objective: ``w <- w - lr * grad`` per batch,
    with the data reshuffled by ``rng`` at the start of every epoch.

    ``epochs`` overrides ``spec.epochs`` (0 is allowed here and returns a copy).
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if len(y) == 0:
        raise ValueError("local dataset is empty")
    layout, flat = flatten(model)
    sizes = np.array(mlp_sizes(model), dtype=np.int64)
    flat = np.ascontiguousarray(flat)
    n_epochs = spec.epochs if epochs is None else epochs
    for _ in range(n_epochs):
        order = rng.permutation(len(y)).astype(np.int64)
        loss = kernels.mlp_sgd_pass(flat, sizes, X, y, order, spec.batch_size, spec.learning_rate)
        if not np.isfinite(loss):
            raise DivergenceError("local training produced a non-finite loss")
    return unflatten(layout, flat)


def _check_same_structure(models) -> None:
    first = models[0]
    for m in models[1:]:
        if list(m.keys()) != list(first.keys()):
            raise LayoutMismatchError("models have different array names")
        for name in first:
            if np.shape(m[name]) != np.shape(first[name]):
                raise LayoutMismatchError(f"array {name!r} differs in shape")


def aggregate_plain(models, weights: AggregationWeights) -> dict[str, np.ndarray]:
    """Community model sum_k (p_k / P) * w_k, accumulated in learner order."""
    if len(models) != len(weights):
        raise ValueError(f"{len(models)} models but {len(weights)} weights")
    _check_same_structure(models)
    out = {}
    for name in models[0]:
        acc = np.zeros_like(np.asarray(models[0][name], dtype=np.float64))
        for m, w in zip(models, weights.normalized):
            acc = acc + w * np.asarray(m[name], dtype=np.float64)
        out[name] = acc
    return out


def aggregate_encrypted(models: list[PackedModel], weights: AggregationWeights,
                        params: ckks.CkksParams) -> PackedModel:
    """Encrypted counterpart of ``aggregate_plain``; never touches a secret key.

    Per ciphertext index: multiply every learner's ciphertext by its public
    normalized weight, sum in learner order, rescale once. Weights are encoded
    at a scale equal to the prime being dropped, so the output scale equals
    the input scale exactly.
    """
    if len(models) != len(weights):
        raise ValueError(f"{len(models)} models but {len(weights)} weights")
    layout = models[0].layout
    for m in models[1:]:
        if m.layout != layout:
            raise LayoutMismatchError("packed models have different layouts")
        if m.level != models[0].level:
            raise LayoutMismatchError("packed models are at different levels")
    level = models[0].level
    if level == 0:
        raise LevelExhaustedError("packed models have no level left for the weighted sum")
    weight_scale = float(params.ring.moduli[level])
    weight_pts = [
        ckks.encode(np.full(params.slot_count, w), params, scale=weight_scale, level=level)
        for w in weights.normalized
    ]
    out = []
    for i in range(layout.ciphertext_count):
        acc = None
        for m, wpt in zip(models, weight_pts):
            term = ckks.mul_plain(m.ciphertexts[i], wpt)
            acc = term if acc is None else ckks.add_ct(acc, term)
        out.append(ckks.rescale(acc))
    return PackedModel(layout, tuple(out))
