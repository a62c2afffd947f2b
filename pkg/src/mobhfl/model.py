"""Differentiable training tasks: softmax regression, a small tanh MLP and the
mean-quadratic task, with plain SGD and a finite-difference gradient checker.

Parameters are always one flat float64 vector. For the classifiers the layout
is ``[W_1, b_1, W_2, b_2, ...]`` with every ``W`` stored row-major as
``(fan_in, fan_out)``. For the mean-quadratic task the vector is the point
``w`` itself and a sample with label ``i`` has loss ``0.5 * ||w - targets[i]||^2``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, NumericError, UnsupportedOperationError

SOFTMAX_LINEAR = "softmax-linear"
MLP = "mlp"
MEAN_QUADRATIC = "mean-quadratic"
KINDS = (SOFTMAX_LINEAR, MLP, MEAN_QUADRATIC)

INIT_SCALE = 0.05


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int = 0
    num_classes: int = 0
    hidden_dims: tuple = ()
    targets: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == MEAN_QUADRATIC:
            if self.targets is None:
                raise ConfigError("mean-quadratic model needs targets")
            t = np.atleast_2d(np.asarray(self.targets, dtype=np.float64))
            if not np.all(np.isfinite(t)):
                raise ConfigError("mean-quadratic targets must be finite")
            object.__setattr__(self, "targets", t)
            return
        if self.num_classes < 2:
            raise ConfigError("classifier needs num_classes >= 2")
        if self.input_dim < 1:
            raise ConfigError("classifier needs input_dim >= 1")
        hidden = tuple(int(h) for h in self.hidden_dims)
        if self.kind == MLP and not 1 <= len(hidden) <= 2:
            raise ConfigError("mlp supports one or two hidden layers")
        if self.kind == SOFTMAX_LINEAR and hidden:
            raise ConfigError("softmax-linear takes no hidden_dims")
        if any(h < 1 for h in hidden):
            raise ConfigError("hidden layer widths must be positive")
        object.__setattr__(self, "hidden_dims", hidden)

    @property
    def is_classifier(self):
        return self.kind != MEAN_QUADRATIC

    @property
    def layer_shapes(self):
        sizes = [self.input_dim, *self.hidden_dims, self.num_classes]
        return [(a, b) for a, b in zip(sizes[:-1], sizes[1:])]

    @property
    def dim(self):
        if self.kind == MEAN_QUADRATIC:
            return self.targets.shape[1]
        return sum(a * b + b for a, b in self.layer_shapes)


@dataclass(frozen=True)
class DataBatch:
    """A batch of samples. For mean-quadratic, ``labels`` index ``spec.targets``
    and ``inputs`` is ignored (it may have zero columns)."""

    inputs: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)


def init_params(spec, seed):
    """Deterministic uniform initialisation in [-0.05, 0.05]."""
    rng = np.random.default_rng([int(seed), 0x1A17])
    return rng.uniform(-INIT_SCALE, INIT_SCALE, size=spec.dim)


def unpack(spec, params):
    """Split a flat classifier parameter vector into ``[(W, b), ...]`` views."""
    layers = []
    offset = 0
    for a, b in spec.layer_shapes:
        W = params[offset:offset + a * b].reshape(a, b)
        offset += a * b
        layers.append((W, params[offset:offset + b]))
        offset += b
    return layers


def _check(spec, params, batch):
    params = np.asarray(params, dtype=np.float64)
    if params.ndim != 1 or params.shape[0] != spec.dim:
        raise ContractError(f"params have shape {params.shape}, model expects ({spec.dim},)")
    labels = np.asarray(batch.labels)
    if labels.ndim != 1 or len(labels) < 1:
        raise ContractError("batch must hold at least one sample")
    upper = spec.targets.shape[0] if spec.kind == MEAN_QUADRATIC else spec.num_classes
    if labels.min() < 0 or labels.max() >= upper:
        raise ContractError(f"labels must lie in [0, {upper})")
    if spec.is_classifier:
        inputs = np.asarray(batch.inputs, dtype=np.float64)
        if inputs.shape != (len(labels), spec.input_dim):
            raise ContractError(
                f"inputs have shape {inputs.shape}, expected ({len(labels)}, {spec.input_dim})")
        return params, inputs, labels
    return params, None, labels


def _forward(spec, params, inputs):
    """Return logits and the list of hidden activations (input first)."""
    acts = [inputs]
    layers = unpack(spec, params)
    h = inputs
    for W, b in layers[:-1]:
        h = np.tanh(h @ W + b)
        acts.append(h)
    W, b = layers[-1]
    return h @ W + b, acts


def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _finite_or_raise(per_sample, what):
    bad = np.flatnonzero(~np.isfinite(per_sample))
    if bad.size:
        raise NumericError(f"non-finite {what}", index=int(bad[0]))


def sample_losses(spec, params, batch):
    params, inputs, labels = _check(spec, params, batch)
    if spec.kind == MEAN_QUADRATIC:
        diff = params[None, :] - spec.targets[labels]
        losses = 0.5 * np.einsum("ij,ij->i", diff, diff)
    else:
        with np.errstate(invalid="ignore", over="ignore"):
            logits, _ = _forward(spec, params, inputs)
            losses = -_log_softmax(logits)[np.arange(len(labels)), labels]
    _finite_or_raise(losses, "loss")
    return losses


def forward_loss(spec, params, batch):
    """Mean sample loss over ``batch``."""
    return float(np.mean(sample_losses(spec, params, batch)))


def loss_and_gradient(spec, params, batch):
    params, inputs, labels = _check(spec, params, batch)
    n = len(labels)
    if spec.kind == MEAN_QUADRATIC:
        diff = params[None, :] - spec.targets[labels]
        losses = 0.5 * np.einsum("ij,ij->i", diff, diff)
        _finite_or_raise(losses, "loss")
        grad = diff.mean(axis=0)
        return float(losses.mean()), grad

    with np.errstate(invalid="ignore", over="ignore"):
        logits, acts = _forward(spec, params, inputs)
        logp = _log_softmax(logits)
    losses = -logp[np.arange(n), labels]
    _finite_or_raise(losses, "loss")

    delta = np.exp(logp)
    delta[np.arange(n), labels] -= 1.0
    delta /= n
    layers = unpack(spec, params)
    grads = []
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        h = acts[i]
        grads.append((h.T @ delta, delta.sum(axis=0)))
        if i > 0:
            delta = (delta @ W.T) * (1.0 - h * h)
    flat = np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in reversed(grads)])
    _finite_or_raise(flat, "gradient")
    return float(losses.mean()), flat


@np.errstate(invalid="ignore", over="ignore")
def fleet_loss_and_gradient(spec, params, inputs, labels):
    """Batched :func:`loss_and_gradient` for ``F`` independent models at once.

    ``params`` is ``(F, dim)``, ``inputs`` ``(F, B, d)`` and ``labels`` ``(F, B)``;
    row ``f`` of the result depends only on row ``f`` of the inputs. Returns
    ``(losses (F,), grads (F, dim))``. No argument validation: callers are
    the engine's trusted inner loops.
    """
    F, B = labels.shape
    if spec.kind == MEAN_QUADRATIC:
        diff = params[:, None, :] - spec.targets[labels]
        losses = 0.5 * np.einsum("fbi,fbi->fb", diff, diff).mean(axis=1)
        grads = diff.mean(axis=1)
    else:
        layers = []
        offset = 0
        for a, b in spec.layer_shapes:
            W = params[:, offset:offset + a * b].reshape(F, a, b)
            offset += a * b
            layers.append((W, params[:, offset:offset + b]))
            offset += b
        acts = [inputs]
        h = inputs
        for W, bias in layers[:-1]:
            h = np.tanh(h @ W + bias[:, None, :])
            acts.append(h)
        W, bias = layers[-1]
        logits = h @ W + bias[:, None, :]
        shifted = logits - logits.max(axis=2, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=2, keepdims=True))
        fi, bi = np.meshgrid(np.arange(F), np.arange(B), indexing="ij")
        losses = -logp[fi, bi, labels].mean(axis=1)
        delta = np.exp(logp)
        delta[fi, bi, labels] -= 1.0
        delta /= B
        parts = []
        for i in range(len(layers) - 1, -1, -1):
            W, _ = layers[i]
            h = acts[i]
            parts.append(((h.transpose(0, 2, 1) @ delta).reshape(F, -1), delta.sum(axis=1)))
            if i > 0:
                delta = (delta @ W.transpose(0, 2, 1)) * (1.0 - h * h)
        grads = np.concatenate([x for gW, gb in reversed(parts) for x in (gW, gb)], axis=1)
    bad = np.flatnonzero(~(np.isfinite(losses) & np.all(np.isfinite(grads), axis=1)))
    if bad.size:
        raise NumericError("non-finite loss or gradient", index=int(bad[0]))
    return losses, grads


def gradient(spec, params, batch):
    """Exact gradient of :func:`forward_loss` with respect to ``params``."""
    return loss_and_gradient(spec, params, batch)[1]


def sgd_step(params, grad, eta):
    if not eta > 0:
        raise ConfigError(f"learning rate must be positive, got {eta}")
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape:
        raise ContractError(f"params {params.shape} and gradient {grad.shape} differ in shape")
    return params - eta * grad


def predict(spec, params, inputs):
    if not spec.is_classifier:
        raise UnsupportedOperationError("predictions are only defined for classifiers")
    logits, _ = _forward(spec, np.asarray(params, dtype=np.float64),
                         np.asarray(inputs, dtype=np.float64))
    # argmax returns the first maximum, i.e. ties go to the lowest class index
    return np.argmax(logits, axis=1)


def evaluate_accuracy(spec, params, dataset):
    """Fraction of samples whose argmax prediction equals the label."""
    if not spec.is_classifier:
        raise UnsupportedOperationError("accuracy is undefined for the mean-quadratic task")
    labels = np.asarray(dataset.labels)
    if len(labels) == 0:
        raise ContractError("cannot evaluate accuracy on an empty dataset")
    return float(np.mean(predict(spec, params, dataset.inputs) == labels))


def finite_diff_check(spec, params, batch, step=1e-4):
    """Max over coordinates of ``|analytic - central| / (|analytic| + step)``."""
    if not step > 0:
        raise ConfigError("finite-difference step must be positive")
    params = np.array(params, dtype=np.float64)
    analytic = gradient(spec, params, batch)
    worst = 0.0
    for i in range(params.size):
        orig = params[i]
        params[i] = orig + step
        up = forward_loss(spec, params, batch)
        params[i] = orig - step
        down = forward_loss(spec, params, batch)
        params[i] = orig
        numeric = (up - down) / (2.0 * step)
        worst = max(worst, abs(analytic[i] - numeric) / (abs(analytic[i]) + step))
    return worst


def quadratic_centroid(spec, labels):
    """Mean target over samples: the minimiser of the mean-quadratic loss."""
    if spec.kind != MEAN_QUADRATIC:
        raise UnsupportedOperationError("centroid is only defined for mean-quadratic")
    return spec.targets[np.asarray(labels)].mean(axis=0)
