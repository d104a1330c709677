"""Minimal dense-network engine: MLP layers with hand-written reverse-mode
gradients, the supervised/distillation losses, and SGD/Adam optimizers.

All training math is float64. Models keep their trainable parameters in one
flat buffer (``model.params``) with per-layer views into it, so optimizers,
proximal terms and parameter averaging all operate on plain 1-D arrays.
BatchNorm running statistics are buffers, not parameters: they are excluded
from the flat vector, from optimizer updates and from parameter averaging.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .errors import BatchNormBatchError, ContractError


def softmax_t(logits: np.ndarray, temperature: float) -> np.ndarray:
    """Temperature softmax with max-subtraction, row-wise for 2-D input."""
    if temperature <= 0:
        raise ContractError(f"temperature must be > 0, got {temperature}")
    arr = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ContractError("softmax_t requires finite logits")
    if arr.ndim == 1:
        return K.softmax_rows(np.ascontiguousarray(arr[None, :]), temperature)[0]
    return K.softmax_rows(np.ascontiguousarray(arr), temperature)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over rows plus the gradient w.r.t. the logits."""
    logits = np.ascontiguousarray(logits, dtype=np.float64)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    if labels.shape[0] != logits.shape[0]:
        raise ContractError("labels length must equal logits rows")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ContractError("label out of range")
    return K.ce_loss_grad(logits, labels)


def kl_distill(
    student_logits: np.ndarray, teacher_probs: np.ndarray, temperature: float
) -> tuple[float, np.ndarray]:
    """Mean KL(student at temperature || fixed teacher rows) plus gradient.

    The teacher rows must already be probability distributions; they are
    treated as constants and clamped below at 1e-12 before the log. The
    temperature-squared factor of the combined objective is NOT applied
    here; it belongs to the caller.
    """
    student_logits = np.ascontiguousarray(student_logits, dtype=np.float64)
    teacher_probs = np.ascontiguousarray(teacher_probs, dtype=np.float64)
    if student_logits.shape != teacher_probs.shape:
        raise ContractError("student and teacher shapes must match")
    if temperature <= 0:
        raise ContractError(f"temperature must be > 0, got {temperature}")
    row_sums = teacher_probs.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > 1e-6) or np.any(teacher_probs < 0):
        raise ContractError("teacher rows must be normalized distributions")
    return K.kl_loss_grad(student_logits, teacher_probs, temperature)


@dataclass
class LossSpec:
    """Mixing weights of the combined objective.

    lam is the distillation mixing weight in [0, 1]; temperature scales the
    student softmax inside the KL term (the loss carries the matching
    temperature-squared factor); prox_mu >= 0 weights the proximal pull
    toward an anchor parameter vector (0 disables it).
    """

    lam: float = 0.5
    temperature: float = 2.0
    prox_mu: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ContractError(f"lam must be in [0,1], got {self.lam}")
        if self.temperature <= 0:
            raise ContractError(f"temperature must be > 0, got {self.temperature}")
        if self.prox_mu < 0:
            raise ContractError(f"prox_mu must be >= 0, got {self.prox_mu}")


class Dense:
    """Affine layer y = x @ w (+ b).

    The bias is dropped when BatchNorm follows: the normalization subtracts
    any constant shift, so such a bias would carry an identically-zero
    gradient and BN's own beta plays its role.
    """

    def __init__(self, in_dim: int, out_dim: int, bias: bool = True):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.use_bias = bias
        self.w: np.ndarray | None = None
        self.b: np.ndarray | None = None
        self._dw = self._db = None
        self._x = None

    @property
    def param_count(self) -> int:
        return self.in_dim * self.out_dim + (self.out_dim if self.use_bias else 0)

    def bind(self, params, grads, offset):
        n = self.in_dim * self.out_dim
        self.w = params[offset : offset + n].reshape(self.in_dim, self.out_dim)
        self._dw = grads[offset : offset + n].reshape(self.in_dim, self.out_dim)
        offset += n
        if self.use_bias:
            self.b = params[offset : offset + self.out_dim]
            self._db = grads[offset : offset + self.out_dim]
            offset += self.out_dim
        return offset

    def init(self, rng: np.random.Generator):
        self.w[...] = rng.normal(0.0, np.sqrt(2.0 / self.in_dim), self.w.shape)
        if self.use_bias:
            self.b[...] = 0.0

    def forward(self, x, train):
        if train:
            self._x = x
        out = x @ self.w
        if self.use_bias:
            out = out + self.b
        return out

    def backward(self, dy):
        self._dw += self._x.T @ dy
        if self.use_bias:
            self._db += dy.sum(axis=0)
        return dy @ self.w.T


class ReLU:
    """Elementwise max(x, 0); subgradient at 0 is 0."""

    param_count = 0

    def __init__(self):
        self._mask = None

    def bind(self, params, grads, offset):
        return offset

    def init(self, rng):
        pass

    def forward(self, x, train):
        if train:
            self._mask = x > 0
            return x * self._mask
        return np.maximum(x, 0.0)

    def backward(self, dy):
        return dy * self._mask


class BatchNorm1d:
    """Per-feature batch normalization with learnable scale and shift.

    Train mode normalizes by the batch statistics (biased variance) and
    updates the running buffers as
    ``running = (1 - momentum) * running + momentum * batch_stat``, using
    the unbiased batch variance for ``running_var``. Eval mode normalizes
    by the running buffers and mutates nothing. A train-mode forward with
    fewer than 2 rows is a contract violation: batch statistics of a
    singleton are degenerate, and callers are expected to have skipped the
    update instead.
    """

    def __init__(self, width: int, momentum: float = 0.1, eps: float = 1e-5):
        self.width = width
        self.momentum = momentum
        self.eps = eps
        self.gamma: np.ndarray | None = None
        self.beta: np.ndarray | None = None
        self.running_mean = np.zeros(width)
        self.running_var = np.ones(width)
        self._dgamma = self._dbeta = None
        self._cache = None

    @property
    def param_count(self) -> int:
        return 2 * self.width

    def bind(self, params, grads, offset):
        self.gamma = params[offset : offset + self.width]
        self._dgamma = grads[offset : offset + self.width]
        offset += self.width
        self.beta = params[offset : offset + self.width]
        self._dbeta = grads[offset : offset + self.width]
        return offset + self.width

    def init(self, rng):
        self.gamma[...] = 1.0
        self.beta[...] = 0.0

    def forward(self, x, train):
        if not train:
            inv = 1.0 / np.sqrt(self.running_var + self.eps)
            return self.gamma * (x - self.running_mean) * inv + self.beta
        n = x.shape[0]
        if n <= 1:
            raise BatchNormBatchError(
                f"train-mode BatchNorm forward with batch size {n}; "
                "callers must skip batches of size <= 1"
            )
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        inv = 1.0 / np.sqrt(var + self.eps)
        x_hat = (x - mean) * inv
        self._cache = (x_hat, inv, n)
        self.running_mean[...] = (1 - self.momentum) * self.running_mean + self.momentum * mean
        self.running_var[...] = (
            1 - self.momentum
        ) * self.running_var + self.momentum * var * n / (n - 1)
        return self.gamma * x_hat + self.beta

    def backward(self, dy):
        x_hat, inv, n = self._cache
        self._dgamma += (dy * x_hat).sum(axis=0)
        self._dbeta += dy.sum(axis=0)
        dxhat = dy * self.gamma
        return (
            inv / n * (n * dxhat - dxhat.sum(axis=0) - x_hat * (dxhat * x_hat).sum(axis=0))
        )


class MlpModel:
    """Dense classifier: [Dense (+BatchNorm) ReLU]* -> Dense(K logits)."""

    def __init__(
        self,
        input_dim: int,
        hidden,
        class_count: int,
        batchnorm: bool = False,
        rng: np.random.Generator | None = None,
    ):
        if input_dim < 1 or class_count < 2:
            raise ContractError("need input_dim >= 1 and class_count >= 2")
        self.input_dim = input_dim
        self.class_count = class_count
        self.hidden = tuple(int(h) for h in hidden)
        self.batchnorm = batchnorm
        self.layers = []
        prev = input_dim
        for width in self.hidden:
            self.layers.append(Dense(prev, width, bias=not batchnorm))
            if batchnorm:
                self.layers.append(BatchNorm1d(width))
            self.layers.append(ReLU())
            prev = width
        self.layers.append(Dense(prev, class_count))

        self.param_count = sum(l.param_count for l in self.layers)
        self.params = np.zeros(self.param_count)
        self.grads = np.zeros(self.param_count)
        offset = 0
        for layer in self.layers:
            offset = layer.bind(self.params, self.grads, offset)
        rng = rng if rng is not None else np.random.default_rng(0)
        for layer in self.layers:
            layer.init(rng)

    def forward(self, batch: np.ndarray, mode: str = "train") -> np.ndarray:
        """Run the stack; mode 'eval' uses running stats and mutates nothing."""
        if mode not in ("train", "eval"):
            raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim != 2 or batch.shape[1] != self.input_dim:
            raise ContractError(
                f"batch must be (rows, {self.input_dim}), got {batch.shape}"
            )
        out = batch
        train = mode == "train"
        for layer in self.layers:
            out = layer.forward(out, train)
        return out

    def backward(self, dlogits: np.ndarray) -> None:
        """Accumulate parameter gradients from a gradient at the logits.

        Uses the caches of the most recent train-mode forward.
        """
        grad = dlogits
        for layer in reversed(self.layers):
            grad = layer.backward(grad)

    def zero_grads(self) -> None:
        self.grads[...] = 0.0

    def get_params(self) -> np.ndarray:
        return self.params.copy()

    def set_params(self, vec: np.ndarray) -> None:
        if vec.shape != self.params.shape:
            raise ContractError("parameter vector length mismatch")
        self.params[...] = vec

    def get_buffers(self) -> list[np.ndarray]:
        """Copies of the non-trainable state (BatchNorm running stats)."""
        out = []
        for layer in self.layers:
            if isinstance(layer, BatchNorm1d):
                out.append(layer.running_mean.copy())
                out.append(layer.running_var.copy())
        return out

    def set_buffers(self, buffers) -> None:
        it = iter(buffers)
        for layer in self.layers:
            if isinstance(layer, BatchNorm1d):
                layer.running_mean[...] = next(it)
                layer.running_var[...] = next(it)

    def clone(self) -> "MlpModel":
        other = MlpModel(
            self.input_dim, self.hidden, self.class_count, self.batchnorm
        )
        other.set_params(self.params)
        other.set_buffers(self.get_buffers())
        return other


@dataclass
class OptimizerState:
    """SGD or Adam state over a flat parameter vector."""

    kind: str
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ContractError(f"optimizer kind must be sgd or adam, got {self.kind!r}")
        if self.lr < 0:
            raise ContractError("learning rate must be >= 0")

    @classmethod
    def for_model(cls, kind: str, lr: float, param_count: int) -> "OptimizerState":
        state = cls(kind=kind, lr=lr)
        if kind == "adam":
            state.m = np.zeros(param_count)
            state.v = np.zeros(param_count)
        return state

    def reset_moments(self) -> None:
        """Drop accumulated Adam moments (e.g. after installing new params)."""
        self.step = 0
        if self.m is not None:
            self.m[...] = 0.0
            self.v[...] = 0.0

    def snapshot(self):
        return (
            self.step,
            None if self.m is None else self.m.copy(),
            None if self.v is None else self.v.copy(),
        )

    def restore(self, snap) -> None:
        self.step = snap[0]
        if snap[1] is not None:
            self.m[...] = snap[1]
            self.v[...] = snap[2]


def optimizer_step(state: OptimizerState, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """Apply one optimizer update in place and return the parameter vector."""
    if params.shape != grads.shape:
        raise ContractError("params and grads must have equal length")
    if state.kind == "sgd":
        K.sgd_update(params, grads, state.lr)
    else:
        if state.m is None or state.m.shape != params.shape:
            raise ContractError("adam moment buffers not aligned to parameters")
        state.step += 1
        K.adam_update(
            params, grads, state.m, state.v, state.step,
            state.lr, state.beta1, state.beta2, state.eps,
        )
    return params


def combined_loss(
    model: MlpModel,
    spec: LossSpec,
    local_batch: np.ndarray | None = None,
    labels: np.ndarray | None = None,
    ref_batch: np.ndarray | None = None,
    teacher_probs: np.ndarray | None = None,
    global_params: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Evaluate (1-lam)*CE + lam*T^2*KL + (mu/2)*||params - anchor||^2.

    Either the supervised part (local_batch, labels) or the distillation
    part (ref_batch, teacher_probs) must be present; absent parts contribute
    zero. The proximal part is active when prox_mu > 0 and an anchor vector
    is supplied. Returns the loss and the gradient w.r.t. the flat
    parameter vector. Forwards run in train mode.
    """
    has_sup = local_batch is not None and labels is not None
    has_kd = ref_batch is not None and teacher_probs is not None
    if not (has_sup or has_kd):
        raise ContractError("combined_loss needs a supervised or distillation part")
    model.zero_grads()
    loss = 0.0
    if has_sup:
        logits = model.forward(local_batch, "train")
        ce, dlogits = cross_entropy(logits, labels)
        loss += (1.0 - spec.lam) * ce
        model.backward((1.0 - spec.lam) * dlogits)
    if has_kd:
        logits = model.forward(ref_batch, "train")
        kl, dlogits = kl_distill(logits, teacher_probs, spec.temperature)
        scale = spec.lam * spec.temperature**2
        loss += scale * kl
        model.backward(scale * dlogits)
    grad = model.grads.copy()
    if spec.prox_mu > 0 and global_params is not None:
        if global_params.shape != model.params.shape:
            raise ContractError("global_params length mismatch")
        diff = model.params - global_params
        loss += 0.5 * spec.prox_mu * float(diff @ diff)
        grad += spec.prox_mu * diff
    return loss, grad


def gradient_check(model: MlpModel, loss_closure, epsilon: float = 1e-5) -> float:
    """Compare a closure's analytic gradient against central differences.

    ``loss_closure`` must return (loss, flat_gradient) for the model's
    current parameters. Returns the max over parameters of
    |g_fd - g_an| / max(1e-8, |g_fd| + |g_an|).
    """
    base = model.get_params()
    loss0, analytic = loss_closure()
    if not np.isfinite(loss0):
        raise ContractError("loss is not finite at the evaluation point")
    analytic = np.array(analytic, copy=True)
    worst = 0.0
    try:
        for i in range(base.size):
            model.params[i] = base[i] + epsilon
            lp, _ = loss_closure()
            model.params[i] = base[i] - epsilon
            lm, _ = loss_closure()
            model.params[i] = base[i]
            fd = (lp - lm) / (2.0 * epsilon)
            err = abs(fd - analytic[i]) / max(1e-8, abs(fd) + abs(analytic[i]))
            if err > worst:
                worst = err
    finally:
        model.params[...] = base
    return worst
