"""Split neural stack with manual forward/backward passes.

The complete classifier is a sequence of layers cut at a boundary: the
shallow half runs on clients and produces feature columns, the deep half
runs on mediators and ends in a softmax cross-entropy loss. Batches are
column-major: one example per column.

Layer kinds: dense, relu, flatten (no-op on already-flat columns) and a
small valid-padding convolution. Batch normalization is deliberately not
available in either half.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import ShapeError

Params = list[list[np.ndarray]]

DENSE = "dense"
RELU = "relu"
FLATTEN = "flatten"
CONV_SMALL = "conv-small"


@dataclass(frozen=True)
class LayerSpec:
    """Shape declaration for one layer."""

    kind: str
    in_dim: int = 0
    out_dim: int = 0
    height: int = 0
    width: int = 0
    kernel: int = 0
    channels: int = 0


def dense(in_dim: int, out_dim: int) -> LayerSpec:
    return LayerSpec(DENSE, in_dim=in_dim, out_dim=out_dim)


def relu() -> LayerSpec:
    return LayerSpec(RELU)


def flatten() -> LayerSpec:
    return LayerSpec(FLATTEN)


def conv_small(height: int, width: int, kernel: int, channels: int) -> LayerSpec:
    if kernel > min(height, width):
        raise ShapeError(f"kernel {kernel} exceeds input {height}x{width}")
    return LayerSpec(CONV_SMALL, height=height, width=width, kernel=kernel, channels=channels)


def layer_out_dim(spec: LayerSpec, in_dim: int) -> int:
    if spec.kind == DENSE:
        if in_dim != spec.in_dim:
            raise ShapeError(f"dense expects input dim {spec.in_dim}, got {in_dim}")
        return spec.out_dim
    if spec.kind in (RELU, FLATTEN):
        return in_dim
    if spec.kind == CONV_SMALL:
        if in_dim != spec.height * spec.width:
            raise ShapeError(
                f"conv-small expects input dim {spec.height * spec.width}, got {in_dim}"
            )
        oh = spec.height - spec.kernel + 1
        ow = spec.width - spec.kernel + 1
        return spec.channels * oh * ow
    raise ValueError(f"unknown layer kind {spec.kind!r}")


def stack_out_dim(specs: list[LayerSpec], in_dim: int) -> int:
    for spec in specs:
        in_dim = layer_out_dim(spec, in_dim)
    return in_dim


def init_stack(specs: list[LayerSpec], in_dim: int, rng: np.random.Generator) -> list[list[np.ndarray]]:
    """Seeded uniform(-a, a) init with a = sqrt(6 / (fan_in + fan_out)); zero biases."""
    params: list[list[np.ndarray]] = []
    for spec in specs:
        if spec.kind == DENSE:
            a = np.sqrt(6.0 / (spec.in_dim + spec.out_dim))
            w = rng.uniform(-a, a, size=(spec.out_dim, spec.in_dim))
            params.append([w, np.zeros(spec.out_dim)])
        elif spec.kind == CONV_SMALL:
            fan_in = spec.kernel * spec.kernel
            fan_out = spec.channels * spec.kernel * spec.kernel
            a = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-a, a, size=(spec.channels, spec.kernel, spec.kernel))
            params.append([w, np.zeros(spec.channels)])
        else:
            params.append([])
        in_dim = layer_out_dim(spec, in_dim)
    return params


def param_count(params: Params) -> int:
    return sum(int(p.size) for layer in params for p in layer)


@dataclass
class Stack:
    """Layer specs plus their parameter arrays."""

    specs: list[LayerSpec]
    params: Params

    def __post_init__(self) -> None:
        if len(self.specs) != len(self.params):
            raise ShapeError(
                f"{len(self.specs)} specs but {len(self.params)} parameter groups"
            )


@dataclass
class SplitModel:
    """Shallow (client-side) and deep (mediator-side) halves of one classifier."""

    shallow: Stack
    deep: Stack
    input_dim: int
    boundary_dim: int
    num_classes: int

    def __post_init__(self) -> None:
        got = stack_out_dim(self.shallow.specs, self.input_dim)
        if got != self.boundary_dim:
            raise ShapeError(f"shallow output dim {got} != boundary dim {self.boundary_dim}")
        got = stack_out_dim(self.deep.specs, self.boundary_dim)
        if got != self.num_classes:
            raise ShapeError(f"deep output dim {got} != class count {self.num_classes}")

    def full_stack(self) -> Stack:
        """The stitched, unsplit classifier (shared parameter arrays)."""
        return Stack(self.shallow.specs + self.deep.specs, self.shallow.params + self.deep.params)


def default_split_model(
    input_dim: int,
    num_classes: int,
    rng: np.random.Generator,
    boundary_dim: int = 64,
    deep_hidden: int = 64,
) -> SplitModel:
    """Desk-scale default: dense+relu shallow half, two-dense deep half."""
    shallow_specs = [dense(input_dim, boundary_dim), relu()]
    deep_specs = [dense(boundary_dim, deep_hidden), relu(), dense(deep_hidden, num_classes)]
    shallow_params = init_stack(shallow_specs, input_dim, rng)
    deep_params = init_stack(deep_specs, boundary_dim, rng)
    return SplitModel(
        shallow=Stack(shallow_specs, shallow_params),
        deep=Stack(deep_specs, deep_params),
        input_dim=input_dim,
        boundary_dim=boundary_dim,
        num_classes=num_classes,
    )


@dataclass
class ForwardTrace:
    """Cached activations from one forward pass, consumed by the backward pass."""

    stack: Stack
    caches: list[tuple]
    batch: np.ndarray
    output: np.ndarray
    # populated by forward_deep only
    probs: np.ndarray | None = None
    labels: np.ndarray | None = None
    loss: float = 0.0


def _layer_forward(spec: LayerSpec, layer_params: list[np.ndarray], x: np.ndarray):
    layer_out_dim(spec, x.shape[0])  # validates the input dimension
    if spec.kind == DENSE:
        w, b = layer_params
        return w @ x + b[:, None], (x,)
    if spec.kind == RELU:
        return np.maximum(x, 0.0), (x,)
    if spec.kind == FLATTEN:
        return x, ()
    if spec.kind == CONV_SMALL:
        w, b = layer_params
        k, ch = spec.kernel, spec.channels
        oh, ow = spec.height - k + 1, spec.width - k + 1
        n = x.shape[1]
        img = x.reshape(spec.height, spec.width, n)
        cols = np.empty((k * k, oh * ow, n))
        idx = 0
        for dr in range(k):
            for dc in range(k):
                cols[idx] = img[dr : dr + oh, dc : dc + ow, :].reshape(oh * ow, n)
                idx += 1
        wmat = w.reshape(ch, k * k)
        out = np.tensordot(wmat, cols, axes=(1, 0)) + b[:, None, None]
        return out.reshape(ch * oh * ow, n), (x, cols)
    raise ValueError(f"unknown layer kind {spec.kind!r}")


def _layer_backward(spec: LayerSpec, layer_params: list[np.ndarray], cache: tuple, grad_out: np.ndarray):
    if spec.kind == DENSE:
        w, _ = layer_params
        (x,) = cache
        return [grad_out @ x.T, grad_out.sum(axis=1)], w.T @ grad_out
    if spec.kind == RELU:
        (x,) = cache
        return [], grad_out * (x > 0.0)
    if spec.kind == FLATTEN:
        return [], grad_out
    if spec.kind == CONV_SMALL:
        w, _ = layer_params
        x, cols = cache
        k, ch = spec.kernel, spec.channels
        oh, ow = spec.height - k + 1, spec.width - k + 1
        n = grad_out.shape[1]
        g = grad_out.reshape(ch, oh * ow, n)
        wmat = w.reshape(ch, k * k)
        grad_w = np.tensordot(g, cols, axes=([1, 2], [1, 2])).reshape(ch, k, k)
        grad_b = g.sum(axis=(1, 2))
        grad_cols = np.tensordot(wmat.T, g, axes=(1, 0))
        grad_img = np.zeros((spec.height, spec.width, n))
        idx = 0
        for dr in range(k):
            for dc in range(k):
                grad_img[dr : dr + oh, dc : dc + ow, :] += grad_cols[idx].reshape(oh, ow, n)
                idx += 1
        return [grad_w, grad_b], grad_img.reshape(spec.height * spec.width, n)
    raise ValueError(f"unknown layer kind {spec.kind!r}")


def forward_stack(stack: Stack, batch: np.ndarray) -> ForwardTrace:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"batch must be 2-D, got ndim={x.ndim}")
    caches = []
    out = x
    for spec, layer_params in zip(stack.specs, stack.params):
        out, cache = _layer_forward(spec, layer_params, out)
        caches.append(cache)
    return ForwardTrace(stack=stack, caches=caches, batch=x, output=out)


def backward_stack(trace: ForwardTrace, grad_out: np.ndarray) -> tuple[Params, np.ndarray]:
    if grad_out.shape != trace.output.shape:
        raise ShapeError(
            f"upstream gradient shape {grad_out.shape} != output shape {trace.output.shape}"
        )
    grads: Params = [[] for _ in trace.stack.specs]
    g = grad_out
    for i in range(len(trace.stack.specs) - 1, -1, -1):
        grads[i], g = _layer_backward(trace.stack.specs[i], trace.stack.params[i], trace.caches[i], g)
    return grads, g


def forward_shallow(shallow: Stack, batch: np.ndarray) -> tuple[np.ndarray, ForwardTrace]:
    """Feature extraction: returns (boundary_dim x n) features plus the trace."""
    trace = forward_stack(shallow, batch)
    return trace.output, trace


def softmax_columns(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def forward_deep(deep: Stack, features: np.ndarray, labels: np.ndarray) -> tuple[float, ForwardTrace]:
    """Deep half plus mean softmax cross-entropy over the batch columns."""
    labels = np.asarray(labels)
    trace = forward_stack(deep, features)
    logits = trace.output
    if labels.shape != (logits.shape[1],):
        raise ShapeError(f"expected {logits.shape[1]} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= logits.shape[0]:
        raise ValueError(
            f"label outside class range [0, {logits.shape[0]}): {int(labels.min())}..{int(labels.max())}"
        )
    probs = softmax_columns(logits)
    n = logits.shape[1]
    picked = probs[labels, np.arange(n)]
    loss = float(-np.mean(np.log(np.maximum(picked, 1e-300))))
    trace.probs = probs
    trace.labels = labels
    trace.loss = loss
    return loss, trace


def backward_deep(trace: ForwardTrace) -> tuple[Params, np.ndarray]:
    """Gradients of the traced loss w.r.t. deep parameters and input features."""
    if trace.probs is None or trace.labels is None:
        raise ValueError("trace has no loss information; run forward_deep first")
    n = trace.output.shape[1]
    grad_logits = trace.probs.copy()
    grad_logits[trace.labels, np.arange(n)] -= 1.0
    grad_logits /= n
    return backward_stack(trace, grad_logits)


def backward_shallow(trace: ForwardTrace, grad_features: np.ndarray) -> Params:
    """Chain an upstream feature gradient through the cached shallow pass."""
    grads, _ = backward_stack(trace, grad_features)
    return grads


def sgd_step(params: Params, grads: Params, eta: float) -> Params:
    """params - eta * grads, elementwise, as fresh arrays."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameter groups but {len(grads)} gradient groups")
    out: Params = []
    for layer_p, layer_g in zip(params, grads):
        if len(layer_p) != len(layer_g):
            raise ShapeError("parameter/gradient group size mismatch")
        new_layer = []
        for p, g in zip(layer_p, layer_g):
            if p.shape != g.shape:
                raise ShapeError(f"parameter shape {p.shape} != gradient shape {g.shape}")
            new_layer.append(p - eta * g)
        out.append(new_layer)
    return out


def finite_diff_gradient(loss_fn, params: Params, step: float) -> Params:
    """Central-difference gradient of loss_fn at params, one coordinate at a time."""
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    grads: Params = []
    for li, layer in enumerate(params):
        layer_grads = []
        for pi, p in enumerate(layer):
            g = np.zeros_like(p)
            flat_p = p.ravel()
            flat_g = g.ravel()
            for j in range(flat_p.size):
                orig = flat_p[j]
                flat_p[j] = orig + step
                up = loss_fn(params)
                flat_p[j] = orig - step
                down = loss_fn(params)
                flat_p[j] = orig
                if not (np.isfinite(up) and np.isfinite(down)):
                    raise ValueError(
                        f"non-finite loss while probing parameter ({li},{pi},{j})"
                    )
                flat_g[j] = (up - down) / (2.0 * step)
            layer_grads.append(g)
        grads.append(layer_grads)
    return grads


def per_example_gradients(trace: ForwardTrace, grad_out: np.ndarray) -> list[Params]:
    """Backward pass restricted to each column separately.

    Used by the per-example clipping variant; cost grows linearly with the
    batch size.
    """
    n = trace.output.shape[1]
    out: list[Params] = []
    for i in range(n):
        caches_i = []
        for spec, cache in zip(trace.stack.specs, trace.caches):
            caches_i.append(tuple(c[..., i : i + 1] for c in cache))
        trace_i = ForwardTrace(
            stack=trace.stack,
            caches=caches_i,
            batch=trace.batch[:, i : i + 1],
            output=trace.output[:, i : i + 1],
        )
        grads_i, _ = backward_stack(trace_i, grad_out[:, i : i + 1])
        out.append(grads_i)
    return out


def clone_params(params: Params) -> Params:
    return [[p.copy() for p in layer] for layer in params]


def params_allclose(a: Params, b: Params, atol: float = 0.0) -> bool:
    flat_a = [p for layer in a for p in layer]
    flat_b = [p for layer in b for p in layer]
    if len(flat_a) != len(flat_b):
        return False
    return all(
        pa.shape == pb.shape and np.allclose(pa, pb, rtol=0.0, atol=atol)
        for pa, pb in zip(flat_a, flat_b)
    )
