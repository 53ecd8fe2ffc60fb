"""Collapse diagnostics for a trained supernet and two small residual-chain studies.

* the dominant Hessian eigenvalue of the validation loss with respect to the
  architecture logits (finite-difference Hessian-vector products, power
  iteration);
* a 2-D accuracy landscape around the current logits;
* the analytic convergence-rate proxy of a three-op cell chain;
* a conv residual chain ``x <- f(x) + beta * x`` with a trainable shared ``beta``;
* a check of gradient flow through a linear residual chain against its
  closed-form product.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import seeding
from .autodiff import Tape, Tensor
from .data import SyntheticDataset
from .supernet import ArchParams, Supernet

GradFn = Callable[[np.ndarray], np.ndarray]


# ---------------------------------------------------------------------------
# Hessian eigenvalue
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EigenEstimate:
    value: float
    iterations: int
    residual: float  # ||Hv - value * v|| for the unit Ritz vector v
    converged: bool


def fd_hvp(grad_fn: GradFn, point: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Central-difference Hessian-vector product with step ``1e-3 / ||v||``."""
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        return np.zeros_like(point)
    eps = 1e-3 / norm
    gp = np.asarray(grad_fn(point + eps * v), dtype=np.float64)
    gm = np.asarray(grad_fn(point - eps * v), dtype=np.float64)
    if not (np.isfinite(gp).all() and np.isfinite(gm).all()):
        raise FloatingPointError("non-finite gradient in Hessian-vector product")
    return (gp - gm) / (2 * eps)


def power_max_eig(
    grad_fn: GradFn,
    point: np.ndarray,
    iters: int = 500,
    tol: float = 1e-7,
    seed: int = 0,
    block: int = 2,
) -> EigenEstimate:
    """Largest-magnitude eigenvalue of the Hessian of the function whose gradient is ``grad_fn``.

    Orthogonal (block) power iteration with a Rayleigh-Ritz step on each
    block; ``block=1`` is plain power iteration. A block of two also resolves
    the case of two dominant eigenvalues of equal magnitude and opposite sign,
    where single-vector iteration oscillates.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    point = np.asarray(point, dtype=np.float64).reshape(-1)
    d = point.size
    if d == 0:
        raise ValueError("empty parameter vector")
    b = max(1, min(block, d))
    rng = np.random.default_rng(seed)
    basis, _ = np.linalg.qr(rng.standard_normal((d, b)))
    value, residual = 0.0, math.inf
    for it in range(1, iters + 1):
        image = np.stack([fd_hvp(grad_fn, point, basis[:, j]) for j in range(b)], axis=1)
        small = basis.T @ image
        small = (small + small.T) / 2
        evals, evecs = np.linalg.eigh(small)
        top = int(np.argmax(np.abs(evals)))
        value = float(evals[top])
        ritz = basis @ evecs[:, top]
        residual = float(np.linalg.norm(image @ evecs[:, top] - value * ritz))
        if residual <= tol:
            return EigenEstimate(value, it, residual, True)
        rotated = image @ evecs[:, np.argsort(-np.abs(evals))]
        if not np.any(rotated):
            return EigenEstimate(0.0, it, 0.0, True)
        basis, _ = np.linalg.qr(rotated)
    return EigenEstimate(value, iters, residual, False)


def supernet_val_grad(
    net: Supernet, arch: ArchParams, x: np.ndarray, y: np.ndarray, beta: float, batch_size=256
) -> GradFn:
    """Gradient of the mean validation loss over ``(x, y)`` as a function of flat logits.

    The samples are consumed in fixed consecutive batches, so repeated calls
    see the same function.
    """

    def grad(vec: np.ndarray) -> np.ndarray:
        a = arch.unflatten(vec)
        total = np.zeros_like(vec, dtype=np.float64)
        for s in range(0, len(y), batch_size):
            xb, yb = x[s : s + batch_size], y[s : s + batch_size]
            _, _, g = net.loss_and_grads(xb, yb, a, beta, wrt="arch")
            flat = ArchParams(g["arch.normal"], g.get("arch.reduce")).flatten()
            total += flat * (len(yb) / len(y))
        return total

    return grad


def hessian_max_eig(
    net: Supernet,
    arch: ArchParams,
    x: np.ndarray,
    y: np.ndarray,
    beta: float,
    iters: int = 100,
    tol: float = 1e-5,
    seed: int = 0,
) -> EigenEstimate:
    """Dominant eigenvalue of the validation-loss Hessian w.r.t. the architecture logits."""
    arch.check_finite()
    grad = supernet_val_grad(net, arch, x, y, beta)
    return power_max_eig(grad, arch.flatten(), iters=iters, tol=tol, seed=seed)


# ---------------------------------------------------------------------------
# accuracy landscape
# ---------------------------------------------------------------------------


@dataclass
class LandscapeGrid:
    radius: float
    resolution: int
    offsets: np.ndarray  # shared by both axes; the middle entry is exactly 0
    values: np.ndarray  # values[i, j] at offsets[i] * d1 + offsets[j] * d2
    seeds: tuple[int, int]
    center_accuracy: float

    def to_csv(self) -> str:
        head = "offset," + ",".join(repr(float(o)) for o in self.offsets)
        rows = [
            repr(float(o)) + "," + ",".join(repr(float(v)) for v in row)
            for o, row in zip(self.offsets, self.values)
        ]
        return "\n".join([head, *rows]) + "\n"


def grid_offsets(radius: float, resolution: int) -> np.ndarray:
    half = resolution // 2
    return radius * (np.arange(resolution) - half) / half + 0.0  # no -0.0


def normalized_direction(arch: ArchParams, rng: np.random.Generator) -> ArchParams:
    """Gaussian direction rescaled so every edge row has the norm of that row of ``arch``."""
    blocks = {}
    for kind, a in arch.items():
        d = rng.standard_normal(a.shape)
        dn = np.linalg.norm(d, axis=1, keepdims=True)
        blocks[kind] = d * (np.linalg.norm(a, axis=1, keepdims=True) / np.maximum(dn, 1e-300))
    return ArchParams(blocks["normal"], blocks.get("reduce"))


def _accuracy(net: Supernet, arch: ArchParams, beta: float, x, y, batch_size=256) -> float:
    correct = 0.0
    for s in range(0, len(y), batch_size):
        xb, yb = x[s : s + batch_size], y[s : s + batch_size]
        _, acc, _ = net.loss_and_grads(xb, yb, arch, beta, wrt=None)
        correct += acc * len(yb)
    return correct / len(y)


def landscape_probe(
    net: Supernet,
    arch: ArchParams,
    x: np.ndarray,
    y: np.ndarray,
    beta: float,
    radius: float = 1.0,
    resolution: int = 11,
    seed: int = 0,
    map_fn: Callable = map,
) -> LandscapeGrid:
    """Validation accuracy on a ``resolution x resolution`` grid around ``arch``.

    Cells are independent, so ``map_fn`` may be a parallel map.
    """
    if resolution < 3 or resolution % 2 == 0:
        raise ValueError("resolution must be an odd integer >= 3")
    if not radius >= 0:
        raise ValueError("radius must be non-negative")
    seeds = (seeding.subseed(seed, "directions", 1), seeding.subseed(seed, "directions", 2))
    d1 = normalized_direction(arch, np.random.default_rng(seeds[0]))
    d2 = normalized_direction(arch, np.random.default_rng(seeds[1]))
    offsets = grid_offsets(radius, resolution)
    half = resolution // 2

    def cell(ij):
        i, j = ij
        if i == half and j == half:
            point = arch
        else:
            point = arch.unflatten(
                arch.flatten() + offsets[i] * d1.flatten() + offsets[j] * d2.flatten()
            )
        return _accuracy(net, point, beta, x, y)

    coords = [(i, j) for i in range(resolution) for j in range(resolution)]
    values = np.array(list(map_fn(cell, coords)), dtype=np.float64).reshape(resolution, resolution)
    center = _accuracy(net, arch, beta, x, y)
    return LandscapeGrid(float(radius), resolution, offsets, values, seeds, center)


# ---------------------------------------------------------------------------
# convergence-rate proxy
# ---------------------------------------------------------------------------

Weights = Mapping[tuple[int, int], float] | np.ndarray


def _weight(w: Weights, i: int, j: int, name: str) -> float:
    if isinstance(w, Mapping):
        if (i, j) not in w:
            raise KeyError(f"{name} weight for edge ({i}, {j}) is missing")
        return float(w[(i, j)])
    arr = np.asarray(w)
    if i >= arr.shape[0] or j >= arr.shape[1] or not np.isfinite(arr[i, j]):
        raise KeyError(f"{name} weight for edge ({i}, {j}) is missing")
    return float(arr[i, j])


def lambda_proxy(conv: Weights, skip: Weights, beta: float, h: int) -> float:
    """Rate proxy for a chain of ``h`` nodes whose edges mix conv, skip and none.

    ``sum_{i=0}^{h-2} conv[i, h-1]^2 * prod_{t=0}^{i-1} (skip[t, i] + beta)^2``,
    with the proportionality constant taken as 1. ``conv`` and ``skip`` map
    edge ``(source, target)`` to the op weight, as dicts or 2-D arrays (NaN
    entries count as missing).
    """
    if h < 2:
        raise ValueError("h must be >= 2")
    total = 0.0
    for i in range(h - 1):
        chain = 1.0
        for t in range(i):
            s = _weight(skip, t, i, "skip") + beta
            chain = chain * (s * s)
        c = _weight(conv, i, h - 1, "conv")
        total = total + (c * c) * chain
    return total


# ---------------------------------------------------------------------------
# residual chain with a trainable skip coefficient
# ---------------------------------------------------------------------------


@dataclass
class ResBetaTrace:
    init_beta: float
    betas: list[float]  # value after each epoch
    losses: list[float]  # mean training loss of each epoch


def _he(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.standard_normal(shape) * math.sqrt(2.0 / int(np.prod(shape[1:])))


def _smoothed_ce(logits: Tensor, labels: np.ndarray, classes: int, smoothing: float) -> Tensor:
    loss = ad.mul_const(ad.cross_entropy(logits, labels), 1.0 - smoothing)
    if smoothing:
        for k in range(classes):
            uniform = ad.cross_entropy(logits, np.full(len(labels), k))
            loss = ad.add(loss, ad.mul_const(uniform, smoothing / classes))
    return loss


def _step_lr(base: float, step: int, total: int, warmup: int) -> float:
    # linear warmup, then cosine to zero
    if step < warmup:
        return base * (step + 1) / warmup
    return base * 0.5 * (1.0 + math.cos(math.pi * (step - warmup) / max(1, total - warmup)))


def resnet_beta_demo(
    init_beta: float,
    depth: int = 8,
    epochs: int = 24,
    seed: int = 0,
    dataset: SyntheticDataset | None = None,
    channels: int = 8,
    batch_size: int = 64,
    lr: float = 0.05,
    beta_lr: float = 0.35,
    momentum: float = 0.9,
    warmup_epochs: int = 5,
    beta_warmup_epochs: int = 12,
    weight_decay: float = 5e-4,
    clip: float = 1.0,
    label_smoothing: float = 0.05,
) -> ResBetaTrace:
    """Train a conv residual chain with one shared trainable skip coefficient.

    Blocks are ``h <- relu(bn(conv3x3(h)) + beta * h)`` after a conv stem;
    a zero-initialized linear head reads the pooled features. Weights use
    momentum SGD with warmup and cosine decay, global-norm gradient clipping
    and label smoothing. ``beta`` takes plain (momentum-free) SGD steps on its
    own, longer warmup and is not weight-decayed: with momentum it overshoots
    while the weights are still warming up. ``beta_lr`` 0 freezes ``beta``.
    """
    if not 0.0 <= init_beta <= 1.5:
        raise ValueError("init_beta must lie in [0, 1.5]")
    if depth < 4:
        raise ValueError("depth must be >= 4")
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if lr <= 0 or beta_lr < 0:
        raise ValueError("lr must be positive and beta_lr non-negative")
    data = dataset if dataset is not None else SyntheticDataset(samples_per_class=128, seed=seed)
    x, y = data.generate()
    classes = data.num_classes
    init = seeding.stream(seed, "init")
    params = {"stem": _he(init, (channels, x.shape[1], 3, 3))}
    for i in range(depth):
        params[f"block{i}"] = _he(init, (channels, channels, 3, 3))
    params["head"] = np.zeros((channels, classes))
    beta = np.array([float(init_beta)])
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    order = seeding.stream(seed, "search")
    per_epoch = -(-len(y) // batch_size)
    total, warmup = epochs * per_epoch, warmup_epochs * per_epoch
    beta_warmup = beta_warmup_epochs * per_epoch

    betas, losses = [], []
    for epoch in range(epochs):
        perm = order.permutation(len(y))
        running = 0.0
        for b in range(per_epoch):
            idx = perm[b * batch_size : (b + 1) * batch_size]
            tape = Tape()
            w = {k: tape.var(v) for k, v in params.items()}
            bt = tape.var(beta)
            h = ad.relu(ad.batchnorm(ad.conv2d(Tensor(x[idx]), w["stem"], padding=1)))
            for i in range(depth):
                f = ad.batchnorm(ad.conv2d(h, w[f"block{i}"], padding=1))
                h = ad.relu(ad.add(f, ad.scale(h, bt)))
            logits = ad.matmul(ad.gap(h), w["head"])
            loss = _smoothed_ce(logits, y[idx], classes, label_smoothing)
            if not np.isfinite(loss.data).all():
                raise FloatingPointError(f"residual chain diverged at epoch {epoch + 1} step {b + 1}")
            g = ad.backward(loss)
            grads = {k: g[t] for k, t in w.items()}
            grads["__beta__"] = g[bt]
            norm = math.sqrt(sum(float(np.sum(v * v)) for v in grads.values()))
            scale = clip / norm if clip and norm > clip else 1.0
            step = epoch * per_epoch + b
            step_lr = _step_lr(lr, step, total, warmup)
            for k in params:
                velocity[k] = momentum * velocity[k] + scale * grads[k] + weight_decay * params[k]
                params[k] = params[k] - step_lr * velocity[k]
            beta = beta - _step_lr(beta_lr, step, total, beta_warmup) * scale * grads["__beta__"]
            if not (np.isfinite(beta).all() and all(np.isfinite(v).all() for v in params.values())):
                raise FloatingPointError(f"residual chain diverged at epoch {epoch + 1} step {b + 1}")
            running += loss.item() * len(idx)
        betas.append(float(beta[0]))
        losses.append(running / len(y))
    return ResBetaTrace(float(init_beta), betas, losses)


# ---------------------------------------------------------------------------
# gradient flow through a linear residual chain
# ---------------------------------------------------------------------------


def chain_input_grads(
    blocks: Sequence[np.ndarray], beta: float, x0: np.ndarray, upstream: np.ndarray
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Gradients of ``sum(upstream * x_D)`` w.r.t. every ``x_i`` of ``x_{i+1} = x_i A_i + beta x_i``.

    Returns ``(tape, closed)``: the tape gradients and the product
    ``upstream (A_{D-1} + beta I)^T ... (A_i + beta I)^T``, both indexed by layer.
    """
    tape = Tape()
    xs = [tape.var(x0)]
    for a in blocks:
        xs.append(ad.add(ad.matmul(xs[-1], Tensor(a)), ad.mul_const(xs[-1], beta)))
    loss = _weighted_sum(xs[-1], upstream)
    g = ad.backward(loss)
    taped = [g[t] for t in xs]

    eye = np.eye(blocks[0].shape[0]) if blocks else np.eye(x0.shape[1])
    closed = [np.asarray(upstream, dtype=np.float64)]
    for a in reversed(blocks):
        closed.append(closed[-1] @ (a + beta * eye).T)
    closed.reverse()
    return taped, closed


def _weighted_sum(x: Tensor, c: np.ndarray) -> Tensor:
    """``sum(c * x)`` as a flattened inner product."""
    n, d = x.shape
    flat = ad.reshape(x, (1, n * d))
    return ad.reshape(ad.matmul(flat, Tensor(np.asarray(c).reshape(n * d, 1))), (1, 1))


def gradient_flow_check(depth: int, beta: float, dim: int = 5, seed: int = 0) -> float:
    """Max relative error between tape and closed-form layer gradients of a random linear chain."""
    if depth < 2:
        raise ValueError("depth must be >= 2")
    rng = seeding.stream(seed, "init", depth)
    blocks = [rng.standard_normal((dim, dim)) / math.sqrt(dim) for _ in range(depth)]
    x0 = rng.standard_normal((3, dim))
    upstream = rng.standard_normal((3, dim))
    taped, closed = chain_input_grads(blocks, beta, x0, upstream)
    err = 0.0
    for a, c in zip(taped, closed):
        scale = max(1.0, float(np.abs(c).max()))
        err = max(err, float(np.abs(a - c).max()) / scale)
    return err
