"""First-order bi-level search with a scheduled auxiliary skip coefficient.

Each epoch ``e = 1..E`` uses ``beta_e = beta_at(schedule, e)``. Within an
epoch, paired minibatches alternate one SGD step on the network weights
(training split, architecture fixed) with one Adam step on the architecture
logits (validation split, weights fixed).
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import seeding
from .data import split_dataset
from .schedules import BetaSchedule, beta_at
from .supernet import ArchParams, SearchSpaceSpec, Supernet


@dataclass(frozen=True)
class SearchConfig:
    epochs: int = 10
    batch_size: int = 64
    w_lr: float = 0.025
    w_lr_min: float = 0.001
    w_momentum: float = 0.9
    w_weight_decay: float = 3e-4
    w_grad_clip: float = 5.0
    a_lr: float = 1e-3
    a_beta1: float = 0.5
    a_beta2: float = 0.999
    a_eps: float = 1e-8
    a_weight_decay: float = 1e-3
    split_ratio: float = 0.5
    seed: int = 0
    hessian_every: int = 0  # epochs between eigenvalue estimates, 0 disables
    hessian_samples: int = 512
    schedule: BetaSchedule = field(default_factory=BetaSchedule)
    space: SearchSpaceSpec = field(default_factory=SearchSpaceSpec)

    def __post_init__(self):
        if not 0.0 < self.split_ratio < 1.0:
            raise ValueError("split_ratio must lie in (0, 1)")
        if self.w_lr <= 0 or self.a_lr < 0:
            raise ValueError("learning rates must be positive (arch lr may be 0 to freeze)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.schedule.total_epochs != self.epochs:
            raise ValueError(
                f"schedule spans {self.schedule.total_epochs} epochs, search runs {self.epochs}"
            )


@dataclass
class EpochRecord:
    epoch: int
    beta: float
    train_loss: float
    val_loss: float
    val_acc: float
    max_eig: float | None
    weights: dict[str, np.ndarray]  # cell type -> per-edge softmax


@dataclass
class SearchResult:
    final_arch: ArchParams
    best_arch: ArchParams
    best_epoch: int
    trajectory: list[EpochRecord]
    space: SearchSpaceSpec
    net: Supernet | None = field(default=None, repr=False)


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


def _check_grads(grads):
    for k, g in grads.items():
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for {k}")


def sgd_step(params, grads, lr, momentum=0.0, weight_decay=0.0, state=None):
    """Heavy-ball SGD with L2 decay folded into the gradient.

    ``buf = momentum * buf + (g + wd * p)``; ``p -= lr * buf``. The first
    step initializes ``buf`` to the gradient. ``state`` is updated in place.
    """
    _check_grads(grads)
    state = {} if state is None else state
    out = {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {k} {p.shape}")
        if weight_decay:
            g = g + weight_decay * p
        if momentum:
            buf = state.get(k)
            buf = g.copy() if buf is None else momentum * buf + g
            state[k] = buf
            g = buf
        out[k] = p - lr * g
    return out


def adam_step(params, grads, state, lr, b1=0.9, b2=0.999, eps=1e-8, weight_decay=0.0):
    """Bias-corrected Adam with L2 decay folded into the gradient; ``state`` updated in place."""
    _check_grads(grads)
    t = state.get("__t__", 0) + 1
    state["__t__"] = t
    out = {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {k} {p.shape}")
        if weight_decay:
            g = g + weight_decay * p
        m = state.get(("m", k), np.zeros_like(p))
        v = state.get(("v", k), np.zeros_like(p))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state[("m", k)], state[("v", k)] = m, v
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        out[k] = p - lr * mhat / (np.sqrt(vhat) + eps)
    return out


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    if not max_norm:
        return grads
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm:
        return grads
    s = max_norm / (total + 1e-6)
    return {k: g * s for k, g in grads.items()}


def cosine_lr(base: float, minimum: float, epoch: int, epochs: int) -> float:
    """Learning rate for 1-based ``epoch``; equals ``base`` in the first epoch."""
    return minimum + 0.5 * (base - minimum) * (1 + math.cos(math.pi * (epoch - 1) / epochs))


# ---------------------------------------------------------------------------
# search loop
# ---------------------------------------------------------------------------


def _arch_dict(arch: ArchParams) -> dict[str, np.ndarray]:
    return dict(arch.items())


def _arch_from(d: dict[str, np.ndarray]) -> ArchParams:
    return ArchParams(d["normal"], d.get("reduce"))


def evaluate(net: Supernet, arch: ArchParams, beta: float, x, y, batch_size=256):
    """Mean loss and accuracy over ``(x, y)`` in fixed-order batches."""
    total_loss = total_correct = 0.0
    for s in range(0, len(y), batch_size):
        xb, yb = x[s : s + batch_size], y[s : s + batch_size]
        loss, acc, _ = net.loss_and_grads(xb, yb, arch, beta, wrt=None)
        total_loss += loss * len(yb)
        total_correct += acc * len(yb)
    return total_loss / len(y), total_correct / len(y)


BatchHook = Callable[[str, str, np.ndarray], None]


def run_search(
    config: SearchConfig,
    dataset: tuple[np.ndarray, np.ndarray],
    arch_init: ArchParams | None = None,
    hook: BatchHook | None = None,
    log: Callable[[str], None] | None = None,
) -> SearchResult:
    """Run the alternating search and return final and best-validation logits.

    ``hook(phase, split, sample_ids)`` is called before every optimizer step,
    with ``phase`` in {"weights", "arch"} and ``split`` in {"train", "val"}.
    """
    x, y = dataset
    ids = np.arange(len(y))
    space = config.space
    (xt, yt), (xv, yv) = split_dataset(
        np.arange(len(y)), y, config.split_ratio, seeding.subseed(config.seed, "split")
    )
    train_ids, val_ids = ids[xt], ids[xv]
    n_iter = min(len(train_ids), len(val_ids)) // config.batch_size
    if n_iter == 0:
        raise ValueError("splits are smaller than one batch")

    init_rng = seeding.stream(config.seed, "init")
    num_classes = int(y.max()) + 1
    net = Supernet.create(space, x.shape[1], num_classes, init_rng)
    arch = arch_init.copy() if arch_init is not None else ArchParams.random(space, init_rng)
    arch.check_finite()
    shuffle = seeding.stream(config.seed, "search")

    w_state: dict = {}
    a_state: dict = {}
    trajectory: list[EpochRecord] = []
    best = (-1.0, 0, arch.copy())
    hess_ids = val_ids[: config.hessian_samples]

    for epoch in range(1, config.epochs + 1):
        beta = beta_at(config.schedule, epoch)
        lr = cosine_lr(config.w_lr, config.w_lr_min, epoch, config.epochs)
        tr = train_ids[shuffle.permutation(len(train_ids))]
        va = val_ids[shuffle.permutation(len(val_ids))]
        train_loss = 0.0
        for it in range(n_iter):
            ctx = f"epoch {epoch} step {it + 1}"
            bt = tr[it * config.batch_size : (it + 1) * config.batch_size]
            bv = va[it * config.batch_size : (it + 1) * config.batch_size]

            try:
                if hook:
                    hook("weights", "train", bt)
                loss, _, g = net.loss_and_grads(x[bt], y[bt], arch, beta, "weights", ctx)
                g = clip_by_global_norm(g, config.w_grad_clip)
                net.weights = sgd_step(
                    net.weights, g, lr, config.w_momentum, config.w_weight_decay, w_state
                )
                train_loss += loss

                if hook:
                    hook("arch", "val", bv)
                _, _, g = net.loss_and_grads(x[bv], y[bv], arch, beta, "arch", ctx)
                if config.a_lr > 0:
                    new = adam_step(
                        _arch_dict(arch),
                        {k[5:]: v for k, v in g.items()},
                        a_state,
                        config.a_lr,
                        config.a_beta1,
                        config.a_beta2,
                        config.a_eps,
                        config.a_weight_decay,
                    )
                    arch = _arch_from(new)
                arch.check_finite()
            except FloatingPointError as exc:
                if ctx in str(exc):
                    raise
                raise FloatingPointError(f"{exc} at {ctx}") from None

        val_loss, val_acc = evaluate(net, arch, beta, x[val_ids], y[val_ids])
        max_eig = None
        if config.hessian_every and epoch % config.hessian_every == 0:
            from .diagnostics import hessian_max_eig

            est = hessian_max_eig(
                net, arch, x[hess_ids], y[hess_ids], beta,
                seed=seeding.subseed(config.seed, "hessian", epoch),
            )
            max_eig = est.value
        rec = EpochRecord(
            epoch,
            beta,
            train_loss / n_iter,
            val_loss,
            val_acc,
            max_eig,
            {k: arch.softmax(k) for k, _ in arch.items()},
        )
        trajectory.append(rec)
        if val_acc > best[0]:
            best = (val_acc, epoch, arch.copy())
        if log:
            log(
                f"epoch {epoch:3d} beta={beta:.3f} train_loss={rec.train_loss:.4f} "
                f"val_loss={val_loss:.4f} val_acc={val_acc:.4f}"
            )

    return SearchResult(arch, best[2], best[1], trajectory, space, net)


# ---------------------------------------------------------------------------
# trajectory output
# ---------------------------------------------------------------------------


def trajectory_columns(space: SearchSpaceSpec, cell_types=("normal",)) -> list[str]:
    cols = ["epoch", "beta", "train_loss", "val_loss", "val_acc", "max_eig"]
    for t in cell_types:
        prefix = "" if t == "normal" else f"{t}_"
        for e in range(space.num_edges):
            cols += [f"{prefix}edge{e}_{op}" for op in space.candidate_ops]
    return cols


def _fmt(v) -> str:
    if v is None:
        return ""
    return repr(float(v))


def trajectory_csv(result: SearchResult) -> str:
    """One row per epoch; per-edge softmax columns are named ``edge{i}_{op}``."""
    types = [t for t in ("normal", "reduce") if t in result.trajectory[0].weights]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(trajectory_columns(result.space, types))
    for r in result.trajectory:
        row = [r.epoch, _fmt(r.beta), _fmt(r.train_loss), _fmt(r.val_loss), _fmt(r.val_acc)]
        row.append(_fmt(r.max_eig))
        for t in types:
            row += [_fmt(v) for v in r.weights[t].reshape(-1)]
        w.writerow(row)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# saved search state
# ---------------------------------------------------------------------------


def _arr(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": [float(v) for v in a.reshape(-1)]}


def _unarr(d: dict) -> np.ndarray:
    return np.array(d["data"], dtype=np.float64).reshape(d["shape"])


def _arch_json(arch: ArchParams) -> dict:
    return {k: _arr(v) for k, v in arch.items()}


def state_json(result: SearchResult, config: SearchConfig, header: dict) -> str:
    """Everything later diagnostics need: space, weights, logits, last beta, seed."""
    net = result.net
    doc = {
        "header": header,
        "seed": config.seed,
        "split_ratio": config.split_ratio,
        "space": dataclasses.asdict(result.space),
        "in_channels": net.in_channels,
        "num_classes": net.num_classes,
        "beta": result.trajectory[-1].beta,
        "best_epoch": result.best_epoch,
        "final_arch": _arch_json(result.final_arch),
        "best_arch": _arch_json(result.best_arch),
        "weights": {k: _arr(v) for k, v in sorted(net.weights.items())},
    }
    return json.dumps(doc, indent=1) + "\n"


@dataclass
class SavedState:
    net: Supernet
    final_arch: ArchParams
    best_arch: ArchParams
    beta: float
    seed: int
    split_ratio: float
    best_epoch: int


def load_state(text: str) -> SavedState:
    doc = json.loads(text)
    sp = dict(doc["space"])
    sp["candidate_ops"] = tuple(sp["candidate_ops"])
    space = SearchSpaceSpec(**sp)

    def arch(d):
        return ArchParams(_unarr(d["normal"]), _unarr(d["reduce"]) if "reduce" in d else None)

    weights = {k: _unarr(v) for k, v in doc["weights"].items()}
    net = Supernet(space, doc["in_channels"], doc["num_classes"], weights)
    return SavedState(
        net,
        arch(doc["final_arch"]),
        arch(doc["best_arch"]),
        float(doc["beta"]),
        int(doc["seed"]),
        float(doc["split_ratio"]),
        int(doc["best_epoch"]),
    )


def validation_split(dataset, seed: int, ratio: float):
    """The validation half a search with ``seed`` used."""
    x, y = dataset
    _, (xv, yv) = split_dataset(x, y, ratio, seeding.subseed(seed, "split"))
    return xv, yv
