"""Plain-text run configuration.

Grammar, one entry per line::

    # comment
    section.key = value

Blank lines and ``#`` comments are ignored; a ``#`` after a value starts a
trailing comment. Values are typed by the key's default: integers, reals,
booleans (``true``/``false``), strings, ``none`` for optional integers, and
comma-separated lists. Unknown keys and malformed values are errors that
name the line and column.

The top-level ``seed`` feeds every random stream (see :mod:`dartsminus.seeding`).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

from .data import SyntheticDataset
from .minibench import BenchSpec
from .schedules import BetaSchedule
from .search import SearchConfig
from .supernet import SearchSpaceSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Key:
    default: Any
    kind: str  # int, float, bool, str, opt_int, int_list, str_list
    doc: str


# Defaults describe the desk-scale experiment: the three-op mini space that
# the benchmark table enumerates.
KEYS: dict[str, Key] = {
    "seed": Key(0, "int", "top-level seed; every random stream derives from it"),
    # data
    "data.kind": Key("concentric", "str", "synthetic generator"),
    "data.num_classes": Key(4, "int", "number of classes"),
    "data.size": Key(8, "int", "image side length in pixels"),
    "data.samples_per_class": Key(256, "int", "samples per class"),
    "data.noise": Key(0.1, "float", "additive Gaussian noise before standardization"),
    "data.freq_min": Key(1.0, "float", "lowest radial frequency (radians per pixel)"),
    "data.freq_max": Key(2.8, "float", "highest radial frequency"),
    "data.center_jitter": Key(0.5, "float", "max ring-center offset in pixels"),
    "data.seed": Key(0, "int", "dataset seed, fixed so searches and the table share data"),
    # space
    "space.num_nodes": Key(2, "int", "intermediate nodes per cell"),
    "space.ops": Key(("none", "skip", "conv3x3"), "str_list", "candidate ops"),
    "space.num_cells": Key(6, "int", "stacked cells"),
    "space.channels": Key(8, "int", "channels per node"),
    "space.reduction": Key(False, "bool", "insert reduction cells"),
    "space.cell_inputs": Key(1, "int", "1 or 2 cell inputs"),
    "space.aggregate": Key("last", "str", "concat, sum or last"),
    "space.aux": Key("identity-skip", "str", "auxiliary branch kind"),
    "space.aux_on_input_edges": Key(True, "bool", "auxiliary branch on edges from cell inputs"),
    "space.op_norm": Key(False, "bool", "batch norm after each conv op"),
    # schedule
    "decay.kind": Key("linear", "str", "linear, cosine, step, hold-then-linear or constant"),
    "decay.beta0": Key(1.0, "float", "initial auxiliary coefficient; 0 gives plain DARTS"),
    "decay.step_epoch": Key(None, "opt_int", "switch epoch for the step kind"),
    "decay.hold_until": Key(None, "opt_int", "end of the hold for hold-then-linear"),
    # search
    "search.epochs": Key(30, "int", "search epochs"),
    "search.batch_size": Key(64, "int", "minibatch size for both splits"),
    "search.w_lr": Key(0.025, "float", "weight SGD learning rate (cosine annealed)"),
    "search.w_lr_min": Key(0.001, "float", "final weight learning rate"),
    "search.w_momentum": Key(0.9, "float", "weight SGD momentum"),
    "search.w_weight_decay": Key(3e-4, "float", "weight L2 decay"),
    "search.w_grad_clip": Key(5.0, "float", "global gradient-norm clip, 0 disables"),
    "search.a_lr": Key(0.01, "float", "architecture Adam learning rate"),
    "search.a_beta1": Key(0.5, "float", "Adam first-moment decay"),
    "search.a_beta2": Key(0.999, "float", "Adam second-moment decay"),
    "search.a_weight_decay": Key(1e-3, "float", "architecture L2 decay"),
    "search.split_ratio": Key(0.5, "float", "share of data used for weight steps"),
    "search.hessian_every": Key(0, "int", "epochs between eigenvalue estimates, 0 disables"),
    "search.hessian_samples": Key(512, "int", "validation samples behind the eigenvalue"),
    "search.k": Key((1, 2), "int_list", "retained edges per node when deriving (one value or one per node)"),
    # diagnostics
    "diag.hessian_iters": Key(100, "int", "power iteration budget"),
    "diag.hessian_tol": Key(1e-5, "float", "eigen-residual tolerance"),
    "diag.radius": Key(1.0, "float", "landscape half-width in direction units"),
    "diag.resolution": Key(11, "int", "landscape grid side (odd)"),
    "diag.lambda_h": Key(3, "int", "chain length for the rate proxy"),
    "diag.lambda_conv": Key(0.5, "float", "conv weight on every edge"),
    "diag.lambda_skip": Key(0.15, "float", "skip weight on every edge"),
    "diag.lambda_beta": Key(1.0, "float", "auxiliary coefficient for the rate proxy"),
    "diag.resnet_init": Key(0.0, "float", "initial trainable skip coefficient"),
    "diag.resnet_depth": Key(8, "int", "residual blocks"),
    "diag.resnet_epochs": Key(24, "int", "training epochs"),
    "diag.resnet_samples": Key(128, "int", "images per class for the residual chain"),
    "diag.gradflow_depth": Key(4, "int", "linear chain depth"),
    "diag.gradflow_beta": Key(1.0, "float", "skip coefficient of the linear chain"),
    # benchmark
    "bench.epochs": Key(20, "int", "training epochs per genotype"),
    "bench.batch_size": Key(64, "int", "minibatch size"),
    "bench.lr": Key(0.05, "float", "SGD learning rate (cosine annealed)"),
    "bench.lr_min": Key(0.001, "float", "final learning rate"),
    "bench.momentum": Key(0.9, "float", "SGD momentum"),
    "bench.weight_decay": Key(3e-4, "float", "L2 decay"),
    "bench.grad_clip": Key(5.0, "float", "global gradient-norm clip"),
    "bench.split_ratio": Key(0.5, "float", "train share of the data"),
    "bench.split_seed": Key(0, "int", "seed of the train/val split"),
    "bench.seeds": Key((0, 1), "int_list", "training seeds averaged per genotype"),
    "bench.max_genotypes": Key(1000, "int", "enumeration limit"),
    "bench.eval_seeds": Key((0, 1, 2, 3, 4), "int_list", "search seeds for evaluation"),
    "bench.use": Key("best", "str", "best or final architecture logits"),
}


def _format(value: Any, kind: str) -> str:
    if value is None:
        return "none"
    if kind == "bool":
        return "true" if value else "false"
    if kind.endswith("_list"):
        return ", ".join(str(v) for v in value)
    if kind == "float":
        return repr(float(value))
    return str(value)


def _convert(raw: str, kind: str, where: str) -> Any:
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw not in ("true", "false"):
                raise ValueError
            return raw == "true"
        if kind == "str":
            return raw
        if kind == "opt_int":
            return None if raw == "none" else int(raw)
        items = [p.strip() for p in raw.split(",")]
        if any(not p for p in items):
            raise ValueError
        return tuple(int(p) for p in items) if kind == "int_list" else tuple(items)
    except ValueError:
        raise ConfigError(f"{where}: cannot read {raw!r} as {kind}") from None


@dataclass
class RunConfig:
    values: dict[str, Any] = field(default_factory=lambda: {k: v.default for k, v in KEYS.items()})

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def set(self, key: str, raw: str, where: str = "override") -> None:
        if key not in KEYS:
            raise ConfigError(f"{where}: unknown key {key!r}")
        self.values[key] = _convert(raw, KEYS[key].kind, where)

    def dump(self) -> str:
        """Every key with its effective value, in declaration order."""
        lines = []
        for key, spec in KEYS.items():
            lines.append(f"{key} = {_format(self.values[key], spec.kind)}")
        return "\n".join(lines) + "\n"

    # builders ---------------------------------------------------------------

    def space(self) -> SearchSpaceSpec:
        v = self.values
        return SearchSpaceSpec(
            num_nodes=v["space.num_nodes"],
            candidate_ops=tuple(v["space.ops"]),
            num_cells=v["space.num_cells"],
            channels=v["space.channels"],
            has_reduction=v["space.reduction"],
            cell_inputs=v["space.cell_inputs"],
            aggregate=v["space.aggregate"],
            aux=v["space.aux"],
            aux_on_input_edges=v["space.aux_on_input_edges"],
            op_norm=v["space.op_norm"],
        )

    def dataset(self) -> SyntheticDataset:
        v = self.values
        return SyntheticDataset(
            kind=v["data.kind"],
            num_classes=v["data.num_classes"],
            size=v["data.size"],
            samples_per_class=v["data.samples_per_class"],
            noise=v["data.noise"],
            freq_range=(v["data.freq_min"], v["data.freq_max"]),
            center_jitter=v["data.center_jitter"],
            seed=v["data.seed"],
        )

    def schedule(self) -> BetaSchedule:
        v = self.values
        return BetaSchedule(
            kind=v["decay.kind"],
            beta0=v["decay.beta0"],
            total_epochs=v["search.epochs"],
            step_epoch=v["decay.step_epoch"],
            hold_until=v["decay.hold_until"],
        )

    def search(self) -> SearchConfig:
        v = self.values
        return SearchConfig(
            epochs=v["search.epochs"],
            batch_size=v["search.batch_size"],
            w_lr=v["search.w_lr"],
            w_lr_min=v["search.w_lr_min"],
            w_momentum=v["search.w_momentum"],
            w_weight_decay=v["search.w_weight_decay"],
            w_grad_clip=v["search.w_grad_clip"],
            a_lr=v["search.a_lr"],
            a_beta1=v["search.a_beta1"],
            a_beta2=v["search.a_beta2"],
            a_weight_decay=v["search.a_weight_decay"],
            split_ratio=v["search.split_ratio"],
            seed=v["seed"],
            hessian_every=v["search.hessian_every"],
            hessian_samples=v["search.hessian_samples"],
            schedule=self.schedule(),
            space=self.space(),
        )

    def k(self) -> int | tuple[int, ...]:
        k = self.values["search.k"]
        return k[0] if len(k) == 1 else tuple(k)

    def bench(self) -> BenchSpec:
        v = self.values
        return BenchSpec(
            space=self.space(),
            dataset=self.dataset(),
            epochs=v["bench.epochs"],
            batch_size=v["bench.batch_size"],
            lr=v["bench.lr"],
            lr_min=v["bench.lr_min"],
            momentum=v["bench.momentum"],
            weight_decay=v["bench.weight_decay"],
            grad_clip=v["bench.grad_clip"],
            split_ratio=v["bench.split_ratio"],
            split_seed=v["bench.split_seed"],
            seeds=v["bench.seeds"],
            k=self.k(),
            max_genotypes=v["bench.max_genotypes"],
        )


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = RunConfig(dict(base.values)) if base is not None else RunConfig()
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0]
        if not body.strip():
            continue
        if "=" not in body:
            col = len(body) - len(body.lstrip()) + 1
            raise ConfigError(f"line {lineno}, column {col}: expected 'key = value'")
        left, _, right = body.partition("=")
        key = left.strip()
        key_col = len(left) - len(left.lstrip()) + 1
        value_col = len(left) + 2 + (len(right) - len(right.lstrip()))
        if key not in KEYS:
            raise ConfigError(f"line {lineno}, column {key_col}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(
                f"line {lineno}, column {key_col}: {key!r} already set on line {seen[key]}"
            )
        seen[key] = lineno
        value = right.strip()
        if not value:
            raise ConfigError(f"line {lineno}, column {value_col}: missing value for {key!r}")
        cfg.set(key, value, f"line {lineno}, column {value_col}")
    return cfg


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``key=value`` strings, as given to ``--set``."""
    out = RunConfig(dict(cfg.values))
    for item in overrides:
        key, eq, value = item.partition("=")
        if not eq:
            raise ConfigError(f"override {item!r}: expected key=value")
        out.set(key.strip(), value.strip(), f"override {item!r}")
    return out
