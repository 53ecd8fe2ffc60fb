"""A tiny tabular benchmark: every genotype of a small space, trained and ranked.

Genotypes here list every edge of the cell explicitly, with 'none' allowed
(the NAS-Bench-201 convention). A genotype derived from a search keeps ``k``
edges per node (one count per node is allowed); dropped edges map to 'none'
when it is looked up.

Table file format (UTF-8, tab separated)::

    # dartsminus-bench <version>
    # spec_hash=<hex>
    # seeds=<s1>,<s2>,...
    <genotype-key>\t<mean_acc>\t<std>\t<rank>

where ``genotype-key`` is the genotype text with its lines joined by `` | ``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import __version__, seeding
from .data import SyntheticDataset, split_dataset
from .genotype import (
    Genotype,
    count_parametric,
    count_skips,
    derive_genotype,
    parse_genotype,
    serialize_genotype,
)
from .search import SearchConfig, clip_by_global_norm, cosine_lr, run_search, sgd_step
from .supernet import DiscreteNet, SearchSpaceSpec

KEY_SEP = " | "


def default_bench_space() -> SearchSpaceSpec:
    return SearchSpaceSpec(
        num_nodes=2,
        candidate_ops=("none", "skip", "conv3x3"),
        num_cells=6,
        channels=8,
        cell_inputs=1,
        aggregate="last",
        op_norm=False,
    )


@dataclass(frozen=True)
class BenchSpec:
    space: SearchSpaceSpec = field(default_factory=default_bench_space)
    dataset: SyntheticDataset = field(default_factory=SyntheticDataset)
    epochs: int = 20
    batch_size: int = 64
    lr: float = 0.05
    lr_min: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 3e-4
    grad_clip: float = 5.0
    split_ratio: float = 0.5
    split_seed: int = 0
    seeds: tuple[int, ...] = (0, 1)
    k: int | tuple[int, ...] = (1, 2)  # retained edges per node when deriving
    max_genotypes: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not isinstance(self.k, int):
            object.__setattr__(self, "k", tuple(int(v) for v in self.k))
        if self.epochs < 1 or self.lr <= 0 or not self.seeds:
            raise ValueError("training budget must be positive and seeds nonempty")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def spec_hash(self) -> str:
        """Hash of everything that determines the table except the seed list."""
        d = self.to_dict()
        d.pop("seeds")
        blob = json.dumps(d, sort_keys=True, default=list).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]

    def splits(self):
        x, y = self.dataset.generate()
        return split_dataset(x, y, self.split_ratio, self.split_seed)


def space_hash(space: SearchSpaceSpec) -> str:
    blob = json.dumps(dataclasses.asdict(space), sort_keys=True, default=list).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def genotype_key(g: Genotype) -> str:
    return KEY_SEP.join(serialize_genotype(g).splitlines())


def key_to_genotype(key: str) -> Genotype:
    return parse_genotype("\n".join(key.split(KEY_SEP)))


def enumerate_space(spec: BenchSpec) -> list[Genotype]:
    """Every full-edge genotype of ``spec.space`` in canonical (op-index) order."""
    space = spec.space
    kinds = ["normal"] + (["reduce"] if space.has_reduction else [])
    count = space.num_ops ** (space.num_edges * len(kinds))
    if count > spec.max_genotypes:
        raise ValueError(f"space has {count} genotypes, limit is {spec.max_genotypes}")
    per_cell = list(itertools.product(space.candidate_ops, repeat=space.num_edges))
    out = []
    for combo in itertools.product(per_cell, repeat=len(kinds)):
        cells = {
            kind: tuple((j, i, op) for (i, j), op in zip(space.edges, ops))
            for kind, ops in zip(kinds, combo)
        }
        out.append(Genotype(**cells))
    return out


# ---------------------------------------------------------------------------
# standalone training
# ---------------------------------------------------------------------------


@dataclass
class TrainOutcome:
    accuracy: float
    diverged: bool = False


def train_genotype(
    spec: BenchSpec, g: Genotype, seed: int, data=None
) -> TrainOutcome:
    """Train the standalone network for ``g`` on the train split and score it on val."""
    (xt, yt), (xv, yv) = data if data is not None else spec.splits()
    space = spec.space
    edge_ops = {"normal": g.edge_ops(space, "normal")}
    if space.has_reduction:
        edge_ops["reduce"] = g.edge_ops(space, "reduce")
    num_classes = int(max(yt.max(), yv.max())) + 1
    rng = seeding.stream(seed, "bench", *_key_digest(g))
    net = DiscreteNet.create(space, edge_ops, xt.shape[1], num_classes, rng)
    state: dict = {}
    n_iter = len(yt) // spec.batch_size
    try:
        with np.errstate(over="raise", invalid="raise"):
            for epoch in range(1, spec.epochs + 1):
                lr = cosine_lr(spec.lr, spec.lr_min, epoch, spec.epochs)
                order = rng.permutation(len(yt))
                for it in range(n_iter):
                    b = order[it * spec.batch_size : (it + 1) * spec.batch_size]
                    loss, _, grads = net.loss_and_grads(xt[b], yt[b])
                    if not math.isfinite(loss):
                        raise FloatingPointError(f"loss diverged at epoch {epoch}")
                    grads = clip_by_global_norm(grads, spec.grad_clip)
                    net.weights = sgd_step(
                        net.weights, grads, lr, spec.momentum, spec.weight_decay, state
                    )
            correct = 0.0
            for s in range(0, len(yv), 256):
                _, acc, _ = net.loss_and_grads(xv[s : s + 256], yv[s : s + 256], train=False)
                correct += acc * len(yv[s : s + 256])
    except FloatingPointError:
        return TrainOutcome(0.0, diverged=True)
    return TrainOutcome(correct / len(yv))


def _key_digest(g: Genotype) -> tuple[int, int]:
    h = hashlib.sha256(genotype_key(g).encode("utf-8")).digest()
    return int.from_bytes(h[:4], "big"), int.from_bytes(h[4:8], "big")


# ---------------------------------------------------------------------------
# the table
# ---------------------------------------------------------------------------


@dataclass
class BenchEntry:
    mean: float
    std: float
    rank: int
    diverged: bool = False


@dataclass
class BenchTable:
    entries: dict[str, BenchEntry]
    spec_hash: str
    seeds: tuple[int, ...]
    space: SearchSpaceSpec | None = None
    k: int | tuple[int, ...] = (1, 2)

    def __len__(self) -> int:
        return len(self.entries)

    def ranked(self) -> list[tuple[str, BenchEntry]]:
        return sorted(self.entries.items(), key=lambda kv: kv[1].rank)

    def to_text(self) -> str:
        lines = [
            f"# dartsminus-bench {__version__}",
            f"# spec_hash={self.spec_hash}",
            f"# seeds={','.join(map(str, self.seeds))}",
        ]
        for key, e in self.entries.items():
            lines.append(f"{key}\t{e.mean!r}\t{e.std!r}\t{e.rank}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, space: SearchSpaceSpec | None = None, k=(1, 2)) -> BenchTable:
        meta: dict[str, str] = {}
        entries: dict[str, BenchEntry] = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            if line.startswith("#"):
                body = line[1:].strip()
                if "=" in body:
                    name, _, value = body.partition("=")
                    meta[name.strip()] = value.strip()
                continue
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValueError(f"table line {lineno}: expected 4 tab-separated fields")
            key, mean, std, rank = parts
            entries[key] = BenchEntry(float(mean), float(std), int(rank), float(mean) == 0.0)
        if "spec_hash" not in meta:
            raise ValueError("table header lacks spec_hash")
        seeds = tuple(int(s) for s in meta.get("seeds", "").split(",") if s)
        return cls(entries, meta["spec_hash"], seeds, space, k)


def _assemble(spec: BenchSpec, genotypes, accs, diverged) -> BenchTable:
    keys = [genotype_key(g) for g in genotypes]
    means = [float(np.mean(a)) for a in accs]
    stds = [float(np.std(a)) for a in accs]
    # ties fall back to canonical enumeration order
    order = sorted(range(len(keys)), key=lambda i: (-means[i], i))
    ranks = {i: r + 1 for r, i in enumerate(order)}
    entries = {
        keys[i]: BenchEntry(means[i], stds[i], ranks[i], diverged[i]) for i in range(len(keys))
    }
    return BenchTable(entries, spec.spec_hash(), spec.seeds, spec.space, spec.k)


def build_table(
    spec: BenchSpec,
    log: Callable[[str], None] | None = None,
    map_fn: Callable = map,
) -> BenchTable:
    """Train every genotype under every seed; rank by mean validation accuracy.

    ``map_fn`` may be a parallel map (e.g. a process pool's); results are
    reassembled in canonical order so the table does not depend on it.
    """
    genotypes = enumerate_space(spec)
    data = spec.splits()
    jobs = [(g, s) for g in genotypes for s in spec.seeds]
    outcomes = list(map_fn(_train_job, [(spec, g, s, data) for g, s in jobs]))
    accs, diverged = [], []
    for gi, g in enumerate(genotypes):
        outs = outcomes[gi * len(spec.seeds) : (gi + 1) * len(spec.seeds)]
        accs.append([o.accuracy for o in outs])
        diverged.append(any(o.diverged for o in outs))
        if log:
            log(f"{genotype_key(g)}  acc={np.mean(accs[-1]):.4f}")
    return _assemble(spec, genotypes, accs, diverged)


def _train_job(args) -> TrainOutcome:
    spec, g, seed, data = args
    return train_genotype(spec, g, seed, data)


def _normalize(table: BenchTable, g: Genotype) -> str:
    if table.space is not None:
        g = g.full(table.space)
    return genotype_key(g)


def lookup(table: BenchTable, g: Genotype) -> tuple[float, int]:
    """Mean accuracy and rank of ``g`` (unretained edges count as 'none')."""
    key = _normalize(table, g)
    entry = table.entries.get(key)
    if entry is None:
        raise KeyError(f"genotype not in table: {key!r}; nearest: {nearest_key(table, key)!r}")
    return entry.mean, entry.rank


def percentile(table: BenchTable, g: Genotype) -> float:
    """1 for the best-ranked genotype, 0 for the worst."""
    _, rank = lookup(table, g)
    n = len(table)
    return 1.0 if n == 1 else 1.0 - (rank - 1) / (n - 1)


def nearest_key(table: BenchTable, key: str) -> str:
    want = key.split(KEY_SEP)

    def dist(other: str) -> tuple[int, str]:
        have = other.split(KEY_SEP)
        d = sum(a != b for a, b in zip(want, have)) + abs(len(want) - len(have))
        return d, other

    return min(table.entries, key=dist)


# ---------------------------------------------------------------------------
# evaluating a search method against the table
# ---------------------------------------------------------------------------


@dataclass
class SeedRow:
    seed: int
    genotype: str
    accuracy: float
    rank: int
    percentile: float
    num_parametric: int
    num_skips: int


@dataclass
class SearchReport:
    name: str
    rows: list[SeedRow]

    def _stat(self, attr: str) -> tuple[float, float]:
        v = np.array([getattr(r, attr) for r in self.rows], dtype=np.float64)
        return float(v.mean()), float(v.std())

    @property
    def percentile(self) -> tuple[float, float]:
        return self._stat("percentile")

    @property
    def num_parametric(self) -> tuple[float, float]:
        return self._stat("num_parametric")

    @property
    def num_skips(self) -> tuple[float, float]:
        return self._stat("num_skips")

    @property
    def accuracy(self) -> tuple[float, float]:
        return self._stat("accuracy")


def evaluate_search(
    name: str,
    config: SearchConfig,
    table: BenchTable,
    spec: BenchSpec,
    seeds,
    use: str = "best",
    log: Callable[[str], None] | None = None,
) -> SearchReport:
    """Search once per seed, discretize, and look each result up in ``table``.

    ``use`` picks the best-validation (``"best"``) or last-epoch (``"final"``) logits.
    """
    if space_hash(config.space) != space_hash(spec.space) or table.spec_hash != spec.spec_hash():
        raise ValueError("search space or bench spec does not match the table")
    if use not in ("best", "final"):
        raise ValueError("use must be 'best' or 'final'")
    x, y = spec.dataset.generate()
    rows = []
    for s in seeds:
        result = run_search(dataclasses.replace(config, seed=int(s)), (x, y))
        arch = result.best_arch if use == "best" else result.final_arch
        g = derive_genotype(arch, spec.space, spec.k)
        acc, rank = lookup(table, g)
        row = SeedRow(
            int(s),
            genotype_key(g.full(spec.space)),
            acc,
            rank,
            percentile(table, g),
            count_parametric(g),
            count_skips(g),
        )
        rows.append(row)
        if log:
            log(f"[{name}] seed={s} {row.genotype} pct={row.percentile:.3f} #P={row.num_parametric}")
    return SearchReport(name, rows)


def format_report(reports: list[SearchReport]) -> str:
    """Aggregate comparison, one row per method."""
    lines = ["method\tpercentile\taccuracy\t#P\t#skip\tseeds"]
    for r in reports:
        p, a, n, s = r.percentile, r.accuracy, r.num_parametric, r.num_skips
        lines.append(
            f"{r.name}\t{p[0]:.4f}±{p[1]:.4f}\t{a[0]:.4f}±{a[1]:.4f}\t"
            f"{n[0]:.2f}±{n[1]:.2f}\t{s[0]:.2f}±{s[1]:.2f}\t{len(r.rows)}"
        )
    return "\n".join(lines) + "\n"
