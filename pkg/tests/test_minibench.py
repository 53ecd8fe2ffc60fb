import dataclasses

import numpy as np
import pytest

from dartsminus.data import SyntheticDataset
from dartsminus.genotype import Genotype, parse_genotype, serialize_genotype
from dartsminus.minibench import (
    BenchSpec,
    BenchTable,
    SearchReport,
    SeedRow,
    build_table,
    default_bench_space,
    enumerate_space,
    evaluate_search,
    format_report,
    genotype_key,
    key_to_genotype,
    lookup,
    percentile,
    train_genotype,
)
from dartsminus.schedules import BetaSchedule
from dartsminus.search import SearchConfig
from dartsminus.supernet import ArchParams


def _tiny_spec(**kw):
    space = dataclasses.replace(default_bench_space(), num_cells=1, channels=2)
    base = dict(
        space=space,
        dataset=SyntheticDataset(samples_per_class=12),
        epochs=1,
        batch_size=16,
        seeds=(0,),
    )
    base.update(kw)
    return BenchSpec(**base)


@pytest.fixture(scope="module")
def tiny_table():
    spec = _tiny_spec()
    return spec, build_table(spec)


def test_default_space_has_27_genotypes():
    gs = enumerate_space(BenchSpec())
    assert len(gs) == 27
    assert len({genotype_key(g) for g in gs}) == 27
    assert [genotype_key(g) for g in gs] == [genotype_key(g) for g in enumerate_space(BenchSpec())]
    assert gs[0].normal == ((1, 0, "none"), (2, 0, "none"), (2, 1, "none"))


def test_singleton_op_set():
    spec = _tiny_spec(space=dataclasses.replace(default_bench_space(), candidate_ops=("skip",)))
    assert len(enumerate_space(spec)) == 1


def test_cardinality_limit():
    with pytest.raises(ValueError, match="limit"):
        enumerate_space(_tiny_spec(max_genotypes=26))


def test_table_is_complete_and_ranked(tiny_table):
    spec, table = tiny_table
    assert len(table) == len(enumerate_space(spec)) == 27
    assert sorted(e.rank for e in table.entries.values()) == list(range(1, 28))
    ranked = table.ranked()
    assert all(a[1].mean >= b[1].mean for a, b in zip(ranked, ranked[1:]))


def test_rebuild_is_byte_identical(tiny_table):
    spec, table = tiny_table
    assert build_table(spec).to_text() == table.to_text()


def test_text_roundtrip(tiny_table):
    spec, table = tiny_table
    text = table.to_text()
    assert text.splitlines()[1] == f"# spec_hash={spec.spec_hash()}"
    back = BenchTable.from_text(text, spec.space, spec.k)
    assert back.to_text() == text


def test_retraining_reproduces_stored_accuracy(tiny_table):
    spec, table = tiny_table
    key, entry = table.ranked()[3]
    out = train_genotype(spec, key_to_genotype(key), seed=0)
    assert out.accuracy == entry.mean


def test_percentile_extremes_and_roundtrip(tiny_table):
    spec, table = tiny_table
    ranked = table.ranked()
    best, worst = key_to_genotype(ranked[0][0]), key_to_genotype(ranked[-1][0])
    assert percentile(table, best) == 1.0 and percentile(table, worst) == 0.0
    g = key_to_genotype(ranked[5][0])
    assert lookup(table, parse_genotype(serialize_genotype(g))) == lookup(table, g)


def test_derived_genotypes_fill_dropped_edges_with_none(tiny_table):
    spec, table = tiny_table
    partial = Genotype(((1, 0, "conv3x3"), (2, 1, "skip")))
    full = Genotype(((1, 0, "conv3x3"), (2, 0, "none"), (2, 1, "skip")))
    assert lookup(table, partial) == lookup(table, full)


def test_unknown_genotype_names_nearest(tiny_table):
    _, table = tiny_table
    bare = BenchTable(table.entries, table.spec_hash, table.seeds)
    with pytest.raises(KeyError, match="nearest"):
        lookup(bare, Genotype(((1, 0, "conv3x3"),)))


def test_divergence_scores_zero_and_build_continues(monkeypatch):
    from dartsminus import minibench

    spec = _tiny_spec()
    original = minibench.train_genotype

    def flaky(spec_, g, seed, data=None):
        if g.normal[0][2] == "skip":
            return minibench.TrainOutcome(0.0, diverged=True)
        return original(spec_, g, seed, data)

    monkeypatch.setattr(minibench, "train_genotype", flaky)
    table = build_table(spec)
    flagged = [k for k, e in table.entries.items() if e.diverged]
    assert len(flagged) == 9 and all(table.entries[k].mean == 0.0 for k in flagged)
    assert sorted(e.rank for e in table.entries.values()) == list(range(1, 28))


def test_parallel_map_gives_the_same_table(tiny_table):
    spec, table = tiny_table

    def reversed_map(fn, items):
        items = list(items)
        out = [fn(i) for i in reversed(items)]
        return reversed(out)

    assert build_table(spec, map_fn=reversed_map).to_text() == table.to_text()


def _config(spec, epochs=1, a_lr=0.01, beta0=1.0):
    return SearchConfig(
        epochs=epochs,
        batch_size=16,
        a_lr=a_lr,
        schedule=BetaSchedule("linear", beta0, epochs),
        space=spec.space,
    )


def test_zero_arch_lr_reports_the_initial_genotype(tiny_table):
    from dartsminus import seeding
    from dartsminus.genotype import derive_genotype
    from dartsminus.supernet import Supernet

    spec, table = tiny_table
    report = evaluate_search("frozen", _config(spec, a_lr=0.0), table, spec, seeds=[3])
    rng = seeding.stream(3, "init")
    Supernet.create(spec.space, 1, 4, rng)  # consumes the weight draws first
    init = ArchParams.random(spec.space, rng)
    g = derive_genotype(init, spec.space, spec.k)
    assert report.rows[0].percentile == percentile(table, g)


def test_space_mismatch_is_rejected(tiny_table):
    spec, table = tiny_table
    other = dataclasses.replace(spec.space, channels=3)
    cfg = dataclasses.replace(_config(spec), space=other)
    with pytest.raises(ValueError, match="does not match"):
        evaluate_search("x", cfg, table, spec, seeds=[0])
    with pytest.raises(ValueError, match="does not match"):
        evaluate_search("x", _config(spec), table, _tiny_spec(epochs=2), seeds=[0])


def test_report_aggregates_by_hand():
    rows = [
        SeedRow(0, "a", 0.5, 3, 0.9, 1, 2),
        SeedRow(1, "b", 0.7, 1, 1.0, 3, 0),
        SeedRow(2, "c", 0.3, 9, 0.2, 2, 1),
    ]
    r = SearchReport("m", rows)
    assert r.percentile[0] == pytest.approx(0.7)
    assert r.percentile[1] == pytest.approx(np.std([0.9, 1.0, 0.2]))
    assert r.num_parametric == (2.0, pytest.approx(np.std([1, 3, 2])))
    text = format_report([r])
    assert text.splitlines()[0].split("\t")[:4] == ["method", "percentile", "accuracy", "#P"]
    assert text.splitlines()[1].startswith("m\t0.7000±")


def test_spec_hash_ignores_seeds_only():
    assert _tiny_spec(seeds=(0,)).spec_hash() == _tiny_spec(seeds=(4, 5)).spec_hash()
    assert _tiny_spec().spec_hash() != _tiny_spec(epochs=2).spec_hash()


def test_dataset_is_deterministic_and_balanced():
    a = SyntheticDataset(samples_per_class=10, seed=3).generate()
    b = SyntheticDataset(samples_per_class=10, seed=3).generate()
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    assert np.bincount(a[1]).tolist() == [10, 10, 10, 10]
    assert a[0].shape == (40, 1, 8, 8)
    # zero frame: every image sums to zero
    assert np.allclose(a[0].sum(axis=(1, 2, 3)), 0.0, atol=1e-12)
    with pytest.raises(ValueError):
        SyntheticDataset(kind="stripes").generate()
