import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dartsminus.config import KEYS, ConfigError, RunConfig, apply_overrides, parse_config


def test_every_key_is_documented():
    assert all(spec.doc for spec in KEYS.values())


def test_defaults_build_every_section():
    cfg = RunConfig()
    assert cfg.space().candidate_ops == ("none", "skip", "conv3x3")
    assert cfg.schedule().total_epochs == cfg["search.epochs"]
    assert cfg.search().schedule.beta0 == 1.0
    assert cfg.bench().k == (1, 2)
    assert cfg.dataset().freq_range == (1.0, 2.8)


def test_parse_comments_and_types():
    text = """
    # header comment
    seed = 7   # trailing
    space.ops = none, skip, avgpool3x3
    space.reduction = true
    decay.step_epoch = 4
    decay.hold_until = none
    search.k = 2
    search.a_lr = 1e-3
    """
    cfg = parse_config(text)
    assert cfg["seed"] == 7
    assert cfg["space.ops"] == ("none", "skip", "avgpool3x3")
    assert cfg["space.reduction"] is True
    assert cfg["decay.step_epoch"] == 4 and cfg["decay.hold_until"] is None
    assert cfg.k() == 2
    assert cfg["search.a_lr"] == 1e-3


@pytest.mark.parametrize(
    "text, where",
    [
        ("seed = 1\nbogus.key = 3", "line 2, column 1"),
        ("seed = 1\n  seed = 2", "line 2, column 3"),
        ("seed = x", "line 1, column 8"),
        ("space.reduction = yes", "line 1, column 19"),
        ("  just words", "line 1, column 3"),
        ("seed =", "line 1, column"),
        ("search.k = 1,,2", "line 1, column 12"),
    ],
)
def test_errors_name_line_and_column(text, where):
    with pytest.raises(ConfigError, match=where):
        parse_config(text)


def test_dump_roundtrip_defaults():
    cfg = RunConfig()
    assert parse_config(cfg.dump()).values == cfg.values


_values = {
    "seed": st.integers(0, 10**6).map(str),
    "decay.beta0": st.floats(0, 10, allow_nan=False).map(repr),
    "space.aggregate": st.sampled_from(["concat", "sum", "last"]),
    "space.op_norm": st.sampled_from(["true", "false"]),
    "decay.step_epoch": st.one_of(st.just("none"), st.integers(1, 99).map(str)),
    "bench.eval_seeds": st.lists(st.integers(0, 50), min_size=1, max_size=5).map(
        lambda xs: ", ".join(map(str, xs))
    ),
}


@settings(max_examples=100, deadline=None)
@given(st.fixed_dictionaries({}, optional=_values))
def test_dump_parse_is_a_fixed_point(chosen):
    cfg = parse_config("\n".join(f"{k} = {v}" for k, v in chosen.items()))
    again = parse_config(cfg.dump())
    assert again.values == cfg.values
    assert again.dump() == cfg.dump()


def test_overrides():
    cfg = apply_overrides(RunConfig(), ["decay.beta0=0", "search.epochs = 5"])
    assert cfg["decay.beta0"] == 0.0 and cfg.schedule().total_epochs == 5
    assert RunConfig()["decay.beta0"] == 1.0  # base untouched
    with pytest.raises(ConfigError, match="expected key=value"):
        apply_overrides(cfg, ["decay.beta0"])
    with pytest.raises(ConfigError, match="unknown key"):
        apply_overrides(cfg, ["nope=1"])
