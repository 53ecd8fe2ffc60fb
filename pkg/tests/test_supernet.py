import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _reference import numpy_loss, tape_loss
from dartsminus import autodiff as ad
from dartsminus.autodiff import Tape, Tensor, grad_check
from dartsminus.supernet import (
    ArchParams,
    DiscreteNet,
    SearchSpaceSpec,
    Supernet,
    apply_op,
    cell_forward,
    init_weights,
    mixed_edge_forward,
    supernet_forward,
)


def _net(space, seed=0, in_channels=1, classes=3):
    return Supernet.create(space, in_channels, classes, np.random.default_rng(seed))


def _batch(seed=0, n=6, size=6, in_channels=1, classes=3):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, in_channels, size, size)), rng.integers(0, classes, n)


# ---------------------------------------------------------------------------
# space and arch parameters
# ---------------------------------------------------------------------------


def test_space_edges_are_fully_connected():
    space = SearchSpaceSpec(num_nodes=3, cell_inputs=2)
    assert space.edges == [(0, 2), (1, 2), (0, 3), (1, 3), (2, 3), (0, 4), (1, 4), (2, 4), (3, 4)]
    assert all(i < j for i, j in space.edges)


@pytest.mark.parametrize(
    "kw",
    [
        {"candidate_ops": ()},
        {"candidate_ops": ("none", "conv3x3")},
        {"candidate_ops": ("skip", "dilconv")},
        {"candidate_ops": ("skip", "skip")},
        {"num_nodes": 0},
        {"aggregate": "max"},
    ],
)
def test_invalid_spaces(kw):
    with pytest.raises(ValueError):
        SearchSpaceSpec(**kw)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 50))
def test_softmax_rows_sum_to_one(seed, scale):
    space = SearchSpaceSpec(has_reduction=True, num_cells=3)
    arch = ArchParams.random(space, np.random.default_rng(seed), scale=scale)
    for kind in ("normal", "reduce"):
        assert np.max(np.abs(arch.softmax(kind).sum(axis=1) - 1.0)) <= 1e-12


def test_arch_flatten_roundtrip_and_finiteness():
    space = SearchSpaceSpec(has_reduction=True, num_cells=3)
    arch = ArchParams.random(space, np.random.default_rng(0))
    back = arch.unflatten(arch.flatten())
    assert np.array_equal(back.normal, arch.normal) and np.array_equal(back.reduce, arch.reduce)
    arch.normal[0, 0] = np.nan
    with pytest.raises(FloatingPointError):
        arch.check_finite()


# ---------------------------------------------------------------------------
# mixed edge
# ---------------------------------------------------------------------------


def test_uniform_seven_ops_coefficients():
    names = ["none", "skip", "conv1x1", "conv3x3", "avgpool3x3", "sepconv3x3", "extra"]
    x = Tensor(np.ones((1, 1, 1, 1)))

    def out(passing):
        # only the op named ``passing`` forwards its input; the rest emit zeros
        ops = [(m, (lambda t: t) if m == passing else (lambda t: ad.mul_const(t, 0.0))) for m in names]
        return mixed_edge_forward(x, Tensor(np.zeros(7)), 1.0, ops).item()

    aux_only = out(None)
    assert aux_only == 1.0
    assert out("skip") == pytest.approx(1 + 1 / 7, abs=1e-15)
    assert out("conv3x3") - aux_only == pytest.approx(1 / 7, abs=1e-15)
    assert round(out("skip"), 4) == 1.1429 and round(out("conv3x3") - aux_only, 4) == 0.1429


def test_skip_only_with_beta_one_doubles():
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 4, 4)))
    out = mixed_edge_forward(x, Tensor(np.array([4.2])), 1.0, [("skip", lambda t: t)])
    assert np.array_equal(out.data, 2 * x.data)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), st.floats(0, 2))
def test_identity_aux_folds_into_skip_coefficient(seed, beta):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((2, 2, 3, 3)))
    row = rng.standard_normal(3)
    params = {"w": Tensor(rng.standard_normal((2, 2, 3, 3)))}
    ops = [("none", lambda t: None), ("skip", lambda t: t), ("conv3x3", lambda t: apply_op("conv3x3", t, params))]
    out = mixed_edge_forward(x, Tensor(row), beta, ops).data
    p = np.exp(row) / np.exp(row).sum()
    conv = apply_op("conv3x3", x, params).data
    np.testing.assert_allclose(out, (beta + p[1]) * x.data + p[2] * conv, rtol=1e-12, atol=1e-13)


def test_mixed_edge_errors():
    x = Tensor(np.ones((1, 2, 4, 4)))
    with pytest.raises(ValueError, match="alpha_row"):
        mixed_edge_forward(x, Tensor(np.zeros(3)), 0.0, [("skip", lambda t: t)])
    with pytest.raises(ValueError, match="non-negative"):
        mixed_edge_forward(x, Tensor(np.zeros(1)), -0.1, [("skip", lambda t: t)])
    bad = [("skip", lambda t: t), ("pool", lambda t: ad.avgpool2d(t, 3, 2, 1))]
    with pytest.raises(ValueError, match="does not match"):
        mixed_edge_forward(x, Tensor(np.zeros(2)), 0.0, bad)


def test_aux_branch_adds_beta_identity_to_input_gradient():
    rng = np.random.default_rng(1)
    row = Tensor(rng.standard_normal(2))
    params = {"w": Tensor(rng.standard_normal((1, 1, 3, 3)))}
    ops = [("skip", lambda t: t), ("conv3x3", lambda t: apply_op("conv3x3", t, params, norm=False))]
    up = rng.standard_normal((1, 1, 4, 4))
    x0 = rng.standard_normal((1, 1, 4, 4))

    def grad_at(beta):
        tape = Tape()
        x = tape.var(x0)
        out = mixed_edge_forward(x, row, beta, ops)
        return ad.backward(_dot(out, up))[x]

    for beta in (0.0, 0.5, 1.0):
        assert grad_check(lambda t: _dot(mixed_edge_forward(t, row, beta, ops), up), x0) < 1e-6
        np.testing.assert_allclose(grad_at(beta) - grad_at(0.0), beta * up, rtol=1e-12, atol=1e-14)


def _dot(t, up):
    flat = ad.reshape(t, (1, t.data.size))
    return ad.sum_all(ad.matmul(flat, Tensor(up.reshape(-1, 1))))


# ---------------------------------------------------------------------------
# cells and networks
# ---------------------------------------------------------------------------


def test_single_node_skip_only_cell_sums_inputs():
    space = SearchSpaceSpec(num_nodes=1, candidate_ops=("skip",), channels=2)
    rng = np.random.default_rng(0)
    a, b = (Tensor(rng.standard_normal((2, 2, 3, 3))) for _ in range(2))
    alpha = Tensor(rng.standard_normal((2, 1)))
    out = cell_forward(space, 0, [a, b], {}, alpha, 0.0)
    np.testing.assert_array_equal(out.data, a.data + b.data)


def test_cell_errors():
    space = SearchSpaceSpec(channels=4)
    x = Tensor(np.ones((1, 3, 4, 4)))
    alpha = Tensor(np.zeros((space.num_edges, space.num_ops)))
    with pytest.raises(ValueError, match="channels"):
        cell_forward(space, 0, [x, x], {}, alpha, 0.0)
    y = Tensor(np.ones((1, 4, 4, 4)))
    with pytest.raises(ValueError, match="inputs"):
        cell_forward(space, 0, [y], {}, alpha, 0.0)
    with pytest.raises(ValueError, match="arch matrix"):
        cell_forward(space, 0, [y, y], {}, Tensor(np.zeros((2, 2))), 0.0)


REFERENCE_SPACES = [
    SearchSpaceSpec(),
    SearchSpaceSpec(num_cells=2, aggregate="sum", channels=4),
    SearchSpaceSpec(
        candidate_ops=("none", "skip", "conv1x1", "sepconv3x3", "avgpool3x3"), channels=3, op_norm=False
    ),
    SearchSpaceSpec(cell_inputs=1, candidate_ops=("none", "skip", "conv3x3"), num_cells=3, aggregate="last"),
]


@pytest.mark.parametrize("space", REFERENCE_SPACES)
def test_beta_zero_matches_numpy_reference(space):
    net = _net(space)
    x, y = _batch()
    arch = ArchParams.random(space, np.random.default_rng(3), scale=1.0)
    loss, acc, _ = net.loss_and_grads(x, y, arch, 0.0, wrt=None)
    ref = numpy_loss(space, net.weights, arch.normal, x, y)
    assert abs(loss - ref) <= 1e-12 * abs(ref)
    assert 0.0 <= acc <= 1.0


def test_learnable_projection_starts_as_identity():
    base = SearchSpaceSpec(channels=4)
    proj = base.with_(aux="learnable-projection")
    x, y = _batch(in_channels=1)
    arch = ArchParams.random(base, np.random.default_rng(0), scale=1.0)
    a = _net(base, seed=4).loss_and_grads(x, y, arch, 0.7, wrt=None)[0]
    net_p = _net(proj, seed=4)
    assert any(k.endswith("aux.proj") for k in net_p.weights)
    b = net_p.loss_and_grads(x, y, arch, 0.7, wrt=None)[0]
    assert a == b


def test_reduction_cells_carry_the_aux_branch():
    space = SearchSpaceSpec(num_cells=3, has_reduction=True, channels=4)
    net = _net(space)
    x, y = _batch(size=8)
    arch = ArchParams.random(space, np.random.default_rng(0))
    l0 = net.loss_and_grads(x, y, arch, 0.0, wrt=None)[0]
    l1 = net.loss_and_grads(x, y, arch, 1.0, wrt=None)[0]
    assert np.isfinite(l0) and l0 != l1


def test_aux_restricted_to_intermediate_edges():
    space = SearchSpaceSpec(aux_on_input_edges=False)
    assert [space.has_aux(e) for e in space.edges] == [False, False, False, False, True]


def test_gradients_against_finite_differences():
    space = SearchSpaceSpec(channels=3)
    net = _net(space, seed=2)
    x, y = _batch(seed=2, n=4, size=5)
    arch = ArchParams.random(space, np.random.default_rng(2), scale=0.5)

    def arch_loss(t):
        w = {k: Tensor(v) for k, v in net.weights.items()}
        return supernet_forward(net, Tensor(x), y, {"normal": t}, 0.6, w)[0]

    assert grad_check(arch_loss, arch.normal) < 1e-4


def test_skip_dominant_network_is_linear_in_the_input():
    space = SearchSpaceSpec(
        cell_inputs=1, num_nodes=1, candidate_ops=("none", "skip", "conv3x3"), aggregate="last"
    )
    net = _net(space)
    arch = ArchParams(np.array([[0.0, 10.0, 0.0]]))
    rng = np.random.default_rng(5)
    x = rng.standard_normal((8, 1, 6, 6))
    # the stem's batch norm is affine per batch, so the features are an affine map of it
    w = {k: Tensor(v) for k, v in net.weights.items()}
    stem = ad.batchnorm(ad.conv2d(Tensor(x), w["stem.w"], padding=1)).data
    logits = net.forward(Tensor(x), w, {"normal": Tensor(arch.normal)}, 0.0).data
    design = np.concatenate([stem.mean(axis=(2, 3)), np.ones((8, 1))], axis=1)
    coef, *_ = np.linalg.lstsq(design, logits, rcond=None)
    resid = logits - design @ coef
    p = np.exp(10) / (np.exp(10) + 2)
    assert np.max(np.abs(resid)) < 50 * (1 - p)


def test_untrained_supernet_scores_near_chance():
    space = SearchSpaceSpec(channels=4)
    accs = []
    rng = np.random.default_rng(0)
    for seed in range(20):
        net = _net(space, seed=seed, classes=4)
        x = rng.standard_normal((40, 1, 6, 6))
        y = np.repeat(np.arange(4), 10)
        accs.append(net.loss_and_grads(x, y, ArchParams.zeros(space), 1.0, wrt=None)[1])
    assert abs(np.mean(accs) - 0.25) < 0.05


def test_nan_loss_carries_context():
    space = SearchSpaceSpec(channels=2)
    net = _net(space)
    net.weights["head.b"][:] = np.nan
    x, y = _batch()
    with pytest.raises(FloatingPointError, match="epoch 3 step 7"):
        net.loss_and_grads(x, y, ArchParams.zeros(space), 0.0, context="epoch 3 step 7")


def test_batch_label_mismatch():
    space = SearchSpaceSpec(channels=2)
    net = _net(space)
    x, y = _batch()
    with pytest.raises(ValueError):
        net.loss_and_grads(x, y[:-1], ArchParams.zeros(space), 0.0)


def test_perturbing_none_only_moves_argmax_when_it_crosses():
    rng = np.random.default_rng(0)
    row = rng.standard_normal(4)
    best = int(np.argmax(row))
    for delta in np.linspace(-3, 3, 61):
        moved = row.copy()
        moved[0] += delta
        winner = int(np.argmax(moved))
        crossed = moved[0] > row[1:].max() if best != 0 else moved[0] < row[1:].max()
        assert (winner != best) == bool(crossed)


def test_discrete_net_uses_only_the_chosen_ops():
    space = SearchSpaceSpec(cell_inputs=1, candidate_ops=("none", "skip", "conv3x3"), aggregate="last")
    net = DiscreteNet.create(space, {"normal": ("conv3x3", "none", "skip")}, 1, 3, np.random.default_rng(0))
    assert [k for k in net.weights if k.startswith("cell")] == ["cell0.e0.conv3x3.w"]
    x, y = _batch()
    loss, acc, grads = net.loss_and_grads(x, y)
    assert np.isfinite(loss) and set(grads) == set(net.weights)


def test_init_weights_is_seed_deterministic():
    space = SearchSpaceSpec()
    a = init_weights(space, 1, 3, np.random.default_rng(9))
    b = init_weights(space, 1, 3, np.random.default_rng(9))
    assert list(a) == list(b) and all(np.array_equal(a[k], b[k]) for k in a)


def test_tape_reference_gradients_match():
    space = SearchSpaceSpec(channels=3)
    net = _net(space, seed=1)
    x, y = _batch(seed=1)
    arch = ArchParams.random(space, np.random.default_rng(1), scale=1.0)
    _, _, grads = net.loss_and_grads(x, y, arch, 0.0, wrt="both")
    tape = Tape()
    w = {k: tape.var(v) for k, v in net.weights.items()}
    a = tape.var(arch.normal)
    g = ad.backward(tape_loss(space, w, a, x, y))
    for k, t in w.items():
        np.testing.assert_allclose(grads[k], g[t], rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(grads["arch.normal"], g[a], rtol=1e-12, atol=1e-15)
