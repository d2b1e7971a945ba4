import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hmt import numerics as nm
from hmt.errors import ContractError, DimensionError, NumericDomainError

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def leaf(a):
    return nm.Tensor(np.asarray(a, dtype=float), requires_grad=True)


def check_grad(build, *inputs, h=1e-6, tol=1e-7):
    """Autodiff of sum(build(*inputs) * w) vs central differences on every input."""
    ts = [leaf(x) for x in inputs]
    out = build(*ts)
    w = np.random.default_rng(0).normal(size=out.shape)
    nm.backward((out * nm.Tensor(w)).sum())
    for t in ts:
        def f(_):
            with nm.no_grad():
                return float((build(*ts).data * w).sum())
        fd = nm.finite_diff_grad(f, t, h=h).data
        assert np.allclose(t.grad, fd, rtol=1e-6, atol=tol), (t.grad, fd)


@pytest.mark.parametrize("name,build,shapes", [
    ("add_broadcast", lambda a, b: a + b, [(3, 4), (4,)]),
    ("mul_broadcast", lambda a, b: a * b, [(2, 3, 4), (3, 1)]),
    ("sub_div", lambda a, b: (a - b) / 3.0, [(3, 2), (3, 2)]),
    ("reciprocal", lambda a: nm.reciprocal(a * a + 1.0), [(4,)]),
    ("exp_log", lambda a: nm.tlog(nm.texp(a) + 1.0), [(3, 3)]),
    ("tanh", lambda a: nm.ttanh(a), [(5,)]),
    ("gelu", lambda a: nm.gelu(a), [(2, 5)]),
    ("matmul_batched", lambda a, b: a @ b, [(2, 3, 4), (4, 5)]),
    ("sum_axis", lambda a: a.sum(axis=1, keepdims=True), [(3, 4)]),
    ("mean", lambda a: a.mean(axis=0), [(3, 4)]),
    ("reshape_swap", lambda a: nm.swapaxes(a.reshape(2, 3, 2), -1, -2), [(3, 4)]),
    ("transpose", lambda a: a.T, [(3, 4)]),
    ("slice", lambda a: a[1:, ::2], [(3, 4)]),
    ("fancy_index", lambda a: a[np.array([0, 2, 0])], [(3, 4)]),
    ("concat", lambda a, b: nm.concat([a, b]), [(2, 4), (3, 4)]),
    ("concat_broadcast", lambda a, b: nm.concat([a, b]), [(1, 4), (2, 3, 4)]),
    ("softmax", lambda a: nm.softmax_rows(a), [(3, 5)]),
    ("softmax_masked", lambda a: nm.softmax_rows(a, mask=np.tril(np.ones((4, 4), bool))), [(4, 4)]),
    ("layer_norm", lambda a, g, b: nm.layer_norm(a, g, b), [(3, 6), (6,), (6,)]),
    ("layer_norm_batched", lambda a, g, b: nm.layer_norm(a, g, b), [(2, 3, 6), (6,), (6,)]),
])
def test_op_gradients_match_finite_differences(name, build, shapes):
    rng = np.random.default_rng(hash(name) % 2**32)
    inputs = [rng.normal(size=s) for s in shapes]
    if name == "layer_norm":
        inputs[1] = inputs[1] + 1.0
    check_grad(build, *inputs)


def test_gather_rows_gradient_accumulates_repeats():
    table = leaf(np.arange(12.0).reshape(4, 3))
    out = nm.gather_rows(table, np.array([1, 1, 3]))
    nm.backward(out.sum())
    assert np.array_equal(table.grad, np.array([[0, 0, 0], [2, 2, 2], [0, 0, 0], [1, 1, 1.0]]))


def test_gather_rows_reports_bad_id():
    with pytest.raises(IndexError, match="position 2"):
        nm.gather_rows(leaf(np.zeros((4, 2))), np.array([0, 1, 7]))


def test_cross_entropy_matches_log_sum_exp():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(5, 7))
    t = rng.integers(0, 7, size=5)
    want = np.mean(np.log(np.exp(z).sum(-1)) - z[np.arange(5), t])
    assert math.isclose(nm.cross_entropy(leaf(z), t).item(), want, rel_tol=1e-13)
    check_grad(lambda a: nm.cross_entropy(a, t, reduction="sum"), z)


def test_cross_entropy_batched_keeps_leading_dims():
    rng = np.random.default_rng(4)
    z = rng.normal(size=(3, 5, 7))
    t = rng.integers(0, 7, size=(3, 5))
    out = nm.cross_entropy(leaf(z), t, reduction="sum")
    assert out.shape == (3,)
    for b in range(3):
        assert math.isclose(out.data[b], nm.cross_entropy(leaf(z[b]), t[b], "sum").item(), rel_tol=1e-14)


def test_cross_entropy_errors():
    with pytest.raises(IndexError, match="position 1"):
        nm.cross_entropy(leaf(np.zeros((2, 3))), np.array([0, 3]))
    with pytest.raises(DimensionError):
        nm.cross_entropy(leaf(np.zeros((2, 3))), np.array([0, 1, 2]))
    with pytest.raises(ContractError):
        nm.cross_entropy(leaf(np.zeros((2, 3))), np.array([0, 1]), reduction="none")


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite),
       st.floats(-50, 50))
def test_softmax_rows_sum_to_one_and_shift_invariant(x, c):
    p = nm.softmax_rows(nm.Tensor(x)).data
    assert np.allclose(p.sum(-1), 1.0, atol=1e-14)
    assert np.all(p >= 0)
    assert np.allclose(nm.softmax_rows(nm.Tensor(x + c)).data, p, atol=1e-12)


def test_softmax_masked_entries_are_exactly_zero():
    p = nm.softmax_rows(nm.Tensor(np.ones((3, 3))), mask=np.tril(np.ones((3, 3), bool))).data
    assert p[0, 1] == 0.0 and p[0, 2] == 0.0 and p[1, 2] == 0.0
    assert p[0, 0] == 1.0


def test_softmax_rejects_non_finite():
    with pytest.raises(NumericDomainError):
        nm.softmax_rows(nm.Tensor([[0.0, np.nan]]))


@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(2, 8)), elements=finite))
def test_layer_norm_output_is_standardised(x):
    d = x.shape[-1]
    y = nm.layer_norm(nm.Tensor(x), nm.Tensor(np.ones(d)), nm.Tensor(np.zeros(d))).data
    assert np.allclose(y.mean(-1), 0.0, atol=1e-10)
    var = x.var(-1)
    assert np.allclose((y * y).mean(-1), var / (var + 1e-5), atol=1e-8)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        leaf(np.zeros((2, 3))) @ leaf(np.zeros((4, 5)))


def test_backward_requires_scalar_and_accumulates_over_paths():
    a = leaf([1.0, 2.0])
    with pytest.raises(ContractError):
        nm.backward(a * 2.0)
    y = (a * a).sum() + (a * 3.0).sum()
    nm.backward(y)
    assert np.array_equal(a.grad, 2 * a.data + 3.0)


def test_backward_deep_chain_has_no_recursion_limit():
    a = leaf(1.0)
    y = a
    for _ in range(5000):
        y = y * 1.0
    nm.backward(y)
    assert a.grad == 1.0


def test_no_grad_builds_no_graph():
    a = leaf([1.0])
    with nm.no_grad():
        y = a * 2.0
    assert not y.requires_grad and y._parents == ()
    assert nm.is_grad_enabled()


def test_adam_matches_hand_written_update():
    p = leaf([1.0, -2.0])
    opt = nm.Adam({"p": p})
    m = v = np.zeros(2)
    x = p.data.copy()
    for t in range(1, 4):
        g = np.array([0.5 * t, -1.0])
        p.grad = g.copy()
        opt.step(0.1)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x = x - 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert np.allclose(p.data, x, rtol=0, atol=1e-15)
        assert p.grad is None


def test_adam_names_parameter_without_gradient():
    opt = nm.Adam({"a": leaf([1.0]), "b": leaf([1.0])})
    opt.params["a"].grad = np.ones(1)
    with pytest.raises(ContractError, match="'b'"):
        opt.step(0.1)


def test_clip_grad_norm_returns_pre_clip_norm():
    a, b = leaf([0.0, 0.0]), leaf([0.0])
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert nm.clip_grad_norm({"a": a, "b": b}, 1.0) == 5.0
    assert math.isclose(nm.global_grad_norm({"a": a, "b": b}), 1.0, rel_tol=1e-9)
    assert nm.clip_grad_norm({"a": a, "b": b}, 10.0) == pytest.approx(1.0)


@given(st.integers(0, 2**63), st.integers(0, 5))
def test_rng_words_round_trip(seed, draws):
    rng = nm.make_rng(seed)
    rng.random(draws)
    rng.integers(0, 2**31)  # may leave a buffered u32
    clone = nm.rng_from_words(nm.rng_state_words(rng))
    assert np.array_equal(rng.integers(0, 2**62, 8), clone.integers(0, 2**62, 8))
    assert all(0 <= w < 2**64 for w in nm.rng_state_words(rng))


def test_batched_finite_differences_equal_serial():
    rng = np.random.default_rng(0)
    w = leaf(rng.normal(size=(3, 4)))
    x = rng.normal(size=(5, 3))

    def f(p):
        return nm.ttanh(nm.Tensor(x) @ p).sum(axis=(-1, -2)).data

    serial = nm.finite_diff_grad(lambda p: float(f(p)), w, h=1e-5).data
    batched = nm.finite_diff_grad_batched(f, w, h=1e-5, chunk=5).data
    assert np.array_equal(serial, batched)


def test_grad_rel_error_switches_to_absolute_below_threshold():
    rel, ab = nm.grad_rel_error([1.0, 1e-8], [1.0 + 1e-6, 2e-8])
    assert rel[0] == pytest.approx(1e-6, rel=1e-3) and rel[1] == 0.0
    assert ab[0] == 0.0 and ab[1] == pytest.approx(1e-8)
