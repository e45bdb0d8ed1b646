import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fasa import autodiff as ad
from fasa.autodiff import Tape, Tensor
from fasa.errors import DimensionError, GradientError, NumericError, ParseError, InputError
from fasa.gradcheck import PRIMITIVE_TOL, check, run_suite
from fasa.nn import GRUCell, Linear, MLP, ParamStore, mlp_forward, read_checkpoint, write_checkpoint


def grad_of(fn, *tensors):
    for t in tensors:
        t.requires_grad = True
        t.grad = np.zeros_like(t.data)
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    return [t.grad for t in tensors]


# --- matmul -----------------------------------------------------------------


def test_matmul_identity():
    b = np.arange(9.0).reshape(3, 3)
    assert np.array_equal(ad.matmul(Tensor(np.eye(3)), Tensor(b)).data, b)


def test_matmul_hand_example():
    out = ad.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[0.0], [1.0]]))
    assert np.array_equal(out.data, [[2.0], [4.0]])


def test_matmul_gradient_of_sum_matches_finite_differences():
    rng = np.random.default_rng(0)
    a, b = Tensor(rng.standard_normal((4, 5))), Tensor(rng.standard_normal((5, 3)))
    assert check(lambda: ad.sum_(ad.matmul(a, b)), [a, b]) < 1e-6


def test_matmul_backward_rule():
    rng = np.random.default_rng(1)
    a, b = Tensor(rng.standard_normal((2, 3))), Tensor(rng.standard_normal((3, 4)))
    w = rng.standard_normal((2, 4))
    ga, gb = grad_of(lambda: ad.sum_(ad.matmul(a, b) * w), a, b)
    np.testing.assert_allclose(ga, w @ b.data.T, atol=1e-14)
    np.testing.assert_allclose(gb, a.data.T @ w, atol=1e-14)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_nan_input():
    a = np.ones((2, 2))
    a[0, 1] = np.nan
    with pytest.raises(NumericError):
        ad.matmul(Tensor(a), Tensor(np.ones((2, 2))))


# --- softmax ----------------------------------------------------------------


def test_softmax_symmetric_row():
    np.testing.assert_allclose(ad.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])


def test_softmax_saturation():
    out = ad.softmax_rows(Tensor([[1e6, -1e6]])).data
    assert abs(out[0, 0] - 1.0) <= 1e-12 and out[0, 1] <= 1e-12


def test_softmax_direct_evaluation():
    out = ad.softmax_rows(Tensor([[1.0, 2.0, 3.0]])).data[0]
    e = np.exp([1.0, 2.0, 3.0])
    np.testing.assert_allclose(out, e / e.sum(), atol=1e-15)
    np.testing.assert_allclose(out, [0.0900, 0.2447, 0.6652], atol=1e-4)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1), st.sampled_from([1.0, 100.0, 1e6]))
def test_softmax_rows_sum_to_one(n, k, seed, scale):
    x = np.random.default_rng(seed).uniform(-scale, scale, size=(n, k))
    out = ad.softmax_rows(Tensor(x)).data
    assert np.all(np.abs(out.sum(axis=1) - 1.0) <= 1e-9)
    assert np.all((out >= 0) & (out <= 1))


# --- layernorm --------------------------------------------------------------


def test_layernorm_constant_row_maps_to_bias():
    out = ad.layernorm(Tensor(np.full((1, 4), 3.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    assert np.array_equal(out.data, np.zeros((1, 4)))


def test_layernorm_normalized_row_unchanged():
    out = ad.layernorm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-14)
    np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-12)


def test_layernorm_gradient():
    rng = np.random.default_rng(2)
    x, g, b = (Tensor(rng.standard_normal(s)) for s in [(3, 4), (4,), (4,)])
    w = rng.standard_normal((3, 4))
    assert check(lambda: ad.sum_(ad.layernorm(x, g, b) * w), [x, g, b]) < 1e-6


# --- GRU and MLP ------------------------------------------------------------


def _zero_gru(d):
    store = ParamStore()
    cell = GRUCell(store, "g", d, np.random.default_rng(0))
    for name in store.names():
        store[name].data[...] = 0.0
    return store, cell


def test_gru_all_zero():
    _, cell = _zero_gru(3)
    out = cell(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    assert np.array_equal(out.data, np.zeros((2, 3)))


def test_gru_saturated_update_gate_keeps_state():
    store, cell = _zero_gru(3)
    rng = np.random.default_rng(3)
    store["g.w_gates"].data[...] = rng.standard_normal(store["g.w_gates"].shape)
    store["g.b_gates"].data[:3] = 1e3   # z = sigmoid(huge) = 1
    h = rng.standard_normal((2, 3))
    out = cell(Tensor(h), Tensor(rng.standard_normal((2, 3))))
    np.testing.assert_allclose(out.data, h, atol=1e-12)


def test_gru_gradient():
    rng = np.random.default_rng(4)
    store = ParamStore()
    cell = GRUCell(store, "g", 3, rng)
    h, x = Tensor(rng.standard_normal((2, 3))), Tensor(rng.standard_normal((2, 3)))
    w = rng.standard_normal((2, 3))
    params = [store[n] for n in store.names()]
    assert check(lambda: ad.sum_(cell(h, x) * w), [h, x] + params) < 1e-6


def test_mlp_zero_weights():
    store = ParamStore()
    mlp = MLP(store, "m", [3, 5, 2], np.random.default_rng(0))
    for n in store.names():
        store[n].data[...] = 0.0
    assert np.array_equal(mlp(Tensor(np.ones((4, 3)))).data, np.zeros((4, 2)))


def test_mlp_identity_layer_passthrough():
    store = ParamStore()
    layer = Linear(store, "id", 3, 3, np.random.default_rng(0))
    layer.weight.data[...] = np.eye(3)
    layer.bias.data[...] = 0.0
    x = np.random.default_rng(1).standard_normal((2, 3))
    assert np.array_equal(mlp_forward(Tensor(x), [layer]).data, x)


def test_mlp_chain_mismatch():
    store = ParamStore()
    rng = np.random.default_rng(0)
    with pytest.raises(DimensionError):
        mlp_forward(Tensor(np.ones((1, 3))), [Linear(store, "a", 3, 4, rng), Linear(store, "b", 5, 2, rng)])


def test_mlp_gradient():
    rng = np.random.default_rng(5)
    store = ParamStore()
    mlp = MLP(store, "m", [4, 6, 3], rng)
    x = Tensor(rng.standard_normal((5, 4)))
    w = rng.standard_normal((5, 3))
    assert check(lambda: ad.sum_(mlp(x) * w), [x] + [store[n] for n in store.names()]) < 1e-6


def test_each_primitive_passes_on_five_random_shapes():
    names = ["matmul", "softmax", "layernorm", "gru_cell", "mlp", "reconstruction_loss"]
    for r in run_suite(trials=5, seed=7, names=names):
        assert r.max_rel_error < PRIMITIVE_TOL, r


# --- backward ---------------------------------------------------------------


def test_backward_sum_gives_ones():
    p = Tensor(np.random.default_rng(0).standard_normal((2, 3, 4)), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_(p)
    tape.backward(loss)
    assert np.array_equal(p.grad, np.ones((2, 3, 4)))


def test_backward_square_analytic():
    p = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_(p * p)
    ad.backward(loss)
    assert np.array_equal(p.grad, [2.0, 4.0])


def test_backward_twice_is_an_error():
    p = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_(p * p)
    tape.backward(loss)
    with pytest.raises(GradientError):
        tape.backward(loss)
    assert np.array_equal(p.grad, [2.0, 4.0])


def test_backward_non_scalar():
    p = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        out = p * 2.0
    with pytest.raises(GradientError):
        tape.backward(out)


def test_backward_gradient_accumulates_over_shared_use():
    p = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_(p * p + p * 4.0)
    tape.backward(loss)
    assert np.array_equal(p.grad, [10.0])


def test_ops_outside_tape_record_nothing():
    p = Tensor([1.0], requires_grad=True)
    out = p * 3.0
    assert out._tape is None and not out.requires_grad


def test_reset_allows_a_new_pass():
    p = Tensor([2.0], requires_grad=True)
    tape = Tape()
    with tape:
        loss = ad.sum_(p * p)
    tape.backward(loss)
    tape.reset()
    with tape:
        loss = ad.sum_(p * 3.0)
    tape.backward(loss)
    assert np.array_equal(p.grad, [7.0])


# --- parameters and checkpoints ---------------------------------------------


def _store():
    rng = np.random.default_rng(0)
    store = ParamStore()
    Linear(store, "lin", 3, 2, rng)
    store.add("mu", rng.standard_normal((4,)))
    store.add("scalar", np.array(np.pi))
    return store


def test_param_names_unique():
    store = _store()
    with pytest.raises(InputError):
        store.add("mu", np.zeros(4))


def test_params_require_grad():
    assert all(p.requires_grad for _, p in _store().items())


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    store = _store()
    store["mu"].data[0] = np.nextafter(1.0, 2.0)
    path = tmp_path / "m.ckpt"
    store.save(path)
    other = _store()
    for n in other.names():
        other[n].data[...] = 0.0
    other.load(path)
    for n in store.names():
        assert store[n].data.tobytes() == other[n].data.tobytes()
        assert store[n].shape == other[n].shape


def test_checkpoint_layout(tmp_path):
    path = tmp_path / "c.ckpt"
    write_checkpoint(path, {"ab": np.array([[1.0, 2.0]])})
    raw = path.read_bytes()
    assert raw[:4] == b"FASA" and raw[4:6] == b"\x01\x00"
    assert len(raw) == 4 + 2 + 4 + 2 + 4 + 2 * 8 + 2 * 8


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "c.ckpt"
    write_checkpoint(path, {"w": np.ones((3, 3))})
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(ParseError, match="offset"):
        read_checkpoint(path)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "c.ckpt"
    path.write_bytes(b"NOPE\x01\x00")
    with pytest.raises(ParseError):
        read_checkpoint(path)


def test_load_mismatch_lists_every_offender():
    store = _store()
    state = store.state_dict()
    state["lin.weight"] = np.zeros((2, 2))
    del state["mu"]
    state["extra"] = np.zeros(1)
    with pytest.raises(InputError) as info:
        _store().load_state_dict(state)
    msg = str(info.value)
    assert "lin.weight" in msg and "mu" in msg and "extra" in msg
