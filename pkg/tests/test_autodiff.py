"""Gradient and contract checks for the autodiff engine.

Every differentiable op is checked against central finite differences
(h=1e-5, float64) on random seeds; trivial identities are asserted exactly.
"""

import numpy as np
import pytest

from quest import autodiff as ad

from conftest import central_diff, rel_err

N_SEEDS = 20
FD_TOL = 1e-4


def tape_grad(op, arrays, **kw):
    """Run op on a fresh tape, reduce with sum, return grads per input."""
    tape = ad.Tape()
    leaves = [tape.leaf(a) for a in arrays]
    out = op(*leaves, **kw)
    root = ad.tsum(out) if out.size > 1 else out
    tape.backward(root)
    return [tape.grad(leaf) for leaf in leaves]


def check_op(op, shapes, seed, transform=None, **kw):
    rng = np.random.default_rng(seed)
    arrays = [rng.standard_normal(s) for s in shapes]
    if transform:
        arrays = [transform(a) for a in arrays]
    analytic = tape_grad(op, arrays, **kw)

    def scalar(*xs):
        out = op(*[ad.Tensor(x) for x in xs], **kw)
        return float(out.data.sum())

    numeric = central_diff(scalar, arrays)
    for a, n in zip(analytic, numeric):
        assert rel_err(a, n) < FD_TOL


# ---------------------------------------------------------------------------
# matmul


def test_matmul_identity():
    eye = np.eye(2)
    out = ad.matmul(ad.Tensor(eye), ad.Tensor(eye))
    np.testing.assert_array_equal(out.data, eye)


def test_matmul_hand_case():
    a = ad.Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = ad.Tensor([[1.0], [1.0]])
    np.testing.assert_array_equal(ad.matmul(a, b).data, [[3.0], [7.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(ad.AutodiffError):
        ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))


@pytest.mark.parametrize("seed", range(N_SEEDS))
def test_matmul_gradient(seed):
    check_op(ad.matmul, [(3, 4), (4, 2)], seed)


@pytest.mark.parametrize("seed", range(5))
def test_matmul_batched_gradient(seed):
    check_op(ad.matmul, [(2, 3, 4), (2, 4, 2)], seed)
    # broadcast over the stack axis
    check_op(ad.matmul, [(2, 3, 4), (4, 2)], seed + 100)


# ---------------------------------------------------------------------------
# softmax


def test_softmax_uniform():
    out = ad.softmax(ad.Tensor([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-15)


def test_softmax_no_overflow():
    out = ad.softmax(ad.Tensor([1000.0, 0.0]))
    np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-12)


@pytest.mark.parametrize("seed", range(N_SEEDS))
def test_softmax_gradient(seed):
    check_op(lambda x: ad.mul(ad.softmax(x, axis=-1), np.arange(8.0).reshape(2, 4)),
             [(2, 4)], seed)


@pytest.mark.parametrize("seed", range(N_SEEDS))
def test_softmax_rows_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((4, 7)) * rng.uniform(0.1, 50)
    out = ad.softmax(ad.Tensor(x), axis=-1)
    np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)


# ---------------------------------------------------------------------------
# layer_norm


def test_layer_norm_constant_row_is_zero():
    x = ad.Tensor(np.full((3, 5), 2.7))
    out = ad.layer_norm(x, np.ones(5), np.zeros(5), eps=1e-5)
    np.testing.assert_allclose(out.data, 0.0, atol=1e-12)


def test_layer_norm_moments(rng):
    x = ad.Tensor(rng.standard_normal((6, 32)))
    out = ad.layer_norm(x, np.ones(32), np.zeros(32), eps=1e-5)
    assert np.max(np.abs(out.data.mean(axis=-1))) < 1e-12
    assert np.max(np.abs(out.data.var(axis=-1) - 1.0)) < 1e-4


@pytest.mark.parametrize("seed", range(N_SEEDS))
def test_layer_norm_gradient(seed):
    check_op(
        lambda x, g, b: ad.mul(ad.layer_norm(x, g, b), np.arange(8.0).reshape(2, 4)),
        [(2, 4), (4,), (4,)],
        seed,
    )


def test_layer_norm_rejects_bad_eps():
    with pytest.raises(ad.AutodiffError):
        ad.layer_norm(ad.Tensor(np.ones((2, 3))), np.ones(3), np.zeros(3), eps=0.0)


# ---------------------------------------------------------------------------
# attention


def test_attention_single_key_returns_value(rng):
    q = ad.Tensor(rng.standard_normal((2, 3, 4)))
    k = ad.Tensor(rng.standard_normal((2, 1, 4)))
    v = ad.Tensor(rng.standard_normal((2, 1, 4)))
    out = ad.attention(q, k, v)
    np.testing.assert_allclose(out.data, np.broadcast_to(v.data, (2, 3, 4)), atol=1e-14)


def test_attention_identical_keys_average(rng):
    q = ad.Tensor(rng.standard_normal((1, 2, 4)))
    k = ad.Tensor(np.tile(rng.standard_normal((1, 1, 4)), (1, 5, 1)))
    v = ad.Tensor(rng.standard_normal((1, 5, 4)))
    out = ad.attention(q, k, v)
    np.testing.assert_allclose(out.data, np.broadcast_to(v.data.mean(axis=1), (1, 2, 4)),
                               atol=1e-12)


@pytest.mark.parametrize("seed", range(N_SEEDS))
def test_attention_gradient(seed):
    check_op(
        lambda q, k, v: ad.mul(ad.attention(q, k, v),
                               np.random.default_rng(1).standard_normal((2, 3, 4))),
        [(2, 3, 4), (2, 5, 4), (2, 5, 4)],
        seed,
    )


def test_attention_shape_mismatch(rng):
    with pytest.raises(ad.AutodiffError):
        ad.attention(ad.Tensor(rng.standard_normal((2, 3, 4))),
                     ad.Tensor(rng.standard_normal((2, 5, 3))),
                     ad.Tensor(rng.standard_normal((2, 5, 4))))


# ---------------------------------------------------------------------------
# elementwise suite


def test_cosine_sim_self_is_one(rng):
    for _ in range(5):
        v = rng.standard_normal(8)
        out = ad.cosine_sim(ad.Tensor(v), ad.Tensor(v))
        assert abs(out.item() - 1.0) < 1e-10


def test_cosine_sim_zero_vector_guarded():
    z = ad.Tensor(np.zeros(4))
    out = ad.cosine_sim(z, ad.Tensor(np.ones(4)))
    assert out.item() == 0.0
    # gradient stays finite at the origin
    tape = ad.Tape()
    a = tape.leaf(np.zeros(4))
    tape.backward(ad.cosine_sim(a, ad.Tensor(np.ones(4))))
    assert np.all(np.isfinite(tape.grad(a)))


def test_l1_self_is_zero(rng):
    x = rng.standard_normal((3, 3))
    assert ad.l1(ad.Tensor(x), ad.Tensor(x)).item() == 0.0


ELEMENTWISE = [
    ("add", lambda a, b: ad.add(a, b), 2),
    ("sub", lambda a, b: ad.sub(a, b), 2),
    ("mul", lambda a, b: ad.mul(a, b), 2),
    ("div", lambda a, b: ad.div(a, ad.add(ad.mul(b, b), 1.0)), 2),
    ("relu", lambda a: ad.relu(a), 1),
    ("gelu", lambda a: ad.gelu(a), 1),
    ("sigmoid", lambda a: ad.sigmoid(a), 1),
    ("exp", lambda a: ad.exp(a), 1),
    ("log", lambda a: ad.log(ad.add(ad.mul(a, a), 0.5)), 1),
    ("sqrt", lambda a: ad.sqrt(ad.add(ad.mul(a, a), 0.5)), 1),
    ("mse", lambda a, b: ad.mse(a, b), 2),
    ("l1", lambda a, b: ad.l1(a, b), 2),
    ("cosine", lambda a, b: ad.tsum(ad.cosine_sim(a, b, axis=-1)), 2),
    ("mean", lambda a: ad.tmean(a, axis=0), 1),
    ("sum", lambda a: ad.tsum(a, axis=-1), 1),
    ("reshape", lambda a: ad.reshape(a, (4, 2)), 1),
    ("concat", lambda a, b: ad.concat([a, b], axis=0), 2),
    ("slice", lambda a: a[1:, :3], 1),
    ("clip", lambda a: ad.clip(ad.mul(a, 3.0), -1.0, 1.0), 1),
]


@pytest.mark.parametrize("name,op,arity", ELEMENTWISE, ids=[e[0] for e in ELEMENTWISE])
@pytest.mark.parametrize("seed", range(N_SEEDS))
def test_elementwise_gradients(name, op, arity, seed):
    # offset keeps relu/clip kinks and |x| cusps away from sample points
    check_op(op, [(2, 4)] * arity, seed,
             transform=lambda a: a + 0.1 * np.sign(a) + np.where(a == 0, 0.1, 0.0))


# ---------------------------------------------------------------------------
# backward contracts


def test_backward_sum_gives_ones():
    tape = ad.Tape()
    leaf = tape.leaf(np.arange(6.0).reshape(2, 3))
    tape.backward(ad.tsum(leaf))
    np.testing.assert_array_equal(tape.grad(leaf), np.ones((2, 3)))


def test_backward_mse_hand_derivative():
    # mean convention: d/dx mean((x - 0)^2) = 2x/n -> [1, 2]
    tape = ad.Tape()
    leaf = tape.leaf(np.array([1.0, 2.0]))
    tape.backward(ad.mse(leaf, np.zeros(2)))
    np.testing.assert_allclose(tape.grad(leaf), [1.0, 2.0])


def test_backward_requires_scalar_root():
    tape = ad.Tape()
    leaf = tape.leaf(np.ones(3))
    with pytest.raises(ad.AutodiffError):
        tape.backward(ad.mul(leaf, 2.0))


def test_double_backward_is_an_error():
    tape = ad.Tape()
    leaf = tape.leaf(np.ones(3))
    root = ad.tsum(leaf)
    tape.backward(root)
    with pytest.raises(ad.AutodiffError):
        tape.backward(root)


def test_unreached_leaf_grad_is_zeros():
    tape = ad.Tape()
    a = tape.leaf(np.ones((2, 2)))
    b = tape.leaf(np.ones(3))
    tape.backward(ad.tsum(ad.mul(a, 2.0)))
    assert tape.grad(b).shape == (3,)
    np.testing.assert_array_equal(tape.grad(b), 0.0)


def test_mixed_tapes_rejected():
    t1, t2 = ad.Tape(), ad.Tape()
    with pytest.raises(ad.AutodiffError):
        ad.add(t1.leaf(np.ones(2)), t2.leaf(np.ones(2)))


def test_constants_build_no_tape():
    out = ad.attention(ad.Tensor(np.ones((1, 2, 4))), ad.Tensor(np.ones((1, 3, 4))),
                       ad.Tensor(np.ones((1, 3, 4))))
    assert out.tape is None


# ---------------------------------------------------------------------------
# determinism and finiteness invariants


def _forward_and_grads(seed):
    rng = np.random.default_rng(seed)
    tape = ad.Tape()
    a = tape.leaf(rng.standard_normal((4, 4)))
    b = tape.leaf(rng.standard_normal((4, 4)))
    out = ad.tsum(ad.attention(
        ad.reshape(ad.gelu(ad.matmul(a, b)), (1, 4, 4)),
        ad.reshape(b, (1, 4, 4)),
        ad.reshape(ad.sigmoid(a), (1, 4, 4)),
    ))
    tape.backward(out)
    return out.data.tobytes(), tape.grad(a).tobytes(), tape.grad(b).tobytes()


def test_bitwise_determinism():
    assert _forward_and_grads(7) == _forward_and_grads(7)


@pytest.mark.parametrize("seed", range(5))
def test_no_nonfinite_from_large_inputs(seed):
    rng = np.random.default_rng(seed)
    x = ad.Tensor(rng.uniform(-1e6, 1e6, (3, 5)))
    for op in (lambda t: ad.softmax(t, axis=-1),
               ad.sigmoid,
               lambda t: ad.layer_norm(t, np.ones(5), np.zeros(5)),
               lambda t: ad.cosine_sim(t, t)):
        assert np.all(np.isfinite(op(x).data))


def test_nonfinite_forward_raises():
    with pytest.raises(ad.NonFiniteError):
        ad.log(ad.Tensor([-1.0]))
