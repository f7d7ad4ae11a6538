"""Tape and primitive correctness: every backward rule against central finite
differences, determinism, and the documented error cases."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfcontrol import autodiff as ad

from helpers import central_fd


def leaf(tape, rng, shape):
    return tape.tensor(rng.uniform(-2.0, 2.0, size=shape))


def grad_of(expr_builder, arrays):
    """Gradient of a scalar expression w.r.t. each input array, via the tape."""
    tape = ad.Tape()
    leaves = [tape.tensor(a) for a in arrays]
    root = expr_builder(tape, leaves)
    grads = tape.backward(root)
    return [np.asarray(grads[l.nid]) if grads[l.nid] is not None
            else np.zeros_like(a) for l, a in zip(leaves, arrays)]


def check_against_fd(expr_builder, arrays, h=1e-5, tol=1e-4):
    gs = grad_of(expr_builder, arrays)
    for i, arr in enumerate(arrays):
        def scalar():
            tape = ad.Tape(grad=False)
            leaves = [tape.tensor(a) for a in arrays]
            return float(expr_builder(tape, leaves).value)
        fd = central_fd(scalar, arr, h=h)
        den = max(np.linalg.norm(fd), 1e-10)
        assert np.linalg.norm(gs[i] - fd) / den < tol, f"input {i}"


# --- spec'd examples ------------------------------------------------------


def test_add_example():
    tape = ad.Tape()
    a = tape.tensor([1.0, 2.0])
    b = tape.tensor([3.0, 4.0])
    assert np.array_equal(ad.add(a, b).value, [4.0, 6.0])


def test_sigmoid_at_zero():
    tape = ad.Tape()
    z = tape.tensor([0.0])
    assert ad.sigmoid(z).value[0] == 0.5


def test_matmul_shape_rule():
    tape = ad.Tape()
    w = leaf(tape, np.random.default_rng(0), (2, 3))
    x = leaf(tape, np.random.default_rng(1), (3, 1))
    assert ad.matmul(w, x).shape == (2, 1)


def test_square_gradient_at_three():
    tape = ad.Tape()
    x = tape.tensor([3.0])
    y = ad.sum_all(ad.square(x))
    grads = tape.backward(y)
    assert grads[x.nid][0] == pytest.approx(6.0, abs=1e-12)


def test_sum_sigmoid_gradient_quarter():
    tape = ad.Tape()
    x = tape.tensor([0.0, 0.0])
    y = ad.sum_all(ad.sigmoid(x))
    grads = tape.backward(y)
    assert np.allclose(grads[x.nid], [0.25, 0.25], atol=1e-15)


# --- error cases ----------------------------------------------------------


def test_shape_mismatch_names_primitive_and_shapes():
    tape = ad.Tape()
    a = tape.tensor([1.0, 2.0])
    b = tape.tensor([1.0, 2.0, 3.0])
    with pytest.raises(ad.ShapeError, match=r"add.*\(2,\).*\(3,\)"):
        ad.add(a, b)


def test_matmul_shape_error():
    tape = ad.Tape()
    a = tape.tensor(np.ones((2, 3)))
    b = tape.tensor(np.ones((2, 3)))
    with pytest.raises(ad.ShapeError, match="matmul"):
        ad.matmul(a, b)


def test_nonscalar_root_rejected():
    tape = ad.Tape()
    x = tape.tensor([1.0, 2.0])
    with pytest.raises(ad.AutodiffError, match="scalar"):
        tape.backward(x)


def test_nonfinite_leaf_rejected():
    tape = ad.Tape()
    with pytest.raises(ad.NonFiniteError):
        tape.tensor([1.0, np.nan])


def test_cross_tape_operands_rejected():
    t1, t2 = ad.Tape(), ad.Tape()
    with pytest.raises(ad.AutodiffError, match="different tapes"):
        ad.add(t1.tensor([1.0]), t2.tensor([1.0]))


# --- finite-difference sweep over every primitive -------------------------

RNG = np.random.default_rng(1234)


@pytest.mark.parametrize("trial", range(10))
@pytest.mark.parametrize("prim", [
    "add", "sub", "mul", "neg", "scale", "axpy", "square", "sqrt", "exp",
    "sigmoid", "pow3", "clip", "matmul", "affine_sig", "affine_lin",
    "dense_chain", "mean_axis0", "sum_axis1", "broadcast_row", "broadcast_col",
    "concat", "col_slice", "reshape", "transpose", "conv1d", "conv2d",
])
def test_primitive_matches_finite_differences(prim, trial):
    rng = np.random.default_rng(hash((prim, trial)) % (2 ** 32))
    n, m = int(rng.integers(2, 6)), int(rng.integers(2, 5))

    if prim in ("add", "sub", "mul", "axpy"):
        arrays = [rng.uniform(-2, 2, (n, m)), rng.uniform(-2, 2, (n, m))]
        op = {"add": ad.add, "sub": ad.sub, "mul": ad.mul,
              "axpy": lambda a, b: ad.axpy(a, b, 0.7)}[prim]
        build = lambda tape, ls: ad.sum_all(ad.square(op(ls[0], ls[1])))
    elif prim in ("neg", "scale", "square", "exp", "sigmoid", "clip"):
        arrays = [rng.uniform(-2, 2, (n, m))]
        op = {"neg": ad.neg, "scale": lambda a: ad.scale(a, -1.3),
              "square": ad.square, "exp": ad.exp, "sigmoid": ad.sigmoid,
              "clip": lambda a: ad.clip(a, -1.0, 1.0)}[prim]
        build = lambda tape, ls: ad.sum_all(ad.square(op(ls[0])))
    elif prim == "sqrt":
        arrays = [rng.uniform(0.5, 2, (n, m))]
        build = lambda tape, ls: ad.sum_all(ad.sqrt(ls[0]))
    elif prim == "pow3":
        arrays = [rng.uniform(-2, 2, (n, m))]
        build = lambda tape, ls: ad.sum_all(ad.pow_int(ls[0], 3))
    elif prim == "matmul":
        arrays = [rng.uniform(-2, 2, (n, m)), rng.uniform(-2, 2, (m, 3))]
        build = lambda tape, ls: ad.sum_all(ad.square(ad.matmul(ls[0], ls[1])))
    elif prim in ("affine_sig", "affine_lin"):
        act = "sigmoid" if prim == "affine_sig" else "linear"
        arrays = [rng.uniform(-2, 2, (n, m)), rng.uniform(-2, 2, (m, 3)),
                  rng.uniform(-2, 2, 3)]
        build = lambda tape, ls: ad.sum_all(ad.square(ad.affine(*ls, act)))
    elif prim == "dense_chain":
        arrays = [rng.uniform(-2, 2, (n, m)), rng.uniform(-2, 2, (m, 4)),
                  rng.uniform(-2, 2, 4), rng.uniform(-2, 2, (4, 2)),
                  rng.uniform(-2, 2, 2)]
        build = lambda tape, ls: ad.sum_all(ad.square(
            ad.dense_chain(ls[0], [(ls[1], ls[2]), (ls[3], ls[4])])))
    elif prim == "mean_axis0":
        arrays = [rng.uniform(-2, 2, (n, m))]
        build = lambda tape, ls: ad.sum_all(ad.square(ad.mean_axis(ls[0], 0)))
    elif prim == "sum_axis1":
        arrays = [rng.uniform(-2, 2, (n, m))]
        build = lambda tape, ls: ad.sum_all(ad.square(ad.sum_axis(ls[0], 1)))
    elif prim == "broadcast_row":
        arrays = [rng.uniform(-2, 2, m)]
        build = lambda tape, ls: ad.sum_all(ad.square(ad.broadcast_row(ls[0], n)))
    elif prim == "broadcast_col":
        arrays = [rng.uniform(-2, 2, n)]
        build = lambda tape, ls: ad.sum_all(ad.square(ad.broadcast_col(ls[0], m)))
    elif prim == "concat":
        arrays = [rng.uniform(-2, 2, (n, m)), rng.uniform(-2, 2, (n, 2))]
        build = lambda tape, ls: ad.sum_all(ad.square(ad.concat_cols(ls)))
    elif prim == "col_slice":
        arrays = [rng.uniform(-2, 2, (n, m))]
        build = lambda tape, ls: ad.sum_all(ad.square(ad.col_slice(ls[0], 0, 1)))
    elif prim == "reshape":
        arrays = [rng.uniform(-2, 2, (n, m))]
        build = lambda tape, ls: ad.sum_all(ad.square(ad.reshape(ls[0], (m * n,))))
    elif prim == "transpose":
        arrays = [rng.uniform(-2, 2, (n, m))]
        build = lambda tape, ls: ad.sum_all(ad.square(ad.transpose(ls[0])))
    elif prim == "conv1d":
        arrays = [rng.uniform(-2, 2, (8, 2)), rng.uniform(-1, 1, (3, 2, 2)),
                  rng.uniform(-1, 1, 2)]
        build = lambda tape, ls: ad.sum_all(ad.square(ad.conv1d(*ls, "sigmoid")))
    elif prim == "conv2d":
        arrays = [rng.uniform(-2, 2, (6, 5, 2)), rng.uniform(-1, 1, (3, 2, 2, 2)),
                  rng.uniform(-1, 1, 2)]
        build = lambda tape, ls: ad.sum_all(ad.square(ad.conv2d(*ls, "sigmoid")))
    else:
        raise AssertionError(prim)

    check_against_fd(build, arrays)


def test_clip_gradient_zero_outside_interval():
    tape = ad.Tape()
    x = tape.tensor([-3.0, 0.0, 3.0])
    y = ad.sum_all(ad.clip(x, -1.0, 1.0))
    grads = tape.backward(y)
    assert np.array_equal(grads[x.nid], [0.0, 1.0, 0.0])


def test_mean_distributes_one_over_n():
    tape = ad.Tape()
    x = tape.tensor(np.arange(8.0).reshape(4, 2))
    y = ad.sum_all(ad.mean_axis(x, 0))
    grads = tape.backward(y)
    assert np.array_equal(grads[x.nid], np.full((4, 2), 0.25))


def test_backward_deterministic_bitwise():
    def run():
        rng = np.random.default_rng(99)
        tape = ad.Tape()
        x = tape.tensor(rng.uniform(-2, 2, (5, 3)))
        w = tape.tensor(rng.uniform(-2, 2, (3, 3)))
        b = tape.tensor(rng.uniform(-2, 2, 3))
        h = ad.affine(x, w, b, "sigmoid")
        y = ad.sum_all(ad.square(ad.add(h, ad.mul(h, h))))  # fan-out on h
        grads = tape.backward(y)
        return [np.asarray(grads[t.nid]).copy() for t in (x, w, b)]

    first, second = run(), run()
    for a, b in zip(first, second):
        assert np.array_equal(a, b)


def test_fanout_accumulates_sum():
    tape = ad.Tape()
    x = tape.tensor([2.0])
    y = ad.sum_all(ad.add(ad.square(x), ad.scale(x, 3.0)))  # x^2 + 3x
    grads = tape.backward(y)
    assert grads[x.nid][0] == pytest.approx(7.0, abs=1e-12)


def test_no_grad_tape_computes_but_keeps_nothing():
    tape = ad.Tape(grad=False)
    x = tape.tensor([1.0, 2.0])
    y = ad.square(x)
    assert np.array_equal(y.value, [1.0, 4.0])
    assert len(tape) == 0
    with pytest.raises(ad.AutodiffError):
        tape.backward(y)


def test_dense_chain_agrees_with_affine_composition():
    rng = np.random.default_rng(5)
    x = rng.uniform(-2, 2, (6, 3))
    w1, b1 = rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, 4)
    w2, b2 = rng.uniform(-1, 1, (4, 2)), rng.uniform(-1, 1, 2)
    tape = ad.Tape()
    ls = [tape.tensor(a) for a in (x, w1, b1, w2, b2)]
    fused = ad.dense_chain(ls[0], [(ls[1], ls[2]), (ls[3], ls[4])])
    chained = ad.affine(ad.affine(ls[0], ls[1], ls[2], "sigmoid"),
                        ls[3], ls[4], "linear")
    assert np.array_equal(fused.value, chained.value)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=1, max_size=12))
def test_sum_gradient_is_ones(values):
    tape = ad.Tape()
    x = tape.tensor(values)
    grads = tape.backward(ad.sum_all(x))
    assert np.array_equal(grads[x.nid], np.ones(len(values)))


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 30))
def test_mean_over_particles_gradient(n):
    tape = ad.Tape()
    x = tape.tensor(np.linspace(-1.0, 1.0, n)[:, None])
    grads = tape.backward(ad.mean_all(x))
    assert np.allclose(grads[x.nid], 1.0 / n, rtol=0, atol=1e-16)
