"""Forward-pass goldens, initialization, Adam, and snapshot round-trips."""

import numpy as np
import pytest
from scipy.special import expit

from mfcontrol import autodiff as ad
from mfcontrol import networks as nets


def register_mlp(tape, mlp):
    return [(tape.tensor(l.w), tape.tensor(l.b)) for l in mlp.layers]


def manual_mlp(layers, x):
    """Plain-loop reference forward pass, independent of the tape kernels."""
    h = np.atleast_2d(x)
    for w, b in layers[:-1]:
        h = expit(h @ w + b)
    w, b = layers[-1]
    return h @ w + b


# --- feed-forward ----------------------------------------------------------


def test_zero_weights_give_zero_output():
    mlp = nets.Mlp([nets.Dense(np.zeros((3, 4)), np.zeros(4)),
                    nets.Dense(np.zeros((4, 2)), np.zeros(2))])
    tape = ad.Tape(grad=False)
    out = nets.mlp_forward(register_mlp(tape, mlp), tape.tensor([[1.0, -2.0, 3.0]]))
    assert np.array_equal(out.value, np.zeros((1, 2)))


def test_identity_single_layer_is_identity():
    mlp = nets.Mlp([nets.Dense(np.eye(3), np.zeros(3))])
    tape = ad.Tape(grad=False)
    x = np.array([[0.3, -1.2, 2.0]])
    out = nets.mlp_forward(register_mlp(tape, mlp), tape.tensor(x))
    assert np.array_equal(out.value, x)


def test_one_two_one_sigmoid_golden():
    # weights 1, biases 0, input 0: hidden = (0.5, 0.5), linear out = 1.0
    mlp = nets.Mlp([nets.Dense(np.ones((1, 2)), np.zeros(2)),
                    nets.Dense(np.ones((2, 1)), np.zeros(1))])
    tape = ad.Tape(grad=False)
    out = nets.mlp_forward(register_mlp(tape, mlp), tape.tensor([[0.0]]))
    assert out.value[0, 0] == pytest.approx(1.0, abs=1e-15)


def test_mlp_matches_manual_reference():
    rng = np.random.default_rng(7)
    mlp = nets.init_mlp(4, (6, 5), 2, rng)
    x = rng.uniform(-2, 2, (9, 4))
    tape = ad.Tape(grad=False)
    out = nets.mlp_forward(register_mlp(tape, mlp), tape.tensor(x))
    ref = manual_mlp([(l.w, l.b) for l in mlp.layers], x)
    assert np.allclose(out.value, ref, rtol=0, atol=1e-14)


def test_width_mismatch_raises():
    mlp = nets.Mlp([nets.Dense(np.zeros((3, 4)), np.zeros(4))])
    tape = ad.Tape(grad=False)
    with pytest.raises(ad.ShapeError):
        nets.mlp_forward(register_mlp(tape, mlp), tape.tensor([[1.0, 2.0]]))


# --- permutation-invariant network ------------------------------------------


def build_sym(rng, d=2, hidden=(8, 8), out=5):
    return nets.init_symmetric(d, hidden, out, rng)


def sym_out(sym, batch):
    tape = ad.Tape(grad=False)
    inner = [(tape.tensor(l.w), tape.tensor(l.b)) for l in sym.inner]
    outer = (tape.tensor(sym.outer.w), tape.tensor(sym.outer.b))
    return nets.symmetric_forward(inner, outer, tape.tensor(batch)).value


def test_symmetric_single_particle_equals_direct_composition():
    rng = np.random.default_rng(3)
    sym = build_sym(rng)
    x = rng.uniform(-1, 1, (1, 2))
    h = x
    for l in sym.inner:
        h = expit(h @ l.w + l.b)
    expected = h @ sym.outer.w + sym.outer.b
    assert np.allclose(sym_out(sym, x), expected, rtol=0, atol=1e-15)


def test_symmetric_permutation_invariance_hundred_perms():
    rng = np.random.default_rng(4)
    sym = build_sym(rng)
    batch = rng.uniform(-2, 2, (17, 2))
    base = sym_out(sym, batch)
    worst = 0.0
    for _ in range(100):
        perm = rng.permutation(17)
        worst = max(worst, float(np.max(np.abs(sym_out(sym, batch[perm]) - base))))
    assert worst <= 1e-10


def test_symmetric_duplicated_batch_matches_singleton():
    rng = np.random.default_rng(5)
    sym = build_sym(rng)
    x = rng.uniform(-1, 1, (1, 2))
    doubled = np.vstack([x, x])
    assert np.allclose(sym_out(sym, doubled), sym_out(sym, x), rtol=0, atol=1e-12)


def test_symmetric_rejects_empty_batch():
    rng = np.random.default_rng(6)
    sym = build_sym(rng)
    with pytest.raises(Exception):
        sym_out(sym, np.zeros((0, 2)))


# --- convolutional stack ----------------------------------------------------


def test_conv_spatial_arithmetic_1d():
    rng = np.random.default_rng(8)
    net = nets.init_conv_net((32,), (8, 4, 2), channels=6, dense=100, out_dim=5,
                             rng=rng)
    assert [c.k.shape[0] for c in net.convs] == [8, 4, 2]
    tape = ad.Tape(grad=False)
    x = tape.tensor(rng.uniform(0, 1, (32, 1)))
    h = x
    extents = []
    convs = [(tape.tensor(c.k), tape.tensor(c.b)) for c in net.convs]
    for k, b in convs:
        h = ad.conv1d(h, k, b, "sigmoid")
        extents.append(h.shape[0])
    assert extents == [25, 22, 21]


def test_conv_spatial_arithmetic_2d():
    rng = np.random.default_rng(9)
    net = nets.init_conv_net((16, 16), ((8, 8), (4, 4), (2, 2)), channels=6,
                             dense=100, out_dim=5, rng=rng)
    tape = ad.Tape(grad=False)
    h = tape.tensor(rng.uniform(0, 1, (16, 16, 1)))
    extents = []
    for c in net.convs:
        h = ad.conv2d(h, tape.tensor(c.k), tape.tensor(c.b), "sigmoid")
        extents.append(h.shape[:2])
    assert extents == [(9, 9), (6, 6), (5, 5)]


def test_conv_kernel_larger_than_input_rejected():
    rng = np.random.default_rng(10)
    with pytest.raises(nets.NetworkError, match="kernel"):
        nets.init_conv_net((4,), (8,), channels=2, dense=8, out_dim=5, rng=rng)


def manual_conv_net(net, hist):
    """Independent plain-loop conv reference (no stride tricks, no einsum)."""
    h = hist
    for c in net.convs:
        if h.ndim == 2:
            kk, ci, co = c.k.shape
            pos = h.shape[0] - kk + 1
            z = np.zeros((pos, co))
            for p in range(pos):
                for f in range(co):
                    z[p, f] = np.sum(h[p:p + kk, :] * c.k[:, :, f]) + c.b[f]
        else:
            kh, kw, ci, co = c.k.shape
            ph, pw = h.shape[0] - kh + 1, h.shape[1] - kw + 1
            z = np.zeros((ph, pw, co))
            for p in range(ph):
                for qq in range(pw):
                    for f in range(co):
                        z[p, qq, f] = np.sum(h[p:p + kh, qq:qq + kw, :]
                                             * c.k[:, :, :, f]) + c.b[f]
        h = expit(z)
    flat = h.reshape(1, -1)
    return manual_mlp([(l.w, l.b) for l in net.head], flat)


def test_conv_net_matches_manual_reference_and_golden():
    rng = np.random.default_rng(11)
    net = nets.init_conv_net((12,), (4, 3), channels=3, dense=6, out_dim=5, rng=rng)
    hist = np.zeros((12, 1))  # all-zero histogram: pure sigmoid cascade
    tape = ad.Tape(grad=False)
    convs = [(tape.tensor(c.k), tape.tensor(c.b)) for c in net.convs]
    head = [(tape.tensor(l.w), tape.tensor(l.b)) for l in net.head]
    out = nets.conv_net_forward(convs, head, tape.tensor(hist))
    ref = manual_conv_net(net, hist)
    assert np.allclose(out.value, ref, rtol=0, atol=1e-12)
    rng2 = np.random.default_rng(12)
    hist2 = rng2.uniform(0, 1, (12, 1))
    tape2 = ad.Tape(grad=False)
    convs2 = [(tape2.tensor(c.k), tape2.tensor(c.b)) for c in net.convs]
    head2 = [(tape2.tensor(l.w), tape2.tensor(l.b)) for l in net.head]
    out2 = nets.conv_net_forward(convs2, head2, tape2.tensor(hist2))
    assert np.allclose(out2.value, manual_conv_net(net, hist2), rtol=0, atol=1e-12)


def test_conv2d_net_matches_manual_reference():
    rng = np.random.default_rng(13)
    net = nets.init_conv_net((7, 7), ((3, 3), (2, 2)), channels=2, dense=5,
                             out_dim=3, rng=rng)
    hist = rng.uniform(0, 1, (7, 7, 1))
    tape = ad.Tape(grad=False)
    convs = [(tape.tensor(c.k), tape.tensor(c.b)) for c in net.convs]
    head = [(tape.tensor(l.w), tape.tensor(l.b)) for l in net.head]
    out = nets.conv_net_forward(convs, head, tape.tensor(hist))
    assert np.allclose(out.value, manual_conv_net(net, hist), rtol=0, atol=1e-12)


# --- initialization ----------------------------------------------------------


def test_init_deterministic_given_seed():
    a = nets.init_mlp(3, (8, 8), 2, np.random.default_rng(np.random.Philox(key=42)))
    b = nets.init_mlp(3, (8, 8), 2, np.random.default_rng(np.random.Philox(key=42)))
    for la, lb in zip(a.layers, b.layers):
        assert np.array_equal(la.w, lb.w) and np.array_equal(la.b, lb.b)


def test_init_differs_across_seeds():
    a = nets.init_mlp(3, (8,), 2, np.random.default_rng(np.random.Philox(key=1)))
    b = nets.init_mlp(3, (8,), 2, np.random.default_rng(np.random.Philox(key=2)))
    assert not np.array_equal(a.layers[0].w, b.layers[0].w)


def test_init_magnitudes_within_glorot_bound():
    rng = np.random.default_rng(14)
    mlp = nets.init_mlp(10, (20,), 5, rng)
    for lay in mlp.layers:
        fi, fo = lay.w.shape
        bound = np.sqrt(6.0 / (fi + fo))
        assert np.max(np.abs(lay.w)) <= bound
        assert np.array_equal(lay.b, np.zeros(fo))


# --- Adam --------------------------------------------------------------------


def test_adam_zero_gradient_leaves_params():
    rng = np.random.default_rng(15)
    p = rng.uniform(-1, 1, (3, 3))
    before = p.copy()
    state = nets.adam_init([p], lr=1e-3)
    nets.adam_step([("w", p)], [np.zeros_like(p)], state)
    assert np.array_equal(p, before)
    assert state.step == 1


def test_adam_constant_gradient_reaches_unit_lr_steps():
    p = np.zeros(4)
    g = np.full(4, 2.5)
    state = nets.adam_init([p], lr=1e-3)
    prev = p.copy()
    for _ in range(300):
        prev = p.copy()
        nets.adam_step([("w", p)], [g.copy()], state)
    # late steps move by ~ -lr * sign(g)
    assert np.allclose(p - prev, -1e-3, rtol=1e-3)


def test_adam_first_step_closed_form():
    p = np.zeros(1)
    state = nets.adam_init([p], lr=1e-3)
    nets.adam_step([("w", p)], [np.ones(1)], state)
    expected = -1e-3 * 1.0 / (1.0 + 1e-8)
    assert p[0] == pytest.approx(expected, rel=1e-12)


def test_adam_nan_gradient_names_block():
    p = np.zeros(2)
    state = nets.adam_init([p], lr=1e-3)
    with pytest.raises(nets.NetworkError, match="control0.l1.w"):
        nets.adam_step([("control0.l1.w", p)], [np.array([1.0, np.nan])], state)


def test_sgd_step_moves_against_gradient():
    p = np.zeros(2)
    nets.sgd_step([("w", p)], [np.array([1.0, -2.0])], lr=0.1)
    assert np.allclose(p, [-0.1, 0.2], atol=1e-15)


# --- snapshots ---------------------------------------------------------------


def test_snapshot_roundtrip(tmp_path):
    rng = np.random.default_rng(16)
    mlp = nets.init_mlp(3, (4,), 2, rng)
    named = nets.named_arrays(mlp, "net")
    path = tmp_path / "weights.ckpt"
    nets.save_arrays(path, named, {"kind": "test"})
    header, values = nets.load_arrays(path)
    assert header["kind"] == "test" and header["format"] == nets.SNAPSHOT_FORMAT
    for name, arr in named:
        assert np.array_equal(values[name], arr)


def test_snapshot_rejects_unknown_format(tmp_path):
    path = tmp_path / "weights.ckpt"
    path.write_bytes(b'{"format": 999}\n')
    with pytest.raises(nets.NetworkError, match="format"):
        nets.load_arrays(path)
