import numpy as np
import pytest

from melrecon.autodiff import Tape, apply_op
from melrecon.tensor import ComplexTensor, MemoryLedger, RealTensor, add, conv_nd

from oracles import central_diff


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def n_op_nodes(tape):
    return sum(1 for n in tape.nodes if n.op_kind not in ("leaf", "const"))


# --- recording ----------------------------------------------------------------


def test_record_matches_untaped_bitwise():
    rng = np.random.default_rng(0)
    x = ComplexTensor(crandn(rng, 4, 4))
    y = ComplexTensor(crandn(rng, 4, 4))
    tape = Tape()
    out = tape.record("add", x, y)
    assert np.array_equal(out.data, add(x, y).data)


def test_tape_appends_one_node_per_op():
    rng = np.random.default_rng(1)
    x = ComplexTensor(crandn(rng, 3, 3))
    tape = Tape()
    tape.watch(x)
    h = tape.record("scale", x, a=2.0)
    h = tape.record("add", h, x)
    h = tape.record("fft", h)
    assert n_op_nodes(tape) == 3


def test_retained_bytes_hand_count():
    # conv saves x (1x4x4 = 128 B) and w (1x1x3x3 = 72 B); relu saves its
    # input (128 B); add saves nothing. Total 328 bytes.
    rng = np.random.default_rng(2)
    x = RealTensor(rng.standard_normal((1, 4, 4)))
    w = RealTensor(rng.standard_normal((1, 1, 3, 3)))
    b = RealTensor(np.zeros(1))
    led = MemoryLedger()
    tape = Tape(ledger=led)
    tape.watch(x)
    tape.watch(w)
    h = tape.record("conv", x, w, b)
    h = tape.record("relu", h)
    tape.record("add", h, x)
    assert tape.retained_bytes == 328
    assert led.live_bytes == 328


def test_record_on_disposed_tape_fails():
    tape = Tape()
    tape.dispose()
    with pytest.raises(ValueError):
        tape.record("scale", RealTensor(np.zeros(3)), a=1.0)


# --- backward -----------------------------------------------------------------


def test_backward_linear_scale():
    x = ComplexTensor(np.ones((4, 4)))
    tape = Tape()
    tape.watch(x)
    out = tape.record("scale", x, a=3.0)
    g = tape.backward(out, ComplexTensor(np.ones((4, 4))), [x])
    assert np.allclose(g[x.alloc_id].data, 3.0 * np.ones((4, 4)))


def test_relu_gradient_at_positive_and_zero():
    x = RealTensor(np.array([2.0, -1.0, 0.0]).reshape(1, 1, 3))
    tape = Tape()
    tape.watch(x)
    out = tape.record("relu", x)
    g = tape.backward(out, RealTensor(np.ones((1, 1, 3))), [x])
    assert g[x.alloc_id].data.tolist() == [[[1.0, 0.0, 0.0]]]


def test_conv_weight_grad_matches_finite_differences():
    rng = np.random.default_rng(3)
    xa = rng.standard_normal((1, 4, 4))
    wa = rng.standard_normal((1, 1, 3, 3))
    ba = np.zeros(1)

    def loss_of(warr):
        h = conv_nd(RealTensor(xa), RealTensor(warr), RealTensor(ba))
        return 0.5 * float(np.vdot(h.data, h.data).real)

    x = RealTensor(xa)
    w = RealTensor(wa)
    tape = Tape()
    tape.watch(w)
    h = tape.record("conv", x, w, RealTensor(ba))
    out = tape.record("scale", tape.record("dot", h, h), a=0.5)
    g = tape.backward(out, RealTensor(1.0), [w])[w.alloc_id].data

    fd = central_diff(loss_of, wa.copy(), h=1e-6)
    assert np.linalg.norm(g - fd) <= 1e-6 * np.linalg.norm(fd)


def test_conv_input_and_bias_grads_match_finite_differences():
    rng = np.random.default_rng(4)
    xa = rng.standard_normal((2, 4, 4))
    wa = rng.standard_normal((3, 2, 3, 3)) * 0.5
    ba = rng.standard_normal(3)
    t = rng.standard_normal((3, 4, 4))

    def loss_parts(xarr, barr):
        h = conv_nd(RealTensor(xarr), RealTensor(wa), RealTensor(barr))
        d = h.data - t
        return 0.5 * float((d * d).sum())

    x = RealTensor(xa)
    b = RealTensor(ba)
    tape = Tape()
    tape.watch(x)
    tape.watch(b)
    h = tape.record("conv", x, RealTensor(wa), b)
    d = tape.record("add", h, RealTensor(-t))
    out = tape.record("scale", tape.record("dot", d, d), a=0.5)
    g = tape.backward(out, RealTensor(1.0), [x, b])

    fd_x = central_diff(lambda a: loss_parts(a, ba), xa.copy())
    fd_b = central_diff(lambda a: loss_parts(xa, a), ba.copy())
    assert np.linalg.norm(g[x.alloc_id].data - fd_x) <= 1e-6 * np.linalg.norm(fd_x)
    assert np.linalg.norm(g[b.alloc_id].data - fd_b) <= 1e-6 * np.linalg.norm(fd_b)


def test_complex_composite_matches_finite_differences():
    # l1(ch2c(relu-free chain) ...) through casts, fft, mask and scale;
    # complex leaf checked channel-wise against the real-pair convention.
    rng = np.random.default_rng(5)
    xa = crandn(rng, 4, 4)
    mask = (rng.random((4, 4)) < 0.6).astype(float)
    target = crandn(rng, 4, 4)

    def fwd(x):
        k = apply_op("fft", x)
        k = apply_op("mask_mul", k, mask=mask)
        img = apply_op("ifft", k)
        img = apply_op("scale", img, a=1.3)
        return apply_op("l1", img, target=target)

    def loss_channels(ch):
        return fwd(ComplexTensor(ch[0] + 1j * ch[1])).item()

    x = ComplexTensor(xa)
    tape = Tape()
    tape.watch(x)
    k = tape.record("fft", x)
    k = tape.record("mask_mul", k, mask=mask)
    img = tape.record("ifft", k)
    img = tape.record("scale", img, a=1.3)
    out = tape.record("l1", img, target=target)
    g = tape.backward(out, RealTensor(1.0), [x])[x.alloc_id].data

    ch = np.stack([xa.real, xa.imag])
    fd = central_diff(loss_channels, ch.copy())
    got = np.stack([g.real, g.imag])
    assert np.linalg.norm(got - fd) <= max(1e-6, 1e-4 * np.linalg.norm(fd))


@pytest.mark.parametrize("kind,attrs", [("fft", {}), ("ifft", {}), ("c2ch", {}), ("scale", {"a": -1.7})])
def test_linear_op_adjoint_identity(kind, attrs):
    # <op(x), y> = <x, vjp(y)> in the real-pair inner product.
    rng = np.random.default_rng(6)
    x = ComplexTensor(crandn(rng, 6, 6))
    tape = Tape()
    tape.watch(x)
    out = tape.record(kind, x, **attrs)
    if isinstance(out, ComplexTensor):
        y = ComplexTensor(crandn(rng, *out.shape))
        lhs = np.vdot(y.data, out.data).real
    else:
        y = RealTensor(rng.standard_normal(out.shape))
        lhs = float(np.vdot(y.data, out.data))
    g = tape.backward(out, y, [x])[x.alloc_id].data
    rhs = np.vdot(g, x.data).real
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def test_sens_mul_adjoint_identity():
    rng = np.random.default_rng(7)
    maps = crandn(rng, 3, 5, 5)
    x = ComplexTensor(crandn(rng, 5, 5))
    tape = Tape()
    tape.watch(x)
    out = tape.record("sens_mul", x, maps=maps)
    assert out.shape == (3, 5, 5)
    y = ComplexTensor(crandn(rng, 3, 5, 5))
    g = tape.backward(out, y, [x])[x.alloc_id].data
    lhs = np.vdot(y.data, out.data).real
    rhs = np.vdot(g, x.data).real
    assert abs(lhs - rhs) <= 1e-10 * abs(lhs)


def test_vjp_linear_in_seed():
    rng = np.random.default_rng(8)
    x = ComplexTensor(crandn(rng, 4, 4))
    tape = Tape()
    tape.watch(x)
    out = tape.record("fft", tape.record("scale", x, a=0.7))
    s1 = crandn(rng, 4, 4)
    s2 = crandn(rng, 4, 4)
    a, b = 1.3, -2.1
    g1 = tape.backward(out, ComplexTensor(s1), [x])[x.alloc_id].data
    g2 = tape.backward(out, ComplexTensor(s2), [x])[x.alloc_id].data
    g12 = tape.backward(out, ComplexTensor(a * s1 + b * s2), [x])[x.alloc_id].data
    assert np.linalg.norm(g12 - (a * g1 + b * g2)) <= 1e-12 * np.linalg.norm(g12)


def test_backward_error_cases():
    rng = np.random.default_rng(9)
    x = ComplexTensor(crandn(rng, 3, 3))
    other = ComplexTensor(crandn(rng, 3, 3))
    tape = Tape()
    tape.watch(x)
    out = tape.record("scale", x, a=1.0)
    with pytest.raises(ValueError):
        tape.backward(out, ComplexTensor(np.zeros((2, 2))), [x])
    with pytest.raises(ValueError):
        tape.backward(out, ComplexTensor(np.zeros((3, 3))), [other])
    with pytest.raises(ValueError):
        tape.backward(other, ComplexTensor(np.zeros((3, 3))), [x])


def test_unreached_leaf_gets_zero_gradient():
    rng = np.random.default_rng(10)
    x = ComplexTensor(crandn(rng, 3, 3))
    unused = ComplexTensor(crandn(rng, 3, 3))
    tape = Tape()
    tape.watch(x)
    tape.watch(unused)
    out = tape.record("scale", x, a=2.0)
    g = tape.backward(out, ComplexTensor(np.ones((3, 3))), [x, unused])
    assert np.all(g[unused.alloc_id].data == 0)
    assert g[unused.alloc_id].shape == unused.shape


# --- disposal -------------------------------------------------------------------


def test_dispose_releases_ledger():
    rng = np.random.default_rng(11)
    led = MemoryLedger()
    before = led.live_bytes
    tape = Tape(ledger=led)
    x = RealTensor(rng.standard_normal((1, 4, 4)))
    tape.watch(x)
    tape.record("relu", tape.record("relu", x))
    assert led.live_bytes > before
    tape.dispose()
    assert led.live_bytes == before
    tape.dispose()  # idempotent
    assert led.live_bytes == before


def test_sequential_scoped_tapes_peak_is_single_graph():
    rng = np.random.default_rng(12)
    led = MemoryLedger()

    def one_graph():
        tape = Tape(ledger=led)
        x = RealTensor(rng.standard_normal((1, 8, 8)))
        tape.watch(x)
        h = x
        for _ in range(3):
            h = tape.record("relu", h)
        single = tape.retained_bytes
        tape.dispose()
        return single

    singles = [one_graph() for _ in range(6)]
    assert led.live_bytes == 0
    assert led.peak_bytes == max(singles)  # not the sum
