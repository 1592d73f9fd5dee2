import numpy as np
import pytest

from bonnet import ops
from bonnet.autodiff import Tape, backward, checkpointed_backward
from bonnet.errors import ConfigError, ShapeError
from bonnet.model import run_training
from conftest import conv_chain_graph, fd_vjp, rel_err

FD_TOL = 1e-4


def _redraw_until(rng, draw, ok, tries=50):
    for _ in range(tries):
        value = draw(rng)
        if ok(value):
            return value
    raise AssertionError("could not draw a smooth test point")


def _check_vjp(forward, inputs, arg_index, rng, tol=FD_TOL):
    out = forward(*inputs)
    grad_out = rng.normal(size=out.shape)
    kind_grads = fd_vjp(forward, inputs, arg_index, grad_out)
    return grad_out, kind_grads


def test_backward_sum_gives_ones(rng):
    tape = Tape()
    x = tape.leaf(rng.normal(size=(1, 2, 3, 3)), trainable=True)
    loss = tape.record("reduce_sum", {}, (x,))
    grads = backward(tape, loss)
    assert np.array_equal(grads[x], np.ones((1, 2, 3, 3)))


def test_backward_sum_of_squares(rng):
    tape = Tape()
    xv = rng.normal(size=(1, 2, 3, 3))
    x = tape.leaf(xv, trainable=True)
    sq = tape.record("mul", {}, (x, x))
    loss = tape.record("reduce_sum", {}, (sq,))
    grads = backward(tape, loss)
    assert np.allclose(grads[x], 2 * xv, atol=1e-14)


def test_backward_requires_scalar_loss(rng):
    tape = Tape()
    x = tape.leaf(rng.normal(size=(1, 2, 3, 3)), trainable=True)
    y = tape.record("relu", {}, (x,))
    with pytest.raises(ShapeError):
        backward(tape, y)


# --------------------------------------------------------------------------
# finite-difference checks, one per differentiable op (float64, step 1e-5)


def test_fd_conv2d(rng):
    x = rng.normal(size=(2, 3, 6, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    attrs = {"stride": 2, "padding": "same", "dilation": 1}

    def f(x_, w_, b_):
        return ops.forward("conv2d", attrs, x_, w_, b_)

    out = f(x, w, b)
    grad_out = rng.normal(size=out.shape)
    gx, gw, gb = ops.backward("conv2d", attrs, [x, w, b], out, grad_out)
    for idx, got in ((0, gx), (1, gw), (2, gb)):
        want = fd_vjp(f, [x, w, b], idx, grad_out)
        assert rel_err(got, want) < FD_TOL


def test_fd_conv2d_dilated(rng):
    x = rng.normal(size=(1, 2, 7, 7))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    attrs = {"stride": 1, "padding": "same", "dilation": 2}

    def f(x_, w_, b_):
        return ops.forward("conv2d", attrs, x_, w_, b_)

    out = f(x, w, b)
    grad_out = rng.normal(size=out.shape)
    grads = ops.backward("conv2d", attrs, [x, w, b], out, grad_out)
    for idx in range(3):
        want = fd_vjp(f, [x, w, b], idx, grad_out)
        assert rel_err(grads[idx], want) < FD_TOL


def test_fd_transposed_conv2d(rng):
    x = rng.normal(size=(1, 4, 3, 3))
    w = rng.normal(size=(4, 2, 3, 3))
    b = rng.normal(size=2)
    attrs = {"stride": 2}

    def f(x_, w_, b_):
        return ops.forward("transposed_conv2d", attrs, x_, w_, b_)

    out = f(x, w, b)
    grad_out = rng.normal(size=out.shape)
    grads = ops.backward("transposed_conv2d", attrs, [x, w, b], out, grad_out)
    for idx in range(3):
        want = fd_vjp(f, [x, w, b], idx, grad_out)
        assert rel_err(grads[idx], want) < FD_TOL


@pytest.mark.parametrize("mode", ["train", "infer"])
def test_fd_batch_norm(rng, mode):
    x = rng.normal(size=(3, 2, 4, 4))
    gamma = rng.normal(size=2) + 2.0
    beta = rng.normal(size=2)
    rm = rng.normal(size=2) * 0.1
    rv = rng.random(2) + 0.5
    attrs = {"eps": 1e-5, "mode": mode}

    def f(x_, g_, b_):
        return ops.forward("batch_norm", attrs, x_, g_, b_, rm, rv)

    out = f(x, gamma, beta)
    grad_out = rng.normal(size=out.shape)
    gx, gg, gb, _, _ = ops.backward("batch_norm", attrs, [x, gamma, beta, rm, rv],
                                    out, grad_out)
    for idx, got in ((0, gx), (1, gg), (2, gb)):
        want = fd_vjp(f, [x, gamma, beta], idx, grad_out)
        assert rel_err(got, want) < FD_TOL


def test_fd_relu(rng):
    # inputs within 1e-3 of zero are re-drawn (non-smooth points)
    x = _redraw_until(rng, lambda r: r.normal(size=(2, 3, 5, 5)),
                      lambda v: np.min(np.abs(v)) > 1e-3)

    def f(x_):
        return ops.forward("relu", {}, x_)

    out = f(x)
    grad_out = rng.normal(size=out.shape)
    (gx,) = ops.backward("relu", {}, [x], out, grad_out)
    want = fd_vjp(f, [x], 0, grad_out)
    assert rel_err(gx, want) < FD_TOL


def test_fd_max_pool(rng):
    # windows with near-ties are re-drawn (gradient routing would flip)
    def draw(r):
        return r.normal(size=(1, 2, 6, 6)) * 3

    def no_near_ties(v):
        attrs = {"window": 2, "stride": 2, "padding": "valid"}
        wins = np.lib.stride_tricks.sliding_window_view(v, (2, 2), axis=(2, 3))
        wins = wins[:, :, ::2, ::2].reshape(1, 2, 3, 3, -1)
        part = np.sort(wins, axis=-1)
        gap = part[..., -1] - part[..., -2]
        return np.min(gap) > 1e-3

    x = _redraw_until(rng, draw, no_near_ties)
    attrs = {"window": 2, "stride": 2, "padding": "valid"}

    def f(x_):
        return ops.forward("max_pool2d", attrs, x_)

    out = f(x)
    grad_out = rng.normal(size=out.shape)
    (gx,) = ops.backward("max_pool2d", attrs, [x], out, grad_out)
    want = fd_vjp(f, [x], 0, grad_out)
    assert rel_err(gx, want) < FD_TOL


def test_fd_softmax(rng):
    x = rng.normal(size=(1, 4, 3, 3))

    def f(x_):
        return ops.forward("softmax", {}, x_)

    out = f(x)
    grad_out = rng.normal(size=out.shape)
    (gx,) = ops.backward("softmax", {}, [x], out, grad_out)
    want = fd_vjp(f, [x], 0, grad_out)
    assert rel_err(gx, want) < FD_TOL


def test_fd_dropout_fixed_seed(rng):
    x = rng.normal(size=(1, 3, 4, 4)) + 4.0
    attrs = {"keep_prob": 0.7, "mode": "train", "seed": 99}

    def f(x_):
        return ops.forward("dropout", attrs, x_)

    out = f(x)
    grad_out = rng.normal(size=out.shape)
    (gx,) = ops.backward("dropout", attrs, [x], out, grad_out)
    want = fd_vjp(f, [x], 0, grad_out)
    assert rel_err(gx, want) < FD_TOL


def test_fd_resize_bilinear(rng):
    x = rng.normal(size=(1, 2, 4, 5))
    attrs = {"out_h": 7, "out_w": 9}

    def f(x_):
        return ops.forward("resize_bilinear", attrs, x_)

    out = f(x)
    grad_out = rng.normal(size=out.shape)
    (gx,) = ops.backward("resize_bilinear", attrs, [x], out, grad_out)
    want = fd_vjp(f, [x], 0, grad_out)
    assert rel_err(gx, want) < FD_TOL


def test_fd_concat_add(rng):
    x = rng.normal(size=(1, 2, 3, 3))
    y = rng.normal(size=(1, 3, 3, 3))
    out = ops.forward("concat", {}, x, y)
    grad_out = rng.normal(size=out.shape)
    gx, gy = ops.backward("concat", {}, [x, y], out, grad_out)
    assert rel_err(gx, fd_vjp(lambda a, b: ops.forward("concat", {}, a, b),
                              [x, y], 0, grad_out)) < FD_TOL
    assert rel_err(gy, fd_vjp(lambda a, b: ops.forward("concat", {}, a, b),
                              [x, y], 1, grad_out)) < FD_TOL

    z = rng.normal(size=(1, 2, 3, 3))
    out2 = ops.forward("add", {}, x, z)
    g2 = rng.normal(size=out2.shape)
    ga, gb = ops.backward("add", {}, [x, z], out2, g2)
    assert rel_err(ga, fd_vjp(lambda a, b: ops.forward("add", {}, a, b),
                              [x, z], 0, g2)) < FD_TOL
    assert rel_err(gb, fd_vjp(lambda a, b: ops.forward("add", {}, a, b),
                              [x, z], 1, g2)) < FD_TOL


def test_fd_focal_loss(rng):
    for gamma in (0.0, 0.5, 2.0):
        logits = rng.normal(size=(1, 3, 4, 4))
        labels = rng.integers(0, 3, size=(1, 4, 4))
        weights = rng.random(3) + 0.5
        attrs = {"gamma": gamma, "class_weights": weights}

        def f(z):
            return ops.forward("focal_loss", attrs, z, labels)

        out = f(logits)
        gz, _ = ops.backward("focal_loss", attrs, [logits, labels], out,
                             np.ones_like(out))
        want = fd_vjp(f, [logits], 0, np.ones(()))
        assert rel_err(gz, want) < FD_TOL


# --------------------------------------------------------------------------
# checkpointed backpropagation


def _chain_tape(segment_size, length=16, seed=3):
    graph = conv_chain_graph(length - 1, channels=2, seed=seed)
    rng = np.random.Generator(np.random.PCG64(seed + 100))
    x = rng.normal(size=(1, 2, 4, 4))
    tape = Tape(segment_size=segment_size)
    ids, _ = run_training(graph, x, tape, seed_base=0)
    loss = tape.record("reduce_sum", {}, (ids["logits"],))
    return tape, loss, ids


def test_checkpointed_matches_backward_bitwise_on_chain():
    full_tape, full_loss, _ = _chain_tape(segment_size=None)
    want = backward(full_tape, full_loss)

    ck_tape, ck_loss, _ = _chain_tape(segment_size=4)
    got = checkpointed_backward(ck_tape, ck_loss, 4)
    assert set(got) == set(want)
    for pid in want:
        assert np.array_equal(got[pid], want[pid]), f"param {pid} differs"


def test_checkpointed_retention_bound_sixteen_chain():
    # 16 recorded ops, segment 4: peak <= ceil(sqrt(16)) + 16/4 + 2 = 10, vs 16 full
    full_tape, full_loss, _ = _chain_tape(segment_size=None)
    backward(full_tape, full_loss)
    assert full_tape.meter.peak == 16

    ck_tape, ck_loss, _ = _chain_tape(segment_size=4)
    checkpointed_backward(ck_tape, ck_loss, 4)
    assert ck_tape.meter.peak <= 10


def test_segment_size_one_degenerates_to_full():
    full_tape, full_loss, _ = _chain_tape(segment_size=None)
    want = backward(full_tape, full_loss)
    one_tape, one_loss, _ = _chain_tape(segment_size=1)
    got = checkpointed_backward(one_tape, one_loss, 1)
    for pid in want:
        assert np.array_equal(got[pid], want[pid])
    # every node checkpointed: retention identical to full
    assert one_tape.meter.peak == full_tape.meter.peak


def test_checkpointed_triple_chain_sum(rng):
    tape = Tape(segment_size=2)
    x = tape.leaf(rng.normal(size=(1, 2, 3, 3)) + 10.0, trainable=True)
    a = tape.record("relu", {}, (x,))
    b = tape.record("relu", {}, (a,))
    loss = tape.record("reduce_sum", {}, (b,))
    grads = checkpointed_backward(tape, loss, 2)
    assert np.array_equal(grads[x], np.ones((1, 2, 3, 3)))


def test_segment_size_zero_rejected():
    with pytest.raises(ConfigError):
        Tape(segment_size=0)
    tape, loss, _ = _chain_tape(segment_size=None)
    with pytest.raises(ConfigError):
        checkpointed_backward(tape, loss, 0)


def _random_dag_tape(seed, segment_size):
    """Random small graph with residual adds, BN, dropout, pools, concat."""
    rng = np.random.Generator(np.random.PCG64(seed))
    tape = Tape(segment_size=segment_size)
    c = 3
    x = tape.leaf(rng.normal(size=(2, c, 8, 8)), trainable=True)
    frontier = [x]
    shapes = {x: (2, c, 8, 8)}
    params = [x]
    for i in range(int(rng.integers(6, 14))):
        choice = rng.integers(0, 6)
        src = frontier[-1]
        n, cc, h, w = shapes[src]
        if choice == 0:
            w_ = tape.leaf(rng.normal(size=(cc, cc, 3, 3)) * 0.4, trainable=True)
            b_ = tape.leaf(rng.normal(size=cc) * 0.1, trainable=True)
            params += [w_, b_]
            out = tape.record("conv2d", {"stride": 1, "padding": "same", "dilation": 1},
                              (src, w_, b_))
            shapes[out] = (n, cc, h, w)
        elif choice == 1:
            out = tape.record("relu", {}, (src,))
            shapes[out] = (n, cc, h, w)
        elif choice == 2:
            g_ = tape.leaf(rng.random(cc) + 0.5, trainable=True)
            be_ = tape.leaf(rng.normal(size=cc) * 0.1, trainable=True)
            rm = tape.leaf(np.zeros(cc))
            rv = tape.leaf(np.ones(cc))
            params += [g_, be_]
            out = tape.record("batch_norm", {"eps": 1e-5, "mode": "train"},
                              (src, g_, be_, rm, rv))
            shapes[out] = (n, cc, h, w)
        elif choice == 3:
            out = tape.record("dropout",
                              {"keep_prob": 0.8, "mode": "train", "seed": int(seed) + i},
                              (src,))
            shapes[out] = (n, cc, h, w)
        elif choice == 4 and len(frontier) >= 2 and shapes[frontier[-2]] == (n, cc, h, w):
            out = tape.record("add", {}, (src, frontier[-2]))
            shapes[out] = (n, cc, h, w)
        else:
            out = tape.record("mul", {}, (src, src))
            shapes[out] = (n, cc, h, w)
        frontier.append(out)
    loss = tape.record("reduce_sum", {}, (frontier[-1],))
    if segment_size is not None:
        # discard every non-checkpoint activation, as an executor would
        for node in tape.nodes:
            tape.release(node.out_id)
    return tape, loss, params


@pytest.mark.parametrize("seed", range(8))
def test_checkpointed_equals_backward_random_graphs(seed):
    for segment in (1, 2, 3, 5):
        full_tape, full_loss, _ = _random_dag_tape(seed, None)
        want = backward(full_tape, full_loss)
        ck_tape, ck_loss, _ = _random_dag_tape(seed, segment)
        got = checkpointed_backward(ck_tape, ck_loss, segment)
        assert set(got) == set(want)
        for pid in want:
            assert np.array_equal(got[pid], want[pid]), (
                f"seed {seed} segment {segment} param {pid}")


def test_dropout_backward_deterministic_per_seed(rng):
    xv = rng.normal(size=(1, 3, 6, 6))
    grads = []
    for _ in range(2):
        tape = Tape()
        x = tape.leaf(xv, trainable=True)
        d = tape.record("dropout", {"keep_prob": 0.5, "mode": "train", "seed": 17}, (x,))
        loss = tape.record("reduce_sum", {}, (d,))
        grads.append(backward(tape, loss)[x])
    assert np.array_equal(grads[0], grads[1])
