import numpy as np
import pytest

from hdrvqa import diffcore as dc
from hdrvqa.errors import NumericError, ParseError, ShapeError, StateError

from gradcheck import TOL, away_from_zero, check

SEEDS = range(20)


def uniform(rng, *shape, lo=-2.0, hi=2.0):
    return rng.uniform(lo, hi, size=shape)


def signed_away(rng, *shape, lo=0.5, hi=2.0):
    return rng.uniform(lo, hi, size=shape) * rng.choice([-1.0, 1.0], size=shape)


# forward examples

def test_affine_identity():
    out = dc.affine(dc.Tensor([1.0, 2.0]), np.eye(2), np.zeros(2))
    np.testing.assert_array_equal(out.data, [1.0, 2.0])


def test_relu_definition():
    np.testing.assert_array_equal(dc.relu(dc.Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_conv_ones_kernel_valid():
    out = dc.conv2d(np.ones((1, 1, 5, 5)), np.ones((1, 1, 3, 3)))
    np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 9.0))


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(3)
    x, w, b = rng.normal(size=(2, 3, 7, 6)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    for stride, pad in [(1, 0), (2, 1), (2, 0), (1, 1)]:
        out = dc.conv2d(x, w, b, stride, pad).data
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        ho, wo = (xp.shape[2] - 3) // stride + 1, (xp.shape[3] - 3) // stride + 1
        ref = np.zeros((2, 4, ho, wo))
        for n in range(2):
            for o in range(4):
                for i in range(ho):
                    for j in range(wo):
                        patch = xp[n, :, i * stride:i * stride + 3, j * stride:j * stride + 3]
                        ref[n, o, i, j] = np.sum(patch * w[o]) + b[o]
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_square_backward():
    x = dc.Tensor(3.0, requires_grad=True)
    (x ** 2).backward(1.0)
    assert x.grad == 6.0


def test_linear_backward():
    w = dc.Tensor([1.0, 1.0], requires_grad=True)
    dc.sum_(dc.mul(w, [2.0, 5.0])).backward()
    np.testing.assert_array_equal(w.grad, [2.0, 5.0])


# gradient suite

def _ops(rng):
    """(name, fn, inputs) triples covering every differentiable op."""
    a, b = uniform(rng, 3, 4), uniform(rng, 3, 4)
    yield "add", lambda a, b: dc.add(a, b), {"a": a, "b": uniform(rng, 4)}
    yield "sub", lambda a, b: dc.sub(a, b), {"a": a, "b": uniform(rng, 3, 1)}
    yield "mul", lambda a, b: dc.mul(a, b), {"a": a, "b": b}
    yield "div", lambda a, b: dc.div(a, b), {"a": a, "b": signed_away(rng, 3, 4)}
    yield "neg", lambda a: dc.neg(a), {"a": a}
    yield "square", lambda a: dc.power(a, 2), {"a": a}
    yield "cube", lambda a: dc.power(a, 3), {"a": a}
    yield "sqrt", lambda a: dc.sqrt(a), {"a": uniform(rng, 3, 4, lo=0.2, hi=2.0)}
    yield "relu", lambda a: dc.relu(a), {"a": away_from_zero(a)}
    yield "sum", lambda a: dc.sum_(a, axis=1), {"a": a}
    yield "sum_all", lambda a: dc.sum_(a), {"a": a}
    yield "mean", lambda a: dc.mean(a, axis=0, keepdims=True), {"a": a}
    yield "reshape", lambda a: dc.reshape(a, (2, 6)), {"a": a}
    yield "transpose", lambda a: dc.transpose(dc.reshape(a, (3, 2, 2)), (2, 0, 1)), {"a": a}
    yield "getitem", lambda a: dc.getitem(a, (slice(0, 2), [0, 0, 3])), {"a": a}
    yield "concat", lambda a, b: dc.concat([a, b], axis=1), {"a": a, "b": uniform(rng, 3, 2)}
    yield "matmul", lambda a, b: dc.matmul(a, b), {"a": a, "b": uniform(rng, 4, 5)}
    yield "affine", lambda x, w, b: dc.affine(x, w, b), \
        {"x": a, "w": uniform(rng, 4, 5), "b": uniform(rng, 5)}
    x = uniform(rng, 2, 2, 6, 5)
    yield "conv_s1_p1", lambda x, w, b: dc.conv2d(x, w, b, 1, 1), \
        {"x": x, "w": uniform(rng, 3, 2, 3, 3), "b": uniform(rng, 3)}
    yield "conv_s2_p0", lambda x, w: dc.conv2d(x, w, None, 2, 0), {"x": x, "w": uniform(rng, 3, 2, 3, 3)}
    yield "spatial_mean", lambda x: dc.spatial_mean(x), {"x": x}
    yield "spatial_var", lambda x: dc.spatial_var(x), {"x": x}
    yield "spatial_cov", lambda x, y: dc.spatial_cov(x, y), {"x": x, "y": uniform(rng, 2, 2, 6, 5)}


@pytest.mark.parametrize("seed", SEEDS)
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    for name, fn, inputs in _ops(rng):
        err = check(fn, inputs, seed)
        assert err < TOL, f"{name}: relative error {err:.2e}"


def test_composite_graph_gradient():
    rng = np.random.default_rng(0)

    def fn(x, w):
        h = dc.relu(dc.conv2d(x, w, None, 2, 1))
        mu = dc.spatial_mean(h)
        return dc.div(dc.sum_(dc.mul(mu, mu)), dc.add(dc.sum_(dc.spatial_var(h, mu)), 1.0))

    assert check(fn, {"x": uniform(rng, 2, 3, 8, 8), "w": uniform(rng, 4, 3, 3, 3)}) < TOL


# determinism and linearity

def test_forward_bit_identical():
    rng = np.random.default_rng(1)
    x, w = uniform(rng, 2, 3, 9, 9), uniform(rng, 4, 3, 3, 3)
    a = dc.conv2d(x, w, None, 2, 1).data
    b = dc.conv2d(x.copy(), w.copy(), None, 2, 1).data
    assert a.tobytes() == b.tobytes()


def test_gradient_of_sum_is_sum_of_gradients():
    rng = np.random.default_rng(2)
    wv, x1, x2 = uniform(rng, 4, 3), uniform(rng, 5, 4), uniform(rng, 5, 4)

    def grad(loss_fn):
        w = dc.Tensor(wv, requires_grad=True)
        loss_fn(w).backward()
        return w.grad

    l1 = lambda w: dc.sum_(dc.relu(dc.matmul(x1, w)))
    l2 = lambda w: dc.sum_(dc.power(dc.matmul(x2, w), 2))
    both = grad(lambda w: dc.add(l1(w), l2(w)))
    np.testing.assert_allclose(both, grad(l1) + grad(l2), rtol=1e-14, atol=1e-12)


# errors

def test_shape_error_names_node():
    with pytest.raises(ShapeError, match=r"\[matmul\]"):
        dc.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeError, match=r"\[add\]"):
        dc.add(np.ones(3), np.ones(4))


def test_backward_gradient_shape_checked():
    x = dc.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        dc.mul(x, 2.0).backward(np.ones(2))


def test_graph_forward_backward():
    params = {"w": np.array([1.0, 1.0]), "c": np.array([3.0])}
    g = dc.Graph(lambda p, x: dc.add(dc.sum_(dc.mul(p["w"], x)), dc.sum_(p["c"])), params, trainable=["w"],
                 input_shapes={"x": (2,)})
    with pytest.raises(StateError):
        g.backward()
    assert g.forward(x=np.array([2.0, 5.0])).item() == 10.0
    grads = g.backward()
    assert set(grads) == {"w"}
    np.testing.assert_array_equal(grads["w"], [2.0, 5.0])
    with pytest.raises(ShapeError, match="input:x"):
        g.forward(x=np.ones(3))


# Adam

def test_adam_zero_gradient_is_noop():
    p = {"x": np.array([1.5, -2.0])}
    opt = dc.Adam()
    for _ in range(5):
        opt.step(p, {"x": np.zeros(2)}, 0.1)
    np.testing.assert_array_equal(p["x"], [1.5, -2.0])


def test_adam_first_step_magnitude_is_lr():
    p = {"x": np.array([0.0])}
    dc.adam_step(dc.Adam(), p, {"x": np.array([1.0])}, 0.1)
    assert p["x"][0] == pytest.approx(-0.1, rel=1e-6)


# trajectory of x for (x - 2)^2 from x=0, lr=0.3, frozen from an independent Adam implementation
ADAM_QUADRATIC = [0.29999999925, 0.5977546713950153, 0.8910885201693453, 1.177149147153857,
                  1.4522870854151941, 1.712011804954173, 1.9511157108801513, 2.1640610658293715,
                  2.3456512111511647, 2.4918470390594183]


def test_adam_quadratic_trajectory():
    p = {"x": np.array([0.0])}
    opt = dc.Adam()
    traj = []
    for _ in range(10):
        opt.step(p, {"x": 2 * (p["x"] - 2.0)}, 0.3)
        traj.append(p["x"][0])
    np.testing.assert_allclose(traj, ADAM_QUADRATIC, rtol=0, atol=1e-12)
    # distance to the optimum shrinks until the momentum carries x past it at step 8
    dist = [2.0] + [abs(x - 2.0) for x in traj]
    assert all(b < a for a, b in zip(dist[:8], dist[1:8]))
    assert dist[8] > dist[7]


def test_adam_rejects_bad_input():
    with pytest.raises(NumericError, match="'x'"):
        dc.Adam().step({"x": np.zeros(2)}, {"x": np.array([0.0, np.nan])}, 0.1)
    with pytest.raises(ValueError):
        dc.Adam().step({"x": np.zeros(2)}, {"x": np.zeros(2)}, -1.0)


# checkpoint container

def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a.w": rng.normal(size=(3, 4)), "b": rng.normal(size=5), "s": np.array(2.5)}
    path = tmp_path / "m.ckpt"
    dc.save_checkpoint(path, tensors, {"kind": "FR", "n": 3})
    blob = path.read_bytes()
    assert blob[:8] == b"VQAF0001"
    back, meta = dc.load_checkpoint(path)
    assert meta == {"kind": "FR", "n": 3}
    for k, v in tensors.items():
        assert back[k].tobytes() == v.tobytes() and back[k].shape == v.shape


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "m.ckpt"
    dc.save_checkpoint(path, {"w": np.ones(10)})
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ParseError, match="truncated"):
        dc.load_checkpoint(path)
    path.write_bytes(b"NOTACKPT" + b"\0" * 8)
    with pytest.raises(ParseError, match="magic"):
        dc.load_checkpoint(path)
