import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from skewles.closures import layout_for, make_model
from skewles.nn import (
    AdamConfig, CnnSpec, Layer, NonFiniteGradient, ParamStore, ShapeMismatch, adam_step, checkpoint_bytes,
    conv2d_periodic, conv2d_periodic_transpose, forward_cnn, init_params, load_checkpoint, save_checkpoint,
)


def loop_conv(x, w, b):
    """Direct periodic cross-correlation with explicit loops."""
    cin, ny, nx = x.shape
    cout, _, k, _ = w.shape
    r = k // 2
    out = np.zeros((cout, ny, nx))
    for o in range(cout):
        for j in range(ny):
            for i in range(nx):
                acc = b[o]
                for c in range(cin):
                    for dk in range(-r, r + 1):
                        for dl in range(-r, r + 1):
                            acc += w[o, c, dk + r, dl + r] * x[c, (j + dk) % ny, (i + dl) % nx]
                out[o, j, i] = acc
    return out


def test_identity_kernel():
    x = torch.randn(1, 7, 6, dtype=torch.float64)
    w = torch.zeros(1, 1, 5, 5, dtype=torch.float64)
    w[0, 0, 2, 2] = 1
    assert torch.equal(conv2d_periodic(x, w), x)


def test_conv_matches_loop_oracle(rng):
    x = rng.standard_normal((1, 5, 5))
    w = rng.standard_normal((1, 1, 5, 5))
    b = rng.standard_normal(1)
    got = conv2d_periodic(torch.tensor(x), torch.tensor(w), torch.tensor(b)).numpy()
    assert np.abs(got - loop_conv(x, w, b)).max() <= 1e-14 * max(1, np.abs(got).max()) * 10


def test_conv_multichannel_oracle(rng):
    x = rng.standard_normal((3, 6, 7))
    w = rng.standard_normal((2, 3, 3, 3))
    b = rng.standard_normal(2)
    got = conv2d_periodic(torch.tensor(x), torch.tensor(w), torch.tensor(b)).numpy()
    assert np.allclose(got, loop_conv(x, w, b), atol=1e-13)


def test_batched_shapes(rng):
    x = torch.tensor(rng.standard_normal((4, 3, 2, 8, 8)))
    w = torch.tensor(rng.standard_normal((5, 2, 5, 5)))
    y = conv2d_periodic(x, w)
    assert y.shape == (4, 3, 5, 8, 8)
    assert torch.allclose(y[2, 1], conv2d_periodic(x[2, 1], w))


def test_transpose_dot_test(rng):
    for _ in range(10):
        x = torch.tensor(rng.standard_normal((2, 9, 7)))
        y = torch.tensor(rng.standard_normal((3, 9, 7)))
        w = torch.tensor(rng.standard_normal((3, 2, 5, 5)))
        lhs = float((conv2d_periodic(x, w) * y).sum())
        rhs = float((x * conv2d_periodic_transpose(y, w)).sum())
        assert abs(lhs - rhs) <= 1e-10 * abs(lhs)


def test_vjp_dot_test(rng):
    # reverse-mode Jacobian of the conv w.r.t. kernel agrees with the forward directional derivative
    x = torch.tensor(rng.standard_normal((2, 6, 6)))
    w = torch.tensor(rng.standard_normal((2, 2, 5, 5)), requires_grad=True)
    dw = torch.tensor(rng.standard_normal((2, 2, 5, 5)))
    y = torch.tensor(rng.standard_normal((2, 6, 6)))
    (g,) = torch.autograd.grad((conv2d_periodic(x, w) * y).sum(), w)
    lhs = float((conv2d_periodic(x, dw) * y).sum())
    assert abs(lhs - float((g * dw).sum())) <= 1e-10 * abs(lhs)


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        conv2d_periodic(torch.zeros(3, 4, 4), torch.zeros(1, 2, 5, 5))
    with pytest.raises(ShapeMismatch):
        CnnSpec((Layer(4, 8), Layer(9, 2, activation="identity")))
    with pytest.raises(ShapeMismatch):
        CnnSpec((Layer(4, 2, activation="relu"),))


def test_standard_spec():
    spec = CnnSpec.standard(4)
    assert [(L.in_ch, L.out_ch) for L in spec.layers] == [(4, 32), (32, 32), (32, 32), (32, 32), (32, 4)]
    assert all(L.radius == 2 for L in spec.layers)
    assert spec.layers[-1].activation == "identity"


def test_zero_params_zero_output():
    spec = CnnSpec.standard(2, hidden=8, n_hidden=2)
    store = ParamStore(spec.shapes(), torch.zeros(sum(int(np.prod(s)) for _, s in spec.shapes())))
    w = [v for v in store.split(store.theta).values()]
    assert torch.all(forward_cnn(spec, w, torch.randn(4, 8, 8, dtype=torch.float64)) == 0)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 7), st.integers(0, 7), st.integers(0, 1000))
def test_cnn_shift_equivariant(a, b, seed):
    spec = CnnSpec.standard(3, hidden=6, n_hidden=2)
    store = init_params(spec.shapes(), seed)
    w = list(store.split(store.theta).values())
    x = torch.tensor(np.random.default_rng(seed).standard_normal((4, 8, 8)))
    shift = lambda t: torch.roll(t, (b, a), dims=(-2, -1))
    assert torch.allclose(forward_cnn(spec, w, shift(x)), shift(forward_cnn(spec, w, x)), atol=1e-13)


def test_init_bounds_and_bias():
    spec = CnnSpec.standard(2)
    store = init_params(spec.shapes(), 3)
    views = store.split(store.theta)
    assert views["w0"].abs().max() <= 1 / np.sqrt(4 * 25)
    assert views["w1"].abs().max() <= 1 / np.sqrt(32 * 25)
    assert torch.all(views["b0"] == 0)
    assert torch.equal(init_params(spec.shapes(), 3).theta, store.theta)


class TestAdam:
    def _store(self, x):
        return ParamStore([("x", (len(x),))], torch.tensor(x, dtype=torch.float64))

    def test_zero_gradient(self):
        s = self._store([1.0, -2.0])
        adam_step(s, torch.zeros(2))
        assert torch.equal(s.theta, torch.tensor([1.0, -2.0], dtype=torch.float64)) and s.step == 1

    def test_first_step(self):
        s = self._store([0.5])
        adam_step(s, torch.ones(1))
        assert float(s.theta[0]) == pytest.approx(0.5 - 1e-3 / (1 + 1e-8), abs=1e-15)

    def test_quadratic(self):
        # oracle: reference loop written directly from the update formulas
        s = self._store([1.0])
        th, m, v = 1.0, 0.0, 0.0
        for t in range(1, 1001):
            adam_step(s, s.theta.clone())
            g = th
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            th -= 1e-3 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        assert float(s.theta[0]) == pytest.approx(th, rel=1e-12)
        # at lr 1e-3 each step moves at most ~lr, so 1000 steps cannot reach 0
        assert float(s.theta[0]) == pytest.approx(0.2576650305898, rel=1e-9)

    def test_quadratic_converges(self):
        s = self._store([1.0])
        for _ in range(1000):
            adam_step(s, s.theta.clone(), AdamConfig(lr=1e-2))
        assert abs(float(s.theta[0])) < 1e-2

    def test_non_finite(self):
        with pytest.raises(NonFiniteGradient):
            adam_step(self._store([1.0]), torch.tensor([float("nan")]))

    def test_custom_lr(self):
        s = self._store([0.0])
        adam_step(s, -torch.ones(1), AdamConfig(lr=0.1))
        assert float(s.theta[0]) == pytest.approx(0.1, rel=1e-7)


@pytest.mark.parametrize("variant", ["CNN", "DIV", "SKEW", "CNNC"])
def test_checkpoint_round_trip(tmp_path, variant):
    model = make_model(variant, seed=11, hidden=8, n_hidden=2)
    p = save_checkpoint(tmp_path / "m.lesp", variant, model.spec, model.store)
    ck = load_checkpoint(p)
    assert ck.variant == variant and ck.spec == model.spec
    assert torch.equal(ck.store.theta, model.store.theta)
    assert checkpoint_bytes(ck.variant, ck.spec, ck.store) == p.read_bytes()
    assert ck.store.layout == layout_for(variant, model.spec)


def test_checkpoint_header():
    model = make_model("SKEW", seed=0, hidden=8, n_hidden=1)
    raw = checkpoint_bytes("SKEW", model.spec, model.store)
    assert raw[:4] == b"LESP" and raw[8] == 5
    n_layers = int.from_bytes(raw[9:13], "little")
    assert n_layers == 2
    header = 13 + 13 * n_layers
    assert len(raw) == header + 8 * len(model.store)
    # SKEW kernels come last, stored raw
    tail = np.frombuffer(raw[-8 * 300:], dtype="<f8")
    views = model.store.split(model.store.theta)
    assert np.array_equal(tail, torch.cat([views[n].reshape(-1) for n in ("B1", "B2", "B3")]).numpy())
