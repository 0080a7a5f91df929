import numpy as np
import pytest

from specdiff.checkpoint import MAGIC, load_container, save_container
from specdiff.nn import Adam, Mlp, SgdMomentum, clip_grad_norm


@pytest.mark.parametrize("activation,out_act", [("silu", False), ("tanh", True)])
def test_mlp_gradient_check(activation, out_act):
    rng = np.random.default_rng(0)
    net = Mlp((5, 7, 6, 3), rng=rng, activation=activation, out_activation=out_act)
    x = rng.standard_normal((9, 5))
    w = rng.standard_normal((9, 3))

    def loss():
        return float(np.sum(w * net.forward(x)))

    grad, gin = net.backward(net.forward(x, keep=True)[1], w)
    h = 1e-6
    for i in rng.choice(net.num_params, 60, replace=False):
        old = net.params[i]
        net.params[i] = old + h
        up = loss()
        net.params[i] = old - h
        dn = loss()
        net.params[i] = old
        assert (up - dn) / (2 * h) == pytest.approx(grad[i], rel=1e-5, abs=1e-8)
    x2 = x.copy()
    x2[0, 0] += h
    up = float(np.sum(w * net.forward(x2)))
    x2[0, 0] -= 2 * h
    dn = float(np.sum(w * net.forward(x2)))
    assert (up - dn) / (2 * h) == pytest.approx(gin[0, 0], rel=1e-5)


def test_params_are_views():
    net = Mlp((2, 3, 1), rng=np.random.default_rng(0))
    net.params[:] = 0
    assert np.all(net.layers[0][0] == 0)
    twin = net.copy()
    twin.params[0] = 5
    assert net.params[0] == 0


def test_bad_param_length():
    with pytest.raises(ValueError):
        Mlp((2, 2), params=np.zeros(3))


def test_optimizers_descend_quadratic():
    for opt in (SgdMomentum(0.1, 0.5), Adam(0.1)):
        p = np.array([3.0, -2.0])
        for _ in range(200):
            opt.step(p, 2 * p)
        assert np.linalg.norm(p) < 1e-2


def test_clip_grad_norm():
    g = np.array([3.0, 4.0])
    assert clip_grad_norm(g, 1.0) == 5.0
    np.testing.assert_allclose(g, [0.6, 0.8])


class TestContainer:
    def test_round_trip(self, tmp_path):
        arrays = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([1.5])}
        save_container(tmp_path / "c.bin", {"kind": "x", "n": 3}, arrays)
        header, back = load_container(tmp_path / "c.bin")
        assert header == {"kind": "x", "n": 3}
        for k in arrays:
            np.testing.assert_array_equal(back[k], arrays[k])

    def test_layout(self, tmp_path):
        save_container(tmp_path / "c.bin", {}, {"v": np.array([2.0])})
        raw = (tmp_path / "c.bin").read_bytes()
        assert raw[:8] == MAGIC
        assert np.frombuffer(raw[-8:], "<f8")[0] == 2.0

    def test_rejects_foreign_file(self, tmp_path):
        (tmp_path / "junk").write_bytes(b"not a container")
        with pytest.raises(ValueError):
            load_container(tmp_path / "junk")
