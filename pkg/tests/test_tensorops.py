"""Primitive ops: values, shapes, and finite-difference gradient checks."""

import math

import numpy as np
import pytest
import torch

import vp2.tensorops as T


def fd_grad(fn, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar-valued fn at x (float64)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn(x)
        flat[i] = orig - eps
        lo = fn(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def check_grad(make_loss, x0: np.ndarray, rtol: float = 1e-4):
    with T.precision("float64"):
        xt = T.tensor(x0, requires_grad=True)
        T.backward(make_loss(xt))
        analytic = xt.grad.numpy().copy()

        def scalar(x):
            with torch.no_grad():
                return float(make_loss(T.tensor(x)))

        numeric = fd_grad(scalar, x0.astype(np.float64))
    denom = np.maximum(np.abs(numeric), 1e-3)
    rel = np.abs(analytic - numeric) / denom
    assert rel.max() < rtol, f"rel err {rel.max():.2e}"


class TestForwardValues:
    def test_matmul_identity(self):
        a = T.tensor([[1.0, 2.0], [3.0, 4.0]])
        eye = T.tensor(np.eye(2))
        out = T.matmul(a, eye)
        assert np.allclose(out.numpy(), [[1, 2], [3, 4]])

    def test_softmax_symmetry(self):
        out = T.softmax_lastdim(T.tensor([0.0, 0.0]))
        assert np.allclose(out.numpy(), [0.5, 0.5])

    def test_cross_entropy_uniform(self):
        logits = T.tensor(np.zeros((1, 10)))
        loss = T.cross_entropy_with_logits(logits, [3])
        assert abs(float(loss) - math.log(10)) < 1e-6

    def test_softmax_sums_to_one(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            x = T.tensor(rng.normal(size=(4, 7)) * 5)
            s = T.softmax_lastdim(x).sum(dim=-1).detach().numpy()
            assert np.abs(s - 1.0).max() < 1e-6

    def test_add_bias_broadcast_only(self):
        a = T.tensor(np.ones((2, 3)))
        b = T.tensor(np.ones(3))
        assert T.add(a, b).shape == (2, 3)
        with pytest.raises(T.ShapeError):
            T.add(a, T.tensor(np.ones((3, 2))))

    def test_matmul_shape_error_names_shapes(self):
        with pytest.raises(T.ShapeError, match="matmul"):
            T.matmul(T.tensor(np.ones((2, 3))), T.tensor(np.ones((2, 3))))

    def test_non_finite_raises(self):
        big = T.tensor(np.full((2, 2), 1e38))
        with pytest.raises(T.NonFiniteError):
            T.mul(big, big)

    def test_finite_checks_toggle(self):
        big = T.tensor(np.full((2, 2), 1e38))
        with T.finite_checks(False):
            out = T.mul(big, big)
            assert not np.isfinite(out.detach().numpy()).all()
        with pytest.raises(T.NonFiniteError):
            T.mul(big, big)

    def test_embedding_gather_bounds(self):
        table = T.tensor(np.arange(12.0).reshape(4, 3))
        out = T.embedding_gather(table, [1, 1])
        assert np.allclose(out[0].numpy(), out[1].numpy())
        with pytest.raises(T.ShapeError):
            T.embedding_gather(table, [4])

    def test_pad_stack_shapes(self):
        a = T.tensor(np.ones((2, 4)))
        b = T.tensor(np.ones((5, 4)))
        out = T.pad_stack([a, b])
        assert out.shape == (2, 5, 4)
        assert float(out[0, 3].abs().sum()) == 0.0


class TestBackward:
    def test_sum_grad_ones(self):
        x = T.tensor([1.0, 2.0, 3.0], requires_grad=True)
        T.backward(x.sum())
        assert np.allclose(x.grad.numpy(), [1, 1, 1])

    def test_square_grad(self):
        x = T.tensor([2.0], requires_grad=True)
        T.backward(T.mul(x, x).sum())
        assert np.allclose(x.grad.numpy(), [4.0])

    def test_non_scalar_loss_rejected(self):
        x = T.tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ValueError):
            T.backward(x)

    def test_double_backward_doubles_grads(self):
        x = T.tensor([1.5, -0.5], requires_grad=True)
        loss = T.mul(x, x).sum()
        T.backward(loss, retain_graph=True)
        once = x.grad.numpy().copy()
        T.backward(loss)
        assert np.allclose(x.grad.numpy(), 2 * once)


_PRIMITIVE_CASES = {
    "matmul": lambda x, aux: T.matmul(x, aux),
    "add": lambda x, aux: T.add(x, aux.reshape(-1)[: x.shape[-1]]),
    "mul": lambda x, aux: T.mul(x, aux[: x.shape[0], : x.shape[1]]),
    "scale": lambda x, aux: T.scale(x, 1.7),
    "gelu": lambda x, aux: T.gelu(x),
    "softmax": lambda x, aux: T.softmax_lastdim(x),
    "layernorm": lambda x, aux: T.layernorm(
        x, aux.reshape(-1)[: x.shape[-1]].abs() + 0.5,
        aux.reshape(-1)[x.shape[-1]: 2 * x.shape[-1]]),
    "concat": lambda x, aux: T.concat([x, x]),
    "slice": lambda x, aux: T.slice_rows(x, 0, max(1, x.shape[0] - 1)),
    "mean": lambda x, aux: T.mean(x, dim=-1),
    "pad_stack": lambda x, aux: T.pad_stack(
        [x, T.slice_rows(x, 0, max(1, x.shape[0] - 1))]),
}


class TestFiniteDifferenceGradients:
    @pytest.mark.parametrize("name", sorted(_PRIMITIVE_CASES))
    def test_primitive_grads(self, name):
        """Every primitive's analytic gradient matches central differences
        on randomly shaped inputs (100 shapes split over the ops)."""
        rng = np.random.default_rng(hash(name) % (2 ** 31))
        op = _PRIMITIVE_CASES[name]
        for _ in range(9):
            r = int(rng.integers(2, 6))
            c = int(rng.integers(2, 6))
            if name == "matmul":
                k = int(rng.integers(2, 5))
                aux0 = rng.normal(size=(c, k))
            else:
                aux0 = rng.normal(size=(2 * max(r, c), 2 * max(r, c)))
            x0 = rng.normal(size=(r, c))

            def loss(x, aux=aux0):
                with torch.no_grad():
                    a = T.tensor(aux)
                return T.mean(T.mul(op(x, a), op(x, a)))

            check_grad(loss, x0)

    def test_cross_entropy_grad(self):
        rng = np.random.default_rng(7)
        x0 = rng.normal(size=(4, 6))

        def loss(x):
            return T.cross_entropy_with_logits(x, [1, 0, 5, 2])

        check_grad(loss, x0)

    def test_embedding_gather_grad(self):
        rng = np.random.default_rng(8)
        x0 = rng.normal(size=(5, 3))

        def loss(x):
            return T.mean(T.mul(T.embedding_gather(x, [0, 2, 2, 4]),
                                T.embedding_gather(x, [0, 2, 2, 4])))

        check_grad(loss, x0)

    def test_random_three_op_graphs(self):
        rng = np.random.default_rng(9)
        for _ in range(10):
            x0 = rng.normal(size=(3, 4))
            w0 = rng.normal(size=(4, 4))

            def loss(x, w=w0):
                with torch.no_grad():
                    wt = T.tensor(w)
                h = T.gelu(T.matmul(x, wt))
                return T.mean(T.mul(T.softmax_lastdim(h), h))

            check_grad(loss, x0)


class TestPrecision:
    def test_switch(self):
        assert T.get_dtype() == torch.float32
        with T.precision("float64"):
            assert T.tensor([1.0]).dtype == torch.float64
        assert T.tensor([1.0]).dtype == torch.float32

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            T.set_precision("float16")
