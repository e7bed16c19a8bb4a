import numpy as np
import pytest

from ffstack import autodiff as ad
from ffstack.errors import EvaluationError, ValidationError


def fd_grad(f, x, h=1e-5):
    """Central-difference gradient oracle over plain evaluations."""
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (ad.value_of(f, xp) - ad.value_of(f, xm)) / (2 * h)
    return g


def fd_hvp(f, x, v, h=1e-4):
    """(grad(x+hv) - grad(x-hv)) / 2h oracle."""
    return (ad.grad(f, x + h * v) - ad.grad(f, x - h * v)) / (2 * h)


class TestGrad:
    def test_quadratic(self):
        g = ad.grad(lambda v: v.dot(v), np.array([1.0, 2.0, 3.0]))
        np.testing.assert_allclose(g, [2.0, 4.0, 6.0], rtol=0, atol=1e-14)

    def test_constant_function(self):
        g = ad.grad(lambda v: v.tape.const(np.array([3.0])), np.array([1.0, 2.0]))
        np.testing.assert_array_equal(g, [0.0, 0.0])

    def test_silu_sum_matches_fd(self):
        f = lambda v: ad.silu(v).sum()
        x = np.array([0.5, -0.5])
        assert ad.check_grad(f, x, h=1e-5) <= 1e-8

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_raises_with_op_index(self):
        f = lambda v: ad.log(v).sum()
        with pytest.raises(EvaluationError, match="op index"):
            ad.grad(f, np.array([-1.0]))


class TestHvp:
    def test_identity_hessian(self):
        f = lambda v: (v.dot(v)) * 0.5
        v = np.array([0.3, -1.2, 4.0])
        out = ad.hvp(f, np.array([1.0, 1.0, 1.0]), v)
        np.testing.assert_allclose(out, v, atol=1e-14)

    def test_hand_hessian(self):
        # f = x1^2 x2, H = [[2 x2, 2 x1], [2 x1, 0]]
        f = lambda v: (v * v * ad.gather(v, [1, 1])).dot(
            v.tape.const(np.array([1.0, 0.0]))
        )
        out = ad.hvp(f, np.array([1.0, 1.0]), np.array([1.0, 0.0]))
        np.testing.assert_allclose(out, [2.0, 2.0], atol=1e-12)

    def test_random_quartic_matches_fd(self):
        rng = np.random.Generator(np.random.PCG64(5))
        c = rng.normal(size=4)

        def f(v):
            q = v.dot(v)
            return q * q * c[0] + q * c[1] + v.sum() * c[2] + (v * v * v).sum() * c[3]

        x = rng.normal(size=6)
        v = rng.normal(size=6)
        got = ad.hvp(f, x, v)
        want = fd_hvp(f, x, v)
        np.testing.assert_allclose(got, want, rtol=1e-6)

    def test_linear_in_direction(self):
        rng = np.random.Generator(np.random.PCG64(6))
        f = lambda v: ad.tanh(v).dot(v) + ad.exp(v * 0.1).sum()
        x = rng.normal(size=5)
        a, b = rng.normal(size=5), rng.normal(size=5)
        lhs = ad.hvp(f, x, 2.0 * a + 3.0 * b)
        rhs = 2.0 * ad.hvp(f, x, a) + 3.0 * ad.hvp(f, x, b)
        np.testing.assert_allclose(lhs, rhs, atol=1e-9)

    def test_symmetry(self):
        rng = np.random.Generator(np.random.PCG64(7))
        f = lambda v: ad.silu(v).dot(ad.sin(v)) + (v * v).dot(ad.cos(v))
        x = rng.normal(size=4)
        h_cols = [ad.hvp(f, x, np.eye(4)[i]) for i in range(4)]
        H = np.stack(h_cols)
        np.testing.assert_allclose(H, H.T, atol=1e-9)


class TestCheckGrad:
    def test_quadratic_tiny_error(self):
        assert ad.check_grad(lambda v: v.dot(v), np.array([1.0, 2.0]), 1e-5) < 1e-8

    def test_linear_exact(self):
        f = lambda v: v.dot(v.tape.const(np.array([2.0, -3.0])))
        assert ad.check_grad(f, np.array([0.7, 0.9]), 1e-4) < 1e-10

    def test_wrong_gradient_flagged(self):
        # negative control: a deliberately wrong gradient scores O(1)
        f = lambda v: v.dot(v)
        x = np.array([1.0, 2.0])
        wrong = ad.grad(f, x) + 1.0
        fd = fd_grad(f, x)
        err = np.max(np.abs(wrong - fd) / np.maximum(1.0, np.abs(fd)))
        assert err > 0.2

    def test_h_out_of_range(self):
        with pytest.raises(ValidationError):
            ad.check_grad(lambda v: v.sum(), np.ones(2), h=1.0)


def _safe_input(op, rng, n):
    x = rng.normal(size=n)
    if op in ("log", "sqrt", "powc"):
        return np.abs(x) + 0.5
    if op == "acos":
        return np.clip(x * 0.4, -0.95, 0.95)
    return x


def _op_fn(op, rng, n):
    w = rng.normal(size=n)

    def scalarize(v):
        return v.dot(v.tape.const(w))

    if op in ("exp", "log", "sqrt", "tanh", "silu", "sin", "cos", "acos"):
        return lambda v: scalarize(getattr(ad, op)(v))
    if op == "neg":
        return lambda v: scalarize(-v)
    if op == "powc":
        return lambda v: scalarize(v**2.5)
    if op == "lrelu":
        return lambda v: scalarize(ad.leaky_relu(v, 0.2))
    if op == "minc":
        return lambda v: scalarize(ad.clamp_max(v, 0.35))
    if op == "maxc":
        return lambda v: scalarize(ad.clamp_min(v, -0.35))
    if op == "add":
        return lambda v: scalarize(v + ad.gather(v, list(range(n))[::-1]))
    if op == "sub":
        return lambda v: scalarize(v - v * 0.3)
    if op == "mul":
        return lambda v: scalarize(v * ad.sin(v))
    if op == "div":
        return lambda v: scalarize(v / (ad.exp(v) + 1.5))
    if op == "sum":
        return lambda v: v.sum() * 2.0
    if op == "dot":
        return lambda v: v.dot(ad.cos(v))
    if op == "gather":
        idx = rng.integers(0, n, size=2 * n)
        return lambda v: scalarize(ad.gather(ad.gather(v, idx), list(range(n))))
    if op == "gather_perm":
        idx = rng.permutation(n)
        return lambda v: scalarize(ad.gather(ad.sin(v), idx))
    if op == "gather_rep":
        wr = rng.normal(size=3 * n)
        return lambda v: ad.gather(ad.tanh(v), np.repeat(np.arange(n), 3)).dot(
            v.tape.const(wr)
        )
    if op == "gather_tile":
        wr = rng.normal(size=2 * n)
        return lambda v: ad.gather(v * v, np.tile(np.arange(n), 2)).dot(
            v.tape.const(wr)
        )
    if op == "slicec":
        wr = rng.normal(size=n - 2)
        return lambda v: ad.gather(ad.exp(v * 0.3), np.arange(1, n - 1)).dot(
            v.tape.const(wr)
        )
    if op == "scatter":
        idx = rng.integers(0, max(2, n // 2), size=n)
        m = max(2, n // 2)
        wm = rng.normal(size=m)
        return lambda v: ad.scatter_add(v * v, idx, m).dot(v.tape.const(wm))
    if op == "scatter_rowsum":
        assert n % 2 == 0
        wm = rng.normal(size=n // 2)
        return lambda v: ad.scatter_add(
            ad.silu(v), np.repeat(np.arange(n // 2), 2), n // 2
        ).dot(v.tape.const(wm))
    if op == "scatter_colsum":
        assert n % 2 == 0
        wm = rng.normal(size=n // 2)
        return lambda v: ad.scatter_add(
            ad.cos(v), np.tile(np.arange(n // 2), 2), n // 2
        ).dot(v.tape.const(wm))
    if op == "matmul":
        A = rng.normal(size=(3, n))
        return lambda v: (
            ad.matmul(v.tape.const(A.ravel()), ad.silu(v), 3, n, 1)
        ).dot(v.tape.const(rng.normal(size=3)))
    if op == "affine":
        A = rng.normal(size=(3, n))
        bias = rng.normal(size=3)
        w3 = rng.normal(size=3)
        return lambda v: ad.affine(
            v.tape.const(A.ravel()), ad.tanh(v), v.tape.const(bias), 3, n, 1
        ).dot(v.tape.const(w3))
    if op == "gauss":
        mu = rng.normal(size=n)
        return lambda v: scalarize(ad.gauss_rbf(v, mu, 1.3))
    if op == "coscut":
        return lambda v: scalarize(ad.cos_cutoff(ad.exp(v * 0.2), 1.4))
    if op == "bias_add":
        assert n % 2 == 0
        return lambda v: scalarize(
            ad.bias_add(v, ad.gather(v, [0, 1]) * 0.5, 2, n // 2)
        )
    if op == "concat":
        return lambda v: ad.concat([v * 2.0, ad.sin(v)]).dot(
            v.tape.const(rng.normal(size=2 * n))
        )
    raise AssertionError(op)


PRIMITIVES = [
    "add", "sub", "mul", "div", "neg", "powc", "exp", "log", "sqrt", "tanh",
    "silu", "sin", "cos", "acos", "lrelu", "minc", "maxc", "sum", "dot",
    "gather", "gather_perm", "gather_rep", "gather_tile", "slicec",
    "scatter", "scatter_rowsum", "scatter_colsum",
    "matmul", "affine", "gauss", "coscut", "bias_add", "concat",
]


@pytest.mark.parametrize("op", PRIMITIVES)
def test_primitive_grad_matches_fd(op):
    rng = np.random.Generator(np.random.PCG64(hash(op) % 2**32))
    for _ in range(10):
        n = 6
        f = _op_fn(op, rng, n)
        x = _safe_input(op, rng, n)
        assert ad.check_grad(f, x, h=1e-5) <= 1e-6


def test_grad_of_sum_is_sum_of_grads():
    rng = np.random.Generator(np.random.PCG64(9))
    x = rng.normal(size=5)
    f1 = lambda v: ad.silu(v).sum()
    f2 = lambda v: v.dot(ad.sin(v))
    fsum = lambda v: ad.silu(v).sum() + v.dot(ad.sin(v))
    np.testing.assert_allclose(
        ad.grad(fsum, x), ad.grad(f1, x) + ad.grad(f2, x), atol=1e-12
    )


class TestProgramReplay:
    def test_replay_with_new_leaves(self):
        t = ad.Tape()
        x = t.leaf(3)
        y = ad.silu(x * 2.0).sum()
        prog = t.compile([y])
        for seed in range(3):
            rng = np.random.Generator(np.random.PCG64(seed))
            xv = rng.normal(size=3)
            got = prog.forward({x.i: xv})[y.i][0]
            want = np.sum(2 * xv / (1 + np.exp(-2 * xv)))
            assert got == pytest.approx(want, rel=1e-12)

    def test_multi_output_backward(self):
        t = ad.Tape()
        x = t.leaf(2)
        a = (x * x).sum()
        b = ad.exp(x).sum()
        prog = t.compile([a, b])
        xv = np.array([0.3, -0.7])
        vals = prog.forward({x.i: xv})
        adj = prog.backward(vals, {a.i: np.ones(1), b.i: np.full(1, 2.0)})
        np.testing.assert_allclose(adj[x.i], 2 * xv + 2 * np.exp(xv), atol=1e-12)

    def test_dual_backward_primal_matches_plain(self):
        t = ad.Tape()
        x = t.leaf(4)
        y = (ad.tanh(x) * x).sum()
        prog = t.compile([y])
        xv = np.array([0.1, -0.4, 0.9, 2.0])
        vals = prog.forward({x.i: xv})
        plain = prog.backward(vals, {y.i: np.ones(1)})[x.i]
        tans = prog.forward_tangent(vals, {x.i: np.ones(4)})
        dual = prog.backward_dual(vals, tans, {y.i: np.ones(1)})[x.i]
        np.testing.assert_allclose(dual.p, plain, atol=1e-14)

    def test_segment_max_detached_softmax_exact(self):
        # softmax gradient must be unaffected by the detached stabilizer
        seg = np.array([0, 0, 0, 1, 1])

        def softmax_entropyish(v):
            m = ad.segment_max_detached(v, seg, 2)
            e = ad.exp(v - m)
            denom = ad.gather(ad.scatter_add(e, seg, 2), seg)
            p = e / denom
            return p.dot(v)

        x = np.array([0.2, 1.4, -0.5, 3.0, 2.2])
        assert ad.check_grad(softmax_entropyish, x, 1e-5) <= 1e-7
