import numpy as np
import pytest

from spdnet_geo import autodiff as ad
from spdnet_geo import geometry as geo
from spdnet_geo.errors import NumericalError, ShapeError
from conftest import random_spd, random_sym


class TestTapeMechanics:
    def test_sum_of_leaf_gives_ones(self, rng):
        tape = ad.Tape()
        x = tape.leaf(rng.standard_normal((3, 4)))
        grads = ad.backward(ad.sum_all(x))
        assert np.allclose(grads[x], np.ones((3, 4)))

    def test_fanout_doubles_gradient(self, rng):
        tape = ad.Tape()
        x = tape.leaf(rng.standard_normal((3,)))
        y = ad.add(x, x)
        grads = ad.backward(ad.sum_all(y))
        assert np.allclose(grads[x], 2.0)

    def test_unreachable_leaf_gets_zero(self, rng):
        tape = ad.Tape()
        x = tape.leaf(rng.standard_normal((2, 2)))
        unused = tape.leaf(rng.standard_normal((5,)))
        grads = ad.backward(ad.sum_all(x))
        assert np.allclose(grads[unused], 0.0)
        assert grads[unused].shape == (5,)

    def test_nonscalar_loss_rejected(self, rng):
        tape = ad.Tape()
        x = tape.leaf(rng.standard_normal((3,)))
        with pytest.raises(ShapeError):
            ad.backward(x)

    def test_single_backward_per_tape(self, rng):
        tape = ad.Tape()
        x = tape.leaf(np.ones(()))
        loss = ad.square(x)
        ad.backward(loss)
        with pytest.raises(RuntimeError):
            ad.backward(loss)

    def test_symmetric_leaf_gradient_is_symmetric(self, rng):
        tape = ad.Tape()
        S = tape.leaf(random_sym(rng, 4), symmetric=True)
        B = tape.leaf(rng.standard_normal((4, 4)))
        loss = ad.sum_all(ad.matmul(S, B))
        grads = ad.backward(loss)
        g = grads[S]
        assert np.allclose(g, g.T)


def _fd(build, params, symmetric=(), step=1e-5):
    return ad.check_gradient(build, params, step=step, symmetric=symmetric)


class TestPrimitiveGradients:
    def test_square_scalar(self):
        err = _fd(lambda t, v: ad.square(v["x"]), {"x": np.array(2.0)})
        assert err < 1e-9

    def test_add_scale_matmul(self, rng):
        A = rng.standard_normal((3, 3))
        B = rng.standard_normal((3, 3))

        def build(t, v):
            return ad.sum_all(ad.matmul(ad.add(v["a"], v["b"]), ad.scale(v["a"], 0.5)))

        assert _fd(build, {"a": A, "b": B}) < 1e-6

    def test_congruence(self, rng):
        C = random_spd(rng, 3)
        W = rng.standard_normal((3, 2))

        def build(t, v):
            return ad.frobenius_norm_sq(ad.congruence(v["C"], v["W"]))

        assert _fd(build, {"C": C, "W": W}, symmetric=("C",)) < 1e-6

    def test_congruence_batched(self, rng):
        Cs = np.stack([random_spd(rng, 3) for _ in range(4)])
        W = rng.standard_normal((3, 3))

        def build(t, v):
            Cs_const = t.leaf(Cs, symmetric=True)
            return ad.frobenius_norm_sq(ad.congruence(Cs_const, v["W"]))

        assert _fd(build, {"W": W}) < 1e-6

    def test_matrix_log_against_fd(self, rng):
        C = random_spd(rng, 4, cond=30.0)
        A = random_sym(rng, 4)

        def build(t, v):
            return ad.sum_all(ad.mul(ad.matrix_log(v["C"]), t.leaf(A)))

        assert _fd(build, {"C": C}, symmetric=("C",)) < 1e-5

    def test_matrix_log_trace_gradient_is_inverse(self, rng):
        # d tr(log C) / dC = C^{-1}
        C = random_spd(rng, 4, cond=10.0)
        tape = ad.Tape()
        Cv = tape.leaf(C, symmetric=True)
        loss = ad.sum_all(ad.trace(ad.matrix_log(Cv)))
        grads = ad.backward(loss)
        assert np.allclose(grads[Cv], np.linalg.inv(C), atol=1e-8)

    def test_matrix_log_degenerate_spectrum(self, rng):
        # eigenvalue gap below 1e-9: Daleckii-Krein limit branch
        Q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
        w = np.array([1.0, 1.0 + 1e-10, 2.0, 3.0])
        C = (Q * w) @ Q.T
        A = random_sym(rng, 4)

        def build(t, v):
            return ad.sum_all(ad.mul(ad.matrix_log(v["C"]), t.leaf(A)))

        assert _fd(build, {"C": geo.sym(C)}, symmetric=("C",)) < 1e-4

    def test_matrix_exp_sym(self, rng):
        S = random_sym(rng, 4)
        A = random_sym(rng, 4)

        def build(t, v):
            return ad.sum_all(ad.mul(ad.matrix_exp_sym(v["S"]), t.leaf(A)))

        assert _fd(build, {"S": S}, symmetric=("S",)) < 1e-5

    def test_sym_eig_eigenvalue_gradient(self, rng):
        C = random_spd(rng, 4, cond=10.0)
        coeff = rng.standard_normal(4)

        def build(t, v):
            w, _ = ad.sym_eig(v["C"])
            return ad.sum_all(ad.mul(w, t.leaf(coeff)))

        assert _fd(build, {"C": C}, symmetric=("C",)) < 1e-5

    def test_sym_eig_eigenvector_gradient(self, rng):
        # smooth scalar using both outputs: tr(A U diag(f + w/2) U^T)
        C = random_spd(rng, 4, cond=8.0)
        A = random_sym(rng, 4)
        f = np.array([0.5, -1.0, 2.0, 1.5])

        def build(t, v):
            w, U = ad.sym_eig(v["C"])
            diag = ad.diag_embed(ad.add(ad.scale(w, 0.5), t.leaf(f)))
            M = ad.matmul(ad.matmul(U, diag), ad.transpose(U))
            return ad.sum_all(ad.mul(M, t.leaf(A)))

        assert _fd(build, {"C": C}, symmetric=("C",)) < 1e-5

    def test_trace_and_offdiag(self, rng):
        M = rng.standard_normal((4, 4))

        def build(t, v):
            return ad.add(ad.sum_all(ad.trace(v["M"])), ad.offdiag_norm_sq(v["M"]))

        assert _fd(build, {"M": M}) < 1e-6

    def test_vec_upper(self, rng):
        S = random_sym(rng, 3)
        c = rng.standard_normal(6)

        def build(t, v):
            return ad.sum_all(ad.mul(ad.vec_upper(v["S"]), t.leaf(c)))

        assert _fd(build, {"S": S}, symmetric=("S",)) < 1e-6

    def test_softplus(self):
        assert _fd(lambda t, v: ad.softplus(v["x"]), {"x": np.array(0.3)}) < 1e-8

    def test_matrix_exp_skew_orthogonal_and_gradient(self, rng):
        A = 0.8 * rng.standard_normal((4, 4))
        tape = ad.Tape()
        Av = tape.leaf(A)
        R = ad.matrix_exp_skew(Av)
        assert np.allclose(R.value @ R.value.T, np.eye(4), atol=1e-10)

        T = random_sym(rng, 4)

        def build(t, v):
            Rv = ad.matrix_exp_skew(v["A"])
            return ad.sum_all(ad.mul(Rv, t.leaf(T)))

        assert _fd(build, {"A": A}) < 1e-6

    def test_matrix_exp_skew_matches_scipy(self, rng):
        from scipy.linalg import expm

        A = 2.5 * rng.standard_normal((5, 5))
        tape = ad.Tape()
        R = ad.matrix_exp_skew(tape.leaf(A))
        assert np.allclose(R.value, expm(A - A.T), atol=1e-12)

    def test_inverse(self, rng):
        M = random_spd(rng, 3) + np.eye(3)
        A = rng.standard_normal((3, 3))

        def build(t, v):
            return ad.sum_all(ad.mul(ad.inverse(v["M"]), t.leaf(A)))

        assert _fd(build, {"M": M}) < 1e-6

    def test_linear_log_softmax_cross_entropy(self, rng):
        X = rng.standard_normal((6, 4))
        W = rng.standard_normal((3, 4))
        b = rng.standard_normal(3)
        y = rng.integers(0, 3, size=6)

        def build(t, v):
            return ad.cross_entropy(ad.log_softmax(ad.linear(t.leaf(X), v["W"], v["b"])), y)

        assert _fd(build, {"W": W, "b": b}) < 1e-6

    def test_cross_entropy_closed_form(self, rng):
        # d CE / d logits = (softmax - onehot) / N
        z = rng.standard_normal((5, 4))
        y = rng.integers(0, 4, size=5)
        tape = ad.Tape()
        zv = tape.leaf(z)
        loss = ad.cross_entropy(ad.log_softmax(zv), y)
        grads = ad.backward(loss)
        p = np.exp(z - z.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        onehot = np.eye(4)[y]
        assert np.abs(grads[zv] - (p - onehot) / 5).max() < 1e-10

    def test_fisher_stats_gradients(self, rng):
        Z = rng.standard_normal((8, 3))
        actions = rng.integers(0, 2, size=8)
        subjects = rng.integers(0, 3, size=8)
        coeffs = [1.0, -0.7, 0.3, -0.2]

        def build(t, v):
            W_A, B_A, W_S, B_S = ad.fisher_stats(v["Z"], actions, subjects)
            out = ad.scale(W_A, coeffs[0])
            out = ad.add(out, ad.scale(B_A, coeffs[1]))
            out = ad.add(out, ad.scale(W_S, coeffs[2]))
            return ad.add(out, ad.scale(B_S, coeffs[3]))

        assert _fd(build, {"Z": Z}) < 1e-6

    def test_fisher_scatter_decomposition(self, rng):
        Z = rng.standard_normal((20, 5))
        actions = rng.integers(0, 4, size=20)
        tape = ad.Tape()
        Zv = tape.leaf(Z)
        W_A, B_A, _, _ = ad.fisher_stats(Zv, actions, actions)
        total = np.sum((Z - Z.mean(axis=0)) ** 2) / 20
        assert abs(float(W_A.value) + float(B_A.value) - total) < 1e-10

    def test_fisher_hand_example(self):
        # two 1-d points 0 and 2 in separate classes
        Z = np.array([[0.0], [2.0]])
        tape = ad.Tape()
        Zv = tape.leaf(Z)
        W_A, B_A, _, _ = ad.fisher_stats(Zv, np.array([0, 1]), np.array([0, 0]))
        assert float(W_A.value) == pytest.approx(0.0)
        assert float(B_A.value) == pytest.approx(1.0)

    def test_segment_and_gather(self, rng):
        X = rng.standard_normal((6, 2, 2))
        labels = np.array([0, 1, 0, 1, 1, 0])

        def build(t, v):
            means = ad.segment_mean(v["X"], labels, 2)
            picked = ad.index_rows(means, labels)
            return ad.frobenius_norm_sq(ad.sub(v["X"], picked))

        assert _fd(build, {"X": X}) < 1e-6


class TestAdam:
    def test_zero_gradient_no_motion(self):
        params = {"w": np.array([1.0, 2.0])}
        state = ad.AdamState(lr=0.1, weight_decay=0.0)
        ad.adam_step(params, {"w": np.zeros(2)}, state)
        assert np.allclose(params["w"], [1.0, 2.0])

    def test_first_step_is_signlike(self):
        params = {"w": np.array([0.0, 0.0])}
        g = np.array([0.3, -2.0])
        state = ad.AdamState(lr=1e-3)
        ad.adam_step(params, {"w": g.copy()}, state)
        assert np.allclose(params["w"], -1e-3 * g / (np.abs(g) + state.eps), atol=1e-9)

    def test_quadratic_convergence(self):
        params = {"x": np.zeros(3)}
        state = ad.AdamState(lr=0.3)
        for _ in range(100):
            g = 2.0 * (params["x"] - 3.0)
            ad.adam_step(params, {"x": g}, state)
        assert np.abs(params["x"] - 3.0).max() < 1e-2

    def test_nan_gradient_names_parameter(self):
        params = {"theta": np.zeros(2)}
        state = ad.AdamState()
        with pytest.raises(NumericalError, match="theta"):
            ad.adam_step(params, {"theta": np.array([np.nan, 0.0])}, state)

    def test_clip_gradients(self):
        grads = {"a": np.array([3.0, 4.0])}
        clipped, norm = ad.clip_gradients(grads, 1.0)
        assert norm == pytest.approx(5.0)
        assert np.linalg.norm(clipped["a"]) == pytest.approx(1.0)


class TestRandomizedPrimitiveSweep:
    """Every differentiable primitive against central differences."""

    def test_sweep(self):
        rng = np.random.default_rng(5150)
        for trial in range(10):
            d = int(rng.integers(2, 6))
            C = random_spd(rng, d, cond=10.0 ** rng.uniform(0, 2))
            S = random_sym(rng, d)
            A = random_sym(rng, d)
            W = rng.standard_normal((d, d))

            checks = {
                "matrix_log": (
                    lambda t, v: ad.sum_all(ad.mul(ad.matrix_log(v["C"]), t.leaf(A))),
                    {"C": C},
                    ("C",),
                ),
                "matrix_exp": (
                    lambda t, v: ad.sum_all(ad.mul(ad.matrix_exp_sym(v["S"]), t.leaf(A))),
                    {"S": S},
                    ("S",),
                ),
                "congruence": (
                    lambda t, v: ad.frobenius_norm_sq(ad.congruence(t.leaf(C, symmetric=True), v["W"])),
                    {"W": W},
                    (),
                ),
                "exp_skew": (
                    lambda t, v: ad.sum_all(ad.mul(ad.matrix_exp_skew(v["W"]), t.leaf(A))),
                    {"W": W},
                    (),
                ),
            }
            for name, (build, params, sym_names) in checks.items():
                err = ad.check_gradient(build, params, step=1e-5, symmetric=sym_names)
                assert err < 1e-4, f"{name} failed at trial {trial}: rel err {err:.2e}"
