import numpy as np
import pytest

from refedit import attention as A
from refedit import nk
from refedit.nk import Tensor


def make_params(dim=8, heads=2, seed=0):
    return A.AttentionParams(nk.Rng(seed), dim, heads)


def random_refer_branch(dim, seed=1):
    br = A.ReferBranchParams(dim)
    rng = np.random.default_rng(seed)
    for t in (br.wk, br.wv, br.wo, br.bo):
        t.data[...] = rng.standard_normal(t.shape) * 0.3
    return br


def make_ref(n, dim, seed=2):
    rng = np.random.default_rng(seed)
    return A.ReferenceKV(Tensor(rng.standard_normal((n, dim))), Tensor(rng.standard_normal((n, dim))))


def naive_attention(x, p, ref_k=None, ref_v=None):
    """Explicit-loop single-head oracle; concatenates reference rows when given."""
    x = x.astype(np.float64)
    wq, wk, wv, wo, bo = (t.data.astype(np.float64) for t in (p.wq, p.wk, p.wv, p.wo, p.bo))
    n, d = x.shape
    q = x @ wq
    k = x @ wk
    v = x @ wv
    if ref_k is not None:
        k = np.concatenate([k, ref_k], axis=0)
        v = np.concatenate([v, ref_v], axis=0)
    out = np.zeros((n, d))
    for i in range(n):
        logits = [sum(q[i, c] * k[j, c] for c in range(d)) / np.sqrt(d) for j in range(k.shape[0])]
        mx = max(logits)
        w = [np.exp(a - mx) for a in logits]
        s = sum(w)
        for j in range(k.shape[0]):
            out[i] += (w[j] / s) * v[j]
    return out @ wo + bo


class TestSelfAttention:
    def test_single_token_is_value_projection(self):
        p = make_params()
        x = np.random.default_rng(0).standard_normal((1, 8)).astype(np.float32)
        out = A.self_attention(Tensor(x), p).data
        expected = x @ p.wv.data @ p.wo.data + p.bo.data
        np.testing.assert_allclose(out, expected, atol=1e-6)

    def test_identical_tokens_identical_rows(self):
        p = make_params()
        row = np.random.default_rng(1).standard_normal(8)
        out = A.self_attention(Tensor(np.stack([row, row])), p).data
        np.testing.assert_array_equal(out[0], out[1])

    def test_against_naive_oracle(self):
        p = make_params(dim=8, heads=1, seed=3)
        x = np.random.default_rng(4).standard_normal((4, 8)).astype(np.float32)
        out = A.self_attention(Tensor(x), p).data
        assert np.abs(out - naive_attention(x, p)).max() < 1e-5

    def test_dim_mismatch(self):
        with pytest.raises(nk.ShapeError):
            A.self_attention(Tensor(np.zeros((3, 5))), make_params())

    def test_heads_must_divide_dim(self):
        with pytest.raises(ValueError):
            A.AttentionParams(nk.Rng(0), 10, 4)

    def test_batched_matches_per_item(self):
        p = make_params()
        x = np.random.default_rng(5).standard_normal((3, 6, 8)).astype(np.float32)
        out = A.self_attention(Tensor(x), p).data
        for i in range(3):
            np.testing.assert_allclose(out[i], A.self_attention(Tensor(x[i]), p).data, atol=1e-6)


class TestRasa:
    def test_empty_reference_is_self_attention_exactly(self):
        p = make_params()
        x = Tensor(np.random.default_rng(0).standard_normal((5, 8)))
        empty = A.ReferenceKV(Tensor(np.zeros((0, 8))), Tensor(np.zeros((0, 8))))
        np.testing.assert_array_equal(A.rasa(x, empty, p).data, A.self_attention(x, p).data)

    def test_suppressed_reference_approaches_self_attention(self):
        p = make_params()
        x = Tensor(np.random.default_rng(0).standard_normal((5, 8)))
        ref = make_ref(3, 8)
        sa = A.self_attention(x, p).data
        far = A.rasa(x, ref, p, ref_bias=-1e4).data
        near = A.rasa(x, ref, p).data
        assert np.abs(far - sa).max() < 1e-6
        assert np.abs(near - sa).max() > 1e-3

    def test_against_naive_oracle(self):
        p = make_params(dim=8, heads=1, seed=6)
        x = np.random.default_rng(7).standard_normal((4, 8)).astype(np.float32)
        ref = make_ref(3, 8, seed=8)
        out = A.rasa(Tensor(x), ref, p).data
        oracle = naive_attention(x, p, ref.keys.data.astype(np.float64), ref.values.data.astype(np.float64))
        assert np.abs(out - oracle).max() < 1e-5

    def test_ref_dim_mismatch(self):
        with pytest.raises(nk.ShapeError):
            A.rasa(Tensor(np.zeros((2, 8))), make_ref(2, 4), make_params())


class TestDrra:
    def setup_method(self):
        self.p = make_params()
        self.x = Tensor(np.random.default_rng(9).standard_normal((6, 8)))
        self.ref = make_ref(4, 8)

    def test_lambda_zero_is_self_attention(self):
        br = random_refer_branch(8)
        np.testing.assert_array_equal(
            A.drra(self.x, self.ref, 0.0, self.p, br).data, A.self_attention(self.x, self.p).data
        )

    @pytest.mark.parametrize("lam", [0.0, 0.5, 1.0, 5.0])
    def test_zero_init_is_self_attention(self, lam):
        br = A.ReferBranchParams(8)
        np.testing.assert_array_equal(
            A.drra(self.x, self.ref, lam, self.p, br).data, A.self_attention(self.x, self.p).data
        )

    def test_affine_in_lambda(self):
        br = random_refer_branch(8)
        out = {lam: A.drra(self.x, self.ref, lam, self.p, br).data.astype(np.float64) for lam in (0.0, 1.0, 2.0)}
        assert np.abs((out[2.0] - out[0.0]) - 2 * (out[1.0] - out[0.0])).max() < 1e-6

    def test_refer_branch_matches_literal_formula(self):
        # Second term: one softmax over [K^D, K^R W_k] with values [V^D, V^R W_v].
        p = make_params(dim=8, heads=1, seed=10)
        br = random_refer_branch(8, seed=11)
        x = np.random.default_rng(12).standard_normal((4, 8)).astype(np.float32)
        ref = make_ref(3, 8, seed=13)
        kr = ref.keys.data @ br.wk.data
        vr = ref.values.data @ br.wv.data
        branch_params = make_params(dim=8, heads=1, seed=10)
        branch_params.wo.data[...] = br.wo.data
        branch_params.bo.data[...] = br.bo.data
        oracle = naive_attention(x, branch_params, kr.astype(np.float64), vr.astype(np.float64))
        sa = naive_attention(x, p)
        out = A.drra(Tensor(x), ref, 1.0, p, br).data
        assert np.abs(out - (sa + oracle)).max() < 1e-5

    def test_per_item_lambda(self):
        br = random_refer_branch(8)
        x = Tensor(np.random.default_rng(3).standard_normal((2, 6, 8)))
        ref = A.ReferenceKV(
            Tensor(np.random.default_rng(4).standard_normal((2, 4, 8))),
            Tensor(np.random.default_rng(5).standard_normal((2, 4, 8))),
        )
        out = A.drra(x, ref, np.array([0.0, 1.0]), self.p, br).data
        sa = A.self_attention(x, self.p).data
        np.testing.assert_array_equal(out[0], sa[0])
        assert np.abs(out[1] - sa[1]).max() > 1e-3


def test_attention_rows_sum_to_one():
    p = make_params()
    x = Tensor(np.random.default_rng(0).standard_normal((5, 8)))
    q, k, v = A.project_qkv(x, p)
    qh, kh = A.split_heads(q, 2), A.split_heads(k, 2)
    w = nk.softmax(nk.matmul(qh, nk.swapaxes(kh, -1, -2)) * (1 / np.sqrt(4)), axis=-1).data
    np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-6)


class TestGradients:
    def _check(self, fn):
        with nk.precision(np.float64):
            p = make_params(dim=8, heads=2, seed=20)
            br = random_refer_branch(8, seed=21)
            ref = make_ref(3, 8, seed=22)
            x = Tensor(np.random.default_rng(23).standard_normal((4, 8)), requires_grad=True)
            w = np.random.default_rng(24).standard_normal((4, 8))
            wrt = [p.wq, p.wk, p.wv, p.wo, br.wk, br.wo, ref.keys]

            def f():
                return (fn(x, ref, p, br) * w).sum()

            return nk.finite_diff_check(f, x, 1e-5, wrt=wrt)

    def test_self_attention(self):
        assert self._check(lambda x, ref, p, br: A.self_attention(x, p)) < 1e-4

    def test_rasa(self):
        assert self._check(lambda x, ref, p, br: A.rasa(x, ref, p)) < 1e-4

    def test_drra(self):
        assert self._check(lambda x, ref, p, br: A.drra(x, ref, 0.7, p, br)) < 1e-4
