import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mmcompress.numkit import (
    Adam,
    NonFiniteError,
    Rng,
    Tensor,
    _fallback,
    concat,
    log,
    low_rank_reconstruct,
    matmul,
    no_grad,
    split,
    svd,
    tanh,
)
from mmcompress.numkit import functional as F
from mmcompress.numkit._backend import COMPILED

from conftest import fd_check


def grad_of(fn, *arrays):
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*ts)
    out.backward()
    return out, [t.grad for t in ts]


def numeric_grad(fn, arr, h=1e-5):
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = fn(arr).item()
        flat[i] = old - h
        down = fn(arr).item()
        flat[i] = old
        g.reshape(-1)[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    return np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-12)


# -- matmul ---------------------------------------------------------------


def test_matmul_identity():
    a = Rng(0).normal((3, 3))
    assert np.array_equal(matmul(np.eye(3), a).data, a)


def test_matmul_hand_case():
    out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[0.0], [1.0]]))
    assert out.data.tolist() == [[2.0], [4.0]]


def test_matmul_gradient_matches_finite_differences():
    r = Rng(1)
    a, b = r.normal((5, 7)), r.normal((7, 3))
    _, (ga, _) = grad_of(lambda x, y: matmul(x, y).sum(), a, b)
    num = numeric_grad(lambda x: matmul(Tensor(x), b).sum(), a)
    assert rel_err(ga, num) < 1e-6


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


# -- elementwise ops and reductions ---------------------------------------


def test_softmax_symmetric():
    assert np.allclose(F.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_softmax_stable_for_large_logits():
    out = F.softmax(Tensor([1000.0, 1000.0, -1000.0])).data
    assert np.allclose(out, [0.5, 0.5, 0.0])


def test_layer_norm_constant_vector_is_zero():
    assert np.array_equal(F.layer_norm(Tensor(np.full((2, 5), 3.0))).data, np.zeros((2, 5)))


@given(st.integers(0, 10_000))
def test_layer_norm_moments(seed):
    x = Rng(seed).normal((3, 16), std=4.0) + 2.0
    y = F.layer_norm(Tensor(x)).data
    assert np.allclose(y.mean(axis=-1), 0.0, atol=1e-12)
    assert np.allclose(y.var(axis=-1), 1.0, atol=1e-4)


@pytest.mark.parametrize(
    "fn",
    [
        lambda x: (F.softmax(x, axis=-1) * Tensor(np.arange(12.0).reshape(3, 4))).sum(),
        lambda x: (F.layer_norm(x) * Tensor(np.arange(12.0).reshape(3, 4))).sum(),
        lambda x: F.sigmoid(x).sum(),
        lambda x: F.gelu(x).sum(),
        lambda x: F.silu(x).sum(),
        lambda x: tanh(x).sum(),
        lambda x: (x * x / (x * x + 1.0)).mean(),
        lambda x: F.mse(x, Tensor(np.ones((3, 4)))),
        lambda x: concat(split(x, [1, 3], axis=-1)[::-1], axis=-1)[:, :2].sum(),
        lambda x: (x.transpose() @ x).sum(),
    ],
    ids=["softmax", "layer_norm", "sigmoid", "gelu", "silu", "tanh", "ratio", "mse", "split-concat", "gram"],
)
def test_elementwise_gradients(fn):
    x = Rng(2).normal((3, 4))
    _, (g,) = grad_of(fn, x)
    num = numeric_grad(lambda a: fn(Tensor(a)), x.copy())
    assert rel_err(g, num) < 1e-6


def test_conv2d_gradient():
    r = Rng(3)
    x, w, b = r.normal((1, 4, 4, 2)), r.normal((3, 3, 2, 3)), r.normal((3,))
    coef = r.normal((1, 2, 2, 3))
    fn = lambda x_, w_, b_: (F.conv2d(x_, w_, b_, stride=2) * Tensor(coef)).sum()
    _, grads = grad_of(fn, x, w, b)
    params = {"x": x, "w": w, "b": b}
    fd_check(lambda: fn(Tensor(params["x"]), Tensor(params["w"]), Tensor(params["b"])).item(), params, dict(zip("xwb", grads)), tol=1e-6)


def test_rowwise_linear_matches_linear():
    r = Rng(4)
    x, w, b = r.normal((5, 6)), r.normal((6, 3)), r.normal((3,))
    assert np.allclose(F.rowwise_linear(Tensor(x), Tensor(w), Tensor(b)).data, F.linear(Tensor(x), Tensor(w), Tensor(b)).data, atol=1e-12)


def test_rowwise_linear_is_batch_independent():
    r = Rng(5)
    x, w = r.normal((9, 6)), r.normal((6, 4))
    full = F.rowwise_linear(Tensor(x), Tensor(w)).data
    for i in range(9):
        assert np.array_equal(F.rowwise_linear(Tensor(x[i : i + 1]), Tensor(w)).data[0], full[i])


def test_bilinear_matrix_rows_sum_to_one():
    m = F.bilinear_matrix(4)
    assert m.shape == (64, 16)
    assert np.allclose(m.sum(axis=1), 1.0)


# -- graph semantics -------------------------------------------------------


def test_backward_sum_gives_ones():
    w = Tensor(Rng(0).normal((4, 3)), requires_grad=True)
    w.sum().backward()
    assert np.array_equal(w.grad, np.ones((4, 3)))


def test_detached_branch_gets_no_gradient():
    w = Tensor(np.ones(3), requires_grad=True)
    v = Tensor(np.ones(3), requires_grad=True)
    loss = (w * 2.0).sum() + (v.detach() * 3.0).sum()
    loss.backward()
    assert np.array_equal(w.grad, np.full(3, 2.0))
    assert v.grad is None


def test_unused_parameter_gradient_is_none_or_zero():
    w = Tensor(np.ones(3), requires_grad=True)
    u = Tensor(np.ones(3), requires_grad=True)
    (w * w).sum().backward()
    assert u.grad is None or not u.grad.any()


def test_shared_node_accumulates():
    w = Tensor(np.array([2.0]), requires_grad=True)
    y = w * w
    (y + y).sum().backward()
    assert w.grad.tolist() == [8.0]


def test_no_grad_records_nothing():
    w = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = w * 3.0
    assert not y.requires_grad


def test_backward_needs_scalar():
    w = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (w * 2.0).backward()


def test_nonfinite_raises_with_op_name():
    with pytest.raises(NonFiniteError) as exc:
        log(Tensor(np.array([0.0])))
    assert exc.value.op == "log"


def test_nonfinite_through_division():
    with pytest.raises(NonFiniteError):
        Tensor(np.array([1.0])) / Tensor(np.array([0.0]))


# -- SVD ---------------------------------------------------------------------


def test_svd_diagonal():
    _, s, _ = svd(np.diag([3.0, 2.0, 1.0]))
    assert np.allclose(s, [3.0, 2.0, 1.0], atol=1e-14)


def test_rank_two_truncation_of_diagonal():
    m = np.diag([3.0, 2.0, 1.0])
    assert np.isclose(np.linalg.norm(m - low_rank_reconstruct(m, 2)), 1.0, atol=1e-12)


def test_rank_one_of_diagonal():
    assert np.allclose(low_rank_reconstruct(np.diag([3.0, 2.0, 1.0]), 1), np.diag([3.0, 0.0, 0.0]), atol=1e-12)


def test_full_rank_reconstruction_is_copy():
    m = Rng(6).normal((6, 4))
    assert np.max(np.abs(low_rank_reconstruct(m, 4) - m)) < 1e-10


@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 10_000))
def test_svd_reconstruction_and_order(r, c, seed):
    m = Rng(seed).normal((r, c))
    u, s, v = svd(m)
    assert np.linalg.norm(u @ np.diag(s) @ v.T - m) <= 1e-10 * max(np.linalg.norm(m), 1e-300)
    assert (s >= 0).all() and (np.diff(s) <= 0).all()
    k = min(r, c)
    assert np.allclose(u.T @ u, np.eye(k), atol=1e-10)
    assert np.allclose(v.T @ v, np.eye(k), atol=1e-10)


@pytest.mark.parametrize("rank", [1, 3, 5, 7])
def test_eckart_young_on_12x8(rank):
    m = Rng(7).normal((12, 8))
    _, s, _ = svd(m)
    err = np.linalg.norm(m - low_rank_reconstruct(m, rank))
    assert abs(err - np.sqrt((s[rank:] ** 2).sum())) <= 1e-8 * err


def test_eckart_young_on_10x10_rank4():
    m = Rng(8).normal((10, 10))
    _, s, _ = svd(m)
    err = np.linalg.norm(m - low_rank_reconstruct(m, 4))
    assert abs(err - np.sqrt((s[4:] ** 2).sum())) <= 1e-8 * err


def test_svd_rank_deficient():
    r = Rng(9)
    m = r.normal((10, 2)) @ r.normal((2, 6))
    u, s, v = svd(m)
    assert s[2:].max() < 1e-12 * s[0]
    assert np.allclose(u.T @ u, np.eye(6), atol=1e-10)
    assert np.linalg.norm(u @ np.diag(s) @ v.T - m) < 1e-10 * np.linalg.norm(m)


def test_svd_matches_numpy_singular_values():
    m = Rng(10).normal((20, 9))
    assert np.allclose(svd(m)[1], np.linalg.svd(m, compute_uv=False), rtol=1e-12)


@pytest.mark.parametrize("shape", [(3, 5), (5, 3)])
def test_svd_leaves_input_untouched(shape):
    m = Rng(14).normal(shape)
    keep = m.copy()
    svd(m)
    svd(m.T)
    assert np.array_equal(m, keep)


def test_svd_rejects_non_matrix():
    with pytest.raises(ValueError):
        svd(np.ones(3))


@pytest.mark.parametrize("r", [0, 4])
def test_low_rank_range(r):
    with pytest.raises(ValueError):
        low_rank_reconstruct(np.ones((3, 3)), r)


# -- RNG ---------------------------------------------------------------------


def test_rng_is_deterministic():
    a, b = Rng(42), Rng(42)
    assert np.array_equal(a.normal((100,)), b.normal((100,)))
    assert np.array_equal(a.u64(10), b.u64(10))


def test_rng_known_first_output():
    # xoshiro256** seeded through splitmix64(0); reference stream computed with plain integers
    sm = []
    x = 0
    mask = (1 << 64) - 1
    for _ in range(4):
        x = (x + 0x9E3779B97F4A7C15) & mask
        z = x
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
        sm.append(z ^ (z >> 31))
    s1 = sm[1]
    rotl = lambda v, k: ((v << k) | (v >> (64 - k))) & mask
    expected = (rotl((s1 * 5) & mask, 7) * 9) & mask
    assert int(Rng(0).u64(1)[0]) == expected


def test_spawn_depends_on_key_and_seed_only():
    a = Rng(3)
    a.normal((50,))
    assert np.array_equal(a.spawn("x").normal((5,)), Rng(3).spawn("x").normal((5,)))
    assert not np.array_equal(Rng(3).spawn("x").normal((5,)), Rng(3).spawn("y").normal((5,)))


def test_uniform_range_and_normal_moments():
    r = Rng(11)
    u = r.uniform((20000,))
    assert u.min() >= 0.0 and u.max() < 1.0
    z = r.normal((20000,))
    assert abs(z.mean()) < 0.03 and abs(z.std() - 1.0) < 0.03


def test_permutation_is_permutation():
    p = Rng(12).permutation(50)
    assert sorted(p.tolist()) == list(range(50))


@pytest.mark.skipif(not COMPILED, reason="compiled kernels not built")
@pytest.mark.parametrize("fill", ["fill_u64", "fill_uniform", "fill_normal"])
def test_compiled_rng_matches_fallback_bitwise(fill):
    from mmcompress.numkit import _kernels

    state = Rng(99).state
    for n in (1, 7, 64):
        dtype = np.uint64 if fill == "fill_u64" else np.float64
        out_c, out_p = np.empty(n, dtype), np.empty(n, dtype)
        sc, sp = state.copy(), state.copy()
        getattr(_kernels, fill)(sc, out_c)
        getattr(_fallback, fill)(sp, out_p)
        assert np.array_equal(out_c, out_p)
        assert np.array_equal(sc, sp)


@pytest.mark.skipif(not COMPILED, reason="compiled kernels not built")
def test_compiled_jacobi_agrees_with_fallback():
    from mmcompress.numkit import _kernels

    m = Rng(13).normal((9, 6))
    results = []
    for mod in (_kernels, _fallback):
        at = np.ascontiguousarray(m.T)
        vt = np.eye(6)
        mod.jacobi_sweeps(at, vt, 1e-15, 80)
        results.append(np.sort(np.sqrt((at * at).sum(axis=1))))
    assert np.allclose(results[0], results[1], rtol=1e-12)


# -- Adam --------------------------------------------------------------------


def test_adam_minimizes_quadratic():
    params = {"w": np.array([3.0, -2.0])}
    opt = Adam(lr=0.1, grad_clip=None)
    for _ in range(300):
        opt.step(params, {"w": 2 * params["w"]})
    assert np.abs(params["w"]).max() < 1e-2


def test_adam_first_step_is_lr_times_sign():
    params = {"w": np.array([1.0, -1.0])}
    Adam(lr=0.01, grad_clip=None).step(params, {"w": np.array([5.0, -0.3])})
    assert np.allclose(params["w"], [0.99, -0.99], atol=1e-9)


def test_adam_schedule():
    opt = Adam(lr=1.0, warmup_steps=4, cosine_steps=10)
    assert opt.current_lr() == pytest.approx(0.25)
    opt.t = 10
    assert opt.current_lr() == pytest.approx(0.0, abs=1e-12)


def test_adam_clips_global_norm():
    params = {"a": np.zeros(1), "b": np.zeros(1)}
    opt = Adam(lr=1.0, grad_clip=1.0)
    opt.step(params, {"a": np.array([300.0]), "b": np.array([400.0])})
    # clipped grads (0.6, 0.8) still give unit first steps after bias correction
    assert np.allclose(params["a"], -1.0) and np.allclose(params["b"], -1.0)
