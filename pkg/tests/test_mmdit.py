import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mmcompress import mmdit
from mmcompress.numkit import Rng, Tensor
from mmcompress.numkit import functional as F

from conftest import TINY, fd_check, inputs, randomize


# -- config ---------------------------------------------------------------------


def test_config_requires_d_equal_h_times_dh():
    with pytest.raises(ValueError):
        mmdit.ModelConfig(d=30, H=4, d_H=8)


@pytest.mark.parametrize("kw", [{"img_grid": 1}, {"n_ds": 0}, {"d": 12, "H": 4, "d_H": 3}])
def test_config_rejects_bad_values(kw):
    with pytest.raises(ValueError):
        mmdit.ModelConfig(**kw)


def test_default_is_t1_shape():
    cfg = mmdit.ModelConfig()
    assert (cfg.d, cfg.H, cfg.d_H, cfg.n_ds, cfg.n_ss, cfg.img_grid, cfg.txt_len, cfg.ffn_mult) == (64, 8, 8, 4, 6, 8, 8, 4)
    assert cfg.T == 64


# -- parameter accounting -----------------------------------------------------------


@given(
    st.integers(1, 4),
    st.sampled_from([2, 4, 6]),
    st.integers(1, 3),
    st.integers(0, 3),
    st.integers(1, 4),
)
def test_closed_form_matches_enumeration(H, d_H, n_ds, n_ss, ffn_mult):
    cfg = mmdit.ModelConfig(d=H * d_H, H=H, d_H=d_H, n_ds=n_ds, n_ss=n_ss, ffn_mult=ffn_mult, img_grid=2, txt_len=2, latent_ch=3, txt_dim=5, t_emb_dim=4, pooled_dim=3)
    pc = mmdit.count_params(cfg)
    shapes = mmdit.param_shapes(cfg)
    params = {k: np.zeros(s) for k, s in shapes.items()}
    assert mmdit.enumerate_params(params) == (pc.weights, pc.biases)
    ds_w, ds_b = mmdit.enumerate_params({k: v for k, v in params.items() if k.startswith("ds.0.")}) if n_ds else (0, 0)
    assert (ds_w, ds_b) == (pc.ds_block, pc.ds_block_bias)
    if n_ss:
        assert mmdit.enumerate_params({k: v for k, v in params.items() if k.startswith("ss.0.")}) == (pc.ss_block, pc.ss_block_bias)


@pytest.mark.parametrize("d", [64, 1536, 2048, 3072])
def test_block_closed_forms_are_36_and_15_d_squared(d):
    pc = mmdit.count_params(mmdit.ModelConfig(d=d, H=d // 8, d_H=8))
    assert pc.ds_block == 36 * d * d
    assert pc.ss_block == 15 * d * d


def test_paper_scale_block_sizes():
    pc = mmdit.count_params(mmdit.ModelConfig(d=3072, H=24, d_H=128))
    assert pc.ds_block == 339_738_624
    assert pc.ss_block == 141_557_760
    pc = mmdit.count_params(mmdit.ModelConfig(d=1536, H=16, d_H=96))
    assert pc.ds_block == 84_934_656
    assert pc.ss_block == 35_389_440


def test_static_layout_drops_adaln():
    d = 1536
    pc = mmdit.count_params(mmdit.ModelConfig(d=d, H=16, d_H=96), adaln=False)
    assert pc.ds_block == 24 * d * d
    assert pc.ss_block == 12 * d * d
    assert abs(pc.ds_block / 57e6 - 1) < 0.05
    assert abs(pc.ss_block / 27e6 - 1) < 0.05


# -- rotary ---------------------------------------------------------------------------


def test_rope_origin_is_identity():
    rope = mmdit.rope_table(4, 8)
    assert np.array_equal(rope.cos[0], np.ones(4))
    assert np.array_equal(rope.sin[0], np.zeros(4))


@given(st.integers(0, 10_000))
def test_rope_preserves_norm(seed):
    rope = mmdit.rope_table(4, 8)
    q = Rng(seed).normal((2, 16, 8))
    out = mmdit.apply_rotary(Tensor(q), rope.cos, rope.sin).data
    assert np.allclose(np.linalg.norm(out.reshape(2, 16, 4, 2), axis=-1), np.linalg.norm(q.reshape(2, 16, 4, 2), axis=-1), atol=1e-12)


def test_coarse_rope_is_every_other_fine_coordinate():
    fine = mmdit.rope_table(8, 8)
    coarse = mmdit.rope_table(4, 8, stride=2)
    rows = [(2 * r) * 8 + 2 * c for r in range(4) for c in range(4)]
    assert np.array_equal(coarse.angles, fine.angles[rows])
    assert np.array_equal(coarse.positions, fine.positions[rows])


def test_rope_text_band_unrotated():
    cos, sin = mmdit.rope_table(4, 4).joint(3)
    assert np.array_equal(cos[:3], np.ones((3, 2)))
    assert np.array_equal(sin[:3], np.zeros((3, 2)))


@pytest.mark.parametrize("d_H", [0, 3, 7])
def test_rope_rejects_odd_dims(d_H):
    with pytest.raises(ValueError):
        mmdit.rope_table(4, d_H)


def test_rope_prefix_stable_under_head_truncation():
    a, b = mmdit.rope_table(4, 8), mmdit.rope_table(4, 6)
    assert np.array_equal(a.angles[:, :3], b.angles)


def test_rotary_gradient():
    rope = mmdit.rope_table(2, 4)
    x = Rng(1).normal((1, 4, 4))
    coef = Rng(2).normal((1, 4, 4))
    t = Tensor(x, requires_grad=True)
    (mmdit.apply_rotary(t, rope.cos, rope.sin) * Tensor(coef)).sum().backward()
    fd_check(lambda: (mmdit.apply_rotary(Tensor(x), rope.cos, rope.sin).data * coef).sum(), {"x": x}, {"x": t.grad}, tol=1e-6)


# -- attention -------------------------------------------------------------------------


def test_single_token_attention_returns_v():
    r = Rng(0)
    q, k, v = (Tensor(r.normal((1, 1, 4))) for _ in range(3))
    out, _ = mmdit.joint_attention(q, k, v, 1)
    assert np.allclose(out.data, v.data, atol=1e-15)


def test_identical_heads_give_identical_features():
    r = Rng(1)
    one = [r.normal((2, 5, 3)) for _ in range(3)]
    q, k, v = (Tensor(np.concatenate([a] * 4, axis=-1)) for a in one)
    _, heads = mmdit.joint_attention(q, k, v, 4)
    for h in range(1, 4):
        assert np.array_equal(heads.data[:, h], heads.data[:, 0])


def test_attention_rows_sum_to_one():
    r = Rng(2)
    q, k, v = (Tensor(r.normal((2, 6, 8))) for _ in range(3))
    rope = mmdit.rope_table(2, 4)
    cos, sin = rope.joint(2)
    _, _, probs = mmdit.joint_attention(q, k, v, 2, cos, sin, return_probs=True)
    assert np.abs(probs.data.sum(axis=-1) - 1.0).max() < 1e-12


def test_masked_joint_attention_is_per_modality():
    r = Rng(3)
    L, T = 3, 4
    q, k, v = (r.normal((1, L + T, 4)) for _ in range(3))
    joint, _ = mmdit.joint_attention(Tensor(q), Tensor(k), Tensor(v), 2, mask=mmdit.modality_mask(L, T))
    txt, _ = mmdit.joint_attention(Tensor(q[:, :L]), Tensor(k[:, :L]), Tensor(v[:, :L]), 2)
    img, _ = mmdit.joint_attention(Tensor(q[:, L:]), Tensor(k[:, L:]), Tensor(v[:, L:]), 2)
    assert np.allclose(joint.data[:, :L], txt.data, atol=1e-14)
    assert np.allclose(joint.data[:, L:], img.data, atol=1e-14)


def test_attention_shape_mismatch():
    with pytest.raises(ValueError):
        mmdit.joint_attention(Tensor(np.ones((1, 2, 4))), Tensor(np.ones((1, 3, 4))), Tensor(np.ones((1, 2, 4))), 2)


# -- AdaLN ------------------------------------------------------------------------------


def _ones(x, value):
    return Tensor(np.full((x.shape[0], 1, x.shape[-1]), value))


def test_adaln_neutral_coeffs_give_layer_norm_path():
    x = Tensor(Rng(4).normal((2, 3, 6)))
    out = mmdit.adaln_modulate(x, (_ones(x, 0.0), _ones(x, 0.0), _ones(x, 1.0)), lambda h: h)
    assert np.allclose(out.data, x.data + F.layer_norm(x).data, atol=1e-15)


def test_adaln_zero_gate_is_passthrough():
    x = Tensor(Rng(5).normal((2, 3, 6)))
    coeffs = [_ones(x, v) for v in (0.3, -0.2, 0.0, 0.1, 0.4, 0.0)]
    out = mmdit.adaln_modulate(x, coeffs, [lambda h: h * 7.0, lambda h: h - 1.0])
    assert np.array_equal(out.data, x.data)


@pytest.mark.parametrize("n", [2, 4, 5, 7])
def test_adaln_rejects_wrong_arity(n):
    x = Tensor(np.ones((1, 2, 4)))
    with pytest.raises(ValueError):
        mmdit.adaln_modulate(x, [_ones(x, 0.0)] * n, lambda h: h)


def test_adaln_gradient():
    r = Rng(6)
    x, sh, sc, g = r.normal((2, 3, 6)), r.normal((2, 1, 6)), r.normal((2, 1, 6)), r.normal((2, 1, 6))
    params = {"x": x, "sh": sh, "sc": sc, "g": g}

    def loss(P):
        return (mmdit.adaln_modulate(P["x"], (P["sh"], P["sc"], P["g"]), F.gelu) ** 2).sum()

    T = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    loss(T).backward()
    fd_check(lambda: loss({k: Tensor(v) for k, v in params.items()}).item(), params, {k: t.grad for k, t in T.items()})


# -- forward -------------------------------------------------------------------------------


def test_zero_output_projection_gives_zero_velocity(tiny_model):
    tiny_model.params["final.proj.w"][:] = 0.0
    tiny_model.params["final.proj.b"][:] = 0.0
    v, _ = mmdit.forward(tiny_model, *inputs(TINY))
    assert not v.data.any()


def test_trace_shapes(tiny_model):
    x, t, txt, pooled = inputs(TINY, b=3)
    v, trace = mmdit.forward(tiny_model, x, t, txt, pooled)
    assert v.shape == (3, TINY.T, TINY.latent_ch)
    assert [(r.kind, r.index) for r in trace] == tiny_model.block_sites()
    for rec in trace:
        assert rec.img_in.shape == rec.img_out.shape == (3, TINY.T, TINY.d)
        assert rec.txt_in.shape == rec.txt_out.shape == (3, TINY.txt_len, TINY.d)
        assert rec.heads.shape == (3, TINY.H, TINY.txt_len + TINY.T, TINY.d_H)


def test_zero_gates_make_blocks_identity():
    model = mmdit.build_model(TINY, 0)  # modulation heads start at zero
    model.params["final.proj.w"] = Rng(1).normal(model.params["final.proj.w"].shape)
    _, trace = mmdit.forward(model, *inputs(TINY))
    for rec in trace:
        assert np.array_equal(rec.img_out.data, rec.img_in.data)
        assert np.array_equal(rec.txt_out.data, rec.txt_in.data)


def test_permuting_tokens_with_positions_permutes_output(tiny_model):
    x, t, txt, pooled = inputs(TINY)
    base = mmdit.rope_table(TINY.img_grid, TINY.d_H, TINY.rope_base)
    perm = Rng(9).permutation(TINY.T)
    permuted = mmdit.Rope2D(base.grid_side, base.d_H, base.positions[perm], base.angles[perm])
    v0, _ = mmdit.forward(tiny_model, x, t, txt, pooled, rope=base)
    v1, _ = mmdit.forward(tiny_model, x[:, perm], t, txt, pooled, rope=permuted)
    assert np.allclose(v1.data, v0.data[:, perm], atol=1e-12, rtol=0)


def test_forward_rejects_bad_shapes(tiny_model):
    x, t, txt, pooled = inputs(TINY)
    with pytest.raises(ValueError):
        mmdit.forward(tiny_model, x[:, :-1], t, txt, pooled)
    with pytest.raises(ValueError):
        mmdit.forward(tiny_model, x, t, txt[..., :-1], pooled)
    with pytest.raises(ValueError):
        mmdit.forward(tiny_model, x, np.array([0.5, 1.5]), txt, pooled)


def test_forward_is_batch_independent(tiny_model):
    x, t, txt, pooled = inputs(TINY, b=3)
    full, _ = mmdit.forward(tiny_model, x, t, txt, pooled)
    one, _ = mmdit.forward(tiny_model, x[1:2], t[1:2], txt[1:2], pooled[1:2])
    assert np.allclose(one.data[0], full.data[1], atol=1e-13)


def test_constant_conditioning_gives_identical_coefficients(tiny_model):
    pooled = np.tile(Rng(3).normal((1, TINY.pooled_dim)), (5, 1))
    coeffs = mmdit.dynamic_coeffs(tiny_model, 0.4, pooled)
    for arr in coeffs.values():
        assert np.array_equal(arr, np.broadcast_to(arr[0], arr.shape))


def test_modulation_sites_and_arity():
    sites = mmdit.modulation_sites(TINY)
    assert len(sites) == 2 * TINY.n_ds + TINY.n_ss
    assert [mmdit.site_coeff_count(s) for s in ("ds.0.img", "ss.2")] == [6, 3]


def test_static_table_nearest_lookup():
    table = mmdit.StaticLnTable(np.array([0.0, 0.5, 1.0]), {"ss.0": np.arange(6.0).reshape(3, 2)})
    assert table.lookup("ss.0", np.array([0.1, 0.74, 0.76])).tolist() == [[0.0, 1.0], [2.0, 3.0], [4.0, 5.0]]


def test_copy_is_deep(tiny_model):
    dup = tiny_model.copy()
    dup.params["img_in.w"][0, 0] += 1.0
    assert dup.params["img_in.w"][0, 0] != tiny_model.params["img_in.w"][0, 0]


def test_fresh_model_has_empty_provenance():
    assert mmdit.build_model(TINY, 0).provenance == []


def test_build_is_deterministic():
    a, b = mmdit.build_model(TINY, 4), mmdit.build_model(TINY, 4)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
