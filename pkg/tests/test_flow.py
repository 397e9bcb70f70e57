import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mmcompress import flow, mmdit
from mmcompress.numkit import Rng, Tensor

from conftest import TINY, fd_check

SPEC = flow.SynthSpec(grid=4, channels=3, txt_len=4)


# -- interpolant and loss ---------------------------------------------------------


def test_interpolant_endpoints():
    r = Rng(0)
    x0, eps = r.normal((3, 4, 2)), r.normal((3, 4, 2))
    assert np.array_equal(flow.interpolate(x0, eps, np.zeros(3)), x0)
    assert np.array_equal(flow.interpolate(x0, eps, np.ones(3)), eps)


@given(st.floats(0.0, 1.0))
def test_batch_interpolant(t):
    r = Rng(1)
    x0, eps = r.normal((2, 3)), r.normal((2, 3))
    b = flow.make_batch(x0, eps, t)
    assert np.allclose(b.x_t, (1 - t) * x0 + t * eps, atol=1e-15)


def test_make_batch_shape_mismatch():
    with pytest.raises(ValueError):
        flow.make_batch(np.zeros((2, 3)), np.zeros((2, 4)), 0.5)


def _oracle(x0, eps):
    return lambda x, t, txt, pooled: eps - x0


def test_fm_loss_zero_for_oracle():
    r = Rng(2)
    x0, eps = r.normal((2, 4, 3)), r.normal((2, 4, 3))
    b = flow.make_batch(x0, eps, r.uniform((2,)))
    assert flow.fm_loss(_oracle(x0, eps), b, None, None).item() == 0.0


def test_fm_loss_of_zero_model_is_target_energy():
    r = Rng(3)
    x0, eps = r.normal((2, 4, 3)), r.normal((2, 4, 3))
    b = flow.make_batch(x0, eps, 0.3)
    loss = flow.fm_loss(lambda *a: np.zeros_like(x0), b, None, None).item()
    assert loss == pytest.approx(np.mean((eps - x0) ** 2), rel=1e-14)


def test_fm_loss_shape_mismatch():
    b = flow.make_batch(np.zeros((2, 4, 3)), np.ones((2, 4, 3)), 0.5)
    with pytest.raises(ValueError):
        flow.fm_loss(lambda *a: np.zeros((2, 4, 2)), b, None, None)


def test_fm_loss_gradient(tiny_model):
    r = Rng(4)
    b = flow.sample_batch(r.normal((2, TINY.T, TINY.latent_ch)), r)
    txt, pooled = r.normal((2, TINY.txt_len, TINY.txt_dim)), r.normal((2, TINY.pooled_dim))
    P = tiny_model.tensors(lambda k: True)
    flow.fm_loss(tiny_model, b, txt, pooled, P).backward()
    fd_check(lambda: flow.fm_loss(tiny_model, b, txt, pooled).item(), tiny_model.params, {k: t.grad for k, t in P.items()})


# -- schedule and sampler ---------------------------------------------------------------


@given(st.integers(1, 50))
def test_schedule_increments_sum_to_one(N):
    ts = flow.Schedule(N).timesteps
    assert ts[0] == 0.0 and ts[-1] == 1.0 and (np.diff(ts) > 0).all()
    assert np.diff(ts).sum() == pytest.approx(1.0, abs=1e-14)


def test_schedule_validation():
    with pytest.raises(ValueError):
        flow.Schedule(0)
    with pytest.raises(ValueError):
        flow.Schedule(2, grid=(0.0, 0.7, 0.6))
    assert flow.Schedule(2, grid=(0.0, 0.3, 1.0)).sampler_ts.tolist() == [1.0, 0.3]


@given(st.integers(1, 12), st.integers(0, 1000))
def test_euler_recovers_x0_with_oracle_velocity(N, seed):
    r = Rng(seed)
    x0, eps = r.normal((2, 4, 3)), r.normal((2, 4, 3))
    res = flow.euler_sample(_oracle(x0, eps), flow.Schedule(N), None, None, x_init=eps)
    assert np.abs(res.x0 - x0).max() < 1e-10
    assert len(res.latents) == N + 1 and len(res.ts) == N


@given(st.integers(1, 12))
def test_euler_constant_field(N):
    r = Rng(N)
    v, xN = r.normal((1, 4, 3)), r.normal((1, 4, 3))
    res = flow.euler_sample(lambda *a: v, flow.Schedule(N), None, None, x_init=xN)
    assert np.abs(res.x0 - (xN - v)).max() < 1e-10


def test_single_step_is_full_denoise(tiny_model):
    r = Rng(5)
    x, txt, pooled = r.normal((1, TINY.T, TINY.latent_ch)), r.normal((1, TINY.txt_len, TINY.txt_dim)), r.normal((1, TINY.pooled_dim))
    res = flow.euler_sample(tiny_model, flow.Schedule(1), txt, pooled, x_init=x)
    v, _ = mmdit.forward(tiny_model, x, 1.0, txt, pooled)
    assert np.array_equal(res.x0, x - v.data)


def test_sampler_draws_noise_from_rng(tiny_model):
    txt, pooled = np.zeros((2, TINY.txt_len, TINY.txt_dim)), np.zeros((2, TINY.pooled_dim))
    a = flow.euler_sample(tiny_model, flow.Schedule(2), txt, pooled, rng=Rng(7))
    b = flow.euler_sample(tiny_model, flow.Schedule(2), txt, pooled, rng=Rng(7))
    assert np.array_equal(a.x0, b.x0)
    assert a.latents[0].shape == (2, TINY.T, TINY.latent_ch)


# -- dataset --------------------------------------------------------------------------


def test_every_combination_appears():
    data = flow.make_dataset(SPEC, 48, Rng(0))
    seen = {tuple(f) for f in data.factors.tolist()}
    assert len(SPEC.combinations) == 24
    assert seen == set(SPEC.combinations)


def test_dataset_is_deterministic():
    a, b = flow.make_dataset(SPEC, 10, Rng(3)), flow.make_dataset(SPEC, 10, Rng(3))
    assert np.array_equal(a.latents, b.latents) and np.array_equal(a.captions, b.captions)


def test_render_is_pure():
    assert np.array_equal(flow.render(SPEC, (1, 2, 0), Rng(4)), flow.render(SPEC, (1, 2, 0), Rng(4)))
    assert np.array_equal(flow.render(SPEC, (1, 2, 0)), flow.render(SPEC, (1, 2, 0)))


def test_captions_carry_several_variants():
    data = flow.make_dataset(SPEC, 4, Rng(0))
    assert data.captions.shape == (4, len(flow.CAPTION_TEMPLATES), SPEC.txt_len)
    assert len({tuple(c) for c in data.captions[0].tolist()}) > 1


def test_make_dataset_rejects_empty():
    with pytest.raises(ValueError):
        flow.make_dataset(SPEC, 0, Rng(0))


@pytest.mark.parametrize("spec", [SPEC, flow.SynthSpec()])
def test_classifier_inverts_renderer(spec):
    data = flow.make_dataset(spec, 96, Rng(1))
    assert flow.factor_accuracy(spec, data.latents, data.factors) == 1.0
    clean = np.stack([flow.render(spec, f) for f in spec.combinations])
    assert (flow.classify(spec, clean) == np.array(spec.combinations)).all()


def test_prompt_ids_are_distinct_per_combination():
    data = flow.make_dataset(SPEC, 24, Rng(2))
    assert sorted(data.prompt_id.tolist()) == list(range(24))


@pytest.mark.parametrize("kw", [{"grid": 5}, {"grid": 2}, {"channels": 2}])
def test_spec_validation(kw):
    with pytest.raises(ValueError):
        flow.SynthSpec(**kw)


# -- encoders ------------------------------------------------------------------------------


def test_teacher_encoder_is_frozen_and_deterministic():
    a, b = flow.teacher_encoder(SPEC, 0, d_enc=8), flow.teacher_encoder(SPEC, 0, d_enc=8)
    assert a.frozen
    assert not any(t.requires_grad for t in a.tensors().values())
    ids = flow.make_dataset(SPEC, 3, Rng(0)).captions[:, 0]
    assert np.array_equal(a.encode(ids).data, b.encode(ids).data)


def test_student_adapter_matches_teacher_width():
    s = flow.student_encoder(SPEC, 0, d_enc=4, out_dim=8)
    ids = np.zeros((2, SPEC.txt_len), dtype=np.int64)
    assert s.encode(ids).shape == (2, SPEC.txt_len, 8)
    assert s.encode(ids, adapt=False).shape == (2, SPEC.txt_len, 4)


def test_encoder_rejects_wrong_length():
    with pytest.raises(ValueError):
        flow.teacher_encoder(SPEC, 0, d_enc=8).encode(np.zeros((1, 3), dtype=np.int64))


def test_pooled_encoder_ignores_padding():
    pe = flow.pooled_encoder(SPEC, 0, dim=4)
    a = pe.encode(np.array([[3, 5, 0, 0]]))
    b = pe.encode(np.array([[3, 5, 0, 0]]))
    assert np.array_equal(a, b)
    assert np.allclose(a[0], (pe.table[3] + pe.table[5]) / 2)


# -- training and step selection ------------------------------------------------------------


def test_divergence_is_reported_with_context():
    params = {"w": np.ones(2)}
    with pytest.raises(flow.DivergenceError) as exc:
        flow.train_loop(params, ["w"], lambda P, r: Tensor(np.array(np.nan)) + P["w"].sum(), flow.TrainRecipe(steps=2), Rng(0), "unit")
    assert exc.value.context == "unit" and exc.value.step == 0


def test_train_loop_reduces_loss():
    params = {"w": np.array([2.0, -3.0])}
    curve = flow.train_loop(params, ["w"], lambda P, r: (P["w"] * P["w"]).sum(), flow.TrainRecipe(steps=200, lr=0.05, warmup=0, log_every=50), Rng(0), "q")
    assert curve[-1] < curve[0]


def _eval_set(data, cond):
    return flow.make_eval_set(data, cond, Rng(8))


def test_select_steps_single_candidate(tiny_world):
    spec, data, enc, pe, cond = tiny_world
    model = mmdit.build_model(TINY.replace(txt_dim=8), 0)
    best, errs = flow.select_steps(model, [3], _eval_set(data, cond), spec)
    assert best == 3 and set(errs) == {3}


def test_select_steps_ties_go_to_smallest(tiny_world):
    spec, data, enc, pe, cond = tiny_world
    ev = _eval_set(data, cond)
    # oracle: velocity pointing from the fixed noise to the clean rendering
    clean = np.stack([flow.render(spec, tuple(f)) for f in ev.factors])
    oracle = lambda x, t, txt, pooled: ev.noise - clean
    best, errs = flow.select_steps(oracle, [8, 2, 4], ev, spec)
    assert best == 2
    assert set(errs.values()) == {0.0}


def test_select_steps_needs_candidates(tiny_world):
    spec, data, enc, pe, cond = tiny_world
    with pytest.raises(ValueError):
        flow.select_steps(None, [], _eval_set(data, cond), spec)
