import numpy as np
import pytest

from mmcompress import flow, mmdit, ptd, textdistill
from mmcompress.numkit import Rng

from conftest import TINY, randomize

ALPHAS = textdistill.default_alphas(TINY.n_blocks)


# -- alphas ------------------------------------------------------------------------------


def test_default_alphas():
    assert textdistill.default_alphas(10) == [0.1, 0.1, 0.1] + [0.0] * 7
    assert textdistill.default_alphas(3) == [0.1, 0.1, 0.1]
    assert textdistill.default_alphas(2) == [0.1, 0.1]
    with pytest.raises(ValueError):
        textdistill.default_alphas(0)


# -- fixtures -----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def world(tiny_world):
    spec, data, enc, pe, cond = tiny_world
    dit = randomize(mmdit.build_model(TINY, 0), std=0.2)
    prompts = data.captions[:, 0]
    pooled = cond.pooled[:, 0]
    return spec, data, enc, cond, dit, prompts, pooled


def _student(spec, seed: int = 0):
    return flow.student_encoder(spec, seed, d_enc=4, out_dim=8)


def _clone(enc):
    s = enc.copy()
    s.frozen = False
    return s


def _grads(dit, enc, student, prompts, pooled, alphas, t_hat, N=4, step_weights=None, seed=0):
    r = Rng(seed)
    idx = np.arange(3)
    x_init = r.normal((3, TINY.T, TINY.latent_ch))
    p_t = enc.encode(prompts[idx]).data
    P = student.tensors()
    loss = textdistill.rollout_loss(dit, p_t, student.encode(prompts[idx], P), pooled[idx], x_init, flow.Schedule(N), alphas, t_hat, step_weights)
    loss.backward()
    g = {k: (np.zeros_like(v.data) if v.grad is None else v.grad) for k, v in P.items()}
    return loss.item(), g


# -- warm-up ------------------------------------------------------------------------------


def test_warmup_loss_zero_for_clone(world):
    spec, data, enc, *_ , prompts, _ = world
    s = _clone(enc)
    target = enc.encode(prompts).data
    assert textdistill.warmup_loss(target, s, prompts, s.tensors()).item() == 0.0


def test_warmup_rejects_dim_mismatch(world):
    spec, data, enc, *_ , prompts, _ = world
    bad = flow.student_encoder(spec, 0, d_enc=4, out_dim=6)
    with pytest.raises(ValueError):
        textdistill.warmup(enc, bad, prompts, 1, 1e-3, 4, Rng(0))


def test_warmup_decreases_loss(world):
    spec, data, enc, *_ , prompts, _ = world
    s = _student(spec)
    teacher_before = {k: v.copy() for k, v in enc.params.items()}
    corpus = data.captions.reshape(-1, data.captions.shape[-1])
    curve = textdistill.warmup(enc, s, corpus, 30, 1e-3, len(corpus), Rng(1))
    means = [np.mean(curve[i : i + 10]) for i in (0, 10, 20)]
    assert means[0] > means[1] > means[2]
    assert all(np.array_equal(enc.params[k], v) for k, v in teacher_before.items())


# -- rollout loss and cutoff ----------------------------------------------------------------


def test_zero_alphas_give_zero_loss_and_gradients(world):
    spec, data, enc, cond, dit, prompts, pooled = world
    loss, g = _grads(dit, enc, _student(spec), prompts, pooled, [0.0] * TINY.n_blocks, 1)
    assert loss == 0.0 and all(not v.any() for v in g.values())


def test_cutoff_past_last_step_gives_exact_zero_gradients(world):
    spec, data, enc, cond, dit, prompts, pooled = world
    loss, g = _grads(dit, enc, _student(spec), prompts, pooled, ALPHAS, 5, N=4)
    assert loss == 0.0 and all(not v.any() for v in g.values())


def test_clone_gives_zero_loss_at_every_cutoff(world):
    spec, data, enc, cond, dit, prompts, pooled = world
    s = _clone(enc)
    for t_hat in range(0, 5):
        loss, g = _grads(dit, enc, s, prompts, pooled, ALPHAS, t_hat)
        assert loss == 0.0 and all(not v.any() for v in g.values())


def test_cutoff_matches_explicit_step_weights(world):
    spec, data, enc, cond, dit, prompts, pooled = world
    s = _student(spec)
    for t_hat in (1, 2, 4):
        weights = [1.0 if j >= t_hat else 0.0 for j in range(5)]
        la, ga = _grads(dit, enc, s, prompts, pooled, ALPHAS, t_hat)
        lb, gb = _grads(dit, enc, s, prompts, pooled, ALPHAS, 0, step_weights=weights)
        assert la == pytest.approx(lb, rel=1e-13)
        for k in ga:
            assert np.allclose(ga[k], gb[k], rtol=1e-12, atol=1e-15)


def test_cutoff_zero_supervises_every_step(world):
    spec, data, enc, cond, dit, prompts, pooled = world
    s = _student(spec)
    l0, g0 = _grads(dit, enc, s, prompts, pooled, ALPHAS, 0)
    l1, g1 = _grads(dit, enc, s, prompts, pooled, ALPHAS, 1)
    assert l0 == l1 and all(np.array_equal(g0[k], g1[k]) for k in g0)
    # more supervised steps means more loss terms
    l3, _ = _grads(dit, enc, s, prompts, pooled, ALPHAS, 3)
    assert l0 > l3 > 0


def test_gradients_scale_linearly_in_each_alpha(world):
    spec, data, enc, cond, dit, prompts, pooled = world
    s = _student(spec)
    L = TINY.n_blocks
    singles = []
    for i in range(3):
        a = [0.0] * L
        a[i] = 0.1
        _, g1 = _grads(dit, enc, s, prompts, pooled, a, 1)
        a[i] = 0.2
        _, g2 = _grads(dit, enc, s, prompts, pooled, a, 1)
        # doubling is exact in floating point, so the two points must agree bitwise
        assert all(np.array_equal(2.0 * g1[k], g2[k]) for k in g1)
        singles.append(g1)
    _, gall = _grads(dit, enc, s, prompts, pooled, ALPHAS, 1)
    for k in gall:
        assert np.allclose(gall[k], sum(g[k] for g in singles), rtol=1e-12, atol=1e-16)


def test_replayed_trajectory_matches_live_rollout(world):
    spec, data, enc, cond, dit, prompts, pooled = world
    s = _student(spec)
    ids = prompts[:3]
    x_init = Rng(0).normal((3, TINY.T, TINY.latent_ch))
    sched = flow.Schedule(4)
    lat = textdistill.rollout_latents(dit, s.encode(ids), pooled[:3], x_init, sched)
    assert np.array_equal(lat[4], x_init) and lat[0].shape == x_init.shape
    p_t = enc.encode(ids).data
    for t_hat in (0, 2):
        a = textdistill.rollout_loss(dit, p_t, s.encode(ids), pooled[:3], x_init, sched, ALPHAS, t_hat)
        b = textdistill.rollout_loss(dit, p_t, s.encode(ids), pooled[:3], x_init, sched, ALPHAS, t_hat, latents=lat)
        assert a.item() == b.item()


def test_rollout_validates_alpha_count(world):
    spec, data, enc, cond, dit, prompts, pooled = world
    with pytest.raises(ValueError):
        _grads(dit, enc, _student(spec), prompts, pooled, [0.1, 0.1], 1)
    with pytest.raises(ValueError):
        _grads(dit, enc, _student(spec), prompts, pooled, [-0.1] + [0.0] * (TINY.n_blocks - 1), 1)


def test_sample_cutoff_range():
    r = Rng(0)
    draws = {textdistill.sample_cutoff(r, 4, None) for _ in range(200)}
    assert draws == {1, 2, 3, 4}
    assert textdistill.sample_cutoff(r, 4, 0) == 0


# -- stage 2 ------------------------------------------------------------------------------


def test_blockwise_distill_freezes_transformer(world):
    spec, data, enc, cond, dit, prompts, pooled = world
    s = _student(spec)
    dit_before = {k: v.copy() for k, v in dit.params.items()}
    s_before = {k: v.copy() for k, v in s.params.items()}
    rec = textdistill.TextDistillRecipe(steps=3, batch=2, lr=1e-3)
    rep = textdistill.blockwise_distill(dit, enc, textdistill.DistillState(s, ALPHAS), prompts, pooled, flow.Schedule(3), rec, Rng(2))
    assert all(np.array_equal(dit.params[k], v) for k, v in dit_before.items())
    assert any(not np.array_equal(s.params[k], v) for k, v in s_before.items())
    assert len(rep["cutoffs"]) == 3 and all(1 <= c <= 3 for c in rep["cutoffs"])
    assert all(np.isfinite(rep["losses"]))


def test_fixed_cutoff_flag_is_used(world):
    spec, data, enc, cond, dit, prompts, pooled = world
    rec = textdistill.TextDistillRecipe(steps=2, batch=2)
    rep = textdistill.blockwise_distill(dit, enc, textdistill.DistillState(_student(spec), ALPHAS, cutoff=0), prompts, pooled, flow.Schedule(3), rec, Rng(2))
    assert rep["cutoffs"] == [0, 0]


def test_blockwise_distill_needs_positive_alpha(world):
    spec, data, enc, cond, dit, prompts, pooled = world
    state = textdistill.DistillState(_student(spec), [0.0] * TINY.n_blocks)
    with pytest.raises(ValueError):
        textdistill.blockwise_distill(dit, enc, state, prompts, pooled, flow.Schedule(2), textdistill.TextDistillRecipe(steps=1), Rng(0))


def test_rollout_through_routed_model(world):
    spec, data, enc, cond, dit, prompts, pooled = world
    m = ptd.attach(dit, ptd.PtdConfig(t_thresh=0.5, blocks=ptd.default_blocks(TINY), active=2), Rng(0))
    loss, g = _grads(m, enc, _student(spec), prompts, pooled, ALPHAS, 1)
    assert np.isfinite(loss) and loss > 0 and any(v.any() for v in g.values())


# -- evaluation ---------------------------------------------------------------------------


def _eval(world, student, dit=None):
    spec, data, enc, cond, base, prompts, pooled = world
    ev = flow.make_eval_set(data, cond, Rng(8))
    r = Rng(9)
    x_t = r.normal((len(ev), TINY.T, TINY.latent_ch))
    t = r.uniform((len(ev),))
    return textdistill.eval_swap(base if dit is None else dit, enc, student, ev.captions, ev.pooled, ev, spec, flow.Schedule(2), x_t, t)


def test_cloned_student_has_zero_gap(world):
    rep = _eval(world, _clone(world[2]))
    assert rep["velocity_gap"] == 0.0 and rep["accuracy_gap"] == 0.0 and rep["embedding_mse"] == 0.0


def test_trained_student_beats_untrained(world):
    spec, data, enc, *_ , prompts, _ = world
    untrained = _student(spec, seed=3)
    trained = untrained.copy()
    corpus = data.captions.reshape(-1, data.captions.shape[-1])
    textdistill.warmup(enc, trained, corpus, 150, 3e-3, 32, Rng(4))
    gap_u, gap_t = _eval(world, untrained)["velocity_gap"], _eval(world, trained)["velocity_gap"]
    assert gap_t < gap_u


def test_eval_swap_on_routed_model(world):
    spec, data, enc, cond, dit, prompts, pooled = world
    m = ptd.attach(dit, ptd.PtdConfig(t_thresh=0.5, blocks=ptd.default_blocks(TINY), active=2), Rng(0))
    rep = _eval(world, _student(spec), dit=m)
    assert np.isfinite(rep["velocity_gap"]) and 0.0 <= rep["accuracy_teacher_enc"] <= 1.0


def test_eval_swap_dim_mismatch(world):
    spec, data, enc, cond, dit, prompts, pooled = world
    wide = flow.teacher_encoder(spec, 0, d_enc=12)
    with pytest.raises(ValueError):
        _eval(world, _clone(wide))
