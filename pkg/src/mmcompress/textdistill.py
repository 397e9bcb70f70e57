"""Two-stage text-encoder distillation against a frozen diffusion transformer.

Stage 1 regresses the adapted student embeddings onto the teacher's.
Stage 2 rolls the sampler out under student conditioning and matches the
text-stream hidden states of the leading blocks, with gradients cut for
steps before a random cutoff.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import flow, mmdit, ptd
from .flow import ToyTextEncoder
from .mmdit import MMDiT
from .numkit import Rng, Tensor, no_grad
from .numkit import functional as F


def default_alphas(L: int) -> list[float]:
    """``0.1`` on the first three blocks, zero after; fewer blocks all get ``0.1``."""
    if L < 1:
        raise ValueError("need at least one block")
    if L < 3:
        return [0.1] * L
    return [0.1, 0.1, 0.1] + [0.0] * (L - 3)


@dataclass
class TextDistillRecipe:
    warmup_steps: int = 200
    warmup_lr: float = 3e-3
    warmup_batch: int = 32
    steps: int = 60
    lr: float = 1e-3
    batch: int = 8
    cutoff: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _forward(dit: MMDiT, x, t, txt, pooled):
    if dit.ptd is None:
        return mmdit.forward(dit, x, t, txt, pooled)
    v, trace, _ = ptd.routed_forward(dit, x, t, txt, pooled)
    return v, trace


def _accuracy(dit: MMDiT, spec, schedule, ev, p, pooled) -> float:
    if dit.ptd is None:
        return flow.sample_accuracy(dit, spec, schedule, ev, p, pooled)
    return ptd.sample_accuracy(dit, spec, schedule, ev, p, pooled)[0]


def _check_dims(teacher_enc: ToyTextEncoder, student: ToyTextEncoder) -> None:
    if student.dim != teacher_enc.dim:
        raise ValueError(f"student output dim {student.dim} != teacher dim {teacher_enc.dim}")


def warmup_loss(teacher_emb: np.ndarray, student: ToyTextEncoder, ids, P) -> Tensor:
    return F.mse(student.encode(ids, P), teacher_emb)


def warmup(teacher_enc: ToyTextEncoder, student: ToyTextEncoder, prompts: np.ndarray, steps: int, lr: float, batch: int, rng: Rng) -> list[float]:
    """Fit the adapted student embeddings to the teacher's (in place). Returns per-step losses."""
    _check_dims(teacher_enc, student)
    prompts = np.asarray(prompts, dtype=np.int64)
    with no_grad():
        target = teacher_enc.encode(prompts).data
    rec = flow.TrainRecipe(steps=steps, batch=batch, lr=lr, warmup=0, cosine=False, log_every=1)

    def loss_fn(P, r):
        idx = r.integers(len(prompts), (min(batch, len(prompts)),))
        return warmup_loss(target[idx], student, prompts[idx], P)

    return flow.train_loop(student.params, list(student.params), loss_fn, rec, rng, "textdistill warmup")


def _alpha_blocks(alphas) -> list[int]:
    alphas = [float(a) for a in alphas]
    if any(a < 0 for a in alphas):
        raise ValueError("alphas must be non-negative")
    return [i for i, a in enumerate(alphas) if a > 0]


def rollout_latents(dit: MMDiT, p_s, pooled: np.ndarray, x_init: np.ndarray, schedule: flow.Schedule) -> list[np.ndarray]:
    """Student-conditioned Euler trajectory, ``out[j]`` being the latent fed to step ``j``."""
    ts = schedule.timesteps
    p_s = np.asarray(getattr(p_s, "data", p_s))
    x = np.array(x_init, dtype=np.float64)
    out: list[np.ndarray] = [None] * (schedule.N + 1)
    with no_grad():
        for j in range(schedule.N, 0, -1):
            out[j] = x
            v, _ = _forward(dit, x, ts[j], p_s, pooled)
            x = x - (ts[j] - ts[j - 1]) * v.data
    out[0] = x
    return out


def rollout_loss(dit: MMDiT, p_t: np.ndarray, p_s: Tensor, pooled: np.ndarray, x_init: np.ndarray, schedule: flow.Schedule, alphas, t_hat: int, step_weights=None, latents=None) -> Tensor:
    """Block-wise hidden-state loss along a student-conditioned Euler rollout.

    Step ``j`` runs at ``t_j`` for ``j = N .. 1``. Steps with ``j >= t_hat``
    contribute ``sum_i alpha_i * mse(h_i(p_S), h_i(p_T))``; earlier steps
    only advance the latent. The rollout itself is treated as data: the
    latent carries no gradient, so only the student's text states are
    differentiated. ``latents`` (from :func:`rollout_latents`) replays a
    fixed trajectory instead of advancing it. ``step_weights`` (indexed by
    ``j``) overrides the cutoff with explicit per-step weights.
    """
    ts = schedule.timesteps
    alphas = list(alphas)
    n_blocks = dit.config.n_blocks
    if len(alphas) != n_blocks:
        raise ValueError(f"{len(alphas)} alphas for {n_blocks} blocks")
    active = _alpha_blocks(alphas)
    x = np.array(x_init, dtype=np.float64)
    total = Tensor(np.zeros(()))
    for j in range(schedule.N, 0, -1):
        if step_weights is None:
            if j < t_hat:
                # below the cutoff nothing carries gradient, and every later step is below it too
                break
            weight = 1.0
        else:
            weight = float(step_weights[j])
        if latents is not None:
            x = latents[j]
        with no_grad():
            _, tr_t = _forward(dit, x, ts[j], p_t, pooled)
        v, tr_s = _forward(dit, x, ts[j], p_s, pooled)
        for i in active:
            diff = F.mse(tr_s[i].txt_out, tr_t[i].txt_out.data)
            total = total + (alphas[i] * weight) * diff
        x = x - (ts[j] - ts[j - 1]) * v.data
    return total


def sample_cutoff(rng: Rng, N: int, cutoff: int | None) -> int:
    """Uniform over ``{1..N}`` unless a fixed cutoff is given (``0`` supervises every step)."""
    if cutoff is not None:
        return int(cutoff)
    return int(rng.integers(N, ())) + 1


@dataclass
class DistillState:
    student: ToyTextEncoder
    alphas: list[float]
    cutoff: int | None = None


def blockwise_distill(dit: MMDiT, teacher_enc: ToyTextEncoder, state: DistillState, prompts: np.ndarray, pooled: np.ndarray, schedule: flow.Schedule, recipe: TextDistillRecipe, rng: Rng) -> dict:
    """Stage-2 training of ``state.student`` (in place); the transformer is never updated."""
    _check_dims(teacher_enc, state.student)
    if not _alpha_blocks(state.alphas):
        raise ValueError("stage 2 needs at least one positive alpha")
    prompts = np.asarray(prompts, dtype=np.int64)
    with no_grad():
        p_t_all = teacher_enc.encode(prompts).data
    cfg = dit.config
    cutoffs: list[int] = []

    def loss_fn(P, r):
        idx = r.integers(len(prompts), (min(recipe.batch, len(prompts)),))
        t_hat = sample_cutoff(r, schedule.N, state.cutoff)
        cutoffs.append(t_hat)
        x_init = r.normal((len(idx), cfg.T, cfg.latent_ch))
        p_s = state.student.encode(prompts[idx], P)
        return rollout_loss(dit, p_t_all[idx], p_s, pooled[idx], x_init, schedule, state.alphas, t_hat)

    rec = flow.TrainRecipe(steps=recipe.steps, batch=recipe.batch, lr=recipe.lr, warmup=0, cosine=True, log_every=max(1, recipe.steps // 10))
    curve = flow.train_loop(state.student.params, list(state.student.params), loss_fn, rec, rng, "textdistill stage 2")
    return {"losses": curve, "cutoffs": cutoffs}


def eval_swap(dit: MMDiT, teacher_enc: ToyTextEncoder, student: ToyTextEncoder, captions: np.ndarray, pooled: np.ndarray, ev: flow.EvalSet, spec: flow.SynthSpec, schedule: flow.Schedule, x_t: np.ndarray, t: np.ndarray) -> dict:
    """Velocity and sample-accuracy gaps between teacher- and student-encoder conditioning."""
    _check_dims(teacher_enc, student)
    if student.dim != dit.config.txt_dim:
        raise ValueError(f"encoder dim {student.dim} does not match transformer text input {dit.config.txt_dim}")
    with no_grad():
        p_t = teacher_enc.encode(captions).data
        p_s = student.encode(captions).data
        if dit.ptd is None:
            v_t = mmdit.forward(dit, x_t, t, p_t, pooled)[0].data
            v_s = mmdit.forward(dit, x_t, t, p_s, pooled)[0].data
        else:
            v_t = ptd.mixed_forward(dit, x_t, t, p_t, pooled).data
            v_s = ptd.mixed_forward(dit, x_t, t, p_s, pooled).data
    acc_t = _accuracy(dit, spec, schedule, ev, p_t, pooled)
    acc_s = _accuracy(dit, spec, schedule, ev, p_s, pooled)
    return {
        "velocity_gap": float(np.mean((v_s - v_t) ** 2)),
        "accuracy_teacher_enc": acc_t,
        "accuracy_student_enc": acc_s,
        "accuracy_gap": acc_t - acc_s,
        "embedding_mse": float(np.mean((p_s - p_t) ** 2)),
    }
