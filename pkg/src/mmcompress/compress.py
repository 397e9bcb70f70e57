"""Structural transforms (head pruning, head-dim reduction, block merging, Static-LN) and the distillation trainer."""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field

import numpy as np

from . import analysis, flow, mmdit
from .mmdit import MMDiT, StaticLnTable
from .numkit import Rng, Tensor, no_grad
from .numkit import functional as F

STAGES = ("C1", "C2", "C3", "C4")

__all__ = [
    "CompressionPlan",
    "HeldOut",
    "StageData",
    "StaticLnTable",
    "apply_static_ln",
    "calibrate_static_ln",
    "distill_loss",
    "feature_loss",
    "merge_blocks",
    "prune_heads",
    "reduce_head_dim",
    "run_stage",
]


# -- slicing ------------------------------------------------------------------------


def _chunks(idx: np.ndarray, width: int, n: int) -> np.ndarray:
    return np.concatenate([k * width + idx for k in range(n)])


def slice_model(model: MMDiT, cfg: mmdit.ModelConfig, resid: np.ndarray, attn: np.ndarray, ffn: np.ndarray) -> MMDiT:
    """Keep residual channels ``resid``, attention channels ``attn`` and FFN units ``ffn``.

    ``cfg`` is the student's config; every tensor is indexed consistently so
    the student computes the teacher's function restricted to those channels.
    """
    old = model.config
    d, fd = old.d, old.ffn_mult * old.d
    P = model.params
    out: dict[str, np.ndarray] = {}

    def put(name, arr):
        out[name] = np.array(arr, order="C")  # always a copy: students must not alias the teacher

    for n in ("img_in", "txt_in", "time.0", "pooled.0"):
        put(n + ".w", P[n + ".w"][:, resid])
        put(n + ".b", P[n + ".b"][resid])
    for n in ("time.1", "pooled.1"):
        put(n + ".w", P[n + ".w"][np.ix_(resid, resid)])
        put(n + ".b", P[n + ".b"][resid])
    for i in range(old.n_ds):
        for m in mmdit.STREAMS:
            p = f"ds.{i}.{m}."
            for n in ("q", "k", "v"):
                put(p + n + ".w", P[p + n + ".w"][np.ix_(resid, attn)])
                put(p + n + ".b", P[p + n + ".b"][attn])
            put(p + "o.w", P[p + "o.w"][np.ix_(attn, resid)])
            put(p + "o.b", P[p + "o.b"][resid])
            put(p + "mlp0.w", P[p + "mlp0.w"][np.ix_(resid, ffn)])
            put(p + "mlp0.b", P[p + "mlp0.b"][ffn])
            put(p + "mlp1.w", P[p + "mlp1.w"][np.ix_(ffn, resid)])
            put(p + "mlp1.b", P[p + "mlp1.b"][resid])
            if p + "mod.w" in P:
                cols = _chunks(resid, d, mmdit.DS_COEFFS)
                put(p + "mod.w", P[p + "mod.w"][np.ix_(resid, cols)])
                put(p + "mod.b", P[p + "mod.b"][cols])
    for i in range(old.n_ss):
        p = f"ss.{i}."
        cols1 = np.concatenate([attn, d + attn, 2 * d + attn, 3 * d + ffn])
        put(p + "lin1.w", P[p + "lin1.w"][np.ix_(resid, cols1)])
        put(p + "lin1.b", P[p + "lin1.b"][cols1])
        rows2 = np.concatenate([attn, d + ffn])
        put(p + "lin2.w", P[p + "lin2.w"][np.ix_(rows2, resid)])
        put(p + "lin2.b", P[p + "lin2.b"][resid])
        if p + "mod.w" in P:
            cols = _chunks(resid, d, mmdit.SS_COEFFS)
            put(p + "mod.w", P[p + "mod.w"][np.ix_(resid, cols)])
            put(p + "mod.b", P[p + "mod.b"][cols])
    cols = _chunks(resid, d, 2)
    put("final.mod.w", P["final.mod.w"][np.ix_(resid, cols)])
    put("final.mod.b", P["final.mod.b"][cols])
    put("final.proj.w", P["final.proj.w"][resid, :])
    put("final.proj.b", P["final.proj.b"])
    extra = {k: v.copy() for k, v in P.items() if k not in out and not _is_core(k)}
    out.update(extra)
    static = None
    if model.static_ln is not None:
        coeffs = {}
        for site, tab in model.static_ln.coeffs.items():
            coeffs[site] = tab[:, _chunks(resid, d, mmdit.site_coeff_count(site))].copy()
        static = StaticLnTable(model.static_ln.timesteps.copy(), coeffs, model.static_ln.interpolate)
    return MMDiT(cfg, out, static, model.ptd, list(model.provenance))


_CORE = re.compile(r"^(img_in|txt_in|time\.\d|pooled\.\d|ds\.\d+|ss\.\d+|final)\.")


def _is_core(name: str) -> bool:
    return bool(_CORE.match(name))


def prune_heads(teacher: MMDiT, target_H: int) -> MMDiT:
    """Keep the first ``target_H`` heads and the matching leading residual channels.

    ``target_H == H`` returns an exact copy.
    """
    cfg = teacher.config
    if target_H < 1 or target_H > cfg.H:
        raise ValueError(f"target_H={target_H} must lie in [1, {cfg.H}]")
    if target_H == cfg.H:
        return teacher.copy()
    d_new = target_H * cfg.d_H
    keep = np.arange(d_new)
    student_cfg = cfg.replace(H=target_H, d=d_new)
    return slice_model(teacher, student_cfg, keep, keep, np.arange(cfg.ffn_mult * d_new))


def reduce_head_dim(teacher: MMDiT, target_dH: int) -> MMDiT:
    """Keep the leading ``target_dH`` channels of every head.

    The residual stream shrinks to its leading ``H * target_dH`` channels.
    ``target_dH == d_H`` returns an exact copy.
    """
    cfg = teacher.config
    if target_dH < 2 or target_dH > cfg.d_H or target_dH % 2:
        raise ValueError(f"target_dH={target_dH} must be even and lie in [2, {cfg.d_H}]")
    if target_dH == cfg.d_H:
        return teacher.copy()
    d_new = cfg.H * target_dH
    attn = np.array([h * cfg.d_H + j for h in range(cfg.H) for j in range(target_dH)])
    student_cfg = cfg.replace(d_H=target_dH, d=d_new)
    return slice_model(teacher, student_cfg, np.arange(d_new), attn, np.arange(cfg.ffn_mult * d_new))


def _ss_indices(model: MMDiT, blocks) -> list[int]:
    idx = []
    for b in blocks:
        if isinstance(b, str):
            kind, _, num = b.partition(".")
            if kind == "ds":
                raise ValueError("double-stream blocks cannot be merged")
            if kind != "ss":
                raise ValueError(f"unknown block {b!r}")
            b = int(num)
        idx.append(int(b))
    if len(idx) < 2:
        raise ValueError("merge range needs at least two blocks")
    if idx != list(range(idx[0], idx[0] + len(idx))):
        raise ValueError("merge range must be contiguous")
    if idx[0] < 0 or idx[-1] >= model.config.n_ss:
        raise ValueError(f"merge range {idx[0]}..{idx[-1]} leaves the single-stream blocks (0..{model.config.n_ss - 1})")
    return idx


def merge_blocks(model: MMDiT, blocks, mode: str = "merge") -> MMDiT:
    """Replace a contiguous run of single-stream blocks by one block.

    ``mode="merge"`` averages every tensor over the run (anchored on the
    first block, so identical blocks merge bit-exactly); ``mode="drop"``
    keeps the first block of the run and removes the rest.
    """
    if mode not in ("merge", "drop"):
        raise ValueError(f"unknown merge mode {mode!r}")
    idx = _ss_indices(model, blocks)
    cfg = model.config
    first, last = idx[0], idx[-1]
    new_index = {}
    for i in range(cfg.n_ss):
        if i < first:
            new_index[i] = i
        elif i > last:
            new_index[i] = i - (len(idx) - 1)
    out = {k: v.copy() for k, v in model.params.items() if not k.startswith("ss.")}
    suffixes = sorted({k.split(".", 2)[2] for k in model.params if k.startswith(f"ss.{first}.")})
    for i, j in new_index.items():
        for s in suffixes:
            out[f"ss.{j}.{s}"] = model.params[f"ss.{i}.{s}"].copy()
    for s in suffixes:
        stack = [model.params[f"ss.{i}.{s}"] for i in idx]
        out[f"ss.{first}.{s}"] = analysis.stable_mean(np.stack(stack)) if mode == "merge" else stack[0].copy()
    static = None
    if model.static_ln is not None:
        coeffs = {k: v.copy() for k, v in model.static_ln.coeffs.items() if not k.startswith("ss.")}
        for i, j in new_index.items():
            coeffs[f"ss.{j}"] = model.static_ln.coeffs[f"ss.{i}"].copy()
        tabs = [model.static_ln.coeffs[f"ss.{i}"] for i in idx]
        coeffs[f"ss.{first}"] = analysis.stable_mean(np.stack(tabs)) if mode == "merge" else tabs[0].copy()
        static = StaticLnTable(model.static_ln.timesteps.copy(), coeffs, model.static_ln.interpolate)
    new_cfg = cfg.replace(n_ss=cfg.n_ss - (len(idx) - 1))
    return MMDiT(new_cfg, out, static, model.ptd, list(model.provenance))


def calibrate_static_ln(model: MMDiT, calib_pooled: np.ndarray, schedule: flow.Schedule, n_samples: int) -> StaticLnTable:
    """Average the AdaLN coefficients of ``n_samples`` calibration prompts at each sampler timestep."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    calib_pooled = np.asarray(calib_pooled, dtype=np.float64)
    if calib_pooled.shape[0] < n_samples:
        raise ValueError(f"calibration set has {calib_pooled.shape[0]} prompts, need {n_samples}")
    pooled = calib_pooled[:n_samples]
    ts = np.sort(schedule.sampler_ts)
    rows: dict[str, list] = {s: [] for s in mmdit.modulation_sites(model.config)}
    for t in ts:
        coeffs = mmdit.dynamic_coeffs(model, np.full(n_samples, t), pooled)
        for site, c in coeffs.items():
            rows[site].append(analysis.stable_mean(c, axis=0))
    return StaticLnTable(ts, {s: np.stack(r) for s, r in rows.items()})


def apply_static_ln(model: MMDiT, table: StaticLnTable) -> MMDiT:
    """Install ``table`` and drop the per-block AdaLN projection weights."""
    params = {k: v.copy() for k, v in model.params.items() if not (k.endswith((".mod.w", ".mod.b")) and not k.startswith("final."))}
    return MMDiT(model.config, params, table, model.ptd, list(model.provenance))


# -- losses --------------------------------------------------------------------------------


def distill_loss(teacher: MMDiT, student: MMDiT, x_t, t, prompt_emb, pooled, P_student=None, teacher_out=None) -> Tensor:
    """MSE between student and (frozen) teacher velocities on the same inputs."""
    if teacher_out is None:
        with no_grad():
            teacher_out = mmdit.forward(teacher, x_t, t, prompt_emb, pooled)[0].data
    v, _ = mmdit.forward(student, x_t, t, prompt_emb, pooled, P=P_student)
    if v.shape != teacher_out.shape:
        raise ValueError(f"student output {v.shape} does not match teacher {teacher_out.shape}")
    return F.mse(v, teacher_out)


def head_summary(heads) -> Tensor:
    """Token mean then head mean of per-head features: ``[B, H, N, d_H] -> [B, d_H]``."""
    h = heads if isinstance(heads, Tensor) else Tensor(heads)
    return h.mean(axis=2).mean(axis=1)


def feature_loss(teacher_trace, student_trace) -> Tensor:
    """Sum over blocks of the squared distance between head-averaged features."""
    if len(teacher_trace) != len(student_trace):
        raise ValueError(f"traces cover {len(teacher_trace)} and {len(student_trace)} blocks")
    total = None
    for rt, rs in zip(teacher_trace, student_trace):
        if rt.heads.shape[-1] != rs.heads.shape[-1]:
            raise ValueError(f"head dims differ: {rt.heads.shape[-1]} vs {rs.heads.shape[-1]}")
        target = head_summary(rt.heads.data).data
        diff = head_summary(rs.heads) - target
        term = (diff * diff).sum(axis=-1).mean()
        total = term if total is None else total + term
    return total


# -- stage runner -----------------------------------------------------------------------------


@dataclass
class CompressionPlan:
    stage: str
    target_H: int | None = None
    target_dH: int | None = None
    merge_range: list | None = None
    merge_mode: str = "merge"
    threshold_img: float = 0.85
    threshold_txt: float = 0.9
    max_chain: int | None = None
    n_samples: int = 2
    gamma: float = 0.0
    teacher: str = "input"
    recipe: flow.TrainRecipe = field(default_factory=flow.TrainRecipe)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.merge_mode not in ("merge", "drop"):
            raise ValueError(f"unknown merge mode {self.merge_mode!r}")
        if self.teacher not in ("input", "root"):
            raise ValueError("teacher must be 'input' or 'root'")

    def validate(self, cfg: mmdit.ModelConfig) -> None:
        if self.stage == "C1" and (self.target_H is None or self.target_H > cfg.H):
            raise ValueError(f"C1 needs target_H <= {cfg.H}")
        if self.stage == "C2" and (self.target_dH is None or self.target_dH > cfg.d_H):
            raise ValueError(f"C2 needs target_dH <= {cfg.d_H}")
        if self.stage == "C3" and self.merge_range is not None:
            if any(i < 0 or i >= cfg.n_ss for i in self.merge_range):
                raise ValueError("merge range must lie within the single-stream blocks")
        if self.stage == "C4" and self.n_samples < 1:
            raise ValueError("C4 needs n_samples >= 1")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["recipe"] = asdict(self.recipe)
        return out


@dataclass
class HeldOut:
    """Fixed noisy inputs on the sampler grid with reference velocities."""

    x_t: np.ndarray
    t: np.ndarray
    prompt_emb: np.ndarray
    pooled: np.ndarray
    target: np.ndarray

    def loss(self, model: MMDiT) -> float:
        with no_grad():
            v = mmdit.forward(model, self.x_t, self.t, self.prompt_emb, self.pooled)[0].data
        return float(np.mean((v - self.target) ** 2))


def make_heldout(reference: MMDiT, data: flow.Dataset, cond: flow.Conditioning, schedule: flow.Schedule, rng: Rng) -> HeldOut:
    n = len(data)
    grid = schedule.sampler_ts
    t = grid[rng.integers(len(grid), (n,))]
    txt, pooled = cond.pick(np.arange(n), np.zeros(n, dtype=np.int64))
    x_t = flow.interpolate(data.latents, rng.normal(data.latents.shape), t)
    with no_grad():
        target = mmdit.forward(reference, x_t, t, txt, pooled)[0].data
    return HeldOut(x_t, t, txt, pooled, target)


@dataclass
class StageData:
    train: flow.Dataset
    cond: flow.Conditioning
    heldout: HeldOut
    evalset: flow.EvalSet
    spec: flow.SynthSpec
    schedule: flow.Schedule
    calib_pooled: np.ndarray
    probe: analysis.ProbeSet | None = None


def param_total(model: MMDiT) -> int:
    w, b = mmdit.enumerate_params({k: v for k, v in model.params.items()})
    w += sum(v.size for k, v in model.params.items() if k.startswith("ptd.") and not k.endswith(".b"))
    b += sum(v.size for k, v in model.params.items() if k.startswith("ptd.") and k.endswith(".b"))
    return w + b


def transform(plan: CompressionPlan, model: MMDiT, data: StageData) -> tuple[MMDiT, dict]:
    """Apply the stage's structural change without training."""
    info: dict = {}
    if plan.stage == "C1":
        student = prune_heads(model, plan.target_H)
    elif plan.stage == "C2":
        student = reduce_head_dim(model, plan.target_dH)
    elif plan.stage == "C3":
        chain = plan.merge_range
        if chain is None:
            if data.probe is None:
                raise ValueError("C3 without a merge range needs a probe set")
            profile = analysis.block_similarity(model, data.probe, data.schedule)
            info["similarity"] = profile.to_dict()
            chain = list(analysis.select_merge_chain(profile, plan.threshold_img, plan.threshold_txt, plan.max_chain))
        info["merge_range"] = list(chain)
        student = merge_blocks(model, chain, plan.merge_mode) if len(chain) >= 2 else model.copy()
    else:
        table = calibrate_static_ln(model, data.calib_pooled, data.schedule, plan.n_samples)
        student = apply_static_ln(model, table)
        info["static_timesteps"] = table.timesteps.tolist()
    return student, info


def trainable_names(plan: CompressionPlan, student: MMDiT) -> list[str]:
    return [k for k in student.params if not k.startswith("ptd.")]


def train_student(plan: CompressionPlan, teacher: MMDiT, student: MMDiT, data: StageData, rng: Rng) -> list[float]:
    """Distil ``teacher`` into ``student`` in place; adds the feature loss when ``gamma > 0``."""
    rec = plan.recipe
    if rec.steps == 0:
        return []
    ds = data.train
    gamma = plan.gamma

    def loss_fn(P, r):
        idx = r.integers(len(ds), (rec.batch,))
        var = r.integers(data.cond.prompt_emb.shape[1], (rec.batch,))
        txt, pooled = data.cond.pick(idx, var)
        batch = flow.sample_batch(ds.latents[idx], r)
        with no_grad():
            vt, tt = mmdit.forward(teacher, batch.x_t, batch.t, txt, pooled)
        vs, ts = mmdit.forward(student, batch.x_t, batch.t, txt, pooled, P=P)
        loss = F.mse(vs, vt.data)
        if gamma > 0:
            loss = loss + gamma * feature_loss(tt, ts)
        return loss

    return flow.train_loop(student.params, trainable_names(plan, student), loss_fn, rec, rng, f"compress {plan.stage}")


def run_stage(plan: CompressionPlan, teacher: MMDiT, data: StageData, rng: Rng, root: MMDiT | None = None) -> tuple[MMDiT, dict]:
    """Transform, train and evaluate one compression stage.

    Returns the student and a report with parameter counts, the loss
    curve, held-out distillation loss and sample accuracy.
    """
    plan.validate(teacher.config)
    student, info = transform(plan, teacher, data)
    guide = root if (plan.teacher == "root" and root is not None) else teacher
    curve = train_student(plan, guide, student, data, rng.spawn(f"train-{plan.stage}"))
    student.provenance = list(teacher.provenance) + [plan.stage]
    report = {
        "stage": plan.stage,
        "plan": plan.to_dict(),
        "params_before": param_total(teacher),
        "params_after": param_total(student),
        "config_after": student.config.to_dict(),
        "losses": curve,
        "eval": evaluate(student, data),
        "info": info,
    }
    return student, report


def evaluate(model: MMDiT, data: StageData) -> dict:
    return {
        "heldout_distill": data.heldout.loss(model),
        "accuracy": flow.sample_accuracy(model, data.spec, data.schedule, data.evalset),
        "N": data.schedule.N,
    }
