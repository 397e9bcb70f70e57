"""Stage commands as plain functions.

Each function reads its inputs from checkpoint paths, writes its outputs
into one run directory and returns the validated report. Randomness is
drawn from ``Rng(seed).spawn(<stage key>)`` so a stage rerun with the same
config and seed reproduces its outputs bit for bit.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .. import analysis, compress, flow, mmdit, ptd, textdistill
from ..mmdit import MMDiT
from ..numkit import Rng
from . import checkpoint as ck
from . import report as rp
from .config import RunConfig

log = logging.getLogger("mmcompress")

MODEL_FILE = "model.ckpt"
DATA_FILE = "data.ckpt"
ENCODER_FILE = "encoder.ckpt"
SAMPLES_FILE = "samples.ckpt"
REPORT_FILE = "report.json"


class StageError(Exception):
    pass


def _spec(cfg: RunConfig) -> flow.SynthSpec:
    d = cfg.data
    return flow.SynthSpec(grid=d.grid, channels=d.channels, amplitudes=tuple(d.amplitudes), jitter=d.jitter, txt_len=d.txt_len)


def _check_model_vs_data(cfg: RunConfig) -> None:
    m, d = cfg.model, cfg.data
    if (m.img_grid, m.latent_ch, m.txt_len) != (d.grid, d.channels, d.txt_len):
        raise StageError("model img_grid/latent_ch/txt_len must match data grid/channels/txt_len")
    if m.txt_dim != d.teacher_enc_dim:
        raise StageError("model txt_dim must equal data teacher_enc_dim")


def _out_dir(out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(out: Path, run: dict) -> dict:
    rp.emit_report(run, out / REPORT_FILE)
    return run


# -- data ------------------------------------------------------------------------------


@dataclass
class DataBundle:
    spec: flow.SynthSpec
    train: flow.Dataset
    val: flow.Dataset
    calib: flow.Dataset
    encoder: flow.ToyTextEncoder
    pooled: flow.PooledEncoder

    def encode(self, ds: flow.Dataset, enc: flow.ToyTextEncoder | None = None) -> flow.Conditioning:
        return flow.encode_dataset(ds, enc or self.encoder, self.pooled)


def gen_data(cfg: RunConfig, out) -> dict:
    _check_model_vs_data(cfg)
    out = _out_dir(out)
    seed = cfg.run.seed
    rng = Rng(seed)
    spec = _spec(cfg)
    sets = {
        "train": flow.make_dataset(spec, cfg.data.n_train, rng.spawn("data")),
        "val": flow.make_dataset(spec, cfg.data.n_val, rng.spawn("val")),
        "calib": flow.make_dataset(spec, cfg.data.n_calib, rng.spawn("calib")),
    }
    enc = flow.teacher_encoder(spec, seed, d_enc=cfg.data.teacher_enc_dim)
    pe = flow.pooled_encoder(spec, seed, dim=cfg.model.pooled_dim, spread=cfg.data.pooled_spread)
    tensors: dict[str, np.ndarray] = {}
    for name, ds in sets.items():
        tensors[f"{name}/latents"] = ds.latents
        tensors[f"{name}/factors"] = ds.factors
        tensors[f"{name}/captions"] = ds.captions
    for k, v in enc.params.items():
        tensors[f"encoder/{k}"] = v
    tensors["pooled/table"] = pe.table
    digest = ck.save_bundle(out / DATA_FILE, "dataset", tensors, seed, cfg.to_dict(), {"spec": asdict(spec), "encoder_heads": enc.n_heads})
    counts = {name: len(ds) for name, ds in sets.items()}
    run = rp.build("gen-data", None, seed, cfg.to_dict(), checkpoint_sha256=digest, info={"sizes": counts, "vocab": spec.vocab_size})
    return _write(out, run)


def load_data(path) -> DataBundle:
    tensors, header = ck.load_bundle(path, "dataset")
    spec_d = dict(header["meta"]["spec"])
    spec_d["amplitudes"] = tuple(spec_d["amplitudes"])
    spec = flow.SynthSpec(**spec_d)
    sets = {}
    for name in ("train", "val", "calib"):
        sets[name] = flow.Dataset(tensors[f"{name}/latents"], tensors[f"{name}/factors"], tensors[f"{name}/captions"], spec)
    eparams = {k[len("encoder/"):]: v for k, v in tensors.items() if k.startswith("encoder/")}
    d_enc = eparams["tok"].shape[1]
    enc = flow.ToyTextEncoder(spec.vocab_size, d_enc, spec.txt_len, eparams, header["meta"]["encoder_heads"], None, True)
    return DataBundle(spec, sets["train"], sets["val"], sets["calib"], enc, flow.PooledEncoder(tensors["pooled/table"]))


class Context:
    """Everything a stage needs besides its input model: data, schedule, held-out set."""

    def __init__(self, cfg: RunConfig, data_path, teacher_path=None):
        self.cfg = cfg
        self.seed = cfg.run.seed
        self.rng = Rng(self.seed)
        self.data = load_data(data_path)
        self.cond = self.data.encode(self.data.train)
        self.vcond = self.data.encode(self.data.val)
        self.ccond = self.data.encode(self.data.calib)
        self.schedule = flow.Schedule(cfg.sampler.steps)
        self.evalset = flow.make_eval_set(self.data.val, self.vcond, self.rng.spawn("ev"))
        self.probe = analysis.make_probe_set(self.data.val, self.vcond, self.rng.spawn("probe"), cfg.data.n_probe)
        self.inputs = {"data": str(data_path)}
        self.teacher: MMDiT | None = None
        self.heldout = None
        if teacher_path is not None:
            self.teacher, _ = ck.load_model(teacher_path)
            self.inputs["teacher"] = str(teacher_path)
            self.heldout = compress.make_heldout(self.teacher, self.data.val, self.vcond, self.schedule, self.rng.spawn("held"))

    def stage_data(self) -> compress.StageData:
        if self.heldout is None:
            raise StageError("this command needs the root teacher checkpoint")
        return compress.StageData(self.data.train, self.cond, self.heldout, self.evalset, self.data.spec, self.schedule, self.ccond.pooled[:, 0], self.probe)


def _recipe(sec, log_every: int = 50) -> flow.TrainRecipe:
    return flow.TrainRecipe(steps=sec.steps, batch=sec.batch, lr=sec.lr, warmup=sec.warmup, log_every=log_every, **({"grad_clip": sec.grad_clip} if hasattr(sec, "grad_clip") else {}))


def _load_input(path, ctx: Context) -> MMDiT:
    model, _ = ck.load_model(path)
    ctx.inputs["model"] = str(path)
    return model


# -- teacher ---------------------------------------------------------------------------


def train_teacher(cfg: RunConfig, data_path, out) -> dict:
    _check_model_vs_data(cfg)
    out = _out_dir(out)
    ctx = Context(cfg, data_path)
    model = mmdit.build_model(cfg.model, ctx.seed)
    t0 = time.perf_counter()
    curve = flow.train_teacher(model, ctx.data.train, ctx.cond, _recipe(cfg.teacher), ctx.rng.spawn("train"))
    log.info("teacher trained in %.1f s", time.perf_counter() - t0)
    model.provenance = ck.append_stage(model.provenance, "teacher")
    digest = ck.save_model(out / MODEL_FILE, model, ctx.seed)
    acc = flow.sample_accuracy(model, ctx.data.spec, ctx.schedule, ctx.evalset)
    run = rp.build(
        "train-teacher", "teacher", ctx.seed, cfg.to_dict(),
        inputs=ctx.inputs, provenance=model.provenance, checkpoint_sha256=digest,
        model_config=model.config.to_dict(), params_after=compress.param_total(model),
        losses={"train": curve}, eval={"accuracy": acc, "heldout_distill": 0.0, "N": ctx.schedule.N},
    )
    return _write(out, run)


# -- compression ------------------------------------------------------------------------


def make_plan(cfg: RunConfig, stage: str) -> compress.CompressionPlan:
    rec = _recipe(getattr(cfg, stage.lower()))
    if stage == "C1":
        s = cfg.c1
        return compress.CompressionPlan("C1", target_H=s.target_H, gamma=s.gamma, teacher=s.teacher, recipe=rec)
    if stage == "C2":
        s = cfg.c2
        return compress.CompressionPlan("C2", target_dH=s.target_dH, gamma=s.gamma, teacher=s.teacher, recipe=rec)
    if stage == "C3":
        s = cfg.c3
        return compress.CompressionPlan(
            "C3", merge_range=list(s.merge_range) or None, merge_mode=s.merge_mode, threshold_img=s.threshold_img,
            threshold_txt=s.threshold_txt, max_chain=s.max_chain, teacher=s.teacher, recipe=rec,
        )
    if stage == "C4":
        s = cfg.c4
        return compress.CompressionPlan("C4", n_samples=s.n_samples, teacher=s.teacher, recipe=rec)
    raise StageError(f"unknown compression stage {stage!r}")


def calibration_ablation(model: MMDiT, sd: compress.StageData, ns: list[int]) -> dict:
    """Held-out loss of Static-LN without training, per calibration size, against the dynamic model."""
    dyn = sd.heldout.loss(model)
    rows = {"dynamic": dyn}
    for n in ns:
        table = compress.calibrate_static_ln(model, sd.calib_pooled, sd.schedule, int(n))
        rows[str(n)] = sd.heldout.loss(compress.apply_static_ln(model, table))
    return rows


def compress_stage(cfg: RunConfig, stage: str, in_path, data_path, teacher_path, out) -> dict:
    out = _out_dir(out)
    ctx = Context(cfg, data_path, teacher_path)
    model = _load_input(in_path, ctx)
    plan = make_plan(cfg, stage)
    sd = ctx.stage_data()
    ck.append_stage(model.provenance, stage)
    t0 = time.perf_counter()
    student, rep = compress.run_stage(plan, model, sd, ctx.rng.spawn(stage), root=ctx.teacher)
    log.info("%s done in %.1f s", stage, time.perf_counter() - t0)
    info = dict(rep["info"])
    if stage == "C4" and cfg.c4.ablation:
        info["calibration"] = calibration_ablation(model, sd, cfg.c4.ablation)
    digest = ck.save_model(out / MODEL_FILE, student, ctx.seed)
    run = rp.build(
        "compress", stage, ctx.seed, cfg.to_dict(),
        inputs=ctx.inputs, provenance=student.provenance, checkpoint_sha256=digest,
        model_config=student.config.to_dict(), params_before=rep["params_before"], params_after=rep["params_after"],
        losses={"distill": rep["losses"]}, eval=rep["eval"], info={"plan": rep["plan"], **info},
    )
    return _write(out, run)


# -- token downsampling ------------------------------------------------------------------


def _ptd_config(cfg: RunConfig, model: MMDiT, t_thresh: float | None = None) -> ptd.PtdConfig:
    s = cfg.ptd
    blocks = list(s.blocks) or ptd.default_blocks(model.config)
    if not blocks:
        raise StageError("no blocks available for token downsampling")
    thr = s.t_thresh if t_thresh is None else t_thresh
    return ptd.PtdConfig(t_thresh=thr, blocks=blocks, active=len(blocks), skip=s.skip)


def _ptd_eval(model: MMDiT, ctx: Context) -> tuple[dict, list]:
    base = model.copy()
    base.ptd = None
    base.params = {k: v for k, v in base.params.items() if not k.startswith(ptd.PREFIX)}
    acc, routing = ptd.sample_accuracy(model, ctx.data.spec, ctx.schedule, ctx.evalset)
    ev = {
        "heldout_distill": ptd.heldout_loss(model, ctx.heldout),
        "heldout_no_ptd": ctx.heldout.loss(base),
        "accuracy": acc,
        "accuracy_no_ptd": flow.sample_accuracy(base, ctx.data.spec, ctx.schedule, ctx.evalset),
        "N": ctx.schedule.N,
    }
    return ev, routing


def flop_sweep(config: mmdit.ModelConfig, base: ptd.PtdConfig, schedule: flow.Schedule, thresholds: list[float]) -> dict:
    rows = {}
    for thr in thresholds:
        pc = ptd.PtdConfig(t_thresh=float(thr), blocks=base.blocks, active=len(base.blocks), skip=base.skip)
        rep = ptd.attention_flops(config, pc, schedule)
        rows[f"{float(thr):g}"] = {"ratio": rep.ratio, "quadratic_ratio": rep.quadratic_ratio, "total": rep.total}
    return rows


def ptd_train(cfg: RunConfig, in_path, data_path, teacher_path, out) -> dict:
    out = _out_dir(out)
    ctx = Context(cfg, data_path, teacher_path)
    model = _load_input(in_path, ctx)
    if model.ptd is not None:
        raise StageError("input model already carries token downsampling")
    prov = ck.append_stage(model.provenance, "PTD")
    pc = _ptd_config(cfg, model)
    s = cfg.ptd
    m = ptd.attach(model, ptd.PtdConfig(pc.t_thresh, pc.blocks, 0, pc.skip), ctx.rng.spawn("ptd-init"))
    recipe = ptd.PtdRecipe(stage_steps=s.stage_steps, finetune_steps=s.finetune_steps, batch=s.batch, lr=s.lr, warmup=s.warmup)
    t0 = time.perf_counter()
    m, prep = ptd.progressive_train(m, ctx.teacher, ctx.data.train, ctx.cond, recipe, ctx.rng.spawn("ptd"))
    log.info("PTD trained in %.1f s", time.perf_counter() - t0)
    m.provenance = prov
    digest = ck.save_model(out / MODEL_FILE, m, ctx.seed)
    ev, routing = _ptd_eval(m, ctx)
    fl = ptd.attention_flops(m.config, m.ptd, ctx.schedule)
    losses = {f"stage_{st['stage']}": st["losses"] for st in prep["stages"]}
    losses["finetune"] = prep.get("finetune", [])
    run = rp.build(
        "ptd train", "PTD", ctx.seed, cfg.to_dict(),
        inputs=ctx.inputs, provenance=m.provenance, checkpoint_sha256=digest,
        model_config=m.config.to_dict(), params_before=compress.param_total(model), params_after=compress.param_total(m),
        losses=losses, eval=ev, routing=routing, flops={**fl.to_dict(), "sweep": flop_sweep(m.config, m.ptd, ctx.schedule, s.flop_thresholds)},
        info={"ptd": m.ptd.to_dict(), "covered_per_stage": [st["covered"] for st in prep["stages"]], "u_checksums": prep["u_checksums"]},
    )
    return _write(out, run)


def ptd_eval(cfg: RunConfig, in_path, data_path, teacher_path, out) -> dict:
    out = _out_dir(out)
    ctx = Context(cfg, data_path, teacher_path)
    model = _load_input(in_path, ctx)
    if model.ptd is None:
        raise StageError("input model has no token downsampling modules")
    ev, routing = _ptd_eval(model, ctx)
    fl = ptd.attention_flops(model.config, model.ptd, ctx.schedule)
    run = rp.build(
        "ptd eval", None, ctx.seed, cfg.to_dict(),
        inputs=ctx.inputs, provenance=model.provenance, model_config=model.config.to_dict(),
        params_after=compress.param_total(model), eval=ev, routing=routing, flops=fl.to_dict(),
    )
    return _write(out, run)


# -- text encoder ------------------------------------------------------------------------


def _swap(dit: MMDiT, ctx: Context, student: flow.ToyTextEncoder) -> dict:
    ev = ctx.evalset
    return textdistill.eval_swap(dit, ctx.data.encoder, student, ev.captions, ev.pooled, ev, ctx.data.spec, ctx.schedule, ctx.heldout.x_t, ctx.heldout.t)


def textdistill_stage(cfg: RunConfig, in_path, data_path, teacher_path, out, transfer=()) -> dict:
    """Distil the text encoder against the model at ``in_path``.

    Each checkpoint in ``transfer`` is evaluated with the same student
    encoder, without further training.
    """
    out = _out_dir(out)
    ctx = Context(cfg, data_path, teacher_path)
    dit = _load_input(in_path, ctx)
    prov = ck.append_stage(dit.provenance, "textdistill")
    s = cfg.textdistill
    spec = ctx.data.spec
    student = flow.student_encoder(spec, ctx.seed, d_enc=cfg.data.student_enc_dim, out_dim=ctx.data.encoder.dim)
    prompts = ctx.data.train.captions.reshape(-1, spec.txt_len)
    pooled = ctx.cond.pooled.reshape(-1, ctx.cond.pooled.shape[-1])
    t0 = time.perf_counter()
    wl = textdistill.warmup(ctx.data.encoder, student, prompts, s.warmup_steps, s.warmup_lr, s.warmup_batch, ctx.rng.spawn("td-warmup"))
    alphas = list(s.alphas) or textdistill.default_alphas(dit.config.n_blocks)
    state = textdistill.DistillState(student, alphas, None if s.cutoff < 0 else s.cutoff)
    recipe = textdistill.TextDistillRecipe(s.warmup_steps, s.warmup_lr, s.warmup_batch, s.steps, s.lr, s.batch, state.cutoff)
    res = textdistill.blockwise_distill(dit, ctx.data.encoder, state, prompts, pooled, ctx.schedule, recipe, ctx.rng.spawn("td"))
    log.info("text encoder distilled in %.1f s", time.perf_counter() - t0)
    digest = ck.save_encoder(out / ENCODER_FILE, student, ctx.seed, prov, {"alphas": alphas})
    swap = _swap(dit, ctx, student)
    moved = {}
    for path in transfer:
        other, _ = ck.load_model(path)
        row = _swap(other, ctx, student)
        row["provenance"] = "/".join(other.provenance)
        row["gap_ratio"] = row["velocity_gap"] / swap["velocity_gap"] if swap["velocity_gap"] > 0 else float("inf")
        moved[str(path)] = row
    enc_params = lambda e: sum(v.size for v in e.params.values())  # noqa: E731
    ev = {**swap, "accuracy": swap["accuracy_student_enc"], "N": ctx.schedule.N}
    if dit.ptd is not None:
        ev["heldout_distill"] = ptd.heldout_loss(dit, ctx.heldout)
    else:
        ev["heldout_distill"] = ctx.heldout.loss(dit)
    run = rp.build(
        "textdistill", "textdistill", ctx.seed, cfg.to_dict(),
        inputs=ctx.inputs, provenance=prov, checkpoint_sha256=digest, model_config=dit.config.to_dict(),
        params_before=enc_params(ctx.data.encoder), params_after=compress.param_total(dit),
        losses={"warmup": wl, "blockwise": res["losses"]}, eval=ev,
        info={
            "alphas": alphas, "cutoffs": res["cutoffs"], "encoder_params": enc_params(student),
            "teacher_encoder_params": enc_params(ctx.data.encoder), "transfer": moved,
        },
    )
    return _write(out, run)


# -- analysis and utilities ----------------------------------------------------------------


def analyze(cfg: RunConfig, what: str, in_path, data_path, out) -> dict:
    out = _out_dir(out)
    ctx = Context(cfg, data_path)
    model = _load_input(in_path, ctx)
    if what == "svd":
        max_r = model.config.d_H
        ranks = [r for r in cfg.analyze.ranks if r <= max_r]
        info = analysis.svd_redundancy(model, ctx.probe, ranks, tuple(cfg.analyze.modes)).to_dict()
    elif what == "blocks":
        prof = analysis.block_similarity(model, ctx.probe, ctx.schedule)
        chain = analysis.select_merge_chain(prof, cfg.c3.threshold_img, cfg.c3.threshold_txt, cfg.c3.max_chain)
        info = {**prof.to_dict(), "chain": list(chain)}
    elif what == "adaln":
        if model.static_ln is not None:
            raise StageError("model already uses static modulation")
        info = analysis.adaln_stats(model, ctx.ccond.pooled[:, 0], ctx.schedule).to_dict()
    else:
        raise StageError(f"unknown analysis {what!r}")
    run = rp.build(f"analyze {what}", None, ctx.seed, cfg.to_dict(), inputs=ctx.inputs, provenance=model.provenance, model_config=model.config.to_dict(), info=info)
    return _write(out, run)


def sample(cfg: RunConfig, in_path, data_path, out, encoder_path=None) -> dict:
    out = _out_dir(out)
    ctx = Context(cfg, data_path)
    model = _load_input(in_path, ctx)
    ev = ctx.evalset
    txt = ev.prompt_emb
    if encoder_path is not None:
        enc, _ = ck.load_encoder(encoder_path)
        ctx.inputs["encoder"] = str(encoder_path)
        txt = enc.encode(ev.captions).data
    if model.ptd is not None:
        res, routing = ptd.routed_sample(model, ctx.schedule, txt, ev.pooled, ev.noise)
    else:
        res, routing = flow.euler_sample(model, ctx.schedule, txt, ev.pooled, x_init=ev.noise), []
    acc = flow.factor_accuracy(ctx.data.spec, res.x0, ev.factors)
    digest = ck.save_bundle(out / SAMPLES_FILE, "samples", {"latents": res.x0, "factors": ev.factors}, ctx.seed, cfg.to_dict())
    run = rp.build(
        "sample", None, ctx.seed, cfg.to_dict(), inputs=ctx.inputs, provenance=model.provenance, checkpoint_sha256=digest,
        model_config=model.config.to_dict(), eval={"accuracy": acc, "N": ctx.schedule.N}, routing=routing or None,
    )
    return _write(out, run)


def select_steps(cfg: RunConfig, in_path, data_path, out) -> dict:
    out = _out_dir(out)
    ctx = Context(cfg, data_path)
    model = _load_input(in_path, ctx)
    best, errors = flow.select_steps(model, list(cfg.sampler.candidates), ctx.evalset, ctx.data.spec)
    run = rp.build(
        "select-steps", None, ctx.seed, cfg.to_dict(), inputs=ctx.inputs, provenance=model.provenance,
        model_config=model.config.to_dict(), eval={"N": best}, info={"errors": {str(k): v for k, v in errors.items()}},
    )
    return _write(out, run)


def variant_config(cfg: RunConfig, name: str) -> tuple[mmdit.ModelConfig, bool]:
    for v in cfg.variants:
        if v.name == name:
            return cfg.model.replace(H=v.H, d_H=v.d_H, d=v.H * v.d_H, n_ds=v.n_ds, n_ss=v.n_ss), v.adaln
    raise StageError(f"no variant named {name!r}")


def count_table(cfg: RunConfig) -> list[dict]:
    """Closed-form sizes for the base model and every listed variant.

    Block sizes count weight matrices only; biases are listed separately.
    """
    rows = []
    variants = [("base", cfg.model, True)] + [(v.name, *variant_config(cfg, v.name)) for v in cfg.variants]
    for name, mc, adaln in variants:
        pc = mmdit.count_params(mc, adaln=adaln)
        rows.append({
            "name": name, "d": mc.d, "H": mc.H, "d_H": mc.d_H, "n_ds": mc.n_ds, "n_ss": mc.n_ss, "adaln": adaln,
            "ds_block": pc.ds_block, "ds_bias": pc.ds_block_bias, "ss_block": pc.ss_block, "ss_bias": pc.ss_block_bias,
            "total": pc.total, "weights": pc.weights,
        })
    return rows


def count_params(cfg: RunConfig, out=None) -> dict:
    rows = count_table(cfg)
    run = rp.build("count-params", None, cfg.run.seed, cfg.to_dict(), table=rows)
    if out is not None:
        return _write(_out_dir(out), run)
    rp.emit_report(run)
    return run


def flops(cfg: RunConfig, out=None, variant: str | None = None) -> dict:
    mc = cfg.model if variant is None else variant_config(cfg, variant)[0]
    blocks = list(cfg.ptd.blocks) or ptd.default_blocks(mc)
    base = ptd.PtdConfig(t_thresh=cfg.ptd.t_thresh, blocks=blocks, active=len(blocks), skip=cfg.ptd.skip)
    sched = flow.Schedule(cfg.sampler.steps)
    rep = ptd.attention_flops(mc, base, sched)
    table = [{"t_thresh": float(k), **v} for k, v in flop_sweep(mc, base, sched, cfg.ptd.flop_thresholds).items()]
    run = rp.build(
        "flops", None, cfg.run.seed, cfg.to_dict(), model_config=mc.to_dict(), flops=rep.to_dict(), table=table,
        info={"blocks_low_res": len(blocks), "blocks_total": mc.n_blocks},
    )
    if out is not None:
        return _write(_out_dir(out), run)
    rp.emit_report(run)
    return run


def aggregate(root) -> dict:
    """Collect every stage report under ``root`` into one summary table."""
    root = Path(root)
    reports = [rp.load_report(p) for p in sorted(root.glob(f"*/{REPORT_FILE}"))]
    rows = rp.summarize(reports)
    if not rows:
        raise StageError(f"no stage reports under {root}")
    teacher = next((r for r in rows if r["stage"] == "teacher"), None)
    for r in rows:
        if teacher and r["params"] is not None and teacher["params"]:
            r["reduction"] = 1.0 - r["params"] / teacher["params"]
    seed = reports[0]["seed"]
    run = rp.build("report", None, seed, reports[0]["config"], table=rows)
    return _write(root, run)
