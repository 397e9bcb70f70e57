"""Progressive token downsampling.

A contiguous run of blocks can execute on a 2x-downsampled image grid
during the high-noise part of sampling. A convolutional downsampler ``D``
sits before the run and an upsampler ``U`` after it; the coarse blocks use
a rotary table built on every other grid coordinate. Outside the
low-resolution window the model runs unchanged.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import flow, mmdit
from .mmdit import MMDiT
from .numkit import Rng, Tensor, concat, no_grad, split
from .numkit import functional as F

PREFIX = "ptd."


@dataclass
class PtdConfig:
    """Routing and placement.

    ``blocks`` are global block indices (DS first, then SS) in execution
    order. ``active`` counts how many of the deepest blocks currently run at
    low resolution; progressive training grows it from 1 to ``len(blocks)``.
    """

    t_thresh: float = 0.5
    blocks: list[int] = field(default_factory=list)
    active: int = 0
    skip: str = "highpass"
    factor: int = 2

    def __post_init__(self):
        if not 0.0 <= self.t_thresh <= 1.0:
            raise ValueError("t_thresh must lie in [0, 1]")
        if self.blocks and self.blocks != list(range(self.blocks[0], self.blocks[0] + len(self.blocks))):
            raise ValueError("PTD blocks must be contiguous")
        if not 0 <= self.active <= len(self.blocks):
            raise ValueError("active must lie in [0, len(blocks)]")
        if self.skip not in ("highpass", "none"):
            raise ValueError(f"unknown skip mode {self.skip!r}")
        if self.factor != 2:
            raise ValueError("only a downsample factor of 2 is supported")

    @property
    def covered(self) -> list[int]:
        return self.blocks[len(self.blocks) - self.active :] if self.active else []

    def low_res(self, t: float) -> bool:
        """Low resolution while sampling progress ``1 - t`` is below ``t_thresh``."""
        return bool(self.active) and (1.0 - float(t)) < self.t_thresh - 1e-12

    def to_dict(self) -> dict:
        return asdict(self)


def default_blocks(cfg: mmdit.ModelConfig) -> list[int]:
    """Every single-stream block after the first."""
    return list(range(cfg.n_ds + 1, cfg.n_ds + cfg.n_ss))


# -- parameters -----------------------------------------------------------------------------


def _conv_init(rng: Rng, k: int, c: int) -> np.ndarray:
    return rng.normal((k, k, c, c), std=1.0 / math.sqrt(k * k * c))


def _res_params(prefix: str, d: int, rng: Rng) -> dict[str, np.ndarray]:
    return {
        prefix + "conv1.w": _conv_init(rng, 3, d),
        prefix + "conv1.b": np.zeros(d),
        prefix + "conv2.w": np.zeros((3, 3, d, d)),
        prefix + "conv2.b": np.zeros(d),
        prefix + "film.w": np.zeros((d, 2 * d)),
        prefix + "film.b": np.zeros(2 * d),
    }


def avg_stride_kernel(d: int) -> np.ndarray:
    """3x3 stride-2 kernel averaging each 2x2 cell (offsets 0 and +1 on both axes)."""
    w = np.zeros((3, 3, d, d))
    eye = np.eye(d) * 0.25
    for i in (1, 2):
        for j in (1, 2):
            w[i, j] = eye
    return w


def init_down_up(model: MMDiT, rng: Rng) -> dict[str, np.ndarray]:
    """Fresh ``D``/``U`` weights and the extended output head.

    Second convolutions of every residual block and the upsampler's
    refinement conv start at zero, the stride conv starts as a 2x2 average
    and the head copies the current output projection, so the inserted
    path starts as smooth-then-restore with the base head.
    """
    d, c = model.config.d, model.config.latent_ch
    p: dict[str, np.ndarray] = {}
    p.update(_res_params(PREFIX + "down.res.", d, rng.spawn("down")))
    p[PREFIX + "down.conv.w"] = avg_stride_kernel(d)
    p[PREFIX + "down.conv.b"] = np.zeros(d)
    p.update(_res_params(PREFIX + "up.res1.", d, rng.spawn("up1")))
    p[PREFIX + "up.conv.w"] = np.zeros((3, 3, d, d))
    p[PREFIX + "up.conv.b"] = np.zeros(d)
    p.update(_res_params(PREFIX + "up.res2.", d, rng.spawn("up2")))
    hr = rng.spawn("head")
    for k in range(3):
        p[PREFIX + f"head.{k}.w"] = hr.normal((d, d), std=1.0 / math.sqrt(d))
        p[PREFIX + f"head.{k}.b"] = np.zeros(d)
    p[PREFIX + "head.3.w"] = np.zeros((d, c))
    p[PREFIX + "head.3.b"] = np.zeros(c)
    p[PREFIX + "head.skip.w"] = model.params["final.proj.w"].copy()
    p[PREFIX + "head.skip.b"] = model.params["final.proj.b"].copy()
    return p


def attach(model: MMDiT, cfg: PtdConfig, rng: Rng) -> MMDiT:
    """Return a copy of ``model`` carrying fresh PTD modules."""
    if not cfg.blocks:
        raise ValueError("PTD needs at least one block")
    if cfg.blocks[-1] >= model.config.n_blocks or cfg.blocks[0] < 0:
        raise ValueError(f"PTD blocks {cfg.blocks} exceed model depth {model.config.n_blocks}")
    if model.config.img_grid % 2:
        raise ValueError("grid side must be even")
    out = model.copy()
    out.params.update(init_down_up(model, rng))
    out.ptd = PtdConfig(**asdict(cfg))
    return out


def count_ptd_params(model: MMDiT) -> int:
    return sum(v.size for k, v in model.params.items() if k.startswith(PREFIX))


# -- modules ---------------------------------------------------------------------------------


def _grid(x: Tensor, side: int) -> Tensor:
    b, n, d = x.shape
    return x.reshape(b, side, side, d)


def _tokens(x: Tensor) -> Tensor:
    b, s, _, d = x.shape
    return x.reshape(b, s * s, d)


def time_features(P, cfg: mmdit.ModelConfig, t) -> Tensor:
    """SiLU of the transformer's timestep MLP output, ``[B, d]``."""
    temb = Tensor(mmdit.timestep_embedding(t, cfg.t_emb_dim))
    h = F.rowwise_linear(temb, P["time.0.w"], P["time.0.b"])
    h = F.rowwise_linear(F.silu(h), P["time.1.w"], P["time.1.b"])
    return F.silu(h)


def res_block(P, prefix: str, x: Tensor, temb: Tensor) -> Tensor:
    """``x + conv2(silu(film(conv1(silu(x)), t)))`` on a ``[B, S, S, d]`` grid."""
    d = x.shape[-1]
    h = F.conv2d(F.silu(x), P[prefix + "conv1.w"], P[prefix + "conv1.b"])
    film = F.rowwise_linear(temb, P[prefix + "film.w"], P[prefix + "film.b"])
    b = film.shape[0]
    scale, shift = (f.reshape(b, 1, 1, d) for f in split(film, [d, d], axis=-1))
    h = h * (scale + 1.0) + shift
    h = F.conv2d(F.silu(h), P[prefix + "conv2.w"], P[prefix + "conv2.b"])
    return x + h


def downsample(P, x: Tensor, temb: Tensor, side: int) -> Tensor:
    """Image tokens ``[B, S*S, d]`` to ``[B, (S/2)^2, d]``."""
    if side % 2:
        raise ValueError(f"grid side {side} is odd")
    if x.shape[1] != side * side:
        raise ValueError(f"expected {side * side} tokens, got {x.shape[1]}")
    g = res_block(P, PREFIX + "down.res.", _grid(x, side), temb)
    g = F.conv2d(g, P[PREFIX + "down.conv.w"], P[PREFIX + "down.conv.b"], stride=2)
    return _tokens(g)


def bilinear_up(x: Tensor, side: int) -> Tensor:
    """Bilinear 2x upsampling of ``[B, side^2, d]`` token grids."""
    m = Tensor(F.bilinear_matrix(side, 2))
    return m @ x


def avg_pool(x: Tensor, side: int) -> Tensor:
    """2x2 mean pooling of ``[B, side^2, d]`` token grids."""
    b, n, d = x.shape
    g = x.reshape(b, side // 2, 2, side // 2, 2, d)
    return g.mean(axis=(2, 4)).reshape(b, (side // 2) ** 2, d)


def upsample(P, x: Tensor, temb: Tensor, side: int) -> Tensor:
    """Coarse tokens ``[B, side^2, d]`` to ``[B, (2*side)^2, d]``."""
    if x.shape[1] != side * side:
        raise ValueError(f"expected {side * side} tokens, got {x.shape[1]}")
    g = res_block(P, PREFIX + "up.res1.", _grid(x, side), temb)
    u = bilinear_up(_tokens(g), side)
    ug = _grid(u, 2 * side)
    ug = ug + F.conv2d(ug, P[PREFIX + "up.conv.w"], P[PREFIX + "up.conv.b"])
    ug = res_block(P, PREFIX + "up.res2.", ug, temb)
    return _tokens(ug)


def highpass(x: Tensor, side: int) -> Tensor:
    """Detail lost by pooling then bilinear upsampling."""
    return x - bilinear_up(avg_pool(x, side), side // 2)


def extended_head(P, img: Tensor, c: Tensor, d: int) -> Tensor:
    """Output layer with the 4-layer MLP added to the copied base projection."""
    mod = F.rowwise_linear(c, P["final.mod.w"], P["final.mod.b"])
    b = mod.shape[0]
    shift, scale = (m.reshape(b, 1, d) for m in split(mod, [d, d], axis=-1))
    h = mmdit.modulate(img, shift, scale)
    out = F.linear(h, P[PREFIX + "head.skip.w"], P[PREFIX + "head.skip.b"])
    z = h
    for k in range(3):
        z = F.gelu(F.linear(z, P[PREFIX + f"head.{k}.w"], P[PREFIX + f"head.{k}.b"]))
    return out + F.linear(z, P[PREFIX + "head.3.w"], P[PREFIX + "head.3.b"])


# -- routing ---------------------------------------------------------------------------------


@dataclass
class RouteInfo:
    low_res: bool
    img_tokens: list[int]


def routed_forward(model: MMDiT, x, t, txt, pooled, *, P=None):
    """Velocity with PTD routing applied.

    Returns ``(velocity, trace, low_res)``. When the step bypasses PTD
    this is exactly :func:`mmdit.forward`. All samples in a batch must
    share a route; use :func:`mixed_forward` otherwise.
    """
    cfg = model.config
    tt = np.broadcast_to(np.asarray(t, dtype=np.float64), (np.shape(getattr(x, "data", x))[0],))
    ptd = model.ptd
    routes = {ptd.low_res(v) for v in tt} if ptd is not None else {False}
    if len(routes) > 1:
        raise ValueError("batch mixes low- and full-resolution timesteps")
    if routes == {False}:
        v, trace = mmdit.forward(model, x, t, txt, pooled, P=P)
        return v, trace, False
    P = P if P is not None else model.tensors()
    img, tx, c, tt = mmdit.embed_inputs(model, P, x, txt, t, pooled)
    side = cfg.img_grid
    L = tx.shape[1]
    fine = mmdit.rope_table(side, cfg.d_H, cfg.rope_base).joint(L)
    coarse = mmdit.rope_table(side // 2, cfg.d_H, cfg.rope_base, stride=2).joint(L)
    temb = time_features(P, cfg, tt)
    covered = ptd.covered
    first, last = covered[0], covered[-1]
    trace = []
    skip = None
    for k, (kind, i) in enumerate(model.block_sites()):
        if k == first:
            skip = img
            img = downsample(P, img, temb, side)
        cos, sin = coarse if first <= k <= last else fine
        fn = mmdit.ds_block if kind == "ds" else mmdit.ss_block
        img_o, tx_o, heads = fn(model, P, i, img, tx, c, tt, cos, sin)
        trace.append(mmdit.BlockRecord(kind, i, img, tx, img_o, tx_o, heads))
        img, tx = img_o, tx_o
        if k == last:
            img = upsample(P, img, temb, side // 2)
            if ptd.skip == "highpass":
                img = img + highpass(skip, side)
    return extended_head(P, img, c, cfg.d), trace, True


def mixed_forward(model: MMDiT, x, t, txt, pooled, *, P=None) -> Tensor:
    """Route each sample separately and reassemble the batch in order."""
    xd = np.asarray(getattr(x, "data", x))
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (xd.shape[0],))
    low = np.array([model.ptd is not None and model.ptd.low_res(v) for v in t])
    if low.all() or not low.any():
        return routed_forward(model, x, t, txt, pooled, P=P)[0]
    txd = np.asarray(getattr(txt, "data", txt))
    pld = np.asarray(getattr(pooled, "data", pooled))
    outs, order = [], []
    for mask in (low, ~low):
        idx = np.flatnonzero(mask)
        outs.append(routed_forward(model, xd[idx], t[idx], txd[idx], pld[idx], P=P)[0])
        order.append(idx)
    v = concat(outs, axis=0)
    inv = np.argsort(np.concatenate(order))
    return v[inv]


def routed_sample(model: MMDiT, schedule: flow.Schedule, prompt_emb, pooled, x_init) -> tuple[flow.SampleResult, list]:
    """Euler sampling with routing; returns the result and a per-step routing log."""
    ts = schedule.timesteps
    x = np.array(x_init, dtype=np.float64)
    res = flow.SampleResult(x, [x], [])
    log = []
    with no_grad():
        for step, j in enumerate(range(schedule.N, 0, -1)):
            v, _, low = routed_forward(model, x, ts[j], prompt_emb, pooled)
            x = x - (ts[j] - ts[j - 1]) * v.data
            res.latents.append(x)
            res.ts.append(float(ts[j]))
            log.append({"step": step, "t": float(ts[j]), "low_res": bool(low)})
    res.x0 = x
    return res, log


# -- training ---------------------------------------------------------------------------------


@dataclass
class PtdRecipe:
    stage_steps: int = 60
    finetune_steps: int = 60
    batch: int = 16
    lr: float = 1e-3
    warmup: int = 10


def _names(model: MMDiT, prefixes: tuple) -> list[str]:
    return [k for k in model.params if k.startswith(prefixes)]


def block_prefix(model: MMDiT, k: int) -> str:
    kind, i = model.block_sites()[k]
    return f"{kind}.{i}."


def stage_trainables(model: MMDiT, stage: int) -> list[str]:
    """Stage 0: D, U, deepest block, head. Later stages: D and the newly covered block."""
    ptd = model.ptd
    block = ptd.blocks[len(ptd.blocks) - 1 - stage]
    names = _names(model, (PREFIX + "down.", block_prefix(model, block)))
    if stage == 0:
        names += _names(model, (PREFIX + "up.", PREFIX + "head."))
    return names


def finetune_trainables(model: MMDiT) -> list[str]:
    prefixes = (PREFIX,) + tuple(block_prefix(model, k) for k in model.ptd.blocks)
    return _names(model, prefixes)


def _distill_fn(model: MMDiT, reference: MMDiT, data: flow.Dataset, cond: flow.Conditioning, batch: int, t_low: float = 0.0):
    """Distillation against ``reference`` at uniform ``t`` in ``[t_low, 1]``, each sample on its own route.

    Bypass samples still matter: blocks inside the run are shared by both routes.
    """

    def loss_fn(P, r):
        idx = r.integers(len(data), (batch,))
        var = r.integers(cond.prompt_emb.shape[1], (batch,))
        txt, pooled = cond.pick(idx, var)
        x0 = data.latents[idx]
        t = t_low + (1.0 - t_low) * r.uniform((batch,))
        t = np.minimum(t, 1.0)
        x_t = flow.interpolate(x0, r.normal(x0.shape), t)
        with no_grad():
            target = mmdit.forward(reference, x_t, t, txt, pooled)[0].data
        v = mixed_forward(model, x_t, t, txt, pooled, P=P)
        return F.mse(v, target)

    return loss_fn


def progressive_train(model: MMDiT, reference: MMDiT, data: flow.Dataset, cond: flow.Conditioning, recipe: PtdRecipe, rng: Rng) -> tuple[MMDiT, dict]:
    """Deepest-block-first training of the PTD path.

    ``model`` must already carry PTD modules (see :func:`attach`). Returns a
    trained copy and a report with the per-stage loss curves and snapshots
    of ``U`` taken after every stage.
    """
    if model.ptd is None:
        raise ValueError("model has no PTD modules attached")
    m = model.copy()
    m.ptd = PtdConfig(**{**asdict(model.ptd), "active": 0})
    if m.ptd.t_thresh <= 0.0:
        raise ValueError("t_thresh = 0 never routes to low resolution; nothing to train")
    loss_fn = _distill_fn(m, reference, data, cond, recipe.batch)
    report: dict = {"stages": [], "u_checksums": []}
    n = len(m.ptd.blocks)
    for stage in range(n):
        m.ptd.active = stage + 1
        tr = flow.TrainRecipe(steps=recipe.stage_steps, batch=recipe.batch, lr=recipe.lr, warmup=recipe.warmup, log_every=max(1, recipe.stage_steps // 4))
        curve = flow.train_loop(m.params, stage_trainables(m, stage), loss_fn, tr, rng.spawn(f"stage-{stage}"), f"ptd stage {stage}")
        report["stages"].append({"stage": stage, "covered": list(m.ptd.covered), "losses": curve})
        report["u_checksums"].append(u_fingerprint(m))
    if recipe.finetune_steps:
        tr = flow.TrainRecipe(steps=recipe.finetune_steps, batch=recipe.batch, lr=recipe.lr * 0.5, warmup=recipe.warmup, log_every=max(1, recipe.finetune_steps // 4))
        curve = flow.train_loop(m.params, finetune_trainables(m), loss_fn, tr, rng.spawn("finetune"), "ptd finetune")
        report["finetune"] = curve
    report["stage_count"] = n
    return m, report


def u_fingerprint(model: MMDiT) -> str:
    import hashlib

    h = hashlib.sha256()
    for k in sorted(_names(model, (PREFIX + "up.",))):
        h.update(k.encode())
        h.update(np.ascontiguousarray(model.params[k]).tobytes())
    return h.hexdigest()


def heldout_loss(model: MMDiT, held) -> float:
    """Held-out velocity MSE with routing applied per sample."""
    with no_grad():
        v = mixed_forward(model, held.x_t, held.t, held.prompt_emb, held.pooled).data
    return float(np.mean((v - held.target) ** 2))


def sample_accuracy(model: MMDiT, spec: flow.SynthSpec, schedule: flow.Schedule, ev: flow.EvalSet, prompt_emb=None, pooled=None) -> tuple[float, list]:
    txt = ev.prompt_emb if prompt_emb is None else prompt_emb
    pl = ev.pooled if pooled is None else pooled
    res, log = routed_sample(model, schedule, txt, pl, ev.noise)
    return flow.factor_accuracy(spec, res.x0, ev.factors), log


# -- cost model ---------------------------------------------------------------------------------


@dataclass
class FlopReport:
    per_step: list[dict]
    total: float
    base_total: float
    quadratic: float
    base_quadratic: float

    @property
    def ratio(self) -> float:
        return self.total / self.base_total

    @property
    def quadratic_ratio(self) -> float:
        return self.quadratic / self.base_quadratic

    def to_dict(self) -> dict:
        return {
            "per_step": self.per_step,
            "total": self.total,
            "base_total": self.base_total,
            "ratio": self.ratio,
            "quadratic_ratio": self.quadratic_ratio,
        }


def block_cost(n_tokens: int, d: int, ffn_mult: int) -> tuple[float, float]:
    """(quadratic, linear) multiply-add FLOPs of one transformer block on ``n_tokens`` tokens.

    Scores and the weighted sum cost ``2 n^2 d`` each; every token passes
    through ``(4 + 2 f) d^2`` projection and FFN weights.
    """
    quad = 4.0 * n_tokens * n_tokens * d
    lin = 2.0 * n_tokens * (4 + 2 * ffn_mult) * d * d
    return quad, lin


def attention_flops(config: mmdit.ModelConfig, ptd: PtdConfig | None, schedule: flow.Schedule, txt_len: int | None = None) -> FlopReport:
    """Analytic per-step and total transformer cost with routing applied."""
    L = config.txt_len if txt_len is None else txt_len
    T = config.T
    covered = set(ptd.covered) if ptd is not None else set()
    per_step = []
    total = base_total = quad_sum = base_quad = 0.0
    for step, t in enumerate(schedule.sampler_ts):
        low = ptd is not None and ptd.low_res(t)
        step_total = step_quad = 0.0
        for k in range(config.n_blocks):
            n_img = T // 4 if (low and k in covered) else T
            q, l = block_cost(n_img + L, config.d, config.ffn_mult)
            qb, lb = block_cost(T + L, config.d, config.ffn_mult)
            step_total += q + l
            step_quad += q
            base_total += qb + lb
            base_quad += qb
        per_step.append({"step": step, "t": float(t), "low_res": bool(low), "flops": step_total})
        total += step_total
        quad_sum += step_quad
    return FlopReport(per_step, total, base_total, quad_sum, base_quad)
