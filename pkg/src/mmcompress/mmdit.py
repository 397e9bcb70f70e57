"""A miniature multi-modal diffusion transformer.

Double-stream blocks keep separate projections, FFNs and AdaLN heads for the
image and text streams but attend jointly over the concatenated sequence.
Single-stream blocks run one fused projection over the concatenation.
Weights are a flat ``{name: ndarray}`` mapping so structural transforms can
slice and average them by name.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .numkit import Rng, Tensor, concat, split
from .numkit import functional as F
from .numkit.tensor import make

STREAMS = ("img", "txt")
DS_COEFFS = 6
SS_COEFFS = 3


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    H: int = 8
    d_H: int = 8
    n_ds: int = 4
    n_ss: int = 6
    ffn_mult: int = 4
    img_grid: int = 8
    txt_len: int = 8
    latent_ch: int = 4
    txt_dim: int = 32
    t_emb_dim: int = 32
    pooled_dim: int = 16
    rope_base: float = 4.0

    def __post_init__(self):
        if self.d != self.H * self.d_H:
            raise ValueError(f"d={self.d} must equal H*d_H={self.H * self.d_H}")
        if self.img_grid < 2:
            raise ValueError("img_grid must be at least 2")
        for name in ("d", "H", "d_H", "n_ds", "ffn_mult", "txt_len", "latent_ch", "txt_dim", "t_emb_dim", "pooled_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_ss < 0:
            raise ValueError("n_ss must be >= 0")
        if self.d_H % 2:
            raise ValueError("d_H must be even for rotary pairs")

    @property
    def T(self) -> int:
        return self.img_grid * self.img_grid

    @property
    def n_blocks(self) -> int:
        return self.n_ds + self.n_ss

    def replace(self, **kw) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), **kw})

    def to_dict(self) -> dict:
        return asdict(self)


# -- parameter accounting ---------------------------------------------------


@dataclass(frozen=True)
class ParamCounts:
    ds_block: int
    ss_block: int
    ds_block_bias: int
    ss_block_bias: int
    embed: int
    embed_bias: int
    n_ds: int
    n_ss: int

    @property
    def weights(self) -> int:
        return self.n_ds * self.ds_block + self.n_ss * self.ss_block + self.embed

    @property
    def biases(self) -> int:
        return self.n_ds * self.ds_block_bias + self.n_ss * self.ss_block_bias + self.embed_bias

    @property
    def total(self) -> int:
        return self.weights + self.biases

    def to_dict(self) -> dict:
        out = asdict(self)
        out.update(weights=self.weights, biases=self.biases, total=self.total)
        return out


def count_params(config: ModelConfig, adaln: bool = True) -> ParamCounts:
    """Closed-form weight and bias counts.

    With ``adaln=False`` the per-block modulation projections are gone (the
    Static-LN layout); embeddings and the output head are unchanged.
    """
    d, f = config.d, config.ffn_mult
    ds_w = 2 * (4 * d * d + 2 * f * d * d + (DS_COEFFS * d * d if adaln else 0))
    ds_b = 2 * (4 * d + f * d + d + (DS_COEFFS * d if adaln else 0))
    ss_w = (3 + f) * d * d + (1 + f) * d * d + (SS_COEFFS * d * d if adaln else 0)
    ss_b = (3 + f) * d + d + (SS_COEFFS * d if adaln else 0)
    c = config.latent_ch
    emb_w = c * d + config.txt_dim * d + config.t_emb_dim * d + d * d + config.pooled_dim * d + d * d + 2 * d * d + d * c
    emb_b = d + d + d + d + d + d + 2 * d + c
    return ParamCounts(ds_w, ss_w, ds_b, ss_b, emb_w, emb_b, config.n_ds, config.n_ss)


def enumerate_params(params: dict[str, np.ndarray], prefix: str = "") -> tuple[int, int]:
    """Brute-force (weights, biases) count over every tensor in ``params``."""
    w = b = 0
    for name, arr in params.items():
        if not name.startswith(prefix) or name.startswith(("static.", "ptd.")) and not prefix:
            continue
        if name.endswith(".b"):
            b += arr.size
        else:
            w += arr.size
    return w, b


# -- parameters ---------------------------------------------------------------


def _ds_shapes(cfg: ModelConfig, i: int) -> dict[str, tuple]:
    d, fd = cfg.d, cfg.ffn_mult * cfg.d
    out = {}
    for m in STREAMS:
        p = f"ds.{i}.{m}."
        for proj in ("q", "k", "v", "o"):
            out[p + proj + ".w"] = (d, d)
            out[p + proj + ".b"] = (d,)
        out[p + "mlp0.w"] = (d, fd)
        out[p + "mlp0.b"] = (fd,)
        out[p + "mlp1.w"] = (fd, d)
        out[p + "mlp1.b"] = (d,)
        out[p + "mod.w"] = (d, DS_COEFFS * d)
        out[p + "mod.b"] = (DS_COEFFS * d,)
    return out


def _ss_shapes(cfg: ModelConfig, i: int) -> dict[str, tuple]:
    d, fd = cfg.d, cfg.ffn_mult * cfg.d
    p = f"ss.{i}."
    return {
        p + "lin1.w": (d, 3 * d + fd),
        p + "lin1.b": (3 * d + fd,),
        p + "lin2.w": (d + fd, d),
        p + "lin2.b": (d,),
        p + "mod.w": (d, SS_COEFFS * d),
        p + "mod.b": (SS_COEFFS * d,),
    }


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    d, c = cfg.d, cfg.latent_ch
    shapes = {
        "img_in.w": (c, d),
        "img_in.b": (d,),
        "txt_in.w": (cfg.txt_dim, d),
        "txt_in.b": (d,),
        "time.0.w": (cfg.t_emb_dim, d),
        "time.0.b": (d,),
        "time.1.w": (d, d),
        "time.1.b": (d,),
        "pooled.0.w": (cfg.pooled_dim, d),
        "pooled.0.b": (d,),
        "pooled.1.w": (d, d),
        "pooled.1.b": (d,),
    }
    for i in range(cfg.n_ds):
        shapes.update(_ds_shapes(cfg, i))
    for i in range(cfg.n_ss):
        shapes.update(_ss_shapes(cfg, i))
    shapes.update({"final.mod.w": (d, 2 * d), "final.mod.b": (2 * d,), "final.proj.w": (d, c), "final.proj.b": (c,)})
    return shapes


def init_params(cfg: ModelConfig, rng: Rng) -> dict[str, np.ndarray]:
    """Fan-in scaled Gaussian weights; modulation heads and the output head start at zero."""
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b") or ".mod." in name or name.startswith("final.proj"):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(shape, std=1.0 / math.sqrt(shape[0]))
    return params


@dataclass
class StaticLnTable:
    """Per-timestep modulation vectors replacing the AdaLN projections.

    ``coeffs[site]`` is ``[len(timesteps), n_coeff * d]`` where ``site`` is
    ``ds.{i}.img``, ``ds.{i}.txt`` or ``ss.{i}``.
    """

    timesteps: np.ndarray
    coeffs: dict[str, np.ndarray]
    interpolate: bool = False

    def lookup(self, site: str, t: np.ndarray) -> np.ndarray:
        table = self.coeffs[site]
        t = np.asarray(t, dtype=np.float64)
        if self.interpolate:
            cols = [np.interp(t, self.timesteps, table[:, j]) for j in range(table.shape[1])]
            return np.stack(cols, axis=-1)
        idx = np.abs(t[:, None] - self.timesteps[None, :]).argmin(axis=1)
        return table[idx]


@dataclass
class MMDiT:
    config: ModelConfig
    params: dict[str, np.ndarray]
    static_ln: StaticLnTable | None = None
    ptd: object | None = None
    provenance: list[str] = field(default_factory=list)

    def tensors(self, trainable=None) -> dict[str, Tensor]:
        """Wrap weights as tensors; ``trainable(name)`` marks which need gradients."""
        return {k: Tensor(v, requires_grad=bool(trainable and trainable(k))) for k, v in self.params.items()}

    def copy(self) -> "MMDiT":
        st = None
        if self.static_ln is not None:
            st = StaticLnTable(
                self.static_ln.timesteps.copy(),
                {k: v.copy() for k, v in self.static_ln.coeffs.items()},
                self.static_ln.interpolate,
            )
        return MMDiT(self.config, {k: v.copy() for k, v in self.params.items()}, st, self.ptd, list(self.provenance))

    def block_sites(self) -> list[tuple[str, int]]:
        return [("ds", i) for i in range(self.config.n_ds)] + [("ss", i) for i in range(self.config.n_ss)]


def build_model(cfg: ModelConfig, seed: int) -> MMDiT:
    return MMDiT(cfg, init_params(cfg, Rng(seed)), provenance=[])


# -- rotary embeddings ----------------------------------------------------------


@dataclass
class Rope2D:
    """Axial 2D rotary table for image tokens.

    Rotary pair ``j`` of a head rotates by ``pos[axis] * base**-(j // 2)``
    with ``axis = j % 2`` (row, column, row, ...). The frequency of a pair
    depends only on its index, so truncating a head keeps a prefix of its
    rotations unchanged.
    """

    grid_side: int
    d_H: int
    positions: np.ndarray
    angles: np.ndarray

    @property
    def cos(self) -> np.ndarray:
        return np.cos(self.angles)

    @property
    def sin(self) -> np.ndarray:
        return np.sin(self.angles)

    def joint(self, txt_len: int) -> tuple[np.ndarray, np.ndarray]:
        """cos/sin for ``[text, image]`` sequences; text tokens sit at the origin band (no rotation)."""
        pairs = self.angles.shape[1]
        ang = np.concatenate([np.zeros((txt_len, pairs)), self.angles], axis=0)
        return np.cos(ang), np.sin(ang)


def rope_table(grid_side: int, d_H: int, base: float = 4.0, stride: int = 1) -> Rope2D:
    """Rotary table for a ``grid_side x grid_side`` grid.

    ``stride`` places tokens at every ``stride``-th coordinate of the fine
    grid; the coarse table with ``stride=2`` reproduces the fine table's
    rows at even coordinates.
    """
    if grid_side < 1:
        raise ValueError("grid_side must be >= 1")
    if d_H < 2 or d_H % 2:
        raise ValueError(f"d_H={d_H} must be a positive even number")
    rr, cc = np.meshgrid(np.arange(grid_side), np.arange(grid_side), indexing="ij")
    pos = np.stack([rr.reshape(-1), cc.reshape(-1)], axis=1).astype(np.float64) * stride
    pairs = d_H // 2
    axis = np.arange(pairs) % 2
    freq = base ** -(np.arange(pairs) // 2).astype(np.float64)
    angles = pos[:, axis] * freq[None, :]
    return Rope2D(grid_side, d_H, pos, angles)


def apply_rotary(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate consecutive pairs of the last axis; ``cos``/``sin`` are ``[N, d_H/2]``."""
    xd = x.data
    shp = xd.shape
    xr = xd.reshape(*shp[:-1], shp[-1] // 2, 2)
    a, b = xr[..., 0], xr[..., 1]
    out = np.empty_like(xr)
    out[..., 0] = a * cos - b * sin
    out[..., 1] = a * sin + b * cos

    def bw(g):
        gr = g.reshape(xr.shape)
        ga, gb = gr[..., 0], gr[..., 1]
        gx = np.empty_like(gr)
        gx[..., 0] = ga * cos + gb * sin
        gx[..., 1] = -ga * sin + gb * cos
        return (gx.reshape(shp),)

    return make("rotary", out.reshape(shp), (x,), bw)


# -- building blocks ---------------------------------------------------------------


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal features of ``1000 * t``; computed scalar-wise so rows never depend on batch size."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    out = np.zeros((t.shape[0], dim))
    freqs = [math.exp(-math.log(10000.0) * k / half) for k in range(half)]
    for i, ti in enumerate(t):
        for k, f in enumerate(freqs):
            a = 1000.0 * float(ti) * f
            out[i, k] = math.cos(a)
            out[i, half + k] = math.sin(a)
    return out


def conditioning(P: dict[str, Tensor], cfg: ModelConfig, t, pooled) -> Tensor:
    """SiLU of timestep embedding plus pooled-prompt embedding, ``[B, d]``."""
    temb = Tensor(timestep_embedding(t, cfg.t_emb_dim))
    h = F.rowwise_linear(temb, P["time.0.w"], P["time.0.b"])
    h = F.rowwise_linear(F.silu(h), P["time.1.w"], P["time.1.b"])
    pooled = pooled if isinstance(pooled, Tensor) else Tensor(pooled)
    p = F.rowwise_linear(pooled, P["pooled.0.w"], P["pooled.0.b"])
    p = F.rowwise_linear(F.silu(p), P["pooled.1.w"], P["pooled.1.b"])
    return F.silu(h + p)


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return F.layer_norm(x) * (scale + 1.0) + shift


def adaln_modulate(x: Tensor, coeffs, sublayers) -> Tensor:
    """Gated residual sub-layers driven by AdaLN coefficients.

    Three coefficients ``(shift, scale, gate)`` drive one sub-layer; six
    drive a pre/post pair, applied in order.
    """
    coeffs = list(coeffs)
    if callable(sublayers):
        sublayers = [sublayers]
    if len(coeffs) not in (SS_COEFFS, DS_COEFFS) or len(coeffs) != SS_COEFFS * len(sublayers):
        raise ValueError(f"expected 3 coefficients per sub-layer, got {len(coeffs)} for {len(sublayers)}")
    for k, fn in enumerate(sublayers):
        shift, scale, gate = coeffs[3 * k : 3 * k + 3]
        x = x + gate * fn(modulate(x, shift, scale))
    return x


def _heads(x: Tensor, H: int) -> Tensor:
    b, n, dd = x.shape
    return x.reshape(b, n, H, dd // H).transpose(0, 2, 1, 3)


def joint_attention(q: Tensor, k: Tensor, v: Tensor, H: int, cos=None, sin=None, mask=None, return_probs=False, hook=None):
    """Softmax attention over one concatenated sequence.

    ``q``, ``k``, ``v`` are ``[B, N, H*d_H]``. Returns the merged output
    ``[B, N, H*d_H]`` and the per-head pre-projection features
    ``[B, H, N, d_H]``. ``mask`` is added to the logits; ``hook`` may
    replace the per-head features before they are merged.
    """
    if not (q.shape == k.shape == v.shape) or q.shape[-1] % H:
        raise ValueError(f"attention shape mismatch: {q.shape}, {k.shape}, {v.shape} with H={H}")
    qh, kh, vh = _heads(q, H), _heads(k, H), _heads(v, H)
    if cos is not None:
        qh = apply_rotary(qh, cos, sin)
        kh = apply_rotary(kh, cos, sin)
    dh = qh.shape[-1]
    logits = (qh @ kh.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    if mask is not None:
        logits = logits + mask
    probs = F.softmax(logits, axis=-1)
    heads = probs @ vh
    if hook is not None:
        heads = hook(heads)
    b, h, n, _ = heads.shape
    out = heads.transpose(0, 2, 1, 3).reshape(b, n, h * dh)
    if return_probs:
        return out, heads, probs
    return out, heads


def modality_mask(txt_len: int, img_len: int) -> np.ndarray:
    """Additive logit mask that blocks text-image attention."""
    n = txt_len + img_len
    m = np.zeros((n, n))
    m[:txt_len, txt_len:] = -1e300
    m[txt_len:, :txt_len] = -1e300
    return m


@dataclass
class BlockRecord:
    kind: str
    index: int
    img_in: Tensor
    txt_in: Tensor
    img_out: Tensor
    txt_out: Tensor
    heads: Tensor


BlockTrace = list


def block_coeffs(model: MMDiT, P: dict[str, Tensor], site: str, n_coeff: int, c: Tensor, t) -> list[Tensor]:
    """Modulation vectors ``[B, 1, d]`` from the AdaLN head or the static table."""
    d = model.config.d
    if model.static_ln is not None and site in model.static_ln.coeffs:
        mod = Tensor(model.static_ln.lookup(site, t))
    else:
        mod = F.rowwise_linear(c, P[site + ".mod.w"], P[site + ".mod.b"])
    b = mod.shape[0]
    return [m.reshape(b, 1, d) for m in split(mod, [d] * n_coeff, axis=-1)]


def _mlp(P, prefix):
    return lambda h: F.linear(F.gelu(F.linear(h, P[prefix + "mlp0.w"], P[prefix + "mlp0.b"])), P[prefix + "mlp1.w"], P[prefix + "mlp1.b"])


def ds_block(model, P, i, img, txt, c, t, cos, sin, mask=None, hook=None):
    cfg = model.config
    qkv = {}
    coeffs = {}
    for m, x in (("img", img), ("txt", txt)):
        pre = f"ds.{i}.{m}."
        coeffs[m] = block_coeffs(model, P, f"ds.{i}.{m}", DS_COEFFS, c, t)
        xn = modulate(x, coeffs[m][0], coeffs[m][1])
        qkv[m] = [F.linear(xn, P[pre + n + ".w"], P[pre + n + ".b"]) for n in ("q", "k", "v")]
    q, k, v = (concat([qkv["txt"][j], qkv["img"][j]], axis=1) for j in range(3))
    attn, heads = joint_attention(q, k, v, cfg.H, cos, sin, mask, hook=hook)
    L = txt.shape[1]
    a_txt, a_img = split(attn, [L, attn.shape[1] - L], axis=1)
    out = {}
    for m, x, a in (("img", img, a_img), ("txt", txt, a_txt)):
        pre = f"ds.{i}.{m}."
        shift1, scale1, gate1, shift2, scale2, gate2 = coeffs[m]
        x = x + gate1 * F.linear(a, P[pre + "o.w"], P[pre + "o.b"])
        x = adaln_modulate(x, (shift2, scale2, gate2), _mlp(P, pre))
        out[m] = x
    return out["img"], out["txt"], heads


def ss_block(model, P, i, img, txt, c, t, cos, sin, mask=None, hook=None):
    cfg = model.config
    d, fd = cfg.d, cfg.ffn_mult * cfg.d
    pre = f"ss.{i}."
    L = txt.shape[1]
    x = concat([txt, img], axis=1)
    shift, scale, gate = block_coeffs(model, P, f"ss.{i}", SS_COEFFS, c, t)
    holder = {}

    def fused(xn):
        h = F.linear(xn, P[pre + "lin1.w"], P[pre + "lin1.b"])
        q, k, v, mlp = split(h, [d, d, d, fd], axis=-1)
        attn, holder["heads"] = joint_attention(q, k, v, cfg.H, cos, sin, mask, hook=hook)
        return F.linear(concat([attn, F.gelu(mlp)], axis=-1), P[pre + "lin2.w"], P[pre + "lin2.b"])

    x = adaln_modulate(x, (shift, scale, gate), fused)
    txt_out, img_out = split(x, [L, x.shape[1] - L], axis=1)
    return img_out, txt_out, holder["heads"]


def final_layer(P, img: Tensor, c: Tensor, d: int) -> Tensor:
    mod = F.rowwise_linear(c, P["final.mod.w"], P["final.mod.b"])
    b = mod.shape[0]
    shift, scale = (m.reshape(b, 1, d) for m in split(mod, [d, d], axis=-1))
    return F.linear(modulate(img, shift, scale), P["final.proj.w"], P["final.proj.b"])


def embed_inputs(model: MMDiT, P, x, txt, t, pooled):
    cfg = model.config
    x = x if isinstance(x, Tensor) else Tensor(x)
    txt = txt if isinstance(txt, Tensor) else Tensor(txt)
    if x.ndim != 3 or x.shape[1:] != (cfg.T, cfg.latent_ch):
        raise ValueError(f"latent tokens must be [B, {cfg.T}, {cfg.latent_ch}], got {x.shape}")
    if txt.ndim != 3 or txt.shape[2] != cfg.txt_dim or txt.shape[0] != x.shape[0]:
        raise ValueError(f"prompt embedding must be [B, L, {cfg.txt_dim}], got {txt.shape}")
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],)).copy()
    if (t < 0).any() or (t > 1).any():
        raise ValueError("t must lie in [0, 1]")
    img = F.linear(x, P["img_in.w"], P["img_in.b"])
    tx = F.linear(txt, P["txt_in.w"], P["txt_in.b"])
    c = conditioning(P, cfg, t, pooled)
    return img, tx, c, t


def forward(model: MMDiT, x, t, txt, pooled, *, P=None, rope: Rope2D | None = None, mask=None, hook=None):
    """Predict the velocity for latent tokens ``x`` at time ``t``.

    Returns ``(velocity [B, T, latent_ch], trace)`` where the trace holds
    one :class:`BlockRecord` per block in execution order.
    ``hook(kind, index, heads)`` may rewrite a block's per-head features.
    """
    cfg = model.config
    P = P if P is not None else model.tensors()
    img, tx, c, t = embed_inputs(model, P, x, txt, t, pooled)
    rope = rope or rope_table(cfg.img_grid, cfg.d_H, cfg.rope_base)
    cos, sin = rope.joint(tx.shape[1])
    trace: BlockTrace = []
    for kind, i in model.block_sites():
        fn = ds_block if kind == "ds" else ss_block
        bh = None if hook is None else (lambda h, k=kind, j=i: hook(k, j, h))
        img_o, tx_o, heads = fn(model, P, i, img, tx, c, t, cos, sin, mask, bh)
        trace.append(BlockRecord(kind, i, img, tx, img_o, tx_o, heads))
        img, tx = img_o, tx_o
    return final_layer(P, img, c, cfg.d), trace


def dynamic_coeffs(model: MMDiT, t, pooled) -> dict[str, np.ndarray]:
    """AdaLN projection outputs per modulation site, ``[B, n_coeff * d]``."""
    P = model.tensors()
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    pooled = np.asarray(pooled, dtype=np.float64)
    if t.shape[0] != pooled.shape[0]:
        t = np.broadcast_to(t, (pooled.shape[0],)).copy()
    c = conditioning(P, model.config, t, pooled)
    out = {}
    for site in modulation_sites(model.config):
        out[site] = F.rowwise_linear(c, P[site + ".mod.w"], P[site + ".mod.b"]).data
    return out


def modulation_sites(cfg: ModelConfig) -> list[str]:
    sites = [f"ds.{i}.{m}" for i in range(cfg.n_ds) for m in STREAMS]
    return sites + [f"ss.{i}" for i in range(cfg.n_ss)]


def site_coeff_count(site: str) -> int:
    return DS_COEFFS if site.startswith("ds.") else SS_COEFFS
