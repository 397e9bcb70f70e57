"""Flow matching, Euler sampling, the synthetic prompt dataset and toy text encoders."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import mmdit
from .numkit import Adam, Rng, Tensor, no_grad
from .numkit import functional as F

# -- interpolant, loss, sampler -------------------------------------------------


@dataclass
class FlowBatch:
    x0: np.ndarray
    eps: np.ndarray
    t: np.ndarray
    x_t: np.ndarray
    prompt_id: np.ndarray | None = None


def interpolate(x0: np.ndarray, eps: np.ndarray, t) -> np.ndarray:
    """``(1 - t) x0 + t eps`` with ``t`` broadcast per sample."""
    t = np.asarray(t, dtype=np.float64).reshape((-1,) + (1,) * (x0.ndim - 1))
    return (1.0 - t) * x0 + t * eps


def make_batch(x0: np.ndarray, eps: np.ndarray, t, prompt_id=None) -> FlowBatch:
    if x0.shape != eps.shape:
        raise ValueError(f"x0 {x0.shape} and eps {eps.shape} differ")
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x0.shape[0],)).copy()
    return FlowBatch(x0, eps, t, interpolate(x0, eps, t), prompt_id)


def sample_batch(x0: np.ndarray, rng: Rng, prompt_id=None) -> FlowBatch:
    """Fresh noise and uniform timesteps for clean latents ``x0``."""
    return make_batch(x0, rng.normal(x0.shape), rng.uniform((x0.shape[0],)), prompt_id)


@dataclass(frozen=True)
class Schedule:
    """Sampler grid ``t_0 = 0 < t_1 < ... < t_N = 1``."""

    N: int
    grid: tuple | None = None

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("schedule needs N >= 1")
        if self.grid is not None:
            g = np.asarray(self.grid, dtype=np.float64)
            if len(g) != self.N + 1 or g[0] != 0.0 or g[-1] != 1.0 or not (np.diff(g) > 0).all():
                raise ValueError("grid must rise strictly from 0 to 1 with N+1 points")

    @property
    def timesteps(self) -> np.ndarray:
        if self.grid is not None:
            return np.asarray(self.grid, dtype=np.float64)
        return np.arange(self.N + 1) / self.N

    @property
    def sampler_ts(self) -> np.ndarray:
        """Timesteps at which the velocity is queried, in sampling order (``t_N`` first)."""
        return self.timesteps[1:][::-1].copy()


def velocity(model, x, t, txt, pooled, P=None):
    """Evaluate an :class:`~mmcompress.mmdit.MMDiT` or a plain velocity callable."""
    if isinstance(model, mmdit.MMDiT):
        return mmdit.forward(model, x, t, txt, pooled, P=P)[0]
    out = model(x, t, txt, pooled)
    return out if isinstance(out, Tensor) else Tensor(out)


def fm_loss(model, batch: FlowBatch, prompt_emb, pooled, P=None) -> Tensor:
    """Mean squared error between the predicted velocity and ``eps - x0``."""
    v = velocity(model, batch.x_t, batch.t, prompt_emb, pooled, P)
    target = batch.eps - batch.x0
    if v.shape != target.shape:
        raise ValueError(f"velocity {v.shape} does not match target {target.shape}")
    return F.mse(v, target)


@dataclass
class SampleResult:
    x0: np.ndarray
    latents: list = field(default_factory=list)
    ts: list = field(default_factory=list)


def euler_sample(model, schedule: Schedule, prompt_emb, pooled, rng: Rng | None = None, x_init=None, shape=None) -> SampleResult:
    """Integrate from noise at ``t = 1`` back to ``t = 0``.

    Each step applies ``x <- x - (t_j - t_{j-1}) * f(x, t_j)``; the latents
    list starts with the initial noise.
    """
    if x_init is None:
        if shape is None:
            b = np.asarray(prompt_emb.data if isinstance(prompt_emb, Tensor) else prompt_emb).shape[0]
            cfg = model.config
            shape = (b, cfg.T, cfg.latent_ch)
        x = rng.normal(shape)
    else:
        x = np.array(x_init, dtype=np.float64)
    ts = schedule.timesteps
    out = SampleResult(x, [x], [])
    with no_grad():
        for j in range(schedule.N, 0, -1):
            f = velocity(model, x, ts[j], prompt_emb, pooled).data
            x = x - (ts[j] - ts[j - 1]) * f
            out.latents.append(x)
            out.ts.append(float(ts[j]))
    out.x0 = x
    return out


# -- synthetic dataset --------------------------------------------------------------

SHAPES = ("square", "cross", "stripe")
QUADRANTS = ("top-left", "top-right", "bottom-left", "bottom-right")
INTENSITIES = ("dim", "bright")
FILLER = ("a", "an", "in", "the", "corner", "shape", "of", "picture")
PAD = 0


def _vocab() -> dict[str, int]:
    words = ["<pad>"] + list(SHAPES) + list(QUADRANTS) + list(INTENSITIES) + list(FILLER)
    return {w: i for i, w in enumerate(words)}


VOCAB = _vocab()

CAPTION_TEMPLATES = (
    ("{i}", "{s}", "{q}"),
    ("a", "{i}", "{s}", "in", "the", "{q}", "corner"),
    ("{s}", "{q}", "{i}"),
    ("picture", "of", "a", "{i}", "{s}", "{q}"),
)


@dataclass(frozen=True)
class SynthSpec:
    grid: int = 8
    channels: int = 4
    amplitudes: tuple = (1.0, 2.0)
    jitter: float = 0.05
    txt_len: int = 8

    def __post_init__(self):
        if self.grid < 4 or self.grid % 2:
            raise ValueError("grid must be even and >= 4")
        if self.channels < 3:
            raise ValueError("need at least 3 channels")

    @property
    def combinations(self) -> list[tuple[int, int, int]]:
        return list(itertools.product(range(len(SHAPES)), range(len(QUADRANTS)), range(len(INTENSITIES))))

    @property
    def vocab_size(self) -> int:
        return len(VOCAB)


def _template(shape: int, side: int) -> np.ndarray:
    m = np.zeros((side, side))
    if shape == 0:
        m[0, :] = m[-1, :] = m[:, 0] = m[:, -1] = 1.0
    elif shape == 1:
        lo, hi = side // 2 - 1, side // 2 + 1
        m[lo:hi, :] = 1.0
        m[:, lo:hi] = 1.0
    else:
        m[::2, :] = 1.0
    return m


def _channel_profile(shape: int, channels: int) -> np.ndarray:
    p = np.full(channels, 0.25)
    p[shape] = 1.0
    return p / np.linalg.norm(p)


def render(spec: SynthSpec, factors: tuple[int, int, int], rng: Rng | None = None) -> np.ndarray:
    """Token grid ``[grid*grid, channels]`` for ``(shape, quadrant, intensity)``."""
    s, q, i = factors
    g, h = spec.grid, spec.grid // 2
    img = np.zeros((g, g, spec.channels))
    r0, c0 = (q // 2) * h, (q % 2) * h
    img[r0 : r0 + h, c0 : c0 + h] = _template(s, h)[:, :, None] * _channel_profile(s, spec.channels) * spec.amplitudes[i] * 2.0
    if rng is not None and spec.jitter > 0:
        img = img + rng.normal(img.shape, std=spec.jitter)
    return img.reshape(g * g, spec.channels)


def caption(factors: tuple[int, int, int], template: tuple, txt_len: int) -> np.ndarray:
    s, q, i = factors
    words = [w.format(s=SHAPES[s], q=QUADRANTS[q], i=INTENSITIES[i]) for w in template]
    ids = [VOCAB[w] for w in words][:txt_len]
    return np.array(ids + [PAD] * (txt_len - len(ids)), dtype=np.int64)


@dataclass
class Dataset:
    latents: np.ndarray
    factors: np.ndarray
    captions: np.ndarray
    spec: SynthSpec

    def __len__(self) -> int:
        return self.latents.shape[0]

    @property
    def prompt_id(self) -> np.ndarray:
        f = self.factors
        return (f[:, 0] * len(QUADRANTS) + f[:, 1]) * len(INTENSITIES) + f[:, 2]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.latents[idx], self.factors[idx], self.captions[idx], self.spec)


def make_dataset(spec: SynthSpec, n: int, rng: Rng) -> Dataset:
    """``n`` renderings cycling through every factor combination.

    Each sample carries one caption per template. Sample ``k`` gets its
    jitter from a child stream keyed by ``k``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    combos = spec.combinations
    order = rng.spawn("order").permutation(len(combos))
    lat, fac, cap = [], [], []
    for k in range(n):
        f = combos[order[k % len(combos)]]
        lat.append(render(spec, f, rng.spawn(k)))
        fac.append(f)
        cap.append(np.stack([caption(f, tpl, spec.txt_len) for tpl in CAPTION_TEMPLATES]))
    return Dataset(np.stack(lat), np.array(fac, dtype=np.int64), np.stack(cap), spec)


def classify(spec: SynthSpec, latents: np.ndarray) -> np.ndarray:
    """Invert the renderer: ``[n, 3]`` factor estimates.

    Quadrant by energy, shape by normalised template correlation in that
    quadrant, intensity by amplitude against the midpoint of the two levels.
    """
    g, h = spec.grid, spec.grid // 2
    lat = np.asarray(latents).reshape(-1, g, g, spec.channels)
    out = np.zeros((lat.shape[0], 3), dtype=np.int64)
    raw = [_template(s, h)[:, :, None] * _channel_profile(s, spec.channels) for s in range(len(SHAPES))]
    kernels = [k / np.linalg.norm(k) for k in raw]
    mid = spec.amplitudes[0] + spec.amplitudes[1]
    for n, img in enumerate(lat):
        quads = [img[(q // 2) * h : (q // 2) * h + h, (q % 2) * h : (q % 2) * h + h] for q in range(4)]
        q = int(np.argmax([np.sum(p * p) for p in quads]))
        patch = quads[q]
        corr = [np.sum(patch * k) for k in kernels]
        s = int(np.argmax(corr))
        amp = corr[s] / np.linalg.norm(raw[s])
        out[n] = (s, q, int(amp > mid))
    return out


def factor_accuracy(spec: SynthSpec, latents: np.ndarray, factors: np.ndarray) -> float:
    """Fraction of samples whose three factors are all recovered."""
    pred = classify(spec, latents)
    return float(np.mean(np.all(pred == np.asarray(factors), axis=1)))


# -- toy text encoders ----------------------------------------------------------------


@dataclass
class ToyTextEncoder:
    """Two pre-norm self-attention layers over caption tokens.

    ``params`` holds the embedding, position table, layers and an optional
    two-layer adapter (``adapter.0``/``adapter.1``) to ``out_dim``.
    """

    vocab: int
    d_enc: int
    txt_len: int
    params: dict[str, np.ndarray]
    n_heads: int = 2
    out_dim: int | None = None
    frozen: bool = False

    @property
    def dim(self) -> int:
        return self.out_dim if self.out_dim is not None else self.d_enc

    def tensors(self, trainable: bool = True) -> dict[str, Tensor]:
        rg = trainable and not self.frozen
        return {k: Tensor(v, requires_grad=rg) for k, v in self.params.items()}

    def copy(self) -> "ToyTextEncoder":
        return ToyTextEncoder(self.vocab, self.d_enc, self.txt_len, {k: v.copy() for k, v in self.params.items()}, self.n_heads, self.out_dim, self.frozen)

    def encode(self, ids, P=None, adapt: bool = True) -> Tensor:
        """Token ids ``[B, L]`` to embeddings ``[B, L, dim]``."""
        P = P if P is not None else self.tensors(trainable=False)
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2 or ids.shape[1] != self.txt_len:
            raise ValueError(f"caption ids must be [B, {self.txt_len}], got {ids.shape}")
        h = F.embedding(P["tok"], ids) + P["pos"]
        for i in range(2):
            p = f"layer.{i}."
            hn = F.layer_norm(h)
            q, k, v = (F.linear(hn, P[p + n + ".w"], P[p + n + ".b"]) for n in ("q", "k", "v"))
            a, _ = mmdit.joint_attention(q, k, v, self.n_heads)
            h = h + F.linear(a, P[p + "o.w"], P[p + "o.b"])
            hn = F.layer_norm(h)
            h = h + F.linear(F.gelu(F.linear(hn, P[p + "mlp0.w"], P[p + "mlp0.b"])), P[p + "mlp1.w"], P[p + "mlp1.b"])
        h = F.layer_norm(h)
        if adapt and "adapter.0.w" in P:
            h = F.linear(F.gelu(F.linear(h, P["adapter.0.w"], P["adapter.0.b"])), P["adapter.1.w"], P["adapter.1.b"])
        return h


def make_text_encoder(vocab: int, d_enc: int, txt_len: int, rng: Rng, out_dim: int | None = None, n_heads: int = 2) -> ToyTextEncoder:
    if d_enc % n_heads:
        raise ValueError("d_enc must be divisible by n_heads")
    p: dict[str, np.ndarray] = {"tok": rng.normal((vocab, d_enc)), "pos": rng.normal((txt_len, d_enc), std=0.5)}
    for i in range(2):
        pre = f"layer.{i}."
        for n in ("q", "k", "v", "o"):
            p[pre + n + ".w"] = rng.normal((d_enc, d_enc), std=1 / math.sqrt(d_enc))
            p[pre + n + ".b"] = np.zeros(d_enc)
        p[pre + "mlp0.w"] = rng.normal((d_enc, 2 * d_enc), std=1 / math.sqrt(d_enc))
        p[pre + "mlp0.b"] = np.zeros(2 * d_enc)
        p[pre + "mlp1.w"] = rng.normal((2 * d_enc, d_enc), std=1 / math.sqrt(2 * d_enc))
        p[pre + "mlp1.b"] = np.zeros(d_enc)
    if out_dim is not None:
        p["adapter.0.w"] = rng.normal((d_enc, out_dim), std=1 / math.sqrt(d_enc))
        p["adapter.0.b"] = np.zeros(out_dim)
        p["adapter.1.w"] = rng.normal((out_dim, out_dim), std=1 / math.sqrt(out_dim))
        p["adapter.1.b"] = np.zeros(out_dim)
    return ToyTextEncoder(vocab, d_enc, txt_len, p, n_heads, out_dim)


def teacher_encoder(spec: SynthSpec, seed: int, d_enc: int = 32) -> ToyTextEncoder:
    enc = make_text_encoder(spec.vocab_size, d_enc, spec.txt_len, Rng(seed).spawn("teacher-enc"))
    enc.frozen = True
    return enc


def student_encoder(spec: SynthSpec, seed: int, d_enc: int = 16, out_dim: int = 32) -> ToyTextEncoder:
    return make_text_encoder(spec.vocab_size, d_enc, spec.txt_len, Rng(seed).spawn("student-enc"), out_dim=out_dim)


@dataclass
class PooledEncoder:
    """Frozen bag-of-words stand-in for the pooled prompt vector."""

    table: np.ndarray

    def encode(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        mask = (ids != PAD).astype(np.float64)
        emb = self.table[ids] * mask[..., None]
        return emb.sum(axis=-2) / np.maximum(mask.sum(axis=-1, keepdims=True), 1.0)


def pooled_encoder(spec: SynthSpec, seed: int, dim: int = 16, spread: float = 0.05) -> PooledEncoder:
    """Rows share one base vector; ``spread`` sets how much individual words move the pool."""
    r = Rng(seed).spawn("pooled-enc")
    base = r.normal((dim,))
    return PooledEncoder(base[None, :] + spread * r.normal((spec.vocab_size, dim)))


@dataclass
class Conditioning:
    """Precomputed prompt embeddings for every caption variant of a dataset."""

    prompt_emb: np.ndarray
    pooled: np.ndarray

    def pick(self, idx: np.ndarray, variant: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.prompt_emb[idx, variant], self.pooled[idx, variant]


def encode_dataset(data: Dataset, enc: ToyTextEncoder, pooled_enc: PooledEncoder) -> Conditioning:
    n, v, L = data.captions.shape
    flat = data.captions.reshape(n * v, L)
    with no_grad():
        emb = enc.encode(flat).data
    return Conditioning(emb.reshape(n, v, L, -1), pooled_enc.encode(flat).reshape(n, v, -1))


# -- training and evaluation ------------------------------------------------------------


@dataclass
class TrainRecipe:
    steps: int = 1000
    batch: int = 16
    lr: float = 1e-3
    warmup: int = 50
    cosine: bool = True
    grad_clip: float = 1.0  # zero or below disables clipping
    log_every: int = 50


def _adam(recipe: TrainRecipe) -> Adam:
    clip = recipe.grad_clip if recipe.grad_clip > 0 else None
    return Adam(lr=recipe.lr, grad_clip=clip, warmup_steps=recipe.warmup, cosine_steps=recipe.steps if recipe.cosine else 0)


def train_loop(params: dict[str, np.ndarray], names: list[str], loss_fn: Callable, recipe: TrainRecipe, rng: Rng, context: str) -> list[float]:
    """Generic Adam loop; ``loss_fn(P, rng)`` returns a scalar tensor.

    Only ``names`` get gradients. Returns the mean loss of each logging window.
    """
    opt = _adam(recipe)
    curve: list[float] = []
    window: list[float] = []
    names = sorted(names)
    for step in range(recipe.steps):
        P = {k: Tensor(v, requires_grad=k in names) for k, v in params.items()}
        try:
            loss = loss_fn(P, rng)
        except FloatingPointError as exc:
            raise DivergenceError(context, step, str(exc)) from exc
        val = loss.item()
        if not math.isfinite(val):
            raise DivergenceError(context, step, "loss is not finite")
        loss.backward()
        grads = {k: P[k].grad if P[k].grad is not None else np.zeros_like(params[k]) for k in names}
        opt.step(params, grads)
        window.append(val)
        if len(window) == recipe.log_every or step == recipe.steps - 1:
            curve.append(float(np.mean(window)))
            window = []
    return curve


class DivergenceError(RuntimeError):
    def __init__(self, context: str, step: int, detail: str):
        super().__init__(f"{context}: training diverged at step {step} ({detail})")
        self.context = context
        self.step = step


def train_teacher(model: mmdit.MMDiT, data: Dataset, cond: Conditioning, recipe: TrainRecipe, rng: Rng) -> list[float]:
    """Flow-matching training of every weight in ``model`` (in place)."""

    def loss_fn(P, r):
        idx = r.integers(len(data), (recipe.batch,))
        var = r.integers(cond.prompt_emb.shape[1], (recipe.batch,))
        txt, pooled = cond.pick(idx, var)
        batch = sample_batch(data.latents[idx], r)
        return fm_loss(model, batch, txt, pooled, P)

    return train_loop(model.params, list(model.params), loss_fn, recipe, rng, "train-teacher")


@dataclass
class EvalSet:
    """Held-out prompts with fixed conditioning and noise."""

    prompt_emb: np.ndarray
    pooled: np.ndarray
    factors: np.ndarray
    noise: np.ndarray
    captions: np.ndarray | None = None

    def __len__(self) -> int:
        return self.factors.shape[0]


def make_eval_set(data: Dataset, cond: Conditioning, rng: Rng, variant: int = 0) -> EvalSet:
    n = len(data)
    if n == 0:
        raise ValueError("empty validation set")
    var = np.full(n, variant)
    txt, pooled = cond.pick(np.arange(n), var)
    return EvalSet(txt, pooled, data.factors, rng.normal(data.latents.shape), data.captions[:, variant])


def sample_accuracy(model, spec: SynthSpec, schedule: Schedule, ev: EvalSet, prompt_emb=None, pooled=None) -> float:
    txt = ev.prompt_emb if prompt_emb is None else prompt_emb
    pl = ev.pooled if pooled is None else pooled
    res = euler_sample(model, schedule, txt, pl, x_init=ev.noise)
    return factor_accuracy(spec, res.x0, ev.factors)


def select_steps(model, candidate_Ns: list[int], val_set: EvalSet, spec: SynthSpec) -> tuple[int, dict[int, float]]:
    """Pick the step count with the lowest factor-classification error; ties go to smaller N."""
    if not candidate_Ns:
        raise ValueError("no candidate step counts")
    if len(val_set) == 0:
        raise ValueError("empty validation set")
    errors = {int(n): 1.0 - sample_accuracy(model, spec, Schedule(int(n)), val_set) for n in candidate_Ns}
    best = min(errors, key=lambda n: (errors[n], n))
    return best, errors
