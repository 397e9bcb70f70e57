"""Diagnostics that decide what to compress: feature SVD, block similarity, AdaLN statistics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import flow, mmdit
from .numkit import Tensor, low_rank_reconstruct, no_grad, svd


@dataclass
class ProbeSet:
    """Clean latents, noise and conditioning used to probe a frozen model.

    ``t`` is used where a single noise level is needed (the SVD probe);
    the other diagnostics sweep the sampler grid instead.
    """

    x0: np.ndarray
    eps: np.ndarray
    prompt_emb: np.ndarray
    pooled: np.ndarray
    t: np.ndarray

    def __len__(self) -> int:
        return self.x0.shape[0]

    def at(self, t) -> np.ndarray:
        return flow.interpolate(self.x0, self.eps, np.broadcast_to(t, (len(self),)))


def make_probe_set(data: flow.Dataset, cond: flow.Conditioning, rng, n: int | None = None) -> ProbeSet:
    n = len(data) if n is None else min(n, len(data))
    if n < 1:
        raise ValueError("probe set must be non-empty")
    idx = np.arange(n)
    txt, pooled = cond.pick(idx, np.zeros(n, dtype=np.int64))
    return ProbeSet(data.latents[idx], rng.normal(data.latents[idx].shape), txt, pooled, rng.uniform((n,)))


# -- SVD redundancy ---------------------------------------------------------------


@dataclass
class SvdReport:
    """Spectra and rank-r reconstruction errors per block.

    ``spectra[(site, mode)]`` is the sample-mean singular value vector;
    ``proxy[(site, mode)][r]`` the velocity MSE after truncating that
    block's features to rank ``r``. ``feature[(site, mode)][r]`` is the
    relative squared Frobenius error of the truncated features themselves,
    which unlike the velocity proxy cannot grow with ``r``.
    ``site`` is ``"ds.i"`` or ``"ss.i"``.
    """

    ranks: list[int]
    spectra: dict = field(default_factory=dict)
    proxy: dict = field(default_factory=dict)
    feature: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def table(d):
            return {f"{s}/{m}": {str(r): e for r, e in v.items()} for (s, m), v in d.items()}

        return {
            "ranks": list(self.ranks),
            "spectra": {f"{s}/{m}": v.tolist() for (s, m), v in self.spectra.items()},
            "proxy": table(self.proxy),
            "feature": table(self.feature),
        }


def _joint_matrix(heads: np.ndarray) -> np.ndarray:
    """``[H, N, d_H]`` to the token-by-channel matrix ``[N, H*d_H]``."""
    h, n, dh = heads.shape
    return heads.transpose(1, 0, 2).reshape(n, h * dh)


def truncate_features(heads: np.ndarray, mode: str, r: int) -> np.ndarray:
    """Rank-``r`` reconstruction of per-head features ``[B, H, N, d_H]``."""
    out = np.empty_like(heads)
    b, h, n, dh = heads.shape
    for s in range(b):
        if mode == "joint":
            rec = low_rank_reconstruct(_joint_matrix(heads[s]), r)
            out[s] = rec.reshape(n, h, dh).transpose(1, 0, 2)
        elif mode == "per-head":
            for k in range(h):
                out[s, k] = low_rank_reconstruct(heads[s, k], r)
        else:
            raise ValueError(f"unknown SVD mode {mode!r}")
    return out


def _max_rank(cfg: mmdit.ModelConfig, n_tokens: int, mode: str) -> int:
    cols = cfg.d if mode == "joint" else cfg.d_H
    return min(n_tokens, cols)


def svd_redundancy(model: mmdit.MMDiT, probe: ProbeSet, ranks: list[int], modes=("joint", "per-head"), sites=None) -> SvdReport:
    """Spectra of the attention features and the velocity cost of truncating them."""
    if len(probe) == 0:
        raise ValueError("probe set must be non-empty")
    cfg = model.config
    n_tokens = probe.prompt_emb.shape[1] + cfg.T
    for mode in modes:
        top = _max_rank(cfg, n_tokens, mode)
        bad = [r for r in ranks if r < 1 or r > top]
        if bad:
            raise ValueError(f"ranks {bad} outside [1, {top}] for mode {mode}")
    x_t = probe.at(probe.t) if probe.t.ndim else probe.at(float(probe.t))
    with no_grad():
        base, trace = mmdit.forward(model, x_t, probe.t, probe.prompt_emb, probe.pooled)
    wanted = sites if sites is not None else [f"{k}.{i}" for k, i in model.block_sites()]
    rep = SvdReport(list(ranks))
    for rec in trace:
        site = f"{rec.kind}.{rec.index}"
        if site not in wanted:
            continue
        heads = rec.heads.data
        for mode in modes:
            spec = []
            for s in range(heads.shape[0]):
                if mode == "joint":
                    spec.append(svd(_joint_matrix(heads[s]))[1])
                else:
                    spec.append(np.concatenate([svd(heads[s, k])[1] for k in range(heads.shape[1])]))
            rep.spectra[(site, mode)] = np.mean(spec, axis=0)
            errs, ferrs = {}, {}
            energy = float(np.sum(heads**2))
            for r in ranks:
                repl = truncate_features(heads, mode, r)
                ferrs[int(r)] = float(np.sum((repl - heads) ** 2)) / energy if energy > 0 else 0.0

                def hook(kind, idx, h, site=site, repl=repl):
                    return Tensor(repl) if f"{kind}.{idx}" == site else h

                with no_grad():
                    v, _ = mmdit.forward(model, x_t, probe.t, probe.prompt_emb, probe.pooled, hook=hook)
                errs[int(r)] = float(np.mean((v.data - base.data) ** 2))
            rep.proxy[(site, mode)] = errs
            rep.feature[(site, mode)] = ferrs
    return rep


# -- block similarity ---------------------------------------------------------------


@dataclass
class SimilarityProfile:
    """Mean input/output cosine similarity per block and stream, in execution order."""

    sites: list[str]
    img: np.ndarray
    txt: np.ndarray

    def ss_entries(self) -> list[tuple[int, float, float]]:
        out = []
        for s, a, b in zip(self.sites, self.img, self.txt):
            if s.startswith("ss."):
                out.append((int(s.split(".")[1]), float(a), float(b)))
        return out

    def to_dict(self) -> dict:
        return {"sites": list(self.sites), "img": self.img.tolist(), "txt": self.txt.tolist()}


def cosine_tokens(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cosine similarity along the channel axis, one value per token."""
    num = np.sum(a * b, axis=-1)
    den = np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1)
    return np.clip(num / np.maximum(den, 1e-300), -1.0, 1.0)


def similarity_from_traces(traces: list) -> SimilarityProfile:
    sites = [f"{r.kind}.{r.index}" for r in traces[0]]
    img = np.zeros(len(sites))
    txt = np.zeros(len(sites))
    for trace in traces:
        for k, rec in enumerate(trace):
            img[k] += cosine_tokens(rec.img_in.data, rec.img_out.data).mean()
            txt[k] += cosine_tokens(rec.txt_in.data, rec.txt_out.data).mean()
    return SimilarityProfile(sites, img / len(traces), txt / len(traces))


def block_similarity(model: mmdit.MMDiT, probe: ProbeSet, schedule: flow.Schedule) -> SimilarityProfile:
    """Cosine similarity averaged over tokens, probe samples and the sampler's timesteps."""
    if len(probe) == 0:
        raise ValueError("probe set must be non-empty")
    traces = []
    with no_grad():
        for t in schedule.sampler_ts:
            _, tr = mmdit.forward(model, probe.at(t), t, probe.prompt_emb, probe.pooled)
            traces.append(tr)
    return similarity_from_traces(traces)


def select_merge_chain(profile: SimilarityProfile, threshold_img: float, threshold_txt: float, max_chain: int | None = None) -> range:
    """Longest contiguous run of SS blocks above both thresholds.

    Returns SS block indices; ties go to the deeper run and an empty range
    means nothing qualifies. With ``max_chain`` a longer run is narrowed to
    its most similar window of that length (scored by the weaker stream).
    """
    if max_chain is not None and max_chain < 2:
        raise ValueError("max_chain must be at least 2")
    for thr in (threshold_img, threshold_txt):
        if not 0.0 < thr <= 1.0:
            raise ValueError("thresholds must lie in (0, 1]")
    best = range(0)
    start = None
    prev = None
    entries = profile.ss_entries()
    for pos, (idx, a, b) in enumerate(entries):
        ok = a > threshold_img and b > threshold_txt
        if ok and (start is None or prev != idx - 1):
            start = idx
        if not ok:
            start = None
        if start is not None:
            run = range(start, idx + 1)
            if len(run) >= len(best):
                best = run
        prev = idx
    if max_chain is None or len(best) <= max_chain:
        return best
    score = {idx: min(a, b) for idx, a, b in entries}
    window = best[:max_chain]
    top = -np.inf
    for s0 in range(best.start, best.stop - max_chain + 1):
        val = sum(score[i] for i in range(s0, s0 + max_chain))
        if val >= top:
            top, window = val, range(s0, s0 + max_chain)
    return window


# -- AdaLN statistics ----------------------------------------------------------------


@dataclass
class AdaLnStats:
    """Per-site coefficient means ``[n_t, n_coeff, d]`` and variance/norm ratios ``[n_t, n_coeff]``."""

    timesteps: np.ndarray
    mean: dict = field(default_factory=dict)
    ratio: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "timesteps": self.timesteps.tolist(),
            "ratio": {k: v.tolist() for k, v in self.ratio.items()},
            "max_ratio": {k: float(v.max()) for k, v in self.ratio.items()},
        }


def stable_mean(x: np.ndarray, axis: int = 0) -> np.ndarray:
    """Mean computed as ``first + mean(x - first)``, exact when all rows agree."""
    first = np.take(x, [0], axis=axis)
    return np.squeeze(first, axis) + np.mean(x - first, axis=axis)


def coeff_moments(coeffs: np.ndarray, n_coeff: int) -> tuple[np.ndarray, np.ndarray]:
    """Mean vector and variance/norm ratio of ``[n, n_coeff*d]`` coefficient rows."""
    n, width = coeffs.shape
    c = coeffs.reshape(n, n_coeff, width // n_coeff)
    mu = stable_mean(c, axis=0)
    var = np.sum(np.mean((c - mu) ** 2, axis=0), axis=-1)
    norm2 = np.sum(mu * mu, axis=-1)
    ratio = np.where(var == 0.0, 0.0, var / np.maximum(norm2, 1e-300))
    return mu, ratio


def adaln_stats(model: mmdit.MMDiT, pooled: np.ndarray, schedule: flow.Schedule) -> AdaLnStats:
    """Coefficient statistics over a calibration set of pooled prompt vectors, per sampler timestep."""
    pooled = np.asarray(pooled, dtype=np.float64)
    if pooled.ndim != 2 or pooled.shape[0] < 1:
        raise ValueError("calibration set needs at least one pooled vector")
    ts = np.sort(schedule.sampler_ts)
    stats = AdaLnStats(ts)
    per_t = [mmdit.dynamic_coeffs(model, np.full(pooled.shape[0], t), pooled) for t in ts]
    for site in mmdit.modulation_sites(model.config):
        k = mmdit.site_coeff_count(site)
        moms = [coeff_moments(c[site], k) for c in per_t]
        stats.mean[site] = np.stack([m for m, _ in moms])
        stats.ratio[site] = np.stack([r for _, r in moms])
    return stats
