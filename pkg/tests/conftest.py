import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mmcompress import flow, mmdit
from mmcompress.numkit import Rng

settings.register_profile("default", deadline=None, max_examples=25, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

TINY = mmdit.ModelConfig(d=16, H=4, d_H=4, n_ds=2, n_ss=3, ffn_mult=2, img_grid=4, txt_len=4, latent_ch=3, txt_dim=8, t_emb_dim=8, pooled_dim=6)


def randomize(model: mmdit.MMDiT, seed: int = 1, std: float = 0.3) -> mmdit.MMDiT:
    """Give every zero-initialized tensor random values so no path is trivially dead."""
    r = Rng(seed)
    for k, v in model.params.items():
        if not v.any():
            model.params[k] = r.normal(v.shape, std=std)
    return model


def inputs(cfg: mmdit.ModelConfig, b: int = 2, seed: int = 3):
    r = Rng(seed)
    x = r.normal((b, cfg.T, cfg.latent_ch))
    txt = r.normal((b, cfg.txt_len, cfg.txt_dim))
    pooled = r.normal((b, cfg.pooled_dim))
    t = r.uniform((b,))
    return x, t, txt, pooled


def fd_check(loss_of, params: dict, grads: dict, n: int = 20, seed: int = 0, h: float = 1e-5, tol: float = 1e-4) -> float:
    """Central differences on ``n`` random coordinates; returns the worst relative error.

    ``loss_of()`` evaluates the scalar loss from the current contents of
    ``params`` (arrays are perturbed in place and restored).
    """
    r = Rng(seed)
    names = [k for k in sorted(grads) if params[k].size]
    worst = 0.0
    for j in range(n):
        name = names[int(r.integers(len(names)))]
        arr = params[name]
        idx = int(r.integers(arr.size))
        flat = arr.reshape(-1)
        old = flat[idx]
        flat[idx] = old + h
        up = loss_of()
        flat[idx] = old - h
        down = loss_of()
        flat[idx] = old
        num = (up - down) / (2 * h)
        ana = grads[name].reshape(-1)[idx]
        err = abs(num - ana) / max(abs(num), abs(ana), 1e-7)
        worst = max(worst, err)
    assert worst < tol, f"finite-difference mismatch, worst rel err {worst:.3e}"
    return worst


@pytest.fixture
def tiny_model():
    return randomize(mmdit.build_model(TINY, 0))


@pytest.fixture(scope="session")
def tiny_world():
    """A small dataset and encoders sized for TINY."""
    spec = flow.SynthSpec(grid=4, channels=3, txt_len=4)
    rng = Rng(5)
    data = flow.make_dataset(spec, 24, rng.spawn("data"))
    enc = flow.teacher_encoder(spec, 0, d_enc=8)
    pe = flow.pooled_encoder(spec, 0, dim=6)
    cond = flow.encode_dataset(data, enc, pe)
    return spec, data, enc, pe, cond


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
