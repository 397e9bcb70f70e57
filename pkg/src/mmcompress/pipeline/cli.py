"""``mmcompress`` command line.

One run directory per stage under the run root (``--root``, else
``$MMCOMPRESS_RUN_ROOT``, else ``runs/<run.name>``). Inputs default to the
previous stage's directory, so the whole pipeline is::

    mmcompress --config t1 gen-data
    mmcompress --config t1 train-teacher
    mmcompress --config t1 compress c1   # then c2, c3, c4
    mmcompress --config t1 ptd train
    mmcompress --config t1 textdistill
    mmcompress --config t1 report
"""

from __future__ import annotations

import json
import logging
import os
import sys
from pathlib import Path

import click

from .. import flow
from ..numkit import NonFiniteError
from . import checkpoint as ck
from . import config as cf
from . import report as rp
from . import stages as st

ROOT_ENV = "MMCOMPRESS_RUN_ROOT"

# exit codes for structured failures
EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_DIVERGED = 4
EXIT_CHECKPOINT = 5

_PREV = {"C1": "teacher", "C2": "C1", "C3": "C2", "C4": "C3"}


def _fail(kind: str, message: str, code: int):
    click.echo(json.dumps({"error": kind, "message": message}), err=True)
    sys.exit(code)


class State:
    def __init__(self, cfg: cf.RunConfig, root: Path):
        self.cfg = cfg
        self.root = root

    def dir(self, name: str) -> Path:
        return self.root / name

    def model(self, name: str) -> Path:
        return self.dir(name) / st.MODEL_FILE

    @property
    def data(self) -> Path:
        return self.dir("data") / st.DATA_FILE


def _require(path: Path, what: str) -> Path:
    if not Path(path).exists():
        _fail("MissingInput", f"{what} not found: {path}", EXIT_INPUT)
    return Path(path)


def _guard_out(out: Path, force: bool) -> Path:
    if (out / st.REPORT_FILE).exists() and not force:
        _fail("OutputExists", f"{out} already holds a finished run; pass --force to replace it", EXIT_INPUT)
    return out


class _Group(click.Group):
    """Maps library exceptions onto structured errors and exit codes."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except cf.ConfigError as exc:
            _fail("ConfigError", str(exc), EXIT_CONFIG)
        except ck.CheckpointError as exc:
            _fail(type(exc).__name__, str(exc), EXIT_CHECKPOINT)
        except (flow.DivergenceError, NonFiniteError) as exc:
            _fail("DivergenceError", str(exc), EXIT_DIVERGED)
        except (st.StageError, ValueError) as exc:
            _fail(type(exc).__name__, str(exc), EXIT_INPUT)


@click.group(cls=_Group)
@click.option("--config", "config_path", default="t1", show_default=True, help="Config file or shipped config name.")
@click.option("--seed", type=int, default=None, help="Override run.seed.")
@click.option("--root", type=click.Path(path_type=Path), default=None, help=f"Run root (default ${ROOT_ENV} or runs/<name>).")
@click.option("-v", "--verbose", is_flag=True)
@click.pass_context
def main(ctx, config_path, seed, root, verbose):
    """Progressive compression of a toy multimodal diffusion transformer."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = cf.load(config_path).with_seed(seed)
    except cf.ConfigError as exc:
        _fail("ConfigError", str(exc), EXIT_CONFIG)
    root = root or Path(os.environ.get(ROOT_ENV) or Path("runs") / cfg.run.name)
    ctx.obj = State(cfg, Path(root))


_in = click.option("--in", "in_path", type=click.Path(path_type=Path), default=None, help="Input checkpoint.")
_out = click.option("--out", type=click.Path(path_type=Path), default=None, help="Output run directory.")
_report = click.option("--report", "report_path", type=click.Path(path_type=Path), default=None, help="Extra copy of the JSON report.")
_data = click.option("--data", "data_path", type=click.Path(path_type=Path), default=None, help="Dataset checkpoint.")
_teacher = click.option("--teacher", "teacher_path", type=click.Path(path_type=Path), default=None, help="Root teacher checkpoint.")
_force = click.option("--force", is_flag=True, help="Replace an existing run directory.")


def _finish(run: dict, report_path) -> None:
    if report_path is not None:
        rp.emit_report(run, report_path)
    click.echo(f"{run['command']}: ok")


@main.command("gen-data")
@_out
@_report
@_force
@click.pass_obj
def gen_data(s: State, out, report_path, force):
    """Render the synthetic latent dataset and freeze the text encoders."""
    out = _guard_out(out or s.dir("data"), force)
    _finish(st.gen_data(s.cfg, out), report_path)


@main.command("train-teacher")
@_data
@_out
@_report
@_force
@click.pass_obj
def train_teacher(s: State, data_path, out, report_path, force):
    """Flow-matching training of the full-size model."""
    data = _require(data_path or s.data, "dataset")
    out = _guard_out(out or s.dir("teacher"), force)
    _finish(st.train_teacher(s.cfg, data, out), report_path)


@main.group()
def analyze():
    """Redundancy diagnostics on a trained model."""


_ANALYZE_HELP = {
    "svd": "Head-feature SVD spectra and low-rank velocity error.",
    "blocks": "Block input/output similarity and merge chain.",
    "adaln": "AdaLN coefficient variance across prompts.",
}


def _analyze_cmd(what: str, default_in: str):
    @analyze.command(what, help=_ANALYZE_HELP[what])
    @_in
    @_data
    @_out
    @_report
    @click.pass_obj
    def cmd(s: State, in_path, data_path, out, report_path):
        src = _require(in_path or s.model(default_in), "input model")
        run = st.analyze(s.cfg, what, src, _require(data_path or s.data, "dataset"), out or s.dir(f"analyze-{what}"))
        _finish(run, report_path)

    return cmd


for _what, _src in (("svd", "C1"), ("blocks", "C2"), ("adaln", "C3")):
    _analyze_cmd(_what, _src)


@main.command("compress")
@click.argument("stage", type=click.Choice(["c1", "c2", "c3", "c4"], case_sensitive=False))
@_in
@_data
@_teacher
@_out
@_report
@_force
@click.pass_obj
def compress_cmd(s: State, stage, in_path, data_path, teacher_path, out, report_path, force):
    """Run one compression stage (head pruning, head dim, depth, Static-LN)."""
    stage = stage.upper()
    src = _require(in_path or s.model(_PREV[stage]), "input model")
    out = _guard_out(out or s.dir(stage), force)
    run = st.compress_stage(s.cfg, stage, src, _require(data_path or s.data, "dataset"), _require(teacher_path or s.model("teacher"), "teacher"), out)
    _finish(run, report_path)


@main.group("ptd")
def ptd_group():
    """Progressive token downsampling."""


@ptd_group.command("train")
@_in
@_data
@_teacher
@_out
@_report
@_force
@click.pass_obj
def ptd_train(s: State, in_path, data_path, teacher_path, out, report_path, force):
    """Attach down/up modules and train them deepest block first."""
    src = _require(in_path or s.model("C4"), "input model")
    out = _guard_out(out or s.dir("PTD"), force)
    run = st.ptd_train(s.cfg, src, _require(data_path or s.data, "dataset"), _require(teacher_path or s.model("teacher"), "teacher"), out)
    _finish(run, report_path)


@ptd_group.command("eval")
@_in
@_data
@_teacher
@_out
@_report
@click.pass_obj
def ptd_eval(s: State, in_path, data_path, teacher_path, out, report_path):
    """Held-out loss, accuracy and routing log of a PTD model."""
    src = _require(in_path or s.model("PTD"), "input model")
    run = st.ptd_eval(s.cfg, src, _require(data_path or s.data, "dataset"), _require(teacher_path or s.model("teacher"), "teacher"), out or s.dir("ptd-eval"))
    _finish(run, report_path)


@main.command("textdistill")
@_in
@_data
@_teacher
@_out
@_report
@_force
@click.option("--transfer", "transfer", multiple=True, type=click.Path(path_type=Path), help="Also evaluate the encoder on this checkpoint (repeatable).")
@click.pass_obj
def textdistill_cmd(s: State, in_path, data_path, teacher_path, out, report_path, force, transfer):
    """Distil the text encoder against the frozen compressed transformer."""
    src = _require(in_path or s.model("PTD"), "input model")
    out = _guard_out(out or s.dir("textdistill"), force)
    others = [_require(p, "transfer model") for p in transfer]
    run = st.textdistill_stage(s.cfg, src, _require(data_path or s.data, "dataset"), _require(teacher_path or s.model("teacher"), "teacher"), out, others)
    _finish(run, report_path)


@main.command("sample")
@_in
@_data
@click.option("--encoder", "encoder_path", type=click.Path(path_type=Path), default=None, help="Text encoder checkpoint.")
@_out
@_report
@click.pass_obj
def sample_cmd(s: State, in_path, data_path, encoder_path, out, report_path):
    """Sample the validation prompts and score them."""
    src = _require(in_path or s.model("teacher"), "input model")
    run = st.sample(s.cfg, src, _require(data_path or s.data, "dataset"), out or s.dir("samples"), encoder_path)
    click.echo(f"accuracy {run['eval']['accuracy']:.4f}")
    _finish(run, report_path)


@main.command("select-steps")
@_in
@_data
@_out
@_report
@click.pass_obj
def select_steps_cmd(s: State, in_path, data_path, out, report_path):
    """Pick the sampler step count by validation accuracy."""
    src = _require(in_path or s.model("teacher"), "input model")
    run = st.select_steps(s.cfg, src, _require(data_path or s.data, "dataset"), out or s.dir("select-steps"))
    click.echo(f"best N = {run['eval']['N']}")
    _finish(run, report_path)


@main.command("count-params")
@_report
@click.pass_obj
def count_params_cmd(s: State, report_path):
    """Closed-form parameter table for the configured model and variants."""
    run = st.count_params(s.cfg)
    click.echo(rp.format_table(run["table"], ["name", "d", "H", "d_H", "n_ds", "n_ss", "adaln", "ds_block", "ds_bias", "ss_block", "ss_bias", "total"]))
    if report_path is not None:
        rp.emit_report(run, report_path)


@main.command("flops")
@click.option("--variant", default=None, help="Use a named variant from the config instead of [model].")
@_report
@click.pass_obj
def flops_cmd(s: State, variant, report_path):
    """Analytic transformer cost with token downsampling, swept over t_thresh."""
    run = st.flops(s.cfg, variant=variant)
    click.echo(rp.format_table(run["table"]))
    if report_path is not None:
        rp.emit_report(run, report_path)


@main.command("report")
@_report
@click.pass_obj
def report_cmd(s: State, report_path):
    """Summarize every stage under the run root."""
    run = st.aggregate(s.root)
    click.echo(rp.format_table(run["table"]))
    if report_path is not None:
        rp.emit_report(run, report_path)


if __name__ == "__main__":
    main()
