"""Command line entry point.

Every command reads an experiment TOML file (``--config``) with optional
``--set key=value`` overrides and writes into the configured output
directory, which is resolved against ``$ALICFM_OUTPUT_ROOT`` when relative.

Exit codes: 0 success, 2 configuration error, 3 numerical divergence,
4 file or I/O error.
"""

from __future__ import annotations

import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import click
import numpy as np

from .ali import AliTrainer, load_generator
from .cfm import CfmTrainer, held_out_emd, load_field, make_targets, read_trajectories_csv, rollout_at_times
from .config import ConfigError, ExperimentConfig, load_config, save_config
from .data import EmdTable, MarginalDataset, NormRecord, emd, normalise, read_dataset_csv, write_dataset_csv

log = logging.getLogger("alicfm")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4


class Diverged(Exception):
    """Raised when outputs were written but some trajectories blew up."""


@dataclass
class Workspace:
    cfg: ExperimentConfig
    out: Path

    # file layout inside the output directory
    @property
    def data_csv(self) -> Path:
        return self.out / "data.csv"

    @property
    def ali_ckpt(self) -> Path:
        return self.out / "ali.ckpt"

    def cfm_ckpt(self) -> Path:
        return self.out / f"cfm_{self.cfg.interpolant}.ckpt"

    def traj_csv(self) -> Path:
        return self.out / f"trajectories_{self.cfg.interpolant}.csv"

    def emd_csv(self) -> Path:
        return self.out / f"emd_{self.cfg.interpolant}.csv"

    def figure(self) -> Path:
        return self.out / f"knot_{self.cfg.interpolant}.svg"

    # datasets
    def raw_data(self) -> MarginalDataset:
        if self.data_csv.is_file():
            return read_dataset_csv(self.data_csv)
        return self.cfg.build_dataset()

    def model_data(self) -> tuple[MarginalDataset, NormRecord | None]:
        """Training data: optionally normalised, minus the held-out marginal."""
        ds = self.raw_data()
        norm = None
        if self.cfg.data.normalise:
            ds, norm = normalise(ds)
        k = self.cfg.data.hold_out
        if k >= 0:
            if not 0 < k < ds.K - 1:
                raise ConfigError(f"data.hold_out={k} must index an interior marginal (1..{ds.K - 2})")
            ds = ds.without(k)
        return ds, norm

    def reference(self) -> MarginalDataset:
        if self.cfg.eval.reference == "fresh":
            return self.cfg.build_dataset(seed_offset=1)
        return self.raw_data()


def _workspace(config: str, overrides, out: str | None) -> Workspace:
    cfg = load_config(config, overrides)
    if out is not None:
        cfg.output_dir = out
    ws = Workspace(cfg, cfg.output_path())
    ws.out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, ws.out / "config.toml")
    return ws


# ---------------------------------------------------------------------------
# command bodies (plain functions so they can be chained by run-all)


def do_gen_data(ws: Workspace) -> Path:
    ds = ws.cfg.build_dataset()
    path = write_dataset_csv(ds, ws.data_csv)
    log.info("wrote %d marginals (%d rows) to %s", ds.K, sum(len(b) for b in ds.batches), path)
    return path


def do_train_ali(ws: Workspace, resume: bool = False, progress_every: int = 0) -> Path:
    data, _ = ws.model_data()
    if resume:
        tr = AliTrainer.resume(ws.ali_ckpt, data, ws.cfg.ali_config(data))
    else:
        tr = AliTrainer(data, ws.cfg.ali_config(data))
    tr.fit(log_path=ws.out / "ali_log.csv", checkpoint_path=ws.ali_ckpt, progress_every=progress_every)
    log.info("ALI training finished after %d iterations; checkpoint %s", tr.iteration, ws.ali_ckpt)
    return ws.ali_ckpt


def do_train_cfm(ws: Workspace, resume: bool = False, progress_every: int = 0) -> Path:
    data, _ = ws.model_data()
    gen = None
    if ws.cfg.interpolant == "ali":
        if not ws.ali_ckpt.is_file():
            raise FileNotFoundError(f"{ws.ali_ckpt} not found; run train-ali first")
        gen = load_generator(ws.ali_ckpt)
    source = make_targets(ws.cfg.interpolant, data, ws.cfg.coupling, gen=gen, chain_refresh=ws.cfg.ali.chain_refresh)
    if resume:
        tr = CfmTrainer.resume(ws.cfm_ckpt(), source)
    else:
        tr = CfmTrainer(source, data.dim, ws.cfg.cfm_config())
    tr.fit(log_path=ws.out / f"cfm_{ws.cfg.interpolant}_log.csv", checkpoint_path=ws.cfm_ckpt(),
           progress_every=progress_every)
    log.info("CFM training finished after %d iterations; checkpoint %s", tr.iteration, ws.cfm_ckpt())
    return ws.cfm_ckpt()


def do_rollout_eval(ws: Workspace) -> EmdTable:
    """Roll the trained field out from the first marginal and score it."""
    if not ws.cfm_ckpt().is_file():
        raise FileNotFoundError(f"{ws.cfm_ckpt()} not found; run train-cfm first")
    field = load_field(ws.cfm_ckpt())
    data, norm = ws.model_data()
    reference = ws.reference()
    cost = ws.cfg.eval.cost
    k_out = ws.cfg.data.hold_out
    if ws.cfg.eval.protocol == "held_out":
        if k_out < 0:
            raise ConfigError("the held_out protocol needs data.hold_out")
        full = normalise(ws.raw_data())[0] if norm is not None else ws.raw_data()
        pushed = _push_previous(field, full, k_out, ws)
        pushed = norm.invert(pushed) if norm is not None else pushed
        table = EmdTable(np.array([reference.times[k_out]]), np.array([emd(pushed, reference.batches[k_out], cost)]),
                         cost)
        divergent = not np.all(np.isfinite(pushed))
    else:
        traj = rollout_at_times(field, data.batches[0], reference.times, ws.cfg.rollout_config())
        if norm is not None:
            traj.states = norm.invert(traj.states)
        traj.write_csv(ws.traj_csv())
        ks = range(1, reference.K - 1) if ws.cfg.eval.skip_ends else range(reference.K)
        alive = ~traj.divergent
        values = [emd(traj.states[k][alive], reference.batches[k], cost) if alive.any() else np.inf for k in ks]
        table = EmdTable(np.array([reference.times[k] for k in ks]), np.array(values), cost)
        divergent = bool(traj.divergent.any())
    table.write_csv(ws.emd_csv())
    log.info("mean EMD (%s) over %d times: %.6g", cost, len(table.values), table.mean)
    if divergent:
        raise Diverged(f"divergent trajectories in {ws.traj_csv().name}")
    return table


def _push_previous(field, full: MarginalDataset, k: int, ws: Workspace) -> np.ndarray:
    r = ws.cfg.rollout_config()
    traj = rollout_at_times(field, full.batches[k - 1], [full.times[k - 1], full.times[k]], r)
    return traj.final


def do_plot(trajectories: Path | None, data_csv: Path, out: Path, title: str = "") -> Path:
    from .plot import plot_knot

    data = read_dataset_csv(data_csv)
    traj = read_trajectories_csv(trajectories) if trajectories is not None else None
    return plot_knot(data, traj, out, title=title)


# ---------------------------------------------------------------------------
# click wiring


def _common(f):
    f = click.option("--out", "out", default=None, help="Output directory (overrides output_dir).")(f)
    f = click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                     help="Override a config entry, e.g. --set ali.iterations=500.")(f)
    f = click.option("-c", "--config", "config", required=True, type=click.Path(dir_okay=False),
                     help="Experiment TOML file.")(f)
    return f


def _run(body):
    """Run ``body`` and translate failures into exit codes."""
    try:
        body()
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except (Diverged, FloatingPointError) as exc:
        click.echo(f"diverged: {exc}", err=True)
        sys.exit(EXIT_DIVERGED)
    except OSError as exc:
        click.echo(f"I/O error: {exc}", err=True)
        sys.exit(EXIT_IO)
    except ValueError as exc:
        click.echo(f"invalid input: {exc}", err=True)
        sys.exit(EXIT_CONFIG)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose: bool) -> None:
    """Learnt interpolants and flow matching for snapshot trajectory data."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")


@main.command("gen-data")
@_common
def gen_data(config, overrides, out):
    """Write the configured synthetic dataset to data.csv."""
    _run(lambda: do_gen_data(_workspace(config, overrides, out)))


@main.command("train-ali")
@_common
@click.option("--resume", is_flag=True, help="Continue from the checkpoint in the output directory.")
@click.option("--progress-every", default=0, show_default=True)
def train_ali(config, overrides, out, resume, progress_every):
    """Train the learnt interpolant adversarially."""
    _run(lambda: do_train_ali(_workspace(config, overrides, out), resume, progress_every))


@main.command("train-cfm")
@_common
@click.option("--resume", is_flag=True, help="Continue from the checkpoint in the output directory.")
@click.option("--progress-every", default=0, show_default=True)
def train_cfm(config, overrides, out, resume, progress_every):
    """Regress a vector field onto the configured interpolant."""
    _run(lambda: do_train_cfm(_workspace(config, overrides, out), resume, progress_every))


@main.command("rollout-eval")
@_common
def rollout_eval(config, overrides, out):
    """Integrate the trained field and write trajectories and the EMD table."""

    def body():
        table = do_rollout_eval(_workspace(config, overrides, out))
        click.echo(f"mean_emd_{table.cost} {table.mean:.6g}")

    _run(body)


@main.command("plot")
@click.option("--data", "data_csv", required=True, type=click.Path(dir_okay=False), help="Dataset CSV.")
@click.option("--trajectories", default=None, type=click.Path(dir_okay=False), help="Trajectory CSV.")
@click.option("-o", "--output", "output", required=True, type=click.Path(dir_okay=False), help="SVG path.")
@click.option("--title", default="")
def plot(data_csv, trajectories, output, title):
    """Draw 2D marginals coloured by time with trajectories on top."""
    _run(lambda: do_plot(Path(trajectories) if trajectories else None, Path(data_csv), Path(output), title))


@main.command("run-all")
@_common
@click.option("--progress-every", default=0, show_default=True)
def run_all(config, overrides, out, progress_every):
    """gen-data, train-ali (for the learnt interpolant), train-cfm, rollout-eval, plot."""

    def body():
        ws = _workspace(config, overrides, out)
        do_gen_data(ws)
        if ws.cfg.interpolant == "ali":
            do_train_ali(ws, progress_every=progress_every)
        do_train_cfm(ws, progress_every=progress_every)
        try:
            table = do_rollout_eval(ws)
        finally:
            if ws.cfg.eval.protocol == "trajectory" and ws.traj_csv().is_file() and ws.raw_data().dim == 2:
                do_plot(ws.traj_csv(), ws.data_csv, ws.figure(), title=f"{ws.cfg.coupling}-{ws.cfg.interpolant}")
        click.echo(f"mean_emd_{table.cost} {table.mean:.6g}")

    _run(body)


if __name__ == "__main__":
    main()
