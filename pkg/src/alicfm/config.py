"""Experiment configuration: a TOML file with one table per stage.

``load_config`` parses a file (plus ``key.path=value`` overrides) into an
:class:`ExperimentConfig`; ``dump_config`` writes it back.  Parsing the dump
gives the same object again.
"""

from __future__ import annotations

import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .ali import GAN_VARIANTS, AliTrainConfig
from .cfm import SOLVERS, CfmTrainConfig, RolloutConfig
from .data import COSTS, KnotSpec, MarginalDataset, gen_gaussian_sequence, gen_knot, gen_loop_translation, read_dataset_csv
from .regularizers import KINDS, NORMS, LandMetricSpec, RegulariserSpec

OUTPUT_ROOT_ENV = "ALICFM_OUTPUT_ROOT"
GENERATORS = ("knot", "gaussian", "loop", "csv")
INTERPOLANTS = ("linear", "piecewise", "spline", "ali")
COUPLINGS = ("independent", "ot")
PROTOCOLS = ("trajectory", "held_out")
REFERENCES = ("data", "fresh")


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass
class DataSection:
    generator: str = "knot"
    path: str = ""
    K: int = 1200
    n: int = 10
    sigma: float = 0.1
    means: list = field(default_factory=lambda: [[-1.0, 0.0], [0.0, 0.5], [1.0, 0.0]])
    seed: int = 0
    normalise: bool = False
    hold_out: int = -1


@dataclass
class AliSection:
    iterations: int = 20_000
    batch_size: int = 128
    lam: float = 1.0
    lr_gen: float = 1e-3
    lr_disc: float = 1e-3
    time_noise: float = 0.0
    pretrain_steps: int = 0
    pretrain_lr: float = 1e-3
    gan_variant: str = "non_saturating"
    hidden: list = field(default_factory=lambda: [128, 128])
    disc_hidden: list = field(default_factory=lambda: [128, 128])
    activation: str = "elu"
    time_embedding: int = 0
    auto_lambda: bool = False
    chain_refresh: int = 1
    divergence_threshold: float = 1e6


@dataclass
class RegulariserSection:
    kind: str = "linear"
    h: float = 1e-3
    mc_samples: int = 3
    norm: str = "euclidean"
    piecewise_form: str = "continuous"
    land_gamma1: float = 0.4
    land_gamma2: float = 0.4
    land_eps: float = 1e-3
    land_cap: int = 2048


@dataclass
class CfmSection:
    iterations: int = 30_000
    batch_size: int = 128
    lr: float = 1e-4
    hidden: list = field(default_factory=lambda: [32, 32])
    activation: str = "elu"
    time_embedding: int = 0


@dataclass
class RolloutSection:
    solver: str = "rk4"
    steps: int = 101
    stride: int = 1


@dataclass
class EvalSection:
    protocol: str = "trajectory"
    reference: str = "data"
    cost: str = "euclidean"
    skip_ends: bool = False


@dataclass
class ExperimentConfig:
    seed: int
    output_dir: str = "run"
    coupling: str = "ot"
    interpolant: str = "ali"
    data: DataSection = field(default_factory=DataSection)
    ali: AliSection = field(default_factory=AliSection)
    regulariser: RegulariserSection = field(default_factory=RegulariserSection)
    cfm: CfmSection = field(default_factory=CfmSection)
    rollout: RolloutSection = field(default_factory=RolloutSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # -- derived objects ---------------------------------------------------

    def output_path(self) -> Path:
        out = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        return out if out.is_absolute() or not root else Path(root) / out

    def regulariser_spec(self, data: MarginalDataset | None = None) -> RegulariserSpec:
        r = self.regulariser
        land = None
        if r.norm == "land":
            if data is None:
                raise ConfigError("the LAND norm needs the training data")
            ts, pts = data.all_points()
            land = LandMetricSpec(pts, ts, r.land_gamma1, r.land_gamma2, r.land_eps, r.land_cap, seed=self.seed)
        return RegulariserSpec(kind=r.kind, lam=self.ali.lam, h=r.h, mc_samples=r.mc_samples, norm=r.norm,
                               land=land, piecewise_form=r.piecewise_form)

    def ali_config(self, data: MarginalDataset | None = None) -> AliTrainConfig:
        a = asdict(self.ali)
        return AliTrainConfig(**a, regulariser=self.regulariser_spec(data), coupling=self.coupling, seed=self.seed)

    def cfm_config(self) -> CfmTrainConfig:
        return CfmTrainConfig(**asdict(self.cfm), seed=self.seed)

    def rollout_config(self) -> RolloutConfig:
        return RolloutConfig(**asdict(self.rollout))

    def build_dataset(self, seed_offset: int = 0) -> MarginalDataset:
        """Dataset described by the data table; ``seed_offset`` redraws the
        samples of a synthetic generator without changing its geometry."""
        d = self.data
        seed = d.seed + seed_offset
        if d.generator == "knot":
            return gen_knot(KnotSpec(K=d.K, n=d.n, sigma=d.sigma, seed=seed))
        if d.generator == "gaussian":
            return gen_gaussian_sequence(d.means, scale=d.sigma, n=d.n, seed=seed)
        if d.generator == "loop":
            return gen_loop_translation(K=d.K, n=d.n, sigma=d.sigma, seed=seed)
        if seed_offset:
            raise ConfigError("fresh reference samples need a synthetic generator")
        return read_dataset_csv(d.path)


SECTIONS = {
    "data": DataSection,
    "ali": AliSection,
    "regulariser": RegulariserSection,
    "cfm": CfmSection,
    "rollout": RolloutSection,
    "eval": EvalSection,
}


def _check_choice(name: str, value, choices) -> None:
    if value not in choices:
        raise ConfigError(f"{name} must be one of {tuple(choices)}, got {value!r}")


def validate(cfg: ExperimentConfig, check_files: bool = True) -> ExperimentConfig:
    _check_choice("coupling", cfg.coupling, COUPLINGS)
    _check_choice("interpolant", cfg.interpolant, INTERPOLANTS)
    _check_choice("data.generator", cfg.data.generator, GENERATORS)
    _check_choice("ali.gan_variant", cfg.ali.gan_variant, GAN_VARIANTS)
    _check_choice("regulariser.kind", cfg.regulariser.kind, KINDS)
    _check_choice("regulariser.norm", cfg.regulariser.norm, NORMS)
    _check_choice("rollout.solver", cfg.rollout.solver, SOLVERS)
    _check_choice("eval.protocol", cfg.eval.protocol, PROTOCOLS)
    _check_choice("eval.reference", cfg.eval.reference, REFERENCES)
    _check_choice("eval.cost", cfg.eval.cost, COSTS)
    if not isinstance(cfg.seed, int) or isinstance(cfg.seed, bool):
        raise ConfigError("seed must be an integer")
    if cfg.data.generator == "csv":
        if not cfg.data.path:
            raise ConfigError("data.path is required for the csv generator")
        if check_files and not Path(cfg.data.path).is_file():
            raise ConfigError(f"data file {cfg.data.path} does not exist")
    try:
        if cfg.data.generator == "knot":
            KnotSpec(K=cfg.data.K, n=cfg.data.n, sigma=cfg.data.sigma, seed=cfg.data.seed)
        AliTrainConfig(**asdict(cfg.ali), coupling=cfg.coupling, seed=cfg.seed)
        if cfg.regulariser.norm != "land":
            cfg.regulariser_spec()
        cfg.cfm_config()
        cfg.rollout_config()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def _section(cls, values: dict, name: str):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {sorted(unknown)}")
    return cls(**values)


def config_from_dict(d: dict, check_files: bool = True) -> ExperimentConfig:
    d = dict(d)
    if "seed" not in d:
        raise ConfigError("seed is mandatory")
    sections = {}
    for name, cls in SECTIONS.items():
        value = d.pop(name, {})
        if not isinstance(value, dict):
            raise ConfigError(f"[{name}] must be a table")
        sections[name] = _section(cls, value, name)
    top = {f.name for f in fields(ExperimentConfig)} - set(SECTIONS)
    unknown = set(d) - top
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")
    return validate(ExperimentConfig(**d, **sections), check_files)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return asdict(cfg)


def parse_value(text: str):
    """A TOML scalar or array; anything that does not parse is a string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(d: dict, overrides) -> dict:
    """Apply ``a.b=value`` assignments to a nested config dict in place."""
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        node = d
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} does not name a table entry")
        node[parts[-1]] = parse_value(text.strip())
    return d


def parse_config(text: str, overrides=None, check_files: bool = True) -> ExperimentConfig:
    try:
        d = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed TOML: {exc}") from exc
    return config_from_dict(apply_overrides(d, overrides), check_files)


def load_config(path, overrides=None, check_files: bool = True) -> ExperimentConfig:
    return parse_config(Path(path).read_text(), overrides, check_files)


def dump_config(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(config_to_dict(cfg))


def save_config(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_config(cfg))
    return path
