"""Adversarial training of learnt interpolants against intermediate marginals.

Each iteration draws coupled end points, one intermediate marginal index and
real samples from that marginal, then takes one discriminator step followed
by one generator step on ``L_GAN + lambda * L_reg``.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .coupling import ChainSampler, PairSampler, sample_rows
from .data import MarginalDataset
from .interpolants import AliGenerator, ali_eval
from .nd import Adam, Mlp, Tape, Tensor, load_checkpoint, save_checkpoint
from .nd import tensor as T
from .regularizers import RegulariserSpec, calibrate_lambda, regulariser_value

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7
GAN_VARIANTS = ("non_saturating", "saturating")
LOG_COLUMNS = ("iter", "t_i", "loss_disc", "loss_gen", "loss_reg")


class DivergenceError(FloatingPointError):
    """Training produced non-finite values or exploding generator outputs."""

    def __init__(self, message: str, checkpoint: Path | None = None):
        super().__init__(message)
        self.checkpoint = checkpoint


class Discriminator:
    """MLP on ``x ⊕ t`` returning one logit per row.

    With ``time_embedding = n > 0`` the time input also carries
    ``sin/cos(2πkt)`` for ``k = 1..n``, which lets the network separate
    nearby marginals on long sequences.
    """

    def __init__(self, dim: int, hidden=(128, 128), activation: str = "elu", rng=0, net: Mlp | None = None,
                 time_embedding: int = 0):
        self.dim = int(dim)
        self.time_embedding = int(time_embedding)
        if self.time_embedding < 0:
            raise ValueError("time_embedding must be >= 0")
        n_in = self.dim + 1 + 2 * self.time_embedding
        self.net = net if net is not None else Mlp([n_in, *hidden, 1], activation=activation, rng=rng)
        if self.net.in_dim != n_in or self.net.out_dim != 1:
            raise ValueError(f"discriminator widths {self.net.widths} do not fit dim={dim}")

    @property
    def params(self) -> list[Tensor]:
        return self.net.params

    def time_features(self, t: float) -> np.ndarray:
        t = float(t)
        feats = [t]
        for k in range(1, self.time_embedding + 1):
            feats += [np.sin(2 * np.pi * k * t), np.cos(2 * np.pi * k * t)]
        return np.array(feats)

    def logits(self, x, t) -> Tensor:
        x = T.as_tensor(x)
        tcols = np.broadcast_to(self.time_features(t), (x.shape[0], 1 + 2 * self.time_embedding))
        return self.net(T.concat([x, Tensor(np.array(tcols))], axis=1))

    __call__ = logits


def _probability(logits: Tensor) -> Tensor:
    return T.clip(T.sigmoid(logits), PROB_CLAMP, 1.0 - PROB_CLAMP)


def gan_value(p_fake: Tensor, p_real: Tensor) -> Tensor:
    """``mean log(1 - D(fake)) + mean log D(real)`` from probabilities."""
    return T.add(T.mean(T.log(T.sub(1.0, p_fake))), T.mean(T.log(p_real)))


def gan_losses(
    disc: Discriminator,
    fake,
    real,
    t_i: float,
    variant: str = "non_saturating",
) -> tuple[Tensor, Tensor, Tensor]:
    """Returns ``(loss_disc, loss_gen, L_GAN)``.

    The discriminator ascends ``L_GAN`` (so its loss is ``-L_GAN``); the
    generator descends ``log(1 - D(fake))`` (saturating) or ``-log D(fake)``
    (non-saturating).
    """
    if variant not in GAN_VARIANTS:
        raise ValueError(f"gan variant must be one of {GAN_VARIANTS}")
    if len(fake) == 0 or len(real) == 0:
        raise ValueError("GAN losses need non-empty batches")
    lf, lr = disc(fake, t_i), disc(real, t_i)
    if not (np.all(np.isfinite(lf.data)) and np.all(np.isfinite(lr.data))):
        raise DivergenceError("discriminator produced non-finite logits")
    p_fake, p_real = _probability(lf), _probability(lr)
    value = gan_value(p_fake, p_real)
    if variant == "saturating":
        loss_gen = T.mean(T.log(T.sub(1.0, p_fake)))
    else:
        loss_gen = T.neg(T.mean(T.log(p_fake)))
    return T.neg(value), loss_gen, value


@dataclass
class AliTrainConfig:
    iterations: int = 20_000
    batch_size: int = 128
    lam: float = 1.0
    lr_gen: float = 1e-3
    lr_disc: float = 1e-3
    time_noise: float = 0.0
    pretrain_steps: int = 0
    pretrain_lr: float = 1e-3
    regulariser: RegulariserSpec = field(default_factory=RegulariserSpec)
    gan_variant: str = "non_saturating"
    coupling: str = "ot"
    hidden: tuple = (128, 128)
    activation: str = "elu"
    disc_hidden: tuple = (128, 128)
    time_embedding: int = 0
    auto_lambda: bool = False
    chain_refresh: int = 1
    divergence_threshold: float = 1e6
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("iterations must be >= 0 and batch_size >= 1")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.pretrain_steps < 0:
            raise ValueError("pretrain_steps must be non-negative")
        if self.gan_variant not in GAN_VARIANTS:
            raise ValueError(f"gan_variant must be one of {GAN_VARIANTS}")
        if self.coupling not in ("independent", "ot"):
            raise ValueError("coupling must be 'independent' or 'ot'")
        if isinstance(self.regulariser, dict):
            self.regulariser = RegulariserSpec(**self.regulariser)
        self.hidden = tuple(self.hidden)
        self.disc_hidden = tuple(self.disc_hidden)


@dataclass
class StepRecord:
    iter: int
    t_i: float
    loss_disc: float
    loss_gen: float
    loss_reg: float
    l_gan: float = float("nan")

    def row(self) -> list[str]:
        return [str(self.iter)] + [f"{getattr(self, c):.17g}" for c in LOG_COLUMNS[1:]]


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _rng_from_state(state: dict) -> np.random.Generator:
    bg = getattr(np.random, state["bit_generator"])()
    bg.state = state
    return np.random.Generator(bg)


class AliTrainer:
    """Holds generator, discriminator, their optimisers and the data
    samplers; :meth:`step` runs one alternating update."""

    def __init__(self, data: MarginalDataset, cfg: AliTrainConfig, gen: AliGenerator | None = None,
                 disc: Discriminator | None = None):
        if data.K < 3:
            raise ValueError(f"adversarial training needs at least 3 marginals (an intermediate one), got {data.K}")
        self.data = data
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        init = np.random.default_rng([cfg.seed, 1])
        self.gen = gen or AliGenerator(
            data.dim, cfg.hidden, cfg.activation, cfg.time_noise, cfg.time_embedding, rng=init
        )
        self.disc = disc or Discriminator(data.dim, cfg.disc_hidden, cfg.activation, rng=init,
                                          time_embedding=cfg.time_embedding)
        self.opt_gen = Adam(self.gen.params, lr=cfg.lr_gen)
        self.opt_disc = Adam(self.disc.params, lr=cfg.lr_disc)
        self.lam = cfg.lam
        self.iteration = 0
        self.history: list[StepRecord] = []
        self.pairs = PairSampler(data.batches[0], data.batches[-1], cfg.coupling)
        self._chains: dict[int, ChainSampler] = {}

    # -- sampling ------------------------------------------------------------

    def _triples(self, i: int) -> np.ndarray:
        """``(m, 3, d)`` array of ``(x0, x_{t_i}, x1)``; the middle slot is only
        coupled when the piecewise reference needs it."""
        m = self.cfg.batch_size
        if self.cfg.regulariser.kind == "piecewise":
            sampler = self._chains.get(i)
            if sampler is None:
                d = self.data
                sampler = ChainSampler([d.batches[0], d.batches[i], d.batches[-1]], self.cfg.coupling,
                                       self.cfg.chain_refresh)
                if self.cfg.chain_refresh > 1:
                    self._chains[i] = sampler
            return sampler.sample(m, self.rng)
        x0, x1 = self.pairs.sample(m, self.rng)
        return np.stack([x0, np.zeros_like(x0), x1], axis=1)

    def _draw(self) -> tuple[int, np.ndarray, np.ndarray]:
        i = int(self.rng.integers(1, self.data.K - 1))
        triples = self._triples(i)
        real_pool = self.data.batches[i]
        real = real_pool[sample_rows(real_pool, self.cfg.batch_size, self.rng)]
        return i, triples, real

    # -- updates -------------------------------------------------------------

    def _check(self, fake: np.ndarray, where: str) -> None:
        if not np.all(np.isfinite(fake)):
            raise DivergenceError(f"generator produced non-finite values ({where})")
        norm = float(np.max(np.linalg.norm(fake, axis=1)))
        if norm > self.cfg.divergence_threshold:
            raise DivergenceError(f"generator output norm {norm:.3g} exceeds {self.cfg.divergence_threshold:g} ({where})")

    def disc_step(self, triples: np.ndarray, real: np.ndarray, t_i: float) -> float:
        """One ascent step of the discriminator on ``L_GAN``."""
        fake = ali_eval(self.gen, triples[:, 0], triples[:, 2], t_i, train=True, rng=self.rng)
        self._check(fake, "discriminator step")
        with Tape() as tape:
            loss_disc, _, _ = gan_losses(self.disc, fake, real, t_i, self.cfg.gan_variant)
        self.opt_disc.step([g.data for g in tape.gradient(loss_disc, self.disc.params)])
        return loss_disc.item()

    def gen_step(self, triples: np.ndarray, real: np.ndarray, t_i: float) -> tuple[float, float, float]:
        """One descent step of the generator on ``loss_gen + lambda * L_reg``."""
        with Tape() as tape:
            fake = self.gen(triples[:, 0], triples[:, 2], t_i, train=True, rng=self.rng)
            self._check(fake.data, "generator step")
            _, loss_gen, value = gan_losses(self.disc, fake, real, t_i, self.cfg.gan_variant)
            loss_reg = regulariser_value(self.gen, self.cfg.regulariser, triples, t_i, self.rng)
            total = T.add(loss_gen, T.mul(loss_reg, self.lam)) if self.lam else loss_gen
        if not np.isfinite(total.data).all():
            raise DivergenceError(f"non-finite generator loss at iteration {self.iteration}")
        self.opt_gen.step([g.data for g in tape.gradient(total, self.gen.params)])
        return loss_gen.item(), loss_reg.item(), value.item()

    def step(self) -> StepRecord:
        i, triples, real = self._draw()
        t_i = float(self.data.times[i])
        loss_disc = self.disc_step(triples, real, t_i)
        loss_gen, loss_reg, value = self.gen_step(triples, real, t_i)
        rec = StepRecord(self.iteration, t_i, loss_disc, loss_gen, loss_reg, value)
        self.iteration += 1
        self.history.append(rec)
        return rec

    def pretrain(self, steps: int | None = None) -> list[float]:
        """Fit the generator to the active regulariser alone."""
        steps = self.cfg.pretrain_steps if steps is None else steps
        if steps <= 0:
            return []
        opt = Adam(self.gen.params, lr=self.cfg.pretrain_lr)
        losses = []
        for _ in range(steps):
            i = int(self.rng.integers(1, self.data.K - 1))
            triples = self._triples(i)
            with Tape() as tape:
                loss = regulariser_value(self.gen, self.cfg.regulariser, triples, float(self.data.times[i]), self.rng)
            if not np.isfinite(loss.data).all():
                raise DivergenceError("non-finite regulariser during pretraining")
            opt.step([g.data for g in tape.gradient(loss, self.gen.params)])
            losses.append(loss.item())
        return losses

    def calibrate(self) -> float:
        """Set lambda so the regulariser matches the scale of ``L_GAN``."""
        i, triples, real = self._draw()
        t_i = float(self.data.times[i])
        fake = ali_eval(self.gen, triples[:, 0], triples[:, 2], t_i)
        _, _, value = gan_losses(self.disc, fake, real, t_i, self.cfg.gan_variant)
        reg = regulariser_value(self.gen, self.cfg.regulariser, triples, t_i, self.rng)
        self.lam = calibrate_lambda(value.item(), reg.item())
        return self.lam

    def fit(
        self,
        iterations: int | None = None,
        log_path: str | Path | None = None,
        checkpoint_path: str | Path | None = None,
        progress_every: int = 0,
    ) -> AliGenerator:
        """Run pretraining (on a fresh trainer) and adversarial iterations up
        to ``iterations`` in total.  On divergence a partial checkpoint is
        written (when a path is given) and :class:`DivergenceError` raised."""
        target = self.cfg.iterations if iterations is None else iterations
        if self.iteration == 0 and not self.history:
            self.pretrain()
            if self.cfg.auto_lambda:
                log.info("auto lambda: %.6g", self.calibrate())
        try:
            while self.iteration < target:
                rec = self.step()
                if progress_every and rec.iter % progress_every == 0:
                    log.info("iter %d t_i=%.4f disc=%.4f gen=%.4f reg=%.4g",
                             rec.iter, rec.t_i, rec.loss_disc, rec.loss_gen, rec.loss_reg)
        except (DivergenceError, FloatingPointError) as exc:
            ck = None
            if checkpoint_path is not None:
                ck = self.save(Path(str(checkpoint_path) + ".partial"))
            if log_path is not None:
                self.write_log(log_path)
            raise DivergenceError(str(exc), ck) from exc
        if log_path is not None:
            self.write_log(log_path)
        if checkpoint_path is not None:
            self.save(checkpoint_path)
        return self.gen

    # -- persistence -----------------------------------------------------------

    def write_log(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_COLUMNS)
            for rec in self.history:
                w.writerow(rec.row())
        return path

    def save(self, path: str | Path) -> Path:
        arrays = {}
        for name, opt in (("gen", self.opt_gen), ("disc", self.opt_disc)):
            for k, v in opt.state().items():
                arrays[f"opt_{name}/{k}"] = np.asarray(v)
        hist = np.array([[r.iter, r.t_i, r.loss_disc, r.loss_gen, r.loss_reg, r.l_gan] for r in self.history])
        arrays["history"] = hist.reshape(-1, 6)
        meta = {
            "kind": "ali",
            "iteration": self.iteration,
            "lam": self.lam,
            "rng": _rng_state(self.rng),
            "dim": self.gen.dim,
            "time_noise": self.gen.time_noise,
            "time_embedding": self.gen.time_embedding,
            "disc_time_embedding": self.disc.time_embedding,
            "config": config_to_dict(self.cfg),
        }
        return save_checkpoint(path, {"gen": self.gen.net, "disc": self.disc.net}, arrays, meta)

    @classmethod
    def resume(cls, path: str | Path, data: MarginalDataset, cfg: AliTrainConfig | None = None) -> "AliTrainer":
        ck = load_checkpoint(path)
        meta = ck.meta
        cfg = cfg or config_from_dict(meta["config"])
        gen = AliGenerator(meta["dim"], time_noise=meta["time_noise"], time_embedding=meta["time_embedding"],
                           net=ck.nets["gen"])
        disc = Discriminator(meta["dim"], net=ck.nets["disc"], time_embedding=meta.get("disc_time_embedding", 0))
        tr = cls(data, cfg, gen=gen, disc=disc)
        for name, opt in (("gen", tr.opt_gen), ("disc", tr.opt_disc)):
            prefix = f"opt_{name}/"
            opt.load_state({k[len(prefix):]: v for k, v in ck.arrays.items() if k.startswith(prefix)})
        tr.iteration = int(meta["iteration"])
        tr.lam = float(meta["lam"])
        tr.rng = _rng_from_state(meta["rng"])
        tr.history = [StepRecord(int(r[0]), *map(float, r[1:])) for r in ck.arrays["history"]]
        return tr


def load_generator(path: str | Path) -> AliGenerator:
    ck = load_checkpoint(path)
    meta = ck.meta
    return AliGenerator(meta["dim"], time_noise=meta["time_noise"], time_embedding=meta["time_embedding"],
                        net=ck.nets["gen"])


def config_to_dict(cfg: AliTrainConfig) -> dict:
    d = asdict(cfg)
    reg = d["regulariser"]
    reg.pop("land", None)
    d["hidden"], d["disc_hidden"] = list(cfg.hidden), list(cfg.disc_hidden)
    return json.loads(json.dumps(d))


def config_from_dict(d: dict) -> AliTrainConfig:
    d = dict(d)
    d["regulariser"] = RegulariserSpec(**d.get("regulariser", {}))
    return AliTrainConfig(**d)


def train_ali(cfg: AliTrainConfig, data: MarginalDataset, log_path=None, checkpoint_path=None,
              progress_every: int = 0) -> AliGenerator:
    return AliTrainer(data, cfg).fit(log_path=log_path, checkpoint_path=checkpoint_path,
                                     progress_every=progress_every)
