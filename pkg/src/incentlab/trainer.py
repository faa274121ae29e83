"""Training loops.

The dual-tower loop alternates, every cycle, a supervised warm-up phase
(one uniform-log batch into the unbiased tower and one biased-log batch
into the biased tower per step) with a short adversarial phase of
`disc_per_gen` discriminator updates followed by a single biased-encoder
update. Baselines run plain mini-batch training with the same per-cycle
step budget, the same validation holdout and the same early stopping, so
comparisons are update-for-update fair.
"""

import csv
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import models as M
from .diffcore import Optimizer
from .metrics import auc
from .synth_campaign import LoggedDataset

BASELINE_KINDS = ("sbbm_u", "sbbm_b", "sbbm_softplus", "ipw", "cause")

PHASE_WARMUP = "warmup"
PHASE_ADVERSARIAL = "adversarial"
PHASE_SUPERVISED = "supervised"


class TrainingAborted(RuntimeError):
    """Raised when a loss goes non-finite; carries the diagnostic record."""

    def __init__(self, message, cycle, step, phase, log):
        super().__init__(message)
        self.cycle = cycle
        self.step = step
        self.phase = phase
        self.log = log


@dataclass
class TrainConfig:
    n_warmup: int = 100          # supervised steps per cycle
    adv_steps: int = 6           # adversarial steps per cycle
    disc_per_gen: int = 5        # discriminator updates before each generator update
    batch_size: int = 256
    max_cycles: int = 200
    patience: int = 10           # cycles without validation-AUC improvement
    seed: int = 0
    lr: float = 1e-3             # both towers, supervised
    disc_lr: float = 1e-3
    gen_lr: float = 1e-4         # biased encoder, adversarial step
    val_frac: float = 0.1        # share of the uniform log held out
    hidden: Tuple[int, ...] = (64, 64)
    latent: int = 32
    disc_hidden: Tuple[int, ...] = (32, 32)
    ipw_clip: float = 100.0
    cause_reg: float = 0.1
    pcan_monotone: str = "softplus"
    saturating_gen: bool = False
    warmup_first_cycle_only: bool = False
    include_unbiased_in_biased_loss: bool = False  # ablation switch

    def __post_init__(self):
        for name in ("n_warmup", "adv_steps", "disc_per_gen", "batch_size",
                     "max_cycles", "patience"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not (0.0 < self.val_frac < 1.0):
            raise ValueError("val_frac must be in (0, 1)")


@dataclass
class StepRecord:
    cycle: int
    step: int
    phase: str
    loss_b: Optional[float] = None
    loss_u: Optional[float] = None
    loss_disc: Optional[float] = None
    loss_gen: Optional[float] = None


@dataclass
class TrainLog:
    steps: List[StepRecord] = field(default_factory=list)
    val_auc: List[Tuple[int, float]] = field(default_factory=list)

    def count(self, phase: Optional[str] = None, cycle: Optional[int] = None) -> int:
        return sum(1 for r in self.steps
                   if (phase is None or r.phase == phase)
                   and (cycle is None or r.cycle == cycle))

    def to_csv(self, path) -> None:
        """`cycle, step, phase, loss_b, loss_u, loss_disc, loss_gen, val_auc`."""
        val_by_cycle = dict(self.val_auc)
        last_step = {}
        for r in self.steps:
            last_step[r.cycle] = r.step
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["cycle", "step", "phase", "loss_b", "loss_u",
                        "loss_disc", "loss_gen", "val_auc"])
            fmt = lambda v: "" if v is None else "%.9g" % v
            for r in self.steps:
                val = ""
                if r.cycle in val_by_cycle and r.step == last_step[r.cycle]:
                    val = "%.9g" % val_by_cycle[r.cycle]
                w.writerow([r.cycle, r.step, r.phase, fmt(r.loss_b),
                            fmt(r.loss_u), fmt(r.loss_disc), fmt(r.loss_gen), val])


class BatchSampler:
    """Uniform minibatches with a reshuffle at every epoch boundary."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n < 1:
            raise ValueError("empty dataset")
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = rng
        self.order = rng.permutation(n)
        self.pos = 0

    def next(self) -> np.ndarray:
        if self.pos + self.batch_size > self.n:
            self.order = self.rng.permutation(self.n)
            self.pos = 0
        out = self.order[self.pos:self.pos + self.batch_size]
        self.pos += self.batch_size
        return out


def split_holdout(data: LoggedDataset, frac: float, rng: np.random.Generator
                  ) -> Tuple[LoggedDataset, LoggedDataset]:
    """Random (train, holdout) split; holdout gets round(frac * n) rows."""
    n = len(data)
    n_val = int(round(n * frac))
    if not 0 < n_val < n:
        raise ValueError(f"holdout fraction {frac} degenerate for n={n}")
    perm = rng.permutation(n)
    return data.subset(perm[n_val:]), data.subset(perm[:n_val])


def validate(model, holdout: LoggedDataset) -> float:
    """AUC of the deployable predictions on a held-out unbiased log."""
    preds = model.predict_raw(holdout.features, holdout.t)
    return auc(holdout.y, preds)


def _check_finite(value, cycle, step, phase, log):
    if not np.isfinite(value):
        raise TrainingAborted(
            f"non-finite loss {value!r} at cycle {cycle} step {step} ({phase}); "
            "aborted before writing parameters", cycle, step, phase, log)


def _seeds(config: TrainConfig) -> Dict[str, np.random.Generator]:
    """Fixed-order child streams so every method sees identical randomness."""
    kids = np.random.SeedSequence(config.seed).spawn(4)
    names = ("model", "split", "data_u", "data_b")
    return {k: v for k, v in zip(names, kids)}


class _EarlyStop:
    """Patience tracker on validation AUC.

    Only decides when to stop; the returned model is the final training
    state, as the alternation loop specifies. Improvement events are
    surfaced so callers can checkpoint along the way.
    """

    def __init__(self, patience: int):
        self.patience = patience
        self.best_auc = -np.inf
        self.bad = 0

    def update(self, score: float) -> bool:
        """Record a validation score; True when training should stop."""
        if score > self.best_auc:
            self.best_auc = score
            self.bad = 0
            return False
        self.bad += 1
        return self.bad >= self.patience

    @property
    def improved(self) -> bool:
        return self.bad == 0


def train_pcan(config: TrainConfig, d_u: LoggedDataset, d_b: LoggedDataset,
               on_step: Optional[Callable] = None,
               on_improve: Optional[Callable] = None
               ) -> Tuple[M.PcanModel, TrainLog]:
    """Alternating dual-tower training; returns the model and its step log.

    Per cycle: n_warmup supervised steps feeding both towers, then
    disc_per_gen discriminator steps and one generator step. Stops at
    max_cycles or when the validation AUC of the deployable (biased) tower
    has not improved for `patience` cycles; the best parameters are
    restored before returning.
    """
    if len(d_u) == 0 or len(d_b) == 0:
        raise ValueError("both logs must be nonempty")
    seeds = _seeds(config)
    u_train, u_val = split_holdout(d_u, config.val_frac,
                                   np.random.default_rng(seeds["split"]))
    model = M.PcanModel(d_u.dim, hidden=config.hidden, latent=config.latent,
                        disc_hidden=config.disc_hidden,
                        monotone=config.pcan_monotone,
                        t_lo=min(d_u.t.min(), d_b.t.min()),
                        t_hi=max(d_u.t.max(), d_b.t.max()),
                        seed=seeds["model"])
    opt_u = Optimizer(model.unbiased.params, lr=config.lr)
    opt_b = Optimizer(model.biased.params, lr=config.lr)
    opt_d = Optimizer(model.discriminator.params, lr=config.disc_lr)
    opt_g = Optimizer(model.biased.encoder.params, lr=config.gen_lr)
    sam_u = BatchSampler(len(u_train), config.batch_size,
                         np.random.default_rng(seeds["data_u"]))
    sam_b = BatchSampler(len(d_b), config.batch_size,
                         np.random.default_rng(seeds["data_b"]))

    log = TrainLog()
    stopper = _EarlyStop(config.patience)
    for cycle in range(config.max_cycles):
        step = 0
        if cycle == 0 or not config.warmup_first_cycle_only:
            for _ in range(config.n_warmup):
                step += 1
                iu = sam_u.next()
                ib = sam_b.next()
                loss_u, grads_u = M.supervised_loss(
                    model.unbiased, u_train.features[iu], u_train.t[iu], u_train.y[iu])
                _check_finite(loss_u, cycle, step, PHASE_WARMUP, log)
                opt_u.step(grads_u)
                if config.include_unbiased_in_biased_loss:
                    xb = np.concatenate([d_b.features[ib], u_train.features[iu]])
                    tb = np.concatenate([d_b.t[ib], u_train.t[iu]])
                    yb = np.concatenate([d_b.y[ib], u_train.y[iu]])
                else:
                    xb, tb, yb = d_b.features[ib], d_b.t[ib], d_b.y[ib]
                loss_b, grads_b = M.supervised_loss(model.biased, xb, tb, yb)
                _check_finite(loss_b, cycle, step, PHASE_WARMUP, log)
                opt_b.step(grads_b)
                rec = StepRecord(cycle, step, PHASE_WARMUP,
                                 loss_b=loss_b, loss_u=loss_u)
                log.steps.append(rec)
                if on_step:
                    on_step(model, rec)
        for k in range(config.adv_steps):
            step += 1
            iu = sam_u.next()
            ib = sam_b.next()
            if k < config.disc_per_gen:
                loss_d, grads_d = M.disc_loss(model, u_train.features[iu],
                                              d_b.features[ib])
                _check_finite(loss_d, cycle, step, PHASE_ADVERSARIAL, log)
                opt_d.step(grads_d)
                rec = StepRecord(cycle, step, PHASE_ADVERSARIAL, loss_disc=loss_d)
            else:
                loss_g, grads_g = M.gen_loss(model, d_b.features[ib],
                                             saturating=config.saturating_gen)
                _check_finite(loss_g, cycle, step, PHASE_ADVERSARIAL, log)
                opt_g.step(grads_g)
                rec = StepRecord(cycle, step, PHASE_ADVERSARIAL, loss_gen=loss_g)
            log.steps.append(rec)
            if on_step:
                on_step(model, rec)
        score = validate(model, u_val)
        log.val_auc.append((cycle, score))
        stop = stopper.update(score)
        if stopper.improved and on_improve:
            on_improve(model, cycle, score)
        if stop:
            break
    return model, log


def train_baseline(kind: str, config: TrainConfig, d_u: LoggedDataset,
                   d_b: LoggedDataset, on_step: Optional[Callable] = None,
                   on_improve: Optional[Callable] = None):
    """Plain mini-batch training for one baseline kind.

    Step budget per cycle equals the dual-tower loop's n_warmup + adv_steps,
    with identical validation and early stopping. Returns (model, TrainLog).
    """
    if kind not in BASELINE_KINDS:
        raise ValueError(f"unknown baseline kind {kind!r}; expected one of {BASELINE_KINDS}")
    if len(d_u) == 0:
        raise ValueError("uniform log must be nonempty")
    if kind != "sbbm_u" and len(d_b) == 0:
        raise ValueError(f"{kind} needs a nonempty biased log")
    seeds = _seeds(config)
    u_train, u_val = split_holdout(d_u, config.val_frac,
                                   np.random.default_rng(seeds["split"]))
    t_lo = min(d_u.t.min(), d_b.t.min()) if len(d_b) else d_u.t.min()
    t_hi = max(d_u.t.max(), d_b.t.max()) if len(d_b) else d_u.t.max()
    monotone = "softplus" if kind == "sbbm_softplus" else "plain"

    if kind == "cause":
        model = M.CausePair(d_u.dim, hidden=config.hidden, latent=config.latent,
                            monotone=monotone, lam_reg=config.cause_reg,
                            t_lo=t_lo, t_hi=t_hi, seed=seeds["model"])
    else:
        model = M.SbbmModel(d_u.dim, hidden=config.hidden, latent=config.latent,
                            monotone=monotone, t_lo=t_lo, t_hi=t_hi,
                            seed=seeds["model"])
    opt = Optimizer(model.params, lr=config.lr)
    weighting = M.IpwWeighting(config.ipw_clip) if kind == "ipw" else None

    if kind == "sbbm_u":
        train_set = u_train
    elif kind == "cause":
        train_set = None  # two separate samplers below
    else:
        train_set = LoggedDataset.concat([u_train, d_b])
    if kind == "cause":
        sam_u = BatchSampler(len(u_train), config.batch_size,
                             np.random.default_rng(seeds["data_u"]))
        sam_b = BatchSampler(len(d_b), config.batch_size,
                             np.random.default_rng(seeds["data_b"]))
    else:
        sampler = BatchSampler(len(train_set), config.batch_size,
                               np.random.default_rng(seeds["data_u"]))

    log = TrainLog()
    stopper = _EarlyStop(config.patience)
    steps_per_cycle = config.n_warmup + config.adv_steps
    for cycle in range(config.max_cycles):
        for step in range(1, steps_per_cycle + 1):
            if kind == "cause":
                iu = sam_u.next()
                ib = sam_b.next()
                loss, grads_c, grads_t = M.cause_loss(
                    model, u_train.features[iu], u_train.t[iu], u_train.y[iu],
                    d_b.features[ib], d_b.t[ib], d_b.y[ib])
                grads = grads_c + grads_t
            else:
                i = sampler.next()
                loss, grads = M.supervised_loss(
                    model, train_set.features[i], train_set.t[i], train_set.y[i],
                    weighting=weighting,
                    propensity=train_set.propensity[i] if weighting else None)
            _check_finite(loss, cycle, step, PHASE_SUPERVISED, log)
            opt.step(grads)
            rec = StepRecord(cycle, step, PHASE_SUPERVISED, loss_b=loss)
            log.steps.append(rec)
            if on_step:
                on_step(model, rec)
        score = validate(model, u_val)
        log.val_auc.append((cycle, score))
        stop = stopper.update(score)
        if stopper.improved and on_improve:
            on_improve(model, cycle, score)
        if stop:
            break
    return model, log


def train_method(method: str, config: TrainConfig, d_u: LoggedDataset,
                 d_b: LoggedDataset, **kw):
    """Dispatch: 'pcan' or any baseline kind."""
    if method == "pcan":
        return train_pcan(config, d_u, d_b, **kw)
    return train_baseline(method, config, d_u, d_b, **kw)
