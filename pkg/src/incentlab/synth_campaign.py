"""Synthetic marketing campaign: users, ground-truth payment oracle, loggers.

The generator plays the role of the unobservable production system: it knows
the true payment probability for every (user, incentive) pair and logs
datasets under either a uniform-random policy or an activity-biased policy
that hands small incentives to the most active users. The biased log shows
the classic inverted payment-vs-incentive curve even though the underlying
truth is strictly increasing in the incentive.
"""

import csv
import warnings
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .diffcore import sigmoid, softplus

FLOAT_FMT = "%.9g"  # CSV float serialization: 9 significant digits

SOURCE_UNBIASED = "u"
SOURCE_BIASED = "b"


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TreatmentList:
    """Strictly increasing list of nonnegative incentive amounts (currency)."""

    values: Tuple[float, ...]

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if len(vals) < 2:
            raise ValueError("need at least 2 treatment levels")
        if any(v < 0 for v in vals):
            raise ValueError("treatments must be nonnegative")
        if any(b <= a for a, b in zip(vals, vals[1:])):
            raise ValueError("treatments must be strictly increasing")
        object.__setattr__(self, "values", vals)

    @property
    def count(self) -> int:
        return len(self.values)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)

    @property
    def lo(self) -> float:
        return self.values[0]

    @property
    def hi(self) -> float:
        return self.values[-1]


@dataclass(frozen=True)
class UserProfile:
    """One user: standardized feature vector plus latent engagement score."""

    features: np.ndarray
    activity: float


class Users:
    """Column-oriented user pool; indexing yields UserProfile views."""

    def __init__(self, features: np.ndarray, activity: np.ndarray):
        features = np.asarray(features, dtype=float)
        activity = np.asarray(activity, dtype=float)
        if features.ndim != 2 or activity.shape != (features.shape[0],):
            raise ValueError("features must be (n, d) with matching activity")
        self.features = features
        self.activity = activity

    def __len__(self) -> int:
        return self.features.shape[0]

    def __getitem__(self, i) -> "Union[UserProfile, Users]":
        if isinstance(i, (int, np.integer)):
            return UserProfile(self.features[i], float(self.activity[i]))
        return Users(self.features[i], self.activity[i])

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def feature_score(features: np.ndarray) -> np.ndarray:
    """Unit-variance projection of the logged features: mean scaled to N(0,1)."""
    features = np.asarray(features, dtype=float)
    d = features.shape[-1]
    return features.sum(axis=-1) / np.sqrt(d)


def gen_users(n: int, d: int, seed: int, activity_gain: float = 3.0,
              engagement_noise: float = 1.0,
              activity_shift: float = 0.0) -> Users:
    """Draw n users with standardized features and activity in (0, 1).

    Activity squashes a unit-variance engagement score built from the
    feature projection plus a per-user latent component of relative weight
    `engagement_noise`. The latent part is what the logging policy and the
    true response see but the logged features do not carry, which is what
    keeps naive training on the biased log from explaining the policy away.
    A negative `activity_shift` skews the pool toward casual users with a
    thin highly-active tail.
    """
    if n < 1 or d < 1:
        raise ValueError(f"need n >= 1 and d >= 1, got n={n}, d={d}")
    ss_feat, ss_latent = _seed_seq(seed).spawn(2)
    features = np.random.default_rng(ss_feat).standard_normal((n, d))
    xi = np.random.default_rng(ss_latent).standard_normal(n)
    norm = np.sqrt(1.0 + engagement_noise ** 2)
    engagement = (feature_score(features) + engagement_noise * xi) / norm
    activity = sigmoid(activity_gain * engagement + activity_shift)
    return Users(features, activity)


def _logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


@dataclass(frozen=True)
class CampaignOracle:
    """Ground-truth payment probability sigmoid(a(x) * t + b(x)), a(x) > 0.

    The slope a(x) = softplus(u . features) * slope_scale is strictly
    positive, so the true response is strictly increasing in the incentive.
    The offset b(x) = offset_scale * engagement + offset_base rides on the
    same engagement score the biased logger targets (recovered from the
    activity field), which is what inverts the observed curve.
    """

    slope_vec: np.ndarray
    slope_scale: float = 0.3
    offset_scale: float = 2.0
    offset_base: float = -2.5
    activity_gain: float = 3.0
    activity_shift: float = 0.0

    @classmethod
    def from_seed(cls, d: int, seed: int, slope_scale: float = 0.3,
                  offset_scale: float = 2.0, offset_base: float = -2.5,
                  activity_gain: float = 3.0,
                  activity_shift: float = 0.0) -> "CampaignOracle":
        rng = np.random.default_rng(seed)
        u = rng.standard_normal(d)
        u /= np.linalg.norm(u)
        return cls(u, slope_scale, offset_scale, offset_base, activity_gain,
                   activity_shift)

    @staticmethod
    def _split(x) -> Tuple[np.ndarray, np.ndarray]:
        if isinstance(x, UserProfile):
            return x.features, np.asarray(x.activity)
        if hasattr(x, "features") and hasattr(x, "activity"):
            return x.features, x.activity
        features, activity = x
        return np.asarray(features, dtype=float), np.asarray(activity, dtype=float)

    def slope(self, features: np.ndarray) -> np.ndarray:
        return softplus(np.asarray(features) @ self.slope_vec) * self.slope_scale

    def offset(self, activity: np.ndarray) -> np.ndarray:
        engagement = (_logit(activity) - self.activity_shift) / self.activity_gain
        return self.offset_scale * engagement + self.offset_base

    def true_mpp(self, x, t):
        """True payment probability at raw incentive t >= 0.

        x is anything carrying features and activity: a UserProfile, a
        Users pool, a LoggedDataset, or a (features, activity) pair.
        """
        features, activity = self._split(x)
        t_arr = np.asarray(t, dtype=float)
        if np.any(t_arr < 0) or not np.all(np.isfinite(t_arr)):
            raise ValueError(f"incentive must be finite and >= 0, got {t!r}")
        return sigmoid(self.slope(features) * t_arr + self.offset(activity))

    def predict_raw(self, x, t):
        """Alias so the oracle satisfies the response-model interface."""
        return self.true_mpp(x, t)


def true_mpp(oracle: CampaignOracle, x, t):
    return oracle.true_mpp(x, t)


@dataclass(frozen=True)
class LoggingPolicy:
    """Propensity table over a treatment list.

    kind "uniform-random" spreads mass evenly; "activity-biased" puts
    exponentially more mass on small incentives for active users:
    pi(t_j | x) proportional to exp(-beta * activity(x) * rank(t_j)),
    mixed with a uniform floor so support never collapses.
    """

    kind: str
    treatments: TreatmentList
    beta: float = 2.0
    floor: float = 0.01

    def __post_init__(self):
        if self.kind not in ("uniform-random", "activity-biased"):
            raise ValueError(f"unknown policy kind {self.kind!r}")
        k = self.treatments.count
        if not (0 < self.floor <= 1.0 / k):
            raise ValueError(f"floor must be in (0, 1/|T|], got {self.floor}")

    @property
    def source(self) -> str:
        return SOURCE_UNBIASED if self.kind == "uniform-random" else SOURCE_BIASED

    def propensities(self, activity: np.ndarray) -> np.ndarray:
        """(n, |T|) analytic propensity matrix; rows sum to 1, min >= floor."""
        activity = np.atleast_1d(np.asarray(activity, dtype=float))
        n = activity.shape[0]
        k = self.treatments.count
        if self.kind == "uniform-random":
            return np.full((n, k), 1.0 / k)
        ranks = np.arange(k, dtype=float)
        logits = -self.beta * activity[:, None] * ranks[None, :]
        raw = np.exp(logits - logits.max(axis=1, keepdims=True))
        raw /= raw.sum(axis=1, keepdims=True)
        return (1.0 - k * self.floor) * raw + self.floor


@dataclass(frozen=True)
class Sample:
    """One logged event."""

    user_id: int
    user: UserProfile
    t: float
    y: int
    source: str      # "u" (uniform-random log) or "b" (activity-biased log)
    propensity: float


class LoggedDataset:
    """Column store of Samples; sequence protocol yields Sample objects."""

    COLUMNS = ("user_id", "features", "activity", "t", "y", "source", "propensity")

    def __init__(self, user_ids, features, activity, t, y, source, propensity):
        self.user_ids = np.asarray(user_ids, dtype=np.int64)
        self.features = np.asarray(features, dtype=float)
        self.activity = np.asarray(activity, dtype=float)
        self.t = np.asarray(t, dtype=float)
        self.y = np.asarray(y, dtype=np.int64)
        self.source = np.asarray(source, dtype="U1")
        self.propensity = np.asarray(propensity, dtype=float)
        n = len(self.user_ids)
        for name in ("activity", "t", "y", "source", "propensity"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"column {name} has wrong length")
        if self.features.shape[:1] != (n,):
            raise ValueError("features has wrong length")

    def __len__(self) -> int:
        return len(self.user_ids)

    def __getitem__(self, i):
        if isinstance(i, (int, np.integer)):
            return Sample(
                user_id=int(self.user_ids[i]),
                user=UserProfile(self.features[i], float(self.activity[i])),
                t=float(self.t[i]),
                y=int(self.y[i]),
                source=str(self.source[i]),
                propensity=float(self.propensity[i]),
            )
        return self.subset(i)

    def subset(self, idx) -> "LoggedDataset":
        return LoggedDataset(self.user_ids[idx], self.features[idx],
                             self.activity[idx], self.t[idx], self.y[idx],
                             self.source[idx], self.propensity[idx])

    @classmethod
    def concat(cls, parts: Sequence["LoggedDataset"]) -> "LoggedDataset":
        return cls(
            np.concatenate([p.user_ids for p in parts]),
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.activity for p in parts]),
            np.concatenate([p.t for p in parts]),
            np.concatenate([p.y for p in parts]),
            np.concatenate([p.source for p in parts]),
            np.concatenate([p.propensity for p in parts]),
        )

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def to_csv(self, path) -> None:
        """Write `user_id, f_0..f_{d-1}, activity, t, y, source, propensity`."""
        d = self.dim
        header = ["user_id"] + [f"f_{j}" for j in range(d)] + \
                 ["activity", "t", "y", "source", "propensity"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for i in range(len(self)):
                row = [str(int(self.user_ids[i]))]
                row += [FLOAT_FMT % v for v in self.features[i]]
                row += [FLOAT_FMT % self.activity[i], FLOAT_FMT % self.t[i],
                        str(int(self.y[i])), str(self.source[i]),
                        FLOAT_FMT % self.propensity[i]]
                w.writerow(row)

    @classmethod
    def from_csv(cls, path) -> "LoggedDataset":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if not header or header[0] != "user_id":
                raise ValueError(f"{path}: missing dataset header row")
            d = sum(1 for name in header if name.startswith("f_"))
            ids, feats, act, ts, ys, src, prop = [], [], [], [], [], [], []
            for row in reader:
                ids.append(int(row[0]))
                feats.append([float(v) for v in row[1:1 + d]])
                act.append(float(row[1 + d]))
                ts.append(float(row[2 + d]))
                ys.append(int(row[3 + d]))
                src.append(row[4 + d])
                prop.append(float(row[5 + d]))
        return cls(ids, np.asarray(feats), act, ts, ys, src, prop)


# ---------------------------------------------------------------------------
# logging simulation
# ---------------------------------------------------------------------------

def _seed_seq(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def sample_logged(oracle: CampaignOracle, policy: LoggingPolicy, users: Users,
                  seed: int, id_offset: int = 0) -> LoggedDataset:
    """Log one event per user under the policy, labels from the oracle.

    Treatment draws and label noise come from separate index-aligned
    streams, so swapping the policy re-prices the same underlying user
    randomness instead of reshuffling it (paired comparisons).
    """
    n = len(users)
    pi = policy.propensities(users.activity)
    ss_treat, ss_label = _seed_seq(seed).spawn(2)
    v = np.random.default_rng(ss_treat).random(n)
    u = np.random.default_rng(ss_label).random(n)

    cdf = np.cumsum(pi, axis=1)
    idx = np.minimum((cdf < v[:, None]).sum(axis=1), policy.treatments.count - 1)
    t = policy.treatments.as_array()[idx]
    prop = pi[np.arange(n), idx]  # recorded exactly, no re-estimation
    p_true = oracle.true_mpp(users, t)
    y = (u < p_true).astype(np.int64)

    return LoggedDataset(
        user_ids=np.arange(id_offset, id_offset + n),
        features=users.features,
        activity=users.activity,
        t=t,
        y=y,
        source=np.full(n, policy.source, dtype="U1"),
        propensity=prop,
    )


def empirical_curve(samples, treatments: Optional[TreatmentList] = None
                    ) -> List[Tuple[float, float]]:
    """Mean payment rate per treatment level, ordered by level.

    Levels with no samples are omitted (reported missing, never zero); a
    warning names them when an expected treatment list is supplied.
    """
    if isinstance(samples, LoggedDataset):
        t = samples.t
        y = samples.y
    else:
        t = np.asarray([s.t for s in samples], dtype=float)
        y = np.asarray([s.y for s in samples], dtype=float)
    levels = np.unique(t)
    curve = [(float(lv), float(y[t == lv].mean())) for lv in levels]
    if treatments is not None:
        missing = sorted(set(treatments.values) - {lv for lv, _ in curve})
        if missing:
            warnings.warn(f"no samples at treatment level(s) {missing}")
    return curve


# ---------------------------------------------------------------------------
# campaign bundle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CampaignConfig:
    """Everything that defines one synthetic campaign (data sizes excluded)."""

    d: int = 8
    treatments: Tuple[float, ...] = (1.0, 2.0, 3.0, 4.0, 5.0)
    policy_beta: float = 2.0
    propensity_floor: float = 0.01
    slope_scale: float = 0.3
    offset_scale: float = 2.0
    offset_base: float = -2.5
    activity_gain: float = 3.0
    engagement_noise: float = 1.0
    activity_shift: float = 0.0
    oracle_seed: int = 0


class Campaign:
    """Bundles the oracle and both logging policies for one configuration."""

    def __init__(self, config: CampaignConfig = CampaignConfig()):
        self.config = config
        self.treatments = TreatmentList(config.treatments)
        self.oracle = CampaignOracle.from_seed(
            config.d, config.oracle_seed, config.slope_scale,
            config.offset_scale, config.offset_base, config.activity_gain,
            config.activity_shift)
        self.uniform_policy = LoggingPolicy(
            "uniform-random", self.treatments, floor=config.propensity_floor)
        self.biased_policy = LoggingPolicy(
            "activity-biased", self.treatments, beta=config.policy_beta,
            floor=config.propensity_floor)

    def gen_users(self, n: int, seed: int) -> Users:
        return gen_users(n, self.config.d, seed, self.config.activity_gain,
                         self.config.engagement_noise,
                         self.config.activity_shift)

    def gen_dataset(self, n: int, unbiased_frac: float, seed: int
                    ) -> Tuple[LoggedDataset, LoggedDataset]:
        """Split n fresh users into a small uniform log and a large biased log."""
        if not (0.0 < unbiased_frac < 1.0):
            raise ValueError(f"unbiased_frac must be in (0, 1), got {unbiased_frac}")
        n_u = int(round(n * unbiased_frac))
        ss_users, ss_u, ss_b = _seed_seq(seed).spawn(3)
        users = self.gen_users(n, ss_users)
        d_u = sample_logged(self.oracle, self.uniform_policy, users[:n_u],
                            seed=ss_u, id_offset=0)
        d_b = sample_logged(self.oracle, self.biased_policy, users[n_u:],
                            seed=ss_b, id_offset=n_u)
        return d_u, d_b

    def gen_test(self, n: int, seed: int, id_offset: int = 0) -> LoggedDataset:
        """Fully random held-out log; the evaluation distribution."""
        ss_users, ss_log = _seed_seq(seed).spawn(2)
        users = self.gen_users(n, ss_users)
        return sample_logged(self.oracle, self.uniform_policy, users,
                             seed=ss_log, id_offset=id_offset)


def gen_dataset(campaign: Campaign, n: int, unbiased_frac: float, seed: int
                ) -> Tuple[LoggedDataset, LoggedDataset]:
    return campaign.gen_dataset(n, unbiased_frac, seed)
