"""Response-model zoo.

Every model maps (user features, normalized incentive) to a payment
probability through the same head structure: a shared encoder produces a
latent h, two scalar heads produce a slope g(h) and an intercept p(h), and
the prediction is sigmoid(g * t + p). The softplus variant squashes the
slope through softplus so the response is monotone nondecreasing in t by
construction.

The dual-tower model adds a second encoder trained on unbiased data plus a
discriminator that tells the two latent distributions apart; its losses are
split so the trainer can alternate updates: `disc_loss` touches only the
discriminator, `gen_loss` touches only the biased-tower encoder.
"""

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .diffcore import (PROB_EPS, DenseNet, Optimizer, load_arrays,
                       save_arrays, sigmoid, softplus)
from .synth_campaign import TreatmentList

# predict() takes incentives normalized to [0, 1]; anything above this bound
# is almost surely an unnormalized currency amount.
MAX_NORMALIZED_T = 1.5

MONOTONE_FLAGS = ("plain", "softplus")


def _as_batch(x, t):
    if hasattr(x, "features"):  # UserProfile, Users, LoggedDataset
        x = x.features
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    t = np.broadcast_to(np.atleast_1d(t), (x.shape[0],))
    return x, t, single


@dataclass(frozen=True)
class IpwWeighting:
    """Inverse-propensity sample weights, clipped at clip_max."""

    clip_max: float = 100.0

    def weights(self, propensity) -> np.ndarray:
        p = np.asarray(propensity, dtype=float)
        if np.any(p <= 0) or np.any(p > 1):
            raise ValueError("propensities must lie in (0, 1]")
        return np.minimum(1.0 / p, self.clip_max)


class SbbmModel:
    """Single-tower response model: sigmoid(g(h(x)) * t + p(h(x)))."""

    model_kind = "sbbm"

    def __init__(self, n_features: int, hidden: Sequence[int] = (64, 64),
                 latent: int = 32, monotone: str = "plain",
                 t_lo: float = 0.0, t_hi: float = 1.0,
                 seed: Optional[int] = None, rng: Optional[np.random.Generator] = None):
        if monotone not in MONOTONE_FLAGS:
            raise ValueError(f"monotone must be one of {MONOTONE_FLAGS}")
        if not t_hi > t_lo:
            raise ValueError("need t_hi > t_lo for treatment normalization")
        if rng is None:
            rng = np.random.default_rng(seed)
        self.encoder = DenseNet((n_features, *hidden, latent), "relu", rng=rng)
        self.head_g = DenseNet((latent, 1), rng=rng)
        self.head_p = DenseNet((latent, 1), rng=rng)
        self.monotone = monotone
        self.t_lo = float(t_lo)
        self.t_hi = float(t_hi)

    @classmethod
    def for_treatments(cls, n_features: int, treatments: TreatmentList,
                       **kw) -> "SbbmModel":
        return cls(n_features, t_lo=treatments.lo, t_hi=treatments.hi, **kw)

    @property
    def n_features(self) -> int:
        return self.encoder.n_in

    @property
    def latent_width(self) -> int:
        return self.encoder.n_out

    @property
    def params(self) -> List[np.ndarray]:
        return self.encoder.params + self.head_g.params + self.head_p.params

    def set_params(self, arrays: Sequence[np.ndarray]) -> None:
        ne = len(self.encoder.params)
        ng = len(self.head_g.params)
        self.encoder.set_params(arrays[:ne])
        self.head_g.set_params(arrays[ne:ne + ng])
        self.head_p.set_params(arrays[ne + ng:])

    def normalize_t(self, t_raw):
        return (np.asarray(t_raw, dtype=float) - self.t_lo) / (self.t_hi - self.t_lo)

    def _score(self, x, t_norm):
        """Pre-sigmoid score; x is (n, d), t_norm is (n,)."""
        h = self.encoder.forward(x)
        g_raw = self.head_g.forward(h)[:, 0]
        p_raw = self.head_p.forward(h)[:, 0]
        g = softplus(g_raw) if self.monotone == "softplus" else g_raw
        return g * t_norm + p_raw

    def predict(self, x, t):
        """Payment probability at normalized incentive t in [0, 1]."""
        x, t, single = _as_batch(x, t)
        if not np.all((t >= 0.0) & (t <= MAX_NORMALIZED_T)):
            raise ValueError(
                f"normalized incentive outside [0, {MAX_NORMALIZED_T}]; "
                "pass raw amounts through normalize_t or predict_raw")
        f = np.clip(sigmoid(self._score(x, t)), PROB_EPS, 1.0 - PROB_EPS)
        return float(f[0]) if single else f

    def predict_raw(self, x, t_raw):
        """Payment probability at raw (currency) incentive."""
        return self.predict(x, self.normalize_t(t_raw))

    def clone(self) -> "SbbmModel":
        dup = SbbmModel(self.n_features,
                        hidden=self.encoder.widths[1:-1],
                        latent=self.latent_width, monotone=self.monotone,
                        t_lo=self.t_lo, t_hi=self.t_hi, seed=0)
        dup.set_params([p.copy() for p in self.params])
        return dup


class PcanModel:
    """Dual-tower model: biased tower, unbiased tower, bias discriminator.

    The biased tower is the deployable response model; the unbiased tower
    only exists to supervise the latent distribution during training.
    """

    model_kind = "pcan"

    def __init__(self, n_features: int, hidden: Sequence[int] = (64, 64),
                 latent: int = 32, disc_hidden: Sequence[int] = (32, 32),
                 monotone: str = "softplus", t_lo: float = 0.0, t_hi: float = 1.0,
                 seed: Optional[int] = None):
        rng = np.random.default_rng(seed)
        self.biased = SbbmModel(n_features, hidden, latent, monotone, t_lo, t_hi, rng=rng)
        self.unbiased = SbbmModel(n_features, hidden, latent, monotone, t_lo, t_hi, rng=rng)
        self.discriminator = DenseNet((latent, *disc_hidden, 1), "relu", rng=rng)

    @property
    def n_features(self) -> int:
        return self.biased.n_features

    @property
    def monotone(self) -> str:
        return self.biased.monotone

    @property
    def t_lo(self) -> float:
        return self.biased.t_lo

    @property
    def t_hi(self) -> float:
        return self.biased.t_hi

    @property
    def params(self) -> List[np.ndarray]:
        return self.biased.params + self.unbiased.params + self.discriminator.params

    def predict(self, x, t):
        return self.biased.predict(x, t)

    def predict_raw(self, x, t_raw):
        return self.biased.predict_raw(x, t_raw)


class CausePair:
    """Two architecture-identical towers tied by a weight-difference penalty.

    The control tower trains on the uniform log, the treatment tower on the
    biased log; the treatment tower is the deployable model.
    """

    model_kind = "cause"

    def __init__(self, n_features: int, hidden: Sequence[int] = (64, 64),
                 latent: int = 32, monotone: str = "plain", lam_reg: float = 0.1,
                 t_lo: float = 0.0, t_hi: float = 1.0, seed: Optional[int] = None):
        if lam_reg < 0:
            raise ValueError("lam_reg must be >= 0")
        rng = np.random.default_rng(seed)
        self.control = SbbmModel(n_features, hidden, latent, monotone, t_lo, t_hi, rng=rng)
        self.treatment = SbbmModel(n_features, hidden, latent, monotone, t_lo, t_hi, rng=rng)
        self.lam_reg = float(lam_reg)

    @property
    def params(self) -> List[np.ndarray]:
        return self.control.params + self.treatment.params

    def predict(self, x, t):
        return self.treatment.predict(x, t)

    def predict_raw(self, x, t_raw):
        return self.treatment.predict_raw(x, t_raw)


# ---------------------------------------------------------------------------
# losses (value + gradients, finite-difference checked)
# ---------------------------------------------------------------------------

def predict(model, x, t):
    return model.predict(x, t)


def supervised_loss(model: SbbmModel, x, t_raw, y,
                    weighting: Optional[IpwWeighting] = None,
                    propensity=None) -> Tuple[float, List[np.ndarray]]:
    """Mean (optionally inverse-propensity weighted) cross-entropy.

    Returns the loss and gradients aligned with model.params. The weighted
    form is mean_i w_i * CE_i with w_i = min(1/propensity_i, clip).
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    t = np.broadcast_to(np.atleast_1d(np.asarray(t_raw, dtype=float)), (n,))
    y = np.broadcast_to(np.atleast_1d(np.asarray(y, dtype=float)), (n,))
    if weighting is not None:
        if propensity is None:
            raise ValueError("IPW mode requires propensities")
        w = weighting.weights(np.broadcast_to(
            np.atleast_1d(np.asarray(propensity, dtype=float)), (n,)))
    else:
        w = np.ones(n)

    tn = model.normalize_t(t)
    h, tape_e = model.encoder.forward_tape(x)
    g_raw, tape_g = model.head_g.forward_tape(h)
    p_raw, tape_p = model.head_p.forward_tape(h)
    g_raw = g_raw[:, 0]
    p_raw = p_raw[:, 0]
    if model.monotone == "softplus":
        g = softplus(g_raw)
        dg_draw = sigmoid(g_raw)
    else:
        g = g_raw
        dg_draw = np.ones(n)
    s = g * tn + p_raw
    f = sigmoid(s)
    fc = np.clip(f, PROB_EPS, 1.0 - PROB_EPS)
    loss = float(np.mean(w * -(y * np.log(fc) + (1.0 - y) * np.log1p(-fc))))

    ds = w * (f - y) / n                      # dL/ds, exact while unclamped
    dgr = (ds * tn * dg_draw)[:, None]
    dpr = ds[:, None]
    grads_g, dh_g = model.head_g.backward(tape_g, dgr)
    grads_p, dh_p = model.head_p.backward(tape_p, dpr)
    grads_e, _ = model.encoder.backward(tape_e, dh_g + dh_p)
    return loss, grads_e + grads_g + grads_p


def disc_loss(pcan: PcanModel, x_u, x_b) -> Tuple[float, List[np.ndarray]]:
    """Discriminator BCE: unbiased latents are class 1, biased class 0.

    Averaged over the two sides, so an uninformative discriminator sits at
    ln 2. Gradients cover discriminator parameters only; neither encoder is
    touched.
    """
    x_u = np.atleast_2d(np.asarray(x_u, dtype=float))
    x_b = np.atleast_2d(np.asarray(x_b, dtype=float))
    if x_u.shape[0] == 0 or x_b.shape[0] == 0:
        raise ValueError("both batches must be nonempty")
    h_u = pcan.unbiased.encoder.forward(x_u)
    h_b = pcan.biased.encoder.forward(x_b)
    z_u, tape_u = pcan.discriminator.forward_tape(h_u)
    z_b, tape_b = pcan.discriminator.forward_tape(h_b)
    d_u = np.clip(sigmoid(z_u[:, 0]), PROB_EPS, 1.0 - PROB_EPS)
    d_b = np.clip(sigmoid(z_b[:, 0]), PROB_EPS, 1.0 - PROB_EPS)
    loss = 0.5 * float(-np.mean(np.log(d_u)) - np.mean(np.log1p(-d_b)))

    dz_u = (0.5 * (sigmoid(z_u[:, 0]) - 1.0) / x_u.shape[0])[:, None]
    dz_b = (0.5 * sigmoid(z_b[:, 0]) / x_b.shape[0])[:, None]
    g1, _ = pcan.discriminator.backward(tape_u, dz_u)
    g2, _ = pcan.discriminator.backward(tape_b, dz_b)
    grads = [a + b for a, b in zip(g1, g2)]
    return loss, grads


def gen_loss(pcan: PcanModel, x_b, saturating: bool = False
             ) -> Tuple[float, List[np.ndarray]]:
    """Alignment loss for the biased encoder against a frozen discriminator.

    Default is the non-saturating form -E[log d(h_b(x))]; set saturating for
    the literal E[log(1 - d(h_b(x)))] objective (same fixed point, weaker
    early gradients). Gradients cover the biased encoder only -- heads,
    unbiased tower and discriminator all stay untouched.
    """
    x_b = np.atleast_2d(np.asarray(x_b, dtype=float))
    if x_b.shape[0] == 0:
        raise ValueError("empty batch")
    n = x_b.shape[0]
    h_b, tape_e = pcan.biased.encoder.forward_tape(x_b)
    z, tape_d = pcan.discriminator.forward_tape(h_b)
    d = sigmoid(z[:, 0])
    dc = np.clip(d, PROB_EPS, 1.0 - PROB_EPS)
    if saturating:
        loss = float(np.mean(np.log1p(-dc)))
        dz = (-d / n)[:, None]
    else:
        loss = float(-np.mean(np.log(dc)))
        dz = ((d - 1.0) / n)[:, None]
    _, dh = pcan.discriminator.backward(tape_d, dz)
    grads_e, _ = pcan.biased.encoder.backward(tape_e, dh)
    return loss, grads_e


def cause_loss(pair: CausePair, x_u, t_u, y_u, x_b, t_b, y_b
               ) -> Tuple[float, List[np.ndarray], List[np.ndarray]]:
    """CE(control on uniform log) + CE(treatment on biased log) + lam * ||dw||^2.

    Returns (loss, control grads, treatment grads); the penalty compares the
    two parameter vectors layerwise with squared distance.
    """
    loss_c, grads_c = supervised_loss(pair.control, x_u, t_u, y_u)
    loss_t, grads_t = supervised_loss(pair.treatment, x_b, t_b, y_b)
    reg = 0.0
    lam = pair.lam_reg
    for pc, pt, gc, gt in zip(pair.control.params, pair.treatment.params,
                              grads_c, grads_t):
        diff = pc - pt
        reg += float(np.sum(diff * diff))
        if lam > 0:
            gc += 2.0 * lam * diff
            gt -= 2.0 * lam * diff
    return loss_c + loss_t + lam * reg, grads_c, grads_t


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _sbbm_header(m: SbbmModel) -> Dict:
    return {"encoder": m.encoder.arch(), "head_g": m.head_g.arch(),
            "head_p": m.head_p.arch(), "monotone": m.monotone,
            "t_lo": m.t_lo, "t_hi": m.t_hi}


def _sbbm_arrays(m: SbbmModel, prefix: str) -> Dict[str, np.ndarray]:
    out = m.encoder.to_arrays(prefix + "enc_")
    out.update(m.head_g.to_arrays(prefix + "hg_"))
    out.update(m.head_p.to_arrays(prefix + "hp_"))
    return out


def _sbbm_from(header: Dict, arrays: Dict[str, np.ndarray], prefix: str) -> SbbmModel:
    enc = header["encoder"]["widths"]
    m = SbbmModel(enc[0], hidden=enc[1:-1], latent=enc[-1],
                  monotone=header["monotone"], t_lo=header["t_lo"],
                  t_hi=header["t_hi"], seed=0)
    m.encoder = DenseNet.from_arrays(header["encoder"], arrays, prefix + "enc_")
    m.head_g = DenseNet.from_arrays(header["head_g"], arrays, prefix + "hg_")
    m.head_p = DenseNet.from_arrays(header["head_p"], arrays, prefix + "hp_")
    return m


def save_model(path, model, label: Optional[str] = None) -> None:
    """Write a model checkpoint; `label` records e.g. the training method."""
    kind = model.model_kind
    header: Dict = {"model_kind": kind}
    if label is not None:
        header["label"] = label
    arrays: Dict[str, np.ndarray] = {}
    if kind == "sbbm":
        header["sbbm"] = _sbbm_header(model)
        arrays = _sbbm_arrays(model, "m_")
    elif kind == "pcan":
        header["biased"] = _sbbm_header(model.biased)
        header["unbiased"] = _sbbm_header(model.unbiased)
        header["disc"] = model.discriminator.arch()
        arrays = _sbbm_arrays(model.biased, "b_")
        arrays.update(_sbbm_arrays(model.unbiased, "u_"))
        arrays.update(model.discriminator.to_arrays("d_"))
    elif kind == "cause":
        header["control"] = _sbbm_header(model.control)
        header["treatment"] = _sbbm_header(model.treatment)
        header["lam_reg"] = model.lam_reg
        arrays = _sbbm_arrays(model.control, "c_")
        arrays.update(_sbbm_arrays(model.treatment, "t_"))
    else:
        raise ValueError(f"cannot checkpoint model kind {kind!r}")
    save_arrays(path, header, arrays)


def load_model(path, expect_kind: Optional[str] = None):
    """Load a model checkpoint; fails loudly on a mismatched kind tag."""
    header, arrays = load_arrays(path)
    kind = header.get("model_kind")
    if expect_kind is not None and kind != expect_kind:
        raise ValueError(f"checkpoint at {path} has kind {kind!r}, "
                         f"expected {expect_kind!r}")
    if kind == "sbbm":
        return _sbbm_from(header["sbbm"], arrays, "m_")
    if kind == "pcan":
        biased = _sbbm_from(header["biased"], arrays, "b_")
        model = PcanModel(biased.n_features,
                          hidden=biased.encoder.widths[1:-1],
                          latent=biased.latent_width,
                          disc_hidden=header["disc"]["widths"][1:-1],
                          monotone=biased.monotone,
                          t_lo=biased.t_lo, t_hi=biased.t_hi, seed=0)
        model.biased = biased
        model.unbiased = _sbbm_from(header["unbiased"], arrays, "u_")
        model.discriminator = DenseNet.from_arrays(header["disc"], arrays, "d_")
        return model
    if kind == "cause":
        control = _sbbm_from(header["control"], arrays, "c_")
        model = CausePair(control.n_features,
                          hidden=control.encoder.widths[1:-1],
                          latent=control.latent_width,
                          monotone=control.monotone,
                          lam_reg=header["lam_reg"],
                          t_lo=control.t_lo, t_hi=control.t_hi, seed=0)
        model.control = control
        model.treatment = _sbbm_from(header["treatment"], arrays, "t_")
        return model
    raise ValueError(f"unknown model kind {kind!r} in checkpoint")
