"""Dense-network core: layers, stable activations, cross-entropy, optimizer.

Hand-rolled backprop kept deliberately small -- only the pieces the response
models compose. Every gradient here is exact and is pinned against central
finite differences in the test suite.
"""

import io
import json
import zipfile
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

CHECKPOINT_FORMAT = 1

# probability clamp applied before any log
PROB_EPS = 1e-7

ACTIVATIONS = ("relu", "tanh", "identity")


# ---------------------------------------------------------------------------
# activations and losses
# ---------------------------------------------------------------------------

def sigmoid(z):
    """Numerically stable logistic function; scalar in -> scalar out."""
    arr = np.asarray(z, dtype=float)
    scalar = arr.ndim == 0
    a = np.atleast_1d(arr).astype(float)
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ez = np.exp(a[~pos])
    out[~pos] = ez / (1.0 + ez)
    return float(out[0]) if scalar else out


def softplus(z):
    """ln(1 + e^z) computed without overflow; positive for z >= -700."""
    arr = np.asarray(z, dtype=float)
    scalar = arr.ndim == 0
    a = np.atleast_1d(arr).astype(float)
    out = np.maximum(a, 0.0) + np.log1p(np.exp(-np.abs(a)))
    return float(out[0]) if scalar else out


def ce_loss(p, y):
    """Binary cross-entropy and its gradient in p.

    p is clamped to [PROB_EPS, 1 - PROB_EPS] before the logs; the gradient
    is the analytic (p - y) / (p (1 - p)) at the clamped value. Vector
    inputs give elementwise losses (no reduction).
    """
    parr = np.asarray(p, dtype=float)
    scalar = parr.ndim == 0
    pc = np.clip(np.atleast_1d(parr), PROB_EPS, 1.0 - PROB_EPS)
    yv = np.broadcast_to(np.atleast_1d(np.asarray(y, dtype=float)), pc.shape)
    loss = -(yv * np.log(pc) + (1.0 - yv) * np.log1p(-pc))
    grad = (pc - yv) / (pc * (1.0 - pc))
    if scalar:
        return float(loss[0]), float(grad[0])
    return loss, grad


def _act(z, tag):
    if tag == "relu":
        return np.maximum(z, 0.0)
    if tag == "tanh":
        return np.tanh(z)
    return z


def _act_grad(z, tag):
    if tag == "relu":
        return (z > 0).astype(float)
    if tag == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    return np.ones_like(z)


# ---------------------------------------------------------------------------
# dense network with manual backprop
# ---------------------------------------------------------------------------

class GradientTape:
    """Forward caches plus per-parameter gradient buffers for one backward."""

    __slots__ = ("owner", "inputs", "preacts", "single", "grads")

    def __init__(self, owner, inputs, preacts, single):
        self.owner = owner
        self.inputs = inputs      # layer inputs a_0 .. a_{L-1}
        self.preacts = preacts    # pre-activations z_1 .. z_L
        self.single = single
        self.grads = [np.zeros_like(p) for p in owner.params]


class DenseNet:
    """Fully connected net; hidden layers use `activation`, output is linear."""

    def __init__(self, widths: Sequence[int], activation: str = "relu",
                 seed: Optional[int] = None, rng: Optional[np.random.Generator] = None):
        widths = tuple(int(w) for w in widths)
        if len(widths) < 2 or any(w <= 0 for w in widths):
            raise ValueError(f"need >= 2 positive layer widths, got {widths}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.widths = widths
        self.activation = activation
        if rng is None:
            rng = np.random.default_rng(seed)
        self.weights: List[np.ndarray] = []
        self.biases: List[np.ndarray] = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            self.weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))

    @property
    def n_in(self) -> int:
        return self.widths[0]

    @property
    def n_out(self) -> int:
        return self.widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def params(self) -> List[np.ndarray]:
        """Flat view [W0, b0, W1, b1, ...]; arrays are live references."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def set_params(self, arrays: Sequence[np.ndarray]) -> None:
        """Copy values into the existing parameter arrays (identity-preserving)."""
        own = self.params
        if len(arrays) != len(own):
            raise ValueError("parameter count mismatch")
        for dst, src in zip(own, arrays):
            if dst.shape != np.shape(src):
                raise ValueError("parameter shape mismatch")
            dst[...] = src

    def copy(self) -> "DenseNet":
        dup = DenseNet(self.widths, self.activation, seed=0)
        dup.set_params([p.copy() for p in self.params])
        return dup

    def _check_input(self, x) -> Tuple[np.ndarray, bool]:
        arr = np.asarray(x, dtype=float)
        single = arr.ndim == 1
        if single:
            arr = arr[None, :]
        if arr.ndim != 2 or arr.shape[1] != self.n_in:
            raise ValueError(f"input shape {np.shape(x)} incompatible with "
                             f"network input width {self.n_in}")
        return arr, single

    def forward(self, x) -> np.ndarray:
        arr, single = self._check_input(x)
        a = arr
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w + b
            a = _act(z, self.activation) if i < self.n_layers - 1 else z
        return a[0] if single else a

    def forward_tape(self, x) -> Tuple[np.ndarray, GradientTape]:
        """Forward pass that records what backward() needs."""
        arr, single = self._check_input(x)
        inputs = []
        preacts = []
        a = arr
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(a)
            z = a @ w + b
            preacts.append(z)
            a = _act(z, self.activation) if i < self.n_layers - 1 else z
        tape = GradientTape(self, inputs, preacts, single)
        return (a[0] if single else a), tape

    def backward(self, tape: GradientTape, grad_out) -> Tuple[List[np.ndarray], np.ndarray]:
        """Backprop an upstream gradient; returns (param grads, input grad)."""
        if not isinstance(tape, GradientTape) or tape.owner is not self:
            raise RuntimeError("backward called without a matching forward tape")
        g = np.asarray(grad_out, dtype=float)
        if g.ndim == 1:
            g = g[None, :]
        if g.shape != tape.preacts[-1].shape:
            raise ValueError(f"upstream gradient shape {np.shape(grad_out)} does not "
                             f"match output shape {tape.preacts[-1].shape}")
        delta = g
        for i in range(self.n_layers - 1, -1, -1):
            tape.grads[2 * i][...] = tape.inputs[i].T @ delta
            tape.grads[2 * i + 1][...] = delta.sum(axis=0)
            delta = delta @ self.weights[i].T
            if i > 0:
                delta = delta * _act_grad(tape.preacts[i - 1], self.activation)
        grad_in = delta[0] if tape.single else delta
        return tape.grads, grad_in

    # -- serialization hooks used by the checkpoint container ---------------

    def arch(self) -> Dict:
        return {"widths": list(self.widths), "activation": self.activation}

    def to_arrays(self, prefix: str) -> Dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}W{i}"] = w
            out[f"{prefix}b{i}"] = b
        return out

    @classmethod
    def from_arrays(cls, arch: Dict, arrays: Dict[str, np.ndarray], prefix: str) -> "DenseNet":
        net = cls(arch["widths"], arch["activation"], seed=0)
        flat = []
        for i in range(net.n_layers):
            flat.append(arrays[f"{prefix}W{i}"])
            flat.append(arrays[f"{prefix}b{i}"])
        net.set_params(flat)
        return net


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Optimizer:
    """Adam (default) or plain gradient descent over an explicit param list.

    Holds per-parameter moment accumulators and a step counter; `step`
    mutates the bound parameter arrays in place.
    """

    def __init__(self, params: Sequence[np.ndarray], lr: float = 1e-3,
                 method: str = "adam", beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        if method not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer method {method!r}")
        self.params = list(params)
        self.lr = lr
        self.method = method
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]

    def step(self, grads: Sequence[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ValueError("gradient list length does not match parameters")
        for p, g in zip(self.params, grads):
            if p.shape != np.shape(g):
                raise ValueError("gradient shape does not match parameter")
        self.step_count += 1
        t = self.step_count
        if self.method == "sgd":
            for p, g in zip(self.params, grads):
                p -= self.lr * g
            return
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# deterministic checkpoint container
# ---------------------------------------------------------------------------
# A zip of .npy entries plus a JSON header. np.savez embeds wall-clock
# timestamps, which breaks byte-identical regeneration, so entries are
# written with a fixed date instead.

_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def _zip_write(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    zf.writestr(info, payload)


def save_arrays(path, header: Dict, arrays: Dict[str, np.ndarray]) -> None:
    """Write a versioned, byte-deterministic checkpoint file."""
    head = dict(header)
    head["format"] = CHECKPOINT_FORMAT
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        _zip_write(zf, "header.json", json.dumps(head, sort_keys=True).encode())
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.save(buf, np.ascontiguousarray(arrays[name]))
            _zip_write(zf, name + ".npy", buf.getvalue())


def load_arrays(path) -> Tuple[Dict, Dict[str, np.ndarray]]:
    """Inverse of save_arrays; round-trip is bit-exact."""
    with zipfile.ZipFile(path, "r") as zf:
        header = json.loads(zf.read("header.json").decode())
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {header.get('format')!r}")
        arrays = {}
        for name in zf.namelist():
            if name.endswith(".npy"):
                arrays[name[:-4]] = np.load(io.BytesIO(zf.read(name)))
    return header, arrays


def save_net(path, net: DenseNet, extra: Optional[Dict] = None) -> None:
    header = {"kind": "densenet", "arch": net.arch()}
    if extra:
        header.update(extra)
    save_arrays(path, header, net.to_arrays("net_"))


def load_net(path) -> DenseNet:
    header, arrays = load_arrays(path)
    if header.get("kind") != "densenet":
        raise ValueError(f"checkpoint kind {header.get('kind')!r} is not a densenet")
    return DenseNet.from_arrays(header["arch"], arrays, "net_")
