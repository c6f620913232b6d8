"""Binary classifiers trained from scratch with mini-batch SGD.

All three model kinds keep their parameters in one contiguous float64 array
(``model.flat``) with named views into it, so federation only ever deals
with flat ``ParamVector`` values. Labels follow the dataset convention:
``0`` is ransomware, ``1`` is clean; ``predict_proba`` returns P(clean).

Every model starts its flat vector with a frozen input standardiser
(per-feature mean, then scale; identity by default). Those slots, like the
FNN batch-norm running statistics, never receive gradient; see
``trainable_mask``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ArchError, ShapeError
from .netflow import Dataset, FeatureVector

MODEL_KINDS = ("lr", "svm", "fnn")
DEFAULT_HIDDEN = (1024, 512, 128, 64, 32)
CHECKPOINT_VERSION = 1


@dataclass
class ParamVector:
    values: np.ndarray
    arch_id: str

    def _check(self, other):
        if not isinstance(other, ParamVector) or other.arch_id != self.arch_id:
            raise ArchError("parameter vectors of different architectures cannot be combined")
        if other.values.shape != self.values.shape:
            raise ArchError("parameter vector length mismatch")

    def __add__(self, other):
        self._check(other)
        return ParamVector(self.values + other.values, self.arch_id)

    def __sub__(self, other):
        self._check(other)
        return ParamVector(self.values - other.values, self.arch_id)

    def __mul__(self, scalar):
        return ParamVector(self.values * float(scalar), self.arch_id)

    __rmul__ = __mul__

    def __len__(self):
        return self.values.shape[0]

    def copy(self):
        return ParamVector(self.values.copy(), self.arch_id)


@dataclass(frozen=True)
class Arch:
    """Everything needed to rebuild an empty model of a given shape."""
    kind: str
    dim: int
    hidden: tuple = DEFAULT_HIDDEN
    c: float = 1.0
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.dim <= 0:
            raise ValueError("dim must be positive")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def describe(self) -> dict:
        d = {"kind": self.kind, "dim": self.dim}
        if self.kind == "svm":
            d["c"] = self.c
        if self.kind == "fnn":
            d.update(hidden=list(self.hidden), bn_eps=self.bn_eps, bn_momentum=self.bn_momentum)
        return d

    @property
    def arch_id(self) -> str:
        blob = json.dumps(self.describe(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def build(self, seed: int = 0):
        if self.kind == "lr":
            return LRModel(self.dim)
        if self.kind == "svm":
            return LinearSVMModel(self.dim, c=self.c)
        return FNNModel(self.dim, self.hidden, eps=self.bn_eps, momentum=self.bn_momentum,
                        seed=seed)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class InputStats:
    """Per-feature count, mean and sum of squared deviations.

    Clients can share these moments instead of raw samples; ``merge`` uses
    the pairwise update of Chan et al. and is applied in client order.
    """
    n: int
    mean: np.ndarray
    m2: np.ndarray

    @classmethod
    def from_inputs(cls, X) -> "InputStats":
        X = np.asarray(X, dtype=np.float64)
        mean = X.mean(axis=0)
        return cls(X.shape[0], mean, ((X - mean) ** 2).sum(axis=0))

    def merge(self, other: "InputStats") -> "InputStats":
        n = self.n + other.n
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.n / n)
        m2 = self.m2 + other.m2 + delta * delta * (self.n * other.n / n)
        return InputStats(n, mean, m2)

    @staticmethod
    def combine(parts) -> "InputStats":
        parts = list(parts)
        acc = parts[0]
        for p in parts[1:]:
            acc = acc.merge(p)
        return acc

    def mean_scale(self):
        std = np.sqrt(self.m2 / self.n)
        return self.mean.copy(), np.where(std > 1e-12, std, 1.0)


class _FlatModel:
    kind = ""

    def __init__(self, arch: Arch, size: int):
        self.arch = arch
        d = arch.dim
        self.flat = np.zeros(2 * d + size)
        self.in_mean = self.flat[:d]
        self.in_scale = self.flat[d:2 * d]
        self.in_scale[...] = 1.0
        self._p0 = 2 * d

    def set_input_stats(self, mean, scale) -> None:
        self.in_mean[...] = mean
        self.in_scale[...] = scale

    def fit_input_stats(self, stats: InputStats) -> None:
        self.set_input_stats(*stats.mean_scale())

    def trainable_mask(self) -> np.ndarray:
        mask = np.ones(self.flat.shape[0], dtype=bool)
        mask[:self._p0] = False
        return mask

    def _prep(self, X):
        return (X - self.in_mean) / self.in_scale

    @property
    def dim(self) -> int:
        return self.arch.dim

    @property
    def arch_id(self) -> str:
        return self.arch.arch_id

    def to_params(self) -> ParamVector:
        return ParamVector(self.flat.copy(), self.arch_id)

    def load_params(self, pv: ParamVector) -> None:
        if pv.arch_id != self.arch_id:
            raise ArchError(f"arch id {pv.arch_id} does not match {self.arch_id}")
        if pv.values.shape != self.flat.shape:
            raise ArchError(f"expected {self.flat.shape[0]} parameters, got {pv.values.shape}")
        self.flat[...] = pv.values

    def _check_x(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != self.dim:
            raise ShapeError(f"expected inputs of width {self.dim}, got shape {X.shape}")
        return X

    def _check_batch(self, X, y):
        X = self._check_x(X)
        y = np.asarray(y)
        if y.shape != (X.shape[0],) or X.shape[0] == 0:
            raise ShapeError(f"batch of {X.shape[0]} inputs with labels of shape {y.shape}")
        return X, y

    def predict(self, X) -> np.ndarray:
        """Hard labels: 1 (clean) when P(clean) >= 0.5, else 0 (ransomware)."""
        return (self.predict_proba(X) >= 0.5).astype(np.int64)

    def loss_and_grad(self, X, y, **kw):
        loss, g = self._loss_grad(*self._check_batch(X, y), **kw)
        return loss, ParamVector(g, self.arch_id)


class LRModel(_FlatModel):
    """Logistic regression, ``P(clean) = sigmoid(w.x + b)``; zero-initialised."""

    kind = "lr"

    def __init__(self, dim: int):
        super().__init__(Arch("lr", dim), dim + 1)

    @property
    def w(self):
        return self.flat[self._p0:-1]

    @property
    def b(self):
        return self.flat[-1]

    def decision(self, X):
        X = self._prep(self._check_x(X))
        return X @ self.flat[self._p0:-1] + self.flat[-1]

    def predict_proba(self, X):
        return _sigmoid(self.decision(X))

    def _loss_grad(self, X, y):
        n = X.shape[0]
        X = self._prep(X)
        z = X @ self.flat[self._p0:-1] + self.flat[-1]
        yf = y.astype(np.float64)
        # mean binary cross-entropy, written as softplus(z) - y z
        loss = float(np.mean(np.logaddexp(0.0, z) - yf * z))
        gz = (_sigmoid(z) - yf) / n
        g = np.zeros_like(self.flat)
        g[self._p0:-1] = X.T @ gz
        g[-1] = gz.sum()
        return loss, g


class LinearSVMModel(_FlatModel):
    """Primal linear SVM: mean hinge loss plus ``reg/2 * |w|^2``.

    ``reg`` defaults to ``1 / (c * n)`` for a training set of ``n`` samples,
    which matches the usual ``C * sum(hinge) + |w|^2 / 2`` objective up to a
    constant factor. Clean is the +1 class.
    """

    kind = "svm"

    def __init__(self, dim: int, c: float = 1.0, reg: float | None = None):
        if c <= 0:
            raise ValueError("c must be > 0")
        super().__init__(Arch("svm", dim, c=c), dim + 1)
        self.c = c
        self.reg = reg

    @property
    def w(self):
        return self.flat[self._p0:-1]

    @property
    def b(self):
        return self.flat[-1]

    def decision(self, X):
        X = self._prep(self._check_x(X))
        return X @ self.flat[self._p0:-1] + self.flat[-1]

    def predict_proba(self, X):
        return _sigmoid(self.decision(X))

    def predict(self, X):
        return (self.decision(X) >= 0.0).astype(np.int64)

    def _loss_grad(self, X, y, reg: float | None = None):
        reg = (self.reg if self.reg is not None else 0.0) if reg is None else reg
        n = X.shape[0]
        X = self._prep(X)
        s = 2.0 * y.astype(np.float64) - 1.0
        w = self.flat[self._p0:-1]
        m = s * (X @ w + self.flat[-1])
        active = m < 1.0
        loss = float(np.mean(np.where(active, 1.0 - m, 0.0)) + 0.5 * reg * (w @ w))
        gz = np.where(active, -s, 0.0) / n
        g = np.zeros_like(self.flat)
        g[self._p0:-1] = X.T @ gz + reg * w
        g[-1] = gz.sum()
        return loss, g


class FNNModel(_FlatModel):
    """Feed-forward net: hidden blocks of linear -> batch norm -> ReLU, then softmax.

    Parameter layout per hidden block: ``W (in, out)``, ``b``, ``gamma``,
    ``beta``, ``running_mean``, ``running_var``; then the output ``W``, ``b``.
    Running statistics live in the flat vector so federation averages them;
    their gradient slots are always zero.
    """

    kind = "fnn"

    def __init__(self, dim: int, hidden=DEFAULT_HIDDEN, n_classes: int = 2,
                 eps: float = 1e-5, momentum: float = 0.1, seed: int = 0):
        arch = Arch("fnn", dim, hidden, bn_eps=eps, bn_momentum=momentum)
        self.eps = eps
        self.momentum = momentum
        self.sizes = (dim, *arch.hidden)
        self.n_classes = n_classes
        layout, off = [], 2 * dim
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            blk = {}
            for name, shape in (("W", (fan_in, fan_out)), ("b", (fan_out,)),
                                ("gamma", (fan_out,)), ("beta", (fan_out,)),
                                ("rmean", (fan_out,)), ("rvar", (fan_out,))):
                size = int(np.prod(shape))
                blk[name] = (off, shape)
                off += size
            layout.append(blk)
        out = {"W": (off, (self.sizes[-1], n_classes))}
        off += self.sizes[-1] * n_classes
        out["b"] = (off, (n_classes,))
        off += n_classes
        super().__init__(arch, off - 2 * dim)
        self._layout = layout
        self._out_layout = out
        self.blocks = [{k: self._view(*v) for k, v in blk.items()} for blk in layout]
        self.out = {k: self._view(*v) for k, v in out.items()}
        self.init_params(seed)

    def _view(self, off, shape):
        return self.flat[off:off + int(np.prod(shape))].reshape(shape)

    def init_params(self, seed: int) -> None:
        """He-uniform weights, zero biases, unit BN gain, unit running variance."""
        rng = np.random.default_rng(seed)
        for blk in self.blocks + [self.out]:
            fan_in = blk["W"].shape[0]
            lim = np.sqrt(6.0 / fan_in)
            blk["W"][...] = rng.uniform(-lim, lim, blk["W"].shape)
            blk["b"][...] = 0.0
            if "gamma" in blk:
                blk["gamma"][...] = 1.0
                blk["beta"][...] = 0.0
                blk["rmean"][...] = 0.0
                blk["rvar"][...] = 1.0

    def trainable_mask(self) -> np.ndarray:
        mask = super().trainable_mask()
        for lay in self._layout:
            for name in ("rmean", "rvar"):
                off, shape = lay[name]
                mask[off:off + int(np.prod(shape))] = False
        return mask

    def _forward(self, X, train: bool, update_stats: bool):
        h = self._prep(X)
        caches = []
        for blk in self.blocks:
            z = h @ blk["W"] + blk["b"]
            if train:
                mu = z.mean(axis=0)
                var = z.var(axis=0)
                if update_stats:
                    n = z.shape[0]
                    unbiased = var * (n / (n - 1)) if n > 1 else var
                    m = self.momentum
                    blk["rmean"][...] = (1.0 - m) * blk["rmean"] + m * mu
                    blk["rvar"][...] = (1.0 - m) * blk["rvar"] + m * unbiased
            else:
                mu, var = blk["rmean"], blk["rvar"]
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = (z - mu) * inv_std
            y = blk["gamma"] * xhat + blk["beta"]
            a = np.maximum(y, 0.0)
            caches.append((h, xhat, inv_std, y))
            h = a
        logits = h @ self.out["W"] + self.out["b"]
        return logits, h, caches

    @staticmethod
    def _softmax(logits):
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict_proba(self, X, train: bool = False):
        X = self._check_x(X)
        logits, _, _ = self._forward(X, train=train, update_stats=False)
        return self._softmax(logits)[:, 1]

    def _loss_grad(self, X, y, update_stats: bool = True):
        n = X.shape[0]
        logits, h_last, caches = self._forward(X, train=True, update_stats=update_stats)
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        yi = y.astype(np.int64)
        loss = float(-logp[np.arange(n), yi].mean())
        g = np.zeros_like(self.flat)
        gv = lambda off, shape: g[off:off + int(np.prod(shape))].reshape(shape)  # noqa: E731

        d = np.exp(logp)
        d[np.arange(n), yi] -= 1.0
        d /= n
        gv(*self._out_layout["W"])[...] = h_last.T @ d
        gv(*self._out_layout["b"])[...] = d.sum(axis=0)
        dh = d @ self.out["W"].T
        for blk, lay, (h_in, xhat, inv_std, yb) in zip(
                reversed(self.blocks), reversed(self._layout), reversed(caches)):
            dy = dh * (yb > 0.0)
            gv(*lay["gamma"])[...] = (dy * xhat).sum(axis=0)
            gv(*lay["beta"])[...] = dy.sum(axis=0)
            dxhat = dy * blk["gamma"]
            dz = (inv_std / n) * (n * dxhat - dxhat.sum(axis=0)
                                  - xhat * (dxhat * xhat).sum(axis=0))
            gv(*lay["W"])[...] = h_in.T @ dz
            gv(*lay["b"])[...] = dz.sum(axis=0)
            dh = dz @ blk["W"].T
        return loss, g


# ----------------------------------------------------------- functional API

def build_model(kind: str, dim: int, seed: int = 0, **kw):
    return Arch(kind, dim, **kw).build(seed)


def _inputs(x):
    if isinstance(x, FeatureVector):
        return x.inputs()
    if isinstance(x, Dataset):
        return x.inputs()
    return np.asarray(x, dtype=np.float64)


def predict_proba(model, x):
    """P(clean) for a FeatureVector (log-scaled first) or a raw input array."""
    p = model.predict_proba(_inputs(x))
    return float(p[0]) if np.ndim(x) == 1 or isinstance(x, FeatureVector) else p


def loss_and_grad(model, batch, **kw):
    """``batch`` is ``(X, y)`` of model inputs and labels (0 ransomware, 1 clean)."""
    X, y = batch
    return model.loss_and_grad(X, y, **kw)


def to_params(model) -> ParamVector:
    return model.to_params()


def from_params(arch, pv: ParamVector):
    """Rebuild a model from ``arch`` (an ``Arch`` or a template model)."""
    if not isinstance(arch, Arch):
        arch = arch.arch
    if pv.arch_id != arch.arch_id:
        raise ArchError(f"arch id {pv.arch_id} does not match {arch.arch_id}")
    model = arch.build()
    model.load_params(pv)
    return model


def clone(model):
    m = from_params(model.arch, model.to_params())
    if isinstance(model, LinearSVMModel):
        m.reg = model.reg
    return m


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


def epoch_order(n: int, seed: int, stream: int, epoch: int) -> np.ndarray:
    """Sample order for one epoch; a pure function of its arguments."""
    return np.random.default_rng([seed, stream, epoch]).permutation(n)


def train(model, data, config: TrainConfig, epoch_offset: int = 0, stream: int = 0):
    """Mini-batch SGD in place; returns ``model``.

    ``data`` is a ``Dataset`` (log-scaled inputs) or an ``(X, y)`` pair of
    model inputs. Epoch ``e`` shuffles with ``epoch_order(n, seed, stream,
    epoch_offset + e)``, so a run of ``k`` one-epoch calls with increasing
    offsets reproduces one ``k``-epoch call bitwise.
    """
    if isinstance(data, Dataset):
        X, y = data.inputs(), data.labels
    else:
        X, y = np.asarray(data[0], dtype=np.float64), np.asarray(data[1])
    n = X.shape[0]
    if n == 0:
        raise ShapeError("cannot train on an empty dataset")
    X = model._check_x(X)
    kw = {}
    if isinstance(model, LinearSVMModel):
        kw["reg"] = model.reg if model.reg is not None else 1.0 / (model.c * n)
    lr, bs = config.learning_rate, config.batch_size
    for e in range(config.epochs):
        perm = epoch_order(n, config.seed, stream, epoch_offset + e)
        for s in range(0, n, bs):
            idx = perm[s:s + bs]
            _, g = model._loss_grad(X[idx], y[idx], **kw)
            model.flat -= lr * g
    return model


# --------------------------------------------------------------- checkpoints

def save_checkpoint(model, path) -> None:
    """JSON header line followed by the raw little-endian float64 payload."""
    header = {
        "format_version": CHECKPOINT_VERSION,
        "kind": model.kind,
        "arch_id": model.arch_id,
        "D": model.dim,
        "arch": model.arch.describe(),
        "n_params": int(model.flat.shape[0]),
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(model.flat.astype("<f8").tobytes())


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    head, _, payload = raw.partition(b"\n")
    header = json.loads(head.decode("utf-8"))
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ArchError(f"unsupported checkpoint version {header.get('format_version')}")
    a = header["arch"]
    arch = Arch(a["kind"], a["dim"], tuple(a.get("hidden", DEFAULT_HIDDEN)), a.get("c", 1.0),
                a.get("bn_eps", 1e-5), a.get("bn_momentum", 0.1))
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    if values.shape[0] != header["n_params"]:
        raise ArchError("checkpoint payload length does not match header")
    return from_params(arch, ParamVector(values, header["arch_id"]))
