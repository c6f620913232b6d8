import numpy as np
import pytest

from feddice.netflow import Dataset, Family, FlowRecord, Protocol, Provenance, Split
from feddice.synth import synthetic_splits

# (criterion, passed, detail) lines collected by the acceptance suite
ACCEPTANCE: list[tuple[int, bool | None, str]] = []


def record_criterion(number: int, passed: bool | None, detail: str) -> None:
    """Store one acceptance result; ``None`` marks a skipped criterion."""
    ACCEPTANCE.append((number, passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        status = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
        terminalreporter.write_line(f"criterion {number:>2}: {status}  {detail}")


@pytest.fixture(scope="session")
def splits_small():
    """(train, val, test) at 1% of the reference counts."""
    return synthetic_splits(scale=0.01, seed=0)


@pytest.fixture(scope="session")
def splits_desk():
    """(train, val, test) at the default desk scale of 5%."""
    return synthetic_splits(scale=0.05, seed=0)


def make_dataset(family, dim=4, seed=0, split=Split.TRAIN):
    """Dataset with random features and the given per-sample families."""
    family = np.asarray(family, dtype=np.int64)
    rng = np.random.default_rng(seed)
    n = family.shape[0]
    return Dataset(rng.random((n, dim)), family, np.arange(1, n + 1) * 10.0,
                   np.arange(n), split, Provenance.SYNTHETIC)


def flow(t, packets=10, load=1000.0, proto=Protocol.TCP, family=Family.CLEAN,
         src="10.0.0.5", dst="10.0.0.9", iat=0.1):
    return FlowRecord(t, src, dst, proto, packets, load, iat, family)


def loss_fn(model, X, y, **kw):
    """Loss only, without touching batch-norm running statistics."""
    if model.kind == "fnn":
        kw.setdefault("update_stats", False)
    return model._loss_grad(X, y, **kw)[0]


def finite_difference(model, X, y, h=1e-5, **kw):
    """Central differences over the trainable coordinates of ``model.flat``."""
    idx = np.nonzero(model.trainable_mask())[0]
    fd = np.zeros(idx.shape[0])
    for k, i in enumerate(idx):
        old = model.flat[i]
        model.flat[i] = old + h
        up = loss_fn(model, X, y, **kw)
        model.flat[i] = old - h
        down = loss_fn(model, X, y, **kw)
        model.flat[i] = old
        fd[k] = (up - down) / (2 * h)
    return idx, fd


def max_relative_error(analytic, numeric, floor=1e-7):
    """Largest |a - n| / max(|a|, |n|) over coordinates above ``floor``.

    Coordinates where both values are below ``floor`` are compared in
    absolute terms against ``floor * 1e-2`` and count as error 0 when they pass.
    """
    a = np.asarray(analytic)
    n = np.asarray(numeric)
    scale = np.maximum(np.abs(a), np.abs(n))
    big = scale > floor
    rel = np.zeros_like(a)
    rel[big] = np.abs(a[big] - n[big]) / scale[big]
    small_err = np.abs(a[~big] - n[~big])
    rel[~big] = np.where(small_err <= floor * 1e-2, 0.0, np.inf)
    return float(rel.max()) if rel.size else 0.0


def gradient_error(model, X, y, **kw):
    if model.kind == "fnn":
        kw.setdefault("update_stats", False)
    _, g = model._loss_grad(X, y, **kw)
    idx, fd = finite_difference(model, X, y, **kw)
    assert np.all(g[~model.trainable_mask()] == 0)
    return max_relative_error(g[idx], fd)


def random_point(kind, rng, dim=10, n=16, hidden=(6, 5, 4, 4, 3)):
    """A model with random parameters and input statistics, plus a batch."""
    from feddice.models import build_model
    model = build_model(kind, dim, seed=int(rng.integers(1 << 31)),
                        **({"hidden": hidden} if kind == "fnn" else {}))
    mask = model.trainable_mask()
    model.flat[mask] = rng.normal(0, 0.5, int(mask.sum()))
    model.set_input_stats(rng.normal(0, 0.3, dim), rng.uniform(0.5, 2.0, dim))
    X = rng.normal(0, 1, (n, dim))
    y = rng.integers(0, 2, n)
    return model, X, y
