"""Seeded desk-scale netflow generator standing in for the recorded dataset.

Each generated window holds the flows of one small subnet for one window
duration. Family signatures:

* clean: a few long TCP sessions to a fixed server pool, DNS/NTP over UDP,
  the occasional ARP request and ICMP echo.
* RW-WC: clean TCP/UDP background plus an SMB-style TCP fan-out burst, many
  one-to-three packet probes to distinct random hosts. No ARP, no ICMP.
* RW-PG: clean TCP/UDP background plus a similar TCP fan-out and sustained
  high-rate bulk UDP. No ARP, no ICMP.
* RW-PY / RW-BR: full clean background (so their TCP/UDP statistics look
  clean) plus an ARP sweep and short ICMP-like probes in the OTHER bucket.
  The two share the sub-pattern and differ only in rates and packet sizes.

WC and PG overlap on the TCP burst; PY and BR overlap on the ARP sweep; the
two pairs share nothing beyond the clean background.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .netflow import (
    REFERENCE_TOTALS, Family, FlowRecord, Protocol, WindowConfig, build_dataset,
)

_SERVERS = [f"10.1.1.{k}" for k in range(1, 21)]
_DNS = ["10.1.1.53", "10.1.1.123"]
_GATEWAY = "10.1.0.1"


def _lognormal(rng, median, sigma, n):
    return median * np.exp(sigma * rng.standard_normal(n))


def _scan_targets(rng, n):
    octets = rng.integers(0, 256, size=(n, 2))
    return [f"10.{2 + (a % 60)}.{b}.{(a * 7 + b) % 254 + 1}" for a, b in octets]


class _Window:
    """Accumulates flow tuples for one window before timestamps are drawn."""

    def __init__(self):
        self.rows = []

    def add(self, proto, src, dsts, packets, bpp, iat):
        for dst, p, b, i in zip(dsts, packets, bpp, iat):
            p = int(p)
            self.rows.append((proto, str(src), str(dst), p, float(round(p * b)), float(i)))


def _background(rng, w, hosts, scale, arp_icmp=True):
    n = rng.poisson(6 * scale) + 1
    w.add(Protocol.TCP, hosts[0] if len(hosts) == 1 else rng.choice(hosts),
          rng.choice(_SERVERS, n),
          np.maximum(1, np.round(_lognormal(rng, 20.0, 0.8, n))),
          rng.uniform(300, 1200, n), _lognormal(rng, 0.2, 0.5, n))
    n = rng.poisson(3 * scale)
    if n:
        w.add(Protocol.UDP, rng.choice(hosts), rng.choice(_DNS, n),
              rng.integers(1, 5, n), rng.uniform(70, 300, n), _lognormal(rng, 0.5, 0.5, n))
    if arp_icmp:
        n = rng.poisson(0.1)
        if n:
            w.add(Protocol.ARP, rng.choice(hosts), [_GATEWAY] * n,
                  np.ones(n), np.full(n, 42.0), np.zeros(n))
        n = rng.poisson(0.1)
        if n:
            w.add(Protocol.OTHER, rng.choice(hosts), rng.choice(_SERVERS, n),
                  rng.integers(1, 5, n), rng.uniform(64, 100, n), _lognormal(rng, 1.0, 0.3, n))


def _tcp_burst(rng, w, src, lo, hi, pk_lo, pk_hi, bpp_hi, iat):
    n = int(rng.integers(lo, hi + 1))
    w.add(Protocol.TCP, src, _scan_targets(rng, n), rng.integers(pk_lo, pk_hi + 1, n),
          rng.uniform(60, bpp_hi, n), _lognormal(rng, iat, 0.4, n))


def _arp_sweep(rng, w, src, lo, hi, pk_hi, iat, other_lo, other_hi):
    n = int(rng.integers(lo, hi + 1))
    w.add(Protocol.ARP, src, _scan_targets(rng, n), rng.integers(1, pk_hi + 1, n),
          rng.uniform(42, 60, n), _lognormal(rng, iat, 0.4, n))
    n = int(rng.integers(other_lo, other_hi + 1))
    w.add(Protocol.OTHER, src, _scan_targets(rng, n), rng.integers(2, 6, n),
          rng.uniform(90, 130, n), _lognormal(rng, 0.3, 0.3, n))


def window_flows(rng: np.random.Generator, family: Family, hosts: Sequence[str]):
    """Flow tuples ``(proto, src, dst, packets, load, iat)`` for one window.

    ``hosts[0]`` plays the infected host for ransomware families.
    """
    w = _Window()
    family = Family(family)
    src = hosts[0]
    if family == Family.CLEAN:
        _background(rng, w, hosts, 1.0)
    elif family == Family.RW_WC:
        _background(rng, w, hosts, 1.0, arp_icmp=False)
        _tcp_burst(rng, w, src, 25, 50, 1, 3, 75, 0.01)
    elif family == Family.RW_PG:
        _background(rng, w, hosts, 1.0, arp_icmp=False)
        _tcp_burst(rng, w, src, 20, 45, 1, 4, 100, 0.015)
        n = int(rng.integers(3, 9))
        w.add(Protocol.UDP, src, _scan_targets(rng, n), rng.integers(20, 81, n),
              rng.uniform(500, 1400, n), _lognormal(rng, 0.005, 0.4, n))
    elif family == Family.RW_PY:
        _background(rng, w, hosts, 1.0)
        _arp_sweep(rng, w, src, 20, 45, 2, 0.05, 3, 8)
    elif family == Family.RW_BR:
        _background(rng, w, hosts, 1.0)
        _arp_sweep(rng, w, src, 15, 35, 2, 0.08, 2, 6)
    return w.rows


def _counts(n_windows_per_family) -> dict[Family, int]:
    if isinstance(n_windows_per_family, Mapping):
        counts = {Family(k): int(v) for k, v in n_windows_per_family.items()}
    else:
        vals = list(n_windows_per_family)
        if len(vals) != len(Family):
            raise ValueError(f"expected {len(Family)} counts, got {len(vals)}")
        counts = {f: int(v) for f, v in zip(Family, vals)}
    for f in Family:
        counts.setdefault(f, 0)
        if counts[f] < 0:
            raise ValueError("window counts must be >= 0")
    return counts


def synthesize(profile_seed: int, n_windows_per_family, duration: float = 10.0,
               n_hosts: int = 40) -> list[FlowRecord]:
    """Generate window-aligned flow groups, one group per requested window.

    ``n_windows_per_family`` is a mapping ``Family -> count`` or a sequence
    of five counts in ``Family`` order. Window ``k`` covers
    ``(k * duration, (k + 1) * duration]``; family order across windows is a
    seeded shuffle. Output is sorted by start time.
    """
    counts = _counts(n_windows_per_family)
    rng = np.random.default_rng(profile_seed)
    order = np.concatenate([np.full(counts[f], int(f), dtype=np.int64) for f in Family])
    order = rng.permutation(order)
    hosts = [f"10.1.0.{k}" for k in range(10, 10 + n_hosts)]
    out: list[FlowRecord] = []
    for k, fam_code in enumerate(order):
        fam = Family(int(fam_code))
        n_bg = int(rng.integers(1, 4))
        pick = rng.choice(n_hosts, size=n_bg, replace=False)
        rows = window_flows(rng, fam, [hosts[i] for i in pick])
        offs = np.sort(rng.uniform(0.001, 0.999, len(rows)))
        base = k * duration
        for (proto, src, dst, pk, load, iat), u in zip(rows, offs):
            out.append(FlowRecord(base + u * duration, src, dst, proto, pk, load, iat, fam))
    return out


def reference_counts(scale: float) -> dict[Family, int]:
    """Per-family window counts of the reference dataset scaled by ``scale``."""
    if scale <= 0:
        raise ValueError("scale must be > 0")
    return {f: max(3, int(round(n * scale))) for f, n in REFERENCE_TOTALS.items()}


def synthetic_splits(scale: float = 0.05, seed: int = 0, config: WindowConfig = WindowConfig(),
                     split_ratios=(0.8, 0.1, 0.1)):
    """Synthesize reference-shaped traffic and return the (train, val, test) triple."""
    flows = synthesize(seed, reference_counts(scale), duration=config.duration)
    return build_dataset(flows, config, split_ratios, seed=seed)
