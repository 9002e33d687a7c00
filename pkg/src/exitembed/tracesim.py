"""Trace-driven cost simulator for embedding policies.

Items arrive per a timestamped trace and queue for a single device. Whenever
the device is free it takes up to ``max_batch`` arrived items (FIFO) and runs
them layer-major with the same load/compute overlap model as the offline
runtime: each layer is loaded once per batch and applied to every item that
still needs it. The simulator never runs the encoder; per-item exits come from
a seeded draw over an exit distribution.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .numerics import Rng, derive_seed
from .scheduler import pipeline_makespan


class TraceError(ValueError):
    pass


@dataclass(frozen=True)
class TraceEvent:
    timestamp: float
    item_id: int
    modality: str


def load_trace(path) -> list[TraceEvent]:
    """Read ``timestamp,item_id,modality`` rows; ``#`` lines and a header row are skipped."""
    events = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].lstrip().startswith("#"):
                continue
            if row[0].strip() == "timestamp":
                continue
            if len(row) != 3:
                raise TraceError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            try:
                ts = float(row[0])
                item = int(row[1])
            except ValueError as exc:
                raise TraceError(f"{path}:{lineno}: {exc}") from None
            mod = row[2].strip()
            if not math.isfinite(ts) or ts < 0:
                raise TraceError(f"{path}:{lineno}: bad timestamp {row[0]!r}")
            if not mod:
                raise TraceError(f"{path}:{lineno}: empty modality")
            if events and ts < events[-1].timestamp:
                raise TraceError(f"{path}:{lineno}: timestamp {ts} goes backwards")
            events.append(TraceEvent(ts, item, mod))
    return events


def save_trace(events, path, echo: str = "") -> None:
    with open(path, "w", newline="") as fh:
        if echo:
            fh.write(f"# config: {echo}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", "item_id", "modality"])
        for ev in events:
            w.writerow([repr(float(ev.timestamp)), int(ev.item_id), ev.modality])


def synthetic_trace(n: int, rate: float, seed: int = 0, modality: str = "A") -> list[TraceEvent]:
    """Poisson arrivals at ``rate`` items/s."""
    if n < 0 or rate <= 0:
        raise ValueError("need n >= 0 and rate > 0")
    u = Rng(derive_seed(seed, "trace")).uniform(n)
    gaps = -np.log1p(-u) / rate
    ts = np.cumsum(gaps)
    return [TraceEvent(float(t), i, modality) for i, t in enumerate(ts)]


@dataclass(frozen=True)
class DeviceProfile:
    """Per-layer costs. Compute figures are per item; load figures per layer load.

    Defaults are synthetic, chosen to resemble a phone streaming weights from
    flash (loads are slow, each item-layer costs more energy than a load).
    """

    layer_compute_s: float = 0.01
    layer_load_s: float = 0.27
    layer_compute_j: float = 0.05
    layer_load_j: float = 0.02
    battery_j: float = 4000.0
    idle_w: float = 0.1

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v >= 0):
                raise ValueError(f"profile field {f.name} must be a finite non-negative number, got {v!r}")
        if self.battery_j <= 0:
            raise ValueError("battery_j must be positive")

    def scaled_energy(self, factor: float) -> "DeviceProfile":
        return DeviceProfile(self.layer_compute_s, self.layer_load_s, self.layer_compute_j * factor,
                             self.layer_load_j * factor, self.battery_j, self.idle_w)


def load_profile(path) -> DeviceProfile:
    names = {f.name for f in fields(DeviceProfile)}
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in names:
            raise ValueError(f"{path}:{lineno}: unknown profile key {key!r}")
        try:
            values[key] = float(val)
        except ValueError:
            raise ValueError(f"{path}:{lineno}: {key} is not a number: {val!r}") from None
    return DeviceProfile(**values)


def save_profile(profile: DeviceProfile, path) -> None:
    Path(path).write_text("".join(f"{k}={v!r}\n" for k, v in asdict(profile).items()))


@dataclass(frozen=True)
class Policy:
    kind: str  # "full", "fixed" or "pre-exit"
    exit: int | None = None
    n_superficial: int | None = None

    @classmethod
    def parse(cls, text: str) -> "Policy":
        """``full``, ``fixed:E`` or ``pre-exit:N``."""
        name, _, arg = text.partition(":")
        try:
            if name == "full" and not arg:
                return cls("full")
            if name == "fixed":
                return cls("fixed", exit=int(arg))
            if name == "pre-exit":
                return cls("pre-exit", n_superficial=int(arg))
        except ValueError:
            pass
        raise ValueError(f"bad policy {text!r}; use full, fixed:E or pre-exit:N")

    @property
    def label(self) -> str:
        if self.kind == "full":
            return "full"
        if self.kind == "fixed":
            return f"fixed:{self.exit}"
        return f"pre-exit:{self.n_superficial}"

    def validate(self, num_layers: int) -> None:
        if self.kind == "fixed":
            if self.exit is None or not 1 <= self.exit <= num_layers:
                raise ValueError(f"fixed exit must lie in [1, {num_layers}]")
        elif self.kind == "pre-exit":
            if self.n_superficial is None or not 0 <= self.n_superficial < num_layers:
                raise ValueError(f"pre-exit N must lie in [0, {num_layers - 1}]")
        elif self.kind != "full":
            raise ValueError(f"unknown policy kind {self.kind!r}")


@dataclass(frozen=True)
class SimReport:
    items: int
    embedded: int
    dropped: int
    batches: int
    layer_computes: int
    layer_loads: int
    compute_energy_j: float
    load_energy_j: float
    total_energy_j: float
    idle_energy_j: float
    charges: int
    busy_seconds: float
    end_seconds: float
    mean_backlog: float
    throughput: float


def _normalize_distribution(dist, num_layers: int) -> tuple[np.ndarray, np.ndarray]:
    exits = np.array(sorted(int(e) for e in dist), dtype=np.int64)
    weights = np.array([float(dist[e]) for e in sorted(dist, key=int)])
    if len(exits) == 0 or np.any(weights < 0) or weights.sum() <= 0:
        raise ValueError("exit distribution needs non-negative weights with positive mass")
    if exits[0] < 1 or exits[-1] > num_layers:
        raise ValueError(f"exit distribution support must lie in [1, {num_layers}]")
    return exits, np.cumsum(weights) / weights.sum()


def draw_exits(dist, n: int, seed: int, num_layers: int) -> np.ndarray:
    exits, cdf = _normalize_distribution(dist, num_layers)
    u = Rng(derive_seed(seed, "sim-exits")).uniform(n)
    pos = np.minimum(np.searchsorted(cdf, u, side="right"), len(exits) - 1)
    return exits[pos]


def mean_exit(dist) -> float:
    total = sum(float(w) for w in dist.values())
    return sum(int(e) * float(w) for e, w in dist.items()) / total


def _layers_per_item(policy: Policy, exits: np.ndarray, num_layers: int) -> np.ndarray:
    if policy.kind == "full":
        return np.full(len(exits), num_layers, dtype=np.int64)
    if policy.kind == "fixed":
        return np.full(len(exits), policy.exit, dtype=np.int64)
    # superficial N layers, then resume to the item's exit
    return np.maximum(exits, policy.n_superficial)


def _batch_cost(depths, profile: DeviceProfile) -> tuple[float, int, int]:
    """(duration, layer loads, item-layer computes) of one layer-major batch."""
    top = int(max(depths))
    depths = np.asarray(depths)
    active = [int(np.sum(depths >= layer)) for layer in range(1, top + 1)]
    loads = [profile.layer_load_s] * top
    computes = [profile.layer_compute_s * k for k in active]
    return pipeline_makespan(loads, computes), top, int(sum(active))


def simulate(policy, trace, profile: DeviceProfile, exit_distribution=None, num_layers: int = 12,
             horizon: float | None = None, seed: int = 0, max_batch: int = 16) -> SimReport:
    """Replay ``trace`` under ``policy``.

    A batch only runs if it finishes by ``horizon``; anything not embedded by
    then is dropped. Without a horizon the backlog is drained.
    """
    if isinstance(policy, str):
        policy = Policy.parse(policy)
    policy.validate(num_layers)
    if max_batch < 1:
        raise ValueError("max_batch must be >= 1")
    trace = list(trace)
    for a, b in zip(trace, trace[1:]):
        if b.timestamp < a.timestamp:
            raise TraceError("trace timestamps must be non-decreasing")
    if horizon is not None and trace and horizon < trace[-1].timestamp:
        raise ValueError("horizon must cover the whole trace")
    if policy.kind == "pre-exit" and exit_distribution is None:
        raise ValueError("pre-exit policy needs an exit distribution")
    n = len(trace)
    exits = (draw_exits(exit_distribution, n, seed, num_layers) if exit_distribution is not None
             else np.full(n, num_layers, dtype=np.int64))
    depth = _layers_per_item(policy, exits, num_layers)

    t = 0.0
    nxt = 0
    embedded = batches = loads = computes = 0
    busy = waiting = 0.0
    while nxt < n:
        t = max(t, trace[nxt].timestamp)
        ready = nxt
        while ready < n and trace[ready].timestamp <= t:
            ready += 1
        take = min(max_batch, ready - nxt)
        dur, n_loads, n_computes = _batch_cost(depth[nxt : nxt + take], profile)
        if horizon is not None and t + dur > horizon:
            break
        waiting += sum(t - trace[k].timestamp for k in range(nxt, nxt + take))
        t += dur
        busy += dur
        batches += 1
        loads += n_loads
        computes += n_computes
        embedded += take
        nxt += take

    end = horizon if horizon is not None else t
    # dropped items wait from arrival until the horizon
    waiting += sum(end - trace[k].timestamp for k in range(nxt, n))
    start = trace[0].timestamp if trace else 0.0
    span = end - start
    compute_e = computes * profile.layer_compute_j
    load_e = loads * profile.layer_load_j
    total = compute_e + load_e
    return SimReport(
        items=n,
        embedded=embedded,
        dropped=n - embedded,
        batches=batches,
        layer_computes=computes,
        layer_loads=loads,
        compute_energy_j=compute_e,
        load_energy_j=load_e,
        total_energy_j=total,
        idle_energy_j=profile.idle_w * max(0.0, span - busy),
        charges=math.ceil(total / profile.battery_j) if total > 0 else 0,
        busy_seconds=busy,
        end_seconds=end,
        mean_backlog=waiting / span if span > 0 else 0.0,
        throughput=embedded / span if span > 0 else 0.0,
    )


_RATIO_FIELDS = ("total_energy_j", "charges", "throughput", "busy_seconds", "layer_computes")


def compare(policies, trace, profile: DeviceProfile, exit_distribution=None, **kwargs) -> list[dict]:
    """Simulate each policy; ratios are relative to the first policy."""
    policies = [Policy.parse(p) if isinstance(p, str) else p for p in policies]
    if len(policies) < 2:
        raise ValueError("compare needs at least two policies")
    reports = [simulate(p, trace, profile, exit_distribution, **kwargs) for p in policies]
    base = reports[0]
    rows = []
    for p, r in zip(policies, reports):
        ratios = {}
        for f in _RATIO_FIELDS:
            b, v = getattr(base, f), getattr(r, f)
            ratios[f] = v / b if b else (1.0 if v == b else math.inf)
        rows.append({"policy": p.label, "report": r, "ratios": ratios})
    return rows


def default_policies(exit_distribution, n_superficial: int, num_layers: int) -> list[Policy]:
    """Full depth, fixed exit at the (rounded-up) mean exit, pre-exit."""
    fixed = min(num_layers, max(1, math.ceil(mean_exit(exit_distribution) - 1e-12)))
    return [Policy("full"), Policy("fixed", exit=fixed), Policy("pre-exit", n_superficial=n_superficial)]


def write_csv(rows, path, echo: str = "") -> None:
    names = [f.name for f in fields(SimReport)]
    with open(path, "w", newline="") as fh:
        if echo:
            fh.write(f"# config: {echo}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["policy", *names, *[f"ratio_{f}" for f in _RATIO_FIELDS]])
        for row in rows:
            rep = row["report"]
            w.writerow([row["policy"], *[_fmt(getattr(rep, k)) for k in names],
                        *[_fmt(row["ratios"][f]) for f in _RATIO_FIELDS]])


def write_jsonl(rows, path, echo: dict | None = None) -> None:
    with open(path, "w") as fh:
        if echo is not None:
            fh.write(json.dumps({"kind": "config", **echo}, sort_keys=True) + "\n")
        for row in rows:
            fh.write(json.dumps({"kind": "policy", "policy": row["policy"], **asdict(row["report"]),
                                 "ratios": row["ratios"]}, sort_keys=True) + "\n")


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else str(v)


DEFAULT_SCENARIO = {"items": 1000, "rate": 4.0, "n_superficial": 2, "max_batch": 16}


def default_scenario(exit_distribution, num_layers: int = 12, seed: int = 0):
    """Trace, profile and policy list of the standard three-way comparison."""
    trace = synthetic_trace(DEFAULT_SCENARIO["items"], DEFAULT_SCENARIO["rate"], seed)
    policies = default_policies(exit_distribution, DEFAULT_SCENARIO["n_superficial"], num_layers)
    return trace, DeviceProfile(), policies
