"""Exit-grouped batching with load/compute pipelined layerwise execution.

Weights are streamed from a :class:`LayerStore` one layer at a time. A loader
thread reads layer blocks into a two-slot queue while the compute thread runs
the current layer over the current batch.
"""
from __future__ import annotations

import queue
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _binio
from .encoder import INDEX_MAGIC, ActivationSnapshot, LayerBlock, block_forward, read_header
from .numerics import DTYPE, dequantize_int4, l2_normalize, matmul_rows, quantize_int4
from .store import EmbeddingRecord


@dataclass
class ExitGroup:
    exit: int
    item_ids: list
    features: np.ndarray | None = None


class LayerStore:
    """Random access to per-layer weight segments of an encoder checkpoint."""

    def __init__(self, path):
        self.path = Path(path)
        data = self.path.read_bytes()
        self.config, self.echo, _ = read_header(data)
        (index_at,) = np.frombuffer(data[-8:], dtype="<u8")
        r = _binio.Reader(data, int(index_at))
        if r.raw(4) != INDEX_MAGIC:
            raise ValueError(f"{path}: missing layer index table")
        self.offsets = {}
        for m in self.config.modalities:
            for i in range(1, self.config.num_layers + 1):
                self.offsets[(m, i)] = tuple(r.u64() for _ in range(4))
            self.offsets[("lift", m)] = r.u64()
        self.offsets["head"] = r.u64()
        self.loads = Counter()

    @property
    def num_layers(self) -> int:
        return self.config.num_layers

    def load_layer(self, modality: str, i: int) -> LayerBlock:
        if (modality, i) not in self.offsets:
            raise IndexError(f"no layer {i} for modality {modality!r}")
        d, r = self.config.d_model, self.config.lora_rank
        up, down, la, lb = self.offsets[(modality, i)]
        with open(self.path, "rb") as f:
            block = LayerBlock(_binio.read_array_at(f, up, (d, d)), _binio.read_array_at(f, down, (d, d)))
            if r:
                block.lora_a = _binio.read_array_at(f, la, (r, d))
                block.lora_b = _binio.read_array_at(f, lb, (d, r))
        self.loads[(modality, i)] += 1
        return block

    def load_lift(self, modality: str) -> np.ndarray:
        with open(self.path, "rb") as f:
            return _binio.read_array_at(
                f, self.offsets[("lift", modality)], (self.config.d_model, self.config.input_dim(modality))
            )

    def load_head(self) -> np.ndarray:
        with open(self.path, "rb") as f:
            return _binio.read_array_at(f, self.offsets["head"], (self.config.unified_dim, self.config.d_model))


@dataclass
class PipelineStats:
    load_seconds: list = field(default_factory=list)
    compute_seconds: list = field(default_factory=list)
    wall_seconds: float = 0.0
    modeled_seconds: float = 0.0
    layer_invocations: Counter = field(default_factory=Counter)
    sessions: int = 0
    step_shapes: list = field(default_factory=list)
    pipelined: bool = True

    @property
    def serial_seconds(self) -> float:
        return float(sum(self.load_seconds) + sum(self.compute_seconds))

    @property
    def overlap_efficiency(self) -> float:
        serial = self.serial_seconds
        if serial <= 0:
            return 0.0
        return min(1.0, max(0.0, 1.0 - self.wall_seconds / serial))

    def analytic_seconds(self, load_s: float, compute_s: float) -> float:
        """Model time of the executed plan with constant per-load and
        per-batch-compute costs (what cost injection sleeps for)."""
        total = 0.0
        for shape in self.step_shapes:
            loads = [load_s] * len(shape)
            computes = [compute_s * k for k in shape]
            if self.pipelined:
                total += pipeline_makespan(loads, computes)
            else:
                total += sum(loads) + sum(computes)
        return total

    def as_dict(self) -> dict:
        return {
            "steps": len(self.load_seconds),
            "sessions": self.sessions,
            "load_seconds": sum(self.load_seconds),
            "compute_seconds": sum(self.compute_seconds),
            "wall_seconds": self.wall_seconds,
            "serial_seconds": self.serial_seconds,
            "modeled_seconds": self.modeled_seconds,
            "overlap_efficiency": self.overlap_efficiency,
        }


def pipeline_makespan(loads, computes) -> float:
    """Finish time of a two-stage load->compute flow shop.

    Step k can compute once its layer is loaded and step k-1 has finished
    computing; the loader never waits. For uniform costs this reduces to
    ``max(sum(loads), sum(computes)) + min(load, compute)``.
    """
    load_done = compute_done = 0.0
    for ld, cp in zip(loads, computes):
        load_done += ld
        compute_done = max(compute_done, load_done) + cp
    return compute_done


def plan_batches(item_ids, exits, max_batch: int, features=None) -> list[ExitGroup]:
    """Stable partition by exit, chunked to ``max_batch``, ascending exit order."""
    if max_batch < 1:
        raise ValueError("max_batch must be >= 1")
    item_ids = list(item_ids)
    exits = [int(e) for e in exits]
    if len(item_ids) != len(exits):
        raise ValueError("item_ids and exits are not aligned")
    members: dict[int, list[int]] = {}
    for pos, e in enumerate(exits):
        members.setdefault(e, []).append(pos)
    groups = []
    for e in sorted(members):
        pos = members[e]
        for start in range(0, len(pos), max_batch):
            chunk = pos[start : start + max_batch]
            feats = None if features is None else np.asarray(features)[chunk]
            groups.append(ExitGroup(e, [item_ids[p] for p in chunk], feats))
    return groups


class _Stop:
    def __init__(self, error=None):
        self.error = error


def _run_steps(store: LayerStore, modality: str, steps, states: dict, stats: PipelineStats,
               pipeline: bool, inject_load: float | None, inject_compute: float | None) -> None:
    """Execute ``steps`` = [(layer, [batch_key, ...]), ...] in order.

    Each step loads ``layer`` once and advances every listed batch state
    ``states[key]`` (a (batch, d_model) array) by that layer.
    """
    lora_scale = store.config.lora_scale

    def load(layer):
        t0 = time.perf_counter()
        block = store.load_layer(modality, layer)
        if inject_load is not None:
            time.sleep(inject_load)
        stats.load_seconds.append(time.perf_counter() - t0)
        return block

    def compute(layer, keys, block):
        t0 = time.perf_counter()
        for key in keys:
            states[key] = block_forward(block, states[key], lora_scale)
            stats.layer_invocations[layer] += states[key].shape[0]
            if inject_compute is not None:
                time.sleep(inject_compute)
        stats.compute_seconds.append(time.perf_counter() - t0)

    stats.step_shapes.append([len(keys) for _, keys in steps])
    n_before = len(stats.load_seconds)
    t_start = time.perf_counter()
    if not pipeline:
        for layer, keys in steps:
            compute(layer, keys, load(layer))
    else:
        slots: queue.Queue = queue.Queue(maxsize=2)

        def loader():
            try:
                for layer, _ in steps:
                    slots.put(load(layer))
                slots.put(_Stop())
            except BaseException as exc:  # handed to the compute side
                slots.put(_Stop(exc))

        th = threading.Thread(target=loader, name="layer-loader", daemon=True)
        th.start()
        for layer, keys in steps:
            block = slots.get()
            if isinstance(block, _Stop):
                th.join()
                raise OSError(f"layer loading failed: {block.error}") from block.error
            compute(layer, keys, block)
        tail = slots.get()
        th.join()
        if tail.error is not None:
            raise OSError(f"layer loading failed: {tail.error}") from tail.error
    stats.wall_seconds += time.perf_counter() - t_start
    new_loads = stats.load_seconds[n_before:]
    new_computes = stats.compute_seconds[n_before:]
    if pipeline:
        stats.modeled_seconds += pipeline_makespan(new_loads, new_computes)
    else:
        stats.modeled_seconds += sum(new_loads) + sum(new_computes)
    stats.pipelined = pipeline
    stats.sessions += 1


@dataclass
class PipelineResult:
    records: list
    snapshots: list
    stats: PipelineStats
    predicted_exits: dict
    superficial: dict


def run_embedding_pipeline(layer_store: LayerStore, corpus, predictor, n_superficial: int, max_batch: int,
                           modality: str = "A", pipeline: bool = True,
                           inject_load_s: float | None = None, inject_compute_s: float | None = None,
                           quantize_superficial: bool = False) -> PipelineResult:
    """Offline coarse embedding: superficial pass, pre-exit, grouped resume.

    Both passes are layer-major: layer ``i`` is streamed in once and applied
    to every batch still below its exit, while layer ``i+1`` loads.

    Returns records in corpus order, the matching pre-head snapshots at each
    item's exit, and timing statistics.
    """
    if predictor is None:
        raise ValueError("a trained predictor is required")
    if getattr(predictor, "n_superficial", n_superficial) != n_superficial:
        raise ValueError(
            f"predictor was trained for N={predictor.n_superficial}, pipeline asked for N={n_superficial}"
        )
    L = layer_store.num_layers
    if not 1 <= n_superficial < L:
        raise ValueError(f"n_superficial must be in [1, {L - 1}]")
    if max_batch < 1:
        raise ValueError("max_batch must be >= 1")

    ids = [int(i) for i in corpus.ids]
    raw = np.asarray(corpus.raw[modality], dtype=DTYPE)
    lift = layer_store.load_lift(modality)
    head = layer_store.load_head()
    stats = PipelineStats()

    # (1) superficial pass, layers 1..N, batch-major
    states = {}
    for b, start in enumerate(range(0, len(ids), max_batch)):
        states[b] = matmul_rows(raw[start : start + max_batch], lift)
    steps = [(layer, sorted(states)) for layer in range(1, n_superficial + 1)] if states else []
    _run_steps(layer_store, modality, steps, states, stats, pipeline, inject_load_s, inject_compute_s)
    superficial = np.concatenate([states[b] for b in sorted(states)]) if states else np.zeros((0, lift.shape[0]), DTYPE)

    # (2) pre-exit
    exits = predictor.predict(superficial) if len(ids) else np.zeros(0, dtype=np.int64)
    exits = np.clip(exits, n_superficial + 1, L)

    # layer-N states wait here between the two passes
    if quantize_superficial:
        parked = {i: quantize_int4(superficial[k]) for k, i in enumerate(ids)}
    else:
        parked = {i: superficial[k] for k, i in enumerate(ids)}

    def resume_state(i):
        v = parked[i]
        return dequantize_int4(v) if quantize_superficial else v

    # (3) grouped resume through layers N+1..e; each layer is loaded once and
    # run over every group that has not reached its exit yet
    groups = plan_batches(ids, exits, max_batch)
    states = {}
    for g, grp in enumerate(groups):
        states[g] = np.stack([resume_state(i) for i in grp.item_ids]).astype(DTYPE)
    top = max((grp.exit for grp in groups), default=n_superficial)
    steps = [(layer, [g for g, grp in enumerate(groups) if grp.exit >= layer])
             for layer in range(n_superficial + 1, top + 1)]
    _run_steps(layer_store, modality, steps, states, stats, pipeline, inject_load_s, inject_compute_s)

    # (4) head + snapshots
    hidden_by_id = {}
    for g, grp in enumerate(groups):
        for row, i in enumerate(grp.item_ids):
            hidden_by_id[i] = states[g][row]
    exit_by_id = dict(zip(ids, (int(e) for e in exits)))
    records, snapshots = [], []
    for i in ids:
        h = hidden_by_id[i]
        emb = l2_normalize(matmul_rows(h[None, :], head))[0]
        records.append(EmbeddingRecord(i, modality, exit_by_id[i], emb, "coarse"))
        snapshots.append(ActivationSnapshot(i, exit_by_id[i], h))
    for layer in range(1, L + 1):
        stats.layer_invocations.setdefault(layer, 0)
    return PipelineResult(records, snapshots, stats, exit_by_id, dict(zip(ids, superficial)))


def layers_saved(records, L: int, N: int) -> float:
    """Fraction of the full-depth layer budget skipped, counting the
    superficial pass as work every item pays once."""
    records = list(records)
    if not records:
        raise ValueError("layers_saved needs at least one record")
    exits = np.array([getattr(r, "exit", r) for r in records], dtype=np.float64)
    return float(1.0 - (N + np.mean(exits - N)) / L)


def reference_embeddings(stack, corpus, modality: str, exits: dict) -> dict:
    """Unscheduled per-sample path: one ``coarse_embed`` call per item."""
    out = {}
    for k, i in enumerate(corpus.ids):
        emb, snap = stack.coarse_embed(modality, corpus.raw[modality][k], exits[int(i)], int(i))
        out[int(i)] = (emb, snap.hidden)
    return out
