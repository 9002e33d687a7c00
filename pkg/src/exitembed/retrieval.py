"""Speculative multi-granularity retrieval over an :class:`EmbeddingStore`.

A query is embedded once; the head is applied at every granularity present in
the store. Round one ranks each exit group against the query embedding of the
same depth, the per-group winners are merged with duplicate resolution, and the
survivors are resumed from their cached activations to full depth before the
final ranking.
"""
from __future__ import annotations

import heapq
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .numerics import DTYPE, cosine_matrix
from .store import IntegrityError


@dataclass(frozen=True)
class Candidate:
    item_id: int
    granularity: int
    score: float
    rank: int


@dataclass
class QueryResult:
    ranking: list
    scores: list
    coarse_ranking: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    candidates: dict = field(default_factory=dict)

    def as_dict(self, timings: bool = True) -> dict:
        out = {
            "ranking": [int(i) for i in self.ranking],
            "scores": [float(s) for s in self.scores],
            "coarse_ranking": [int(i) for i in self.coarse_ranking],
            "candidates": dict(self.candidates),
        }
        if timings:
            out["timings"] = {k: float(v) for k, v in self.timings.items()}
        return out


def _order(scores, ids):
    """Indices sorted by score descending, then smaller id."""
    return sorted(range(len(ids)), key=lambda k: (-scores[k], ids[k]))


def record_granularity(rec, num_layers: int) -> int:
    return num_layers if rec.state == "fine" else rec.exit


def embed_query_multigranular(stack, modality: str, raw, exits) -> dict:
    """Query embeddings at each requested depth from a single forward pass."""
    exits = sorted({int(e) for e in exits})
    if not exits:
        raise ValueError("no granularities requested (empty store?)")
    if exits[0] < 1 or exits[-1] > stack.num_layers:
        raise ValueError(f"granularities must lie in [1, {stack.num_layers}]")
    traj = stack.hidden_trajectory(modality, raw, upto=exits[-1])
    single = np.ndim(raw) == 1
    out = {}
    for e in exits:
        emb = stack.apply_head(traj[e - 1])
        out[e] = emb[0] if single else emb
    return out


def speculative_filter(store, queries: dict, k1: int) -> dict:
    """Top-``k1`` coarse candidates per stored granularity."""
    if k1 < 1:
        raise ValueError("k1 must be >= 1")
    records, _ = store.snapshot()
    groups: dict[int, list] = {}
    for rec in records.values():
        groups.setdefault(record_granularity(rec, store.num_layers), []).append(rec)
    out = {}
    for g in sorted(groups):
        if g not in queries:
            raise ValueError(f"no query embedding for granularity {g}")
        recs = groups[g]
        ids = [r.item_id for r in recs]
        keys = np.stack([r.embedding for r in recs])
        scores = cosine_matrix(np.asarray(queries[g])[None, :], keys)[0]
        order = _order(scores, ids)[:k1]
        out[g] = [Candidate(ids[k], g, float(scores[k]), r) for r, k in enumerate(order)]
    return out


def global_verify(groups: dict, k2: int) -> list:
    """Merge per-granularity lists by score with duplicate-id resolution.

    Every group must already be sorted by (score desc, id asc). A duplicate id
    is skipped and the next candidate from its group takes its place.
    """
    if k2 < 1:
        raise ValueError("k2 must be >= 1")
    lists = [list(v) for _, v in sorted(groups.items())]
    heap = [(-lst[0].score, lst[0].item_id, g, 0) for g, lst in enumerate(lists) if lst]
    heapq.heapify(heap)
    seen, out = set(), []
    while heap and len(out) < k2:
        _, item_id, g, pos = heapq.heappop(heap)
        if item_id not in seen:
            seen.add(item_id)
            out.append(lists[g][pos])
        if pos + 1 < len(lists[g]):
            nxt = lists[g][pos + 1]
            heapq.heappush(heap, (-nxt.score, nxt.item_id, g, pos + 1))
    return out


def resume_fine(stack, store, item_ids) -> dict:
    """Full-depth embeddings for ``item_ids`` from stored state, read-only.

    Fine records are returned as stored; coarse records resume from their
    cached activation at the exit layer. A coarse record without a cache entry
    is an integrity violation.
    """
    out = {}
    pending: dict[tuple, list] = {}
    for i in item_ids:
        rec, entry = store.get(i)
        if rec.state == "fine":
            out[rec.item_id] = np.asarray(rec.embedding, dtype=DTYPE)
            continue
        if entry is None:
            raise IntegrityError(f"item {rec.item_id}: coarse record without cached activation")
        if entry.layer != rec.exit:
            raise IntegrityError(f"item {rec.item_id}: cache layer {entry.layer} != exit {rec.exit}")
        pending.setdefault((rec.modality, rec.exit), []).append((rec.item_id, entry.hidden()))
    L = stack.num_layers
    for (mod, e), rows in sorted(pending.items()):
        h = np.stack([r[1] for r in rows]).astype(DTYPE)
        if e < L:
            h = stack.forward_range(mod, e, L, h)
        emb = stack.apply_head(h)
        for (item_id, _), v in zip(rows, emb):
            out[item_id] = v
    return out


def fine_correct(stack, store, candidates, query_fine, upgrade: bool = True):
    """Resume candidates to full depth, optionally persist the upgrade, rank.

    Returns ``(ranking, scores, n_corrected)``.
    """
    candidates = list(candidates)
    if not candidates:
        raise ValueError("fine_correct needs at least one candidate")
    ids = [c.item_id for c in candidates]
    fine = resume_fine(stack, store, ids)
    coarse_ids = [i for i in ids if store.get(i)[0].state == "coarse"]
    if upgrade and coarse_ids:
        store.upgrade_many({i: fine[i] for i in coarse_ids})
    scores = cosine_matrix(np.asarray(query_fine)[None, :], np.stack([fine[i] for i in ids]))[0]
    order = _order(scores, ids)
    return [ids[k] for k in order], [float(scores[k]) for k in order], len(coarse_ids)


def query(stack, store, raw, modality: str = "B", k1: int = 10, k2: int = 10, upgrade: bool = True) -> QueryResult:
    """Speculative filter, global verify, fine correction."""
    if len(store) == 0:
        raise ValueError("cannot query an empty store")
    t0 = time.perf_counter()
    exits = set(store.list_exits()) | {stack.num_layers}
    q = embed_query_multigranular(stack, modality, raw, exits)
    t1 = time.perf_counter()
    groups = speculative_filter(store, q, k1)
    t2 = time.perf_counter()
    verified = global_verify(groups, k2)
    t3 = time.perf_counter()
    ranking, scores, corrected = fine_correct(stack, store, verified, q[stack.num_layers], upgrade)
    t4 = time.perf_counter()
    return QueryResult(
        ranking=ranking,
        scores=scores,
        coarse_ranking=[c.item_id for c in verified],
        timings={"embed": t1 - t0, "filter": t2 - t1, "verify": t3 - t2, "correct": t4 - t3},
        candidates={
            "round1": sum(len(v) for v in groups.values()),
            "verified": len(verified),
            "corrected": corrected,
        },
    )


def refine_all(stack, store, raw, modality: str = "B") -> tuple[list, list]:
    """Brute-force reference: refine every record and rank by fine score."""
    ids = sorted(store.ids)
    fine = resume_fine(stack, store, ids)
    q = embed_query_multigranular(stack, modality, raw, [stack.num_layers])[stack.num_layers]
    scores = cosine_matrix(np.asarray(q)[None, :], np.stack([fine[i] for i in ids]))[0]
    order = _order(scores, ids)
    return [ids[k] for k in order], [float(scores[k]) for k in order]


def recall_at(results, truth, k: int) -> float:
    """Fraction of queries whose true id is in the top ``k`` of its ranking.

    ``results`` holds rankings (id lists) or QueryResults aligned with ``truth``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    results = list(results)
    truth = list(truth)
    if not results:
        return 0.0
    if len(results) != len(truth):
        raise ValueError("results and truth are not aligned")
    hits = 0
    for res, t in zip(results, truth):
        ranking = res.ranking if isinstance(res, QueryResult) else res
        hits += int(int(t) in [int(i) for i in list(ranking)[:k]])
    return hits / len(results)


def write_report(path, query_ids, results, truth=None, echo: dict | None = None, timings: bool = True) -> dict:
    """JSON-lines report: optional config line, one line per query, summary."""
    summary = {"kind": "summary", "queries": len(results)}
    if truth is not None:
        for k in (1, 5, 10):
            summary[f"recall@{k}"] = recall_at(results, truth, k)
            summary[f"coarse_recall@{k}"] = recall_at([r.coarse_ranking for r in results], truth, k)
    with open(path, "w") as fh:
        if echo is not None:
            fh.write(json.dumps({"kind": "config", **echo}, sort_keys=True) + "\n")
        for n, (qid, res) in enumerate(zip(query_ids, results)):
            row = {"kind": "query", "query_id": int(qid), **res.as_dict(timings)}
            if truth is not None:
                row["truth"] = int(truth[n])
            fh.write(json.dumps(row, sort_keys=True) + "\n")
        fh.write(json.dumps(summary, sort_keys=True) + "\n")
    return summary
