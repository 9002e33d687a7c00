"""Ground-truth exit labels.

An item's exit is the first layer whose coarse embedding is retrieved by the
item's own fine embedding: among the coarse embeddings of *all* items at that
layer, the one most similar to ``F_x`` must be ``C_x``. Ties go to the smaller
item id. Items never retrieved before the last layer get the full depth.
"""
from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .numerics import cosine_matrix


@dataclass(frozen=True)
class ExitLabel:
    item_id: int
    exit: int


def fine_embeddings(stack, corpus, modality: str) -> dict[int, np.ndarray]:
    fine = stack.fine_embed(modality, corpus.raw[modality])
    return {int(i): fine[k] for k, i in enumerate(corpus.ids)}


def coarse_by_layer(stack, corpus, modality: str) -> np.ndarray:
    """Coarse embeddings at every layer, shape (L, n, D_u)."""
    traj = stack.hidden_trajectory(modality, corpus.raw[modality])
    return np.stack([stack.apply_head(h) for h in traj])


def label_exits(stack, corpus, modality: str) -> list[ExitLabel]:
    ids = np.asarray(corpus.ids)
    order = np.argsort(ids, kind="stable")
    coarse = coarse_by_layer(stack, corpus, modality)[:, order]
    sorted_ids = ids[order]
    L = coarse.shape[0]
    fine = coarse[-1]
    n = len(sorted_ids)
    exits = np.full(n, L, dtype=np.int64)
    pending = np.ones(n, dtype=bool)
    for layer in range(1, L + 1):
        if not pending.any():
            break
        rows = np.flatnonzero(pending)
        sims = cosine_matrix(fine[rows], coarse[layer - 1])
        # argmax returns the first maximum, i.e. the smallest id among ties
        hit = np.argmax(sims, axis=1) == rows
        exits[rows[hit]] = layer
        pending[rows[hit]] = False
    by_id = dict(zip(sorted_ids.tolist(), exits.tolist()))
    return [ExitLabel(int(i), int(by_id[int(i)])) for i in ids]


def exit_histogram(labels) -> dict[int, int]:
    labels = list(labels)
    if not labels:
        raise ValueError("exit_histogram needs at least one label")
    counts = Counter(lab.exit if isinstance(lab, ExitLabel) else int(lab) for lab in labels)
    return dict(sorted(counts.items()))


def label_array(labels) -> np.ndarray:
    return np.array([lab.exit for lab in labels], dtype=np.int64)


def save_labels(labels, path, echo: str = "") -> None:
    with open(path, "w", newline="") as f:
        if echo:
            f.write(f"# config: {echo}\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["item_id", "exit"])
        for lab in labels:
            w.writerow([lab.item_id, lab.exit])


def load_labels(path) -> list[ExitLabel]:
    with open(path, newline="") as f:
        rows = [line for line in f if not line.startswith("#")]
    reader = csv.DictReader(rows)
    if reader.fieldnames != ["item_id", "exit"]:
        raise ValueError(f"{path}: expected header item_id,exit, got {reader.fieldnames}")
    return [ExitLabel(int(r["item_id"]), int(r["exit"])) for r in reader]
