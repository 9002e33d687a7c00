"""Seeded paired-modality toy corpus.

Every item has a latent vector ``z`` observed through one fixed linear mixing
matrix per modality. Difficulty scales a low-rank nuisance term added to each
observation. Hard items are pushed toward a shared few-dimensional subspace,
which crowds them together in embedding space and forces a deeper exit before
the item can be told apart from its neighbours.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _binio
from .numerics import DTYPE, Rng, derive_seed

CORPUS_MAGIC = b"EMBC"
CORPUS_VERSION = 1

DEFAULT_MODALITIES = ("A", "B")
DEFAULT_INPUT_DIMS = (24, 20)


def mixing_matrix(seed: int, modality: str, d_in: int, d_latent: int) -> np.ndarray:
    """Modality observation matrix G_m, shape (d_in, d_latent)."""
    rng = Rng(derive_seed(seed, "mixing", modality))
    return rng.symmetric((d_in, d_latent), 1.0 / math.sqrt(d_latent))


def nuisance_basis(seed: int, modality: str, d_in: int, rank: int) -> np.ndarray:
    rng = Rng(derive_seed(seed, "nuisance", modality))
    return rng.symmetric((d_in, rank), 1.0 / math.sqrt(d_in))


@dataclass
class CorpusItem:
    item_id: int
    latent: np.ndarray
    raw: dict[str, np.ndarray]
    difficulty: float

    @property
    def raw_a(self) -> np.ndarray:
        return self.raw["A"]

    @property
    def raw_b(self) -> np.ndarray:
        return self.raw["B"]


@dataclass
class Corpus:
    ids: np.ndarray
    latents: np.ndarray
    raw: dict[str, np.ndarray]
    difficulty: np.ndarray
    seed: int
    config: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> CorpusItem:
        return CorpusItem(
            item_id=int(self.ids[i]),
            latent=self.latents[i],
            raw={m: r[i] for m, r in self.raw.items()},
            difficulty=float(self.difficulty[i]),
        )

    @property
    def items(self) -> list[CorpusItem]:
        return [self[i] for i in range(len(self))]

    @property
    def modalities(self) -> tuple[str, ...]:
        return tuple(self.raw)

    def subset(self, index) -> "Corpus":
        index = np.asarray(index)
        return Corpus(
            ids=self.ids[index],
            latents=self.latents[index],
            raw={m: r[index] for m, r in self.raw.items()},
            difficulty=self.difficulty[index],
            seed=self.seed,
            config=dict(self.config),
        )


def generate(
    n: int,
    d_latent: int = 16,
    noise_low: float = 0.0,
    noise_high: float = 1.0,
    seed: int = 0,
    *,
    modalities=DEFAULT_MODALITIES,
    input_dims=DEFAULT_INPUT_DIMS,
    mixing_seed: int = 42,
    nuisance_rank: int = 1,
    nuisance_scale: float = 8.0,
    noise_floor: float = 0.1,
) -> Corpus:
    """Generate ``n`` paired items.

    ``raw_m = G_m z + difficulty * nuisance_scale * U_m g + noise_floor * w``
    (``w`` isotropic, unit variance per coordinate) where ``G_m`` and
    the nuisance basis ``U_m`` depend only on ``mixing_seed`` (shared with the
    encoder's pre-aligned input lift) and ``z``, ``g`` and the difficulty are
    drawn from ``seed``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if d_latent < 1:
        raise ValueError("d_latent must be >= 1")
    if not (0.0 <= noise_low <= noise_high <= 1.0):
        raise ValueError(f"need 0 <= noise_low <= noise_high <= 1, got {noise_low}, {noise_high}")
    if len(modalities) != len(input_dims):
        raise ValueError("modalities and input_dims must have the same length")
    if nuisance_rank < 1:
        raise ValueError("nuisance_rank must be >= 1")

    rng = Rng(derive_seed(seed, "corpus"))
    latents = rng.normal(n * d_latent).reshape(n, d_latent).astype(DTYPE)
    difficulty = rng.uniform(n, noise_low, noise_high).astype(DTYPE)
    raw = {}
    for m, d_in in zip(modalities, input_dims):
        g_mat = mixing_matrix(mixing_seed, m, d_in, d_latent).astype(np.float64)
        u_mat = nuisance_basis(mixing_seed, m, d_in, nuisance_rank).astype(np.float64)
        noise_rng = Rng(derive_seed(seed, "noise", m))
        g = noise_rng.normal(n * nuisance_rank).reshape(n, nuisance_rank)
        clean = latents.astype(np.float64) @ g_mat.T
        noise = (g @ u_mat.T) * (difficulty.astype(np.float64)[:, None] * nuisance_scale)
        floor = noise_rng.normal(n * d_in).reshape(n, d_in) * noise_floor
        raw[m] = (clean + noise + floor).astype(DTYPE)
    config = {
        "n": n,
        "d_latent": d_latent,
        "noise_low": noise_low,
        "noise_high": noise_high,
        "seed": seed,
        "modalities": list(modalities),
        "input_dims": list(input_dims),
        "mixing_seed": mixing_seed,
        "nuisance_rank": nuisance_rank,
        "nuisance_scale": nuisance_scale,
        "noise_floor": noise_floor,
    }
    return Corpus(
        ids=np.arange(n, dtype=np.int64),
        latents=latents,
        raw=raw,
        difficulty=difficulty,
        seed=seed,
        config=config,
    )


def save_corpus(corpus: Corpus, csv_path, bin_path=None, echo: str = "") -> None:
    """Write ``item_id,difficulty`` CSV plus the binary sidecar of raw vectors."""
    csv_path = Path(csv_path)
    bin_path = Path(bin_path) if bin_path else csv_path.with_suffix(".bin")
    echo = echo or json.dumps(corpus.config, sort_keys=True)
    with open(csv_path, "w", newline="") as f:
        f.write(f"# config: {echo}\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["item_id", "difficulty"])
        for i, d in zip(corpus.ids, corpus.difficulty):
            w.writerow([int(i), repr(float(d))])

    out = _binio.Writer()
    out.raw(CORPUS_MAGIC)
    out.u32(CORPUS_VERSION)
    out.text(echo)
    out.text(json.dumps(corpus.config, sort_keys=True))
    out.u64(corpus.seed & ((1 << 64) - 1))
    out.u32(len(corpus))
    out.u32(corpus.latents.shape[1])
    out.u32(len(corpus.raw))
    for m, r in corpus.raw.items():
        out.text(m)
        out.u32(r.shape[1])
    for i in corpus.ids:
        out.u64(int(i))
    out.array(corpus.difficulty)
    out.array(corpus.latents)
    for r in corpus.raw.values():
        out.array(r)
    Path(bin_path).write_bytes(out.getvalue())


def load_corpus(bin_path) -> Corpus:
    data = Path(bin_path).read_bytes()
    r = _binio.Reader(data)
    if r.raw(4) != CORPUS_MAGIC:
        raise ValueError(f"{bin_path}: not a corpus sidecar")
    version = r.u32()
    if version != CORPUS_VERSION:
        raise ValueError(f"{bin_path}: unsupported corpus version {version}")
    r.text()
    config = json.loads(r.text())
    seed = r.u64()
    n = r.u32()
    d_latent = r.u32()
    n_mod = r.u32()
    dims = [(r.text(), r.u32()) for _ in range(n_mod)]
    ids = np.array([r.u64() for _ in range(n)], dtype=np.int64)
    difficulty = r.array((n,))
    latents = r.array((n, d_latent))
    raw = {m: r.array((n, d)) for m, d in dims}
    return Corpus(ids=ids, latents=latents, raw=raw, difficulty=difficulty, seed=seed, config=config)
