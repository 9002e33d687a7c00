"""Layerwise toy multimodal encoder.

Each modality has its own input lift and ``num_layers`` residual MLP blocks::

    x' = x + W_down gelu(W_up x) + [lora_on] (alpha / r) B (A x)

All modalities share one frozen output head that projects a d_model hidden
state to the unified space and L2-normalizes it. The same head serves every
exit, so coarse and fine embeddings live in one space.

The input lift is pre-aligned: it inverts the corpus generator's modality
mixing and re-embeds the latent with one projection shared by all modalities.
This is the toy stand-in for contrastive pretraining; it makes paired items of
different modalities land on the same hidden state when noise is absent.
"""
from __future__ import annotations

import copy
import json
import math
import zlib
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _binio
from .datagen import DEFAULT_INPUT_DIMS, DEFAULT_MODALITIES, mixing_matrix, nuisance_basis
from .numerics import DTYPE, Rng, derive_seed, gelu, l2_normalize, matmul_rows

CKPT_MAGIC = b"EMBR"
CKPT_VERSION = 1
INDEX_MAGIC = b"LIDX"


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 12
    d_model: int = 64
    unified_dim: int = 32
    modalities: tuple = DEFAULT_MODALITIES
    seed: int = 42
    lora_rank: int = 4
    lora_alpha: float = 8.0
    latent_dim: int = 16
    input_dims: tuple = DEFAULT_INPUT_DIMS
    residual_gain: float = 0.6
    denoise_rate: float = 0.2
    nuisance_rank: int = 1

    def __post_init__(self):
        object.__setattr__(self, "modalities", tuple(self.modalities))
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        self.validate()

    def validate(self) -> None:
        if self.num_layers < 2:
            raise ValueError("num_layers must be >= 2")
        if self.num_layers > 255:
            raise ValueError("num_layers must fit in one byte")
        if self.d_model < 1 or self.unified_dim < 1:
            raise ValueError("d_model and unified_dim must be positive")
        if self.unified_dim > self.d_model:
            raise ValueError("unified_dim must be <= d_model")
        if self.lora_rank < 0:
            raise ValueError("lora_rank must be >= 0")
        if not 0.0 <= self.denoise_rate <= 1.0:
            raise ValueError("denoise_rate must lie in [0, 1]")
        if self.nuisance_rank < 0 or 2 * self.nuisance_rank * len(self.modalities) > self.d_model:
            raise ValueError("nuisance_rank too large for d_model")
        if len(self.modalities) != len(self.input_dims):
            raise ValueError("modalities and input_dims must have the same length")
        if len(set(self.modalities)) != len(self.modalities):
            raise ValueError("modality tags must be unique")
        for m in self.modalities:
            if len(m) != 1 or not m.isascii():
                raise ValueError(f"modality tag {m!r} must be a single ASCII character")

    @property
    def lora_scale(self) -> float:
        return self.lora_alpha / self.lora_rank if self.lora_rank else 0.0

    def input_dim(self, modality: str) -> int:
        return self.input_dims[self.modalities.index(modality)]


@dataclass
class LayerBlock:
    w_up: np.ndarray
    w_down: np.ndarray
    lora_a: np.ndarray | None = None
    lora_b: np.ndarray | None = None


def block_forward(block: LayerBlock, x: np.ndarray, lora_scale: float, lora_on: bool = True) -> np.ndarray:
    """Apply one residual block to a (batch, d_model) state."""
    out = x + matmul_rows(gelu(matmul_rows(x, block.w_up)), block.w_down)
    if lora_on and block.lora_a is not None:
        delta = matmul_rows(matmul_rows(x, block.lora_a), block.lora_b)
        out = out + DTYPE(lora_scale) * delta
    return out


def _rows(x, dim: int, name: str = "x") -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=DTYPE)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise ValueError(f"{name} must have trailing dimension {dim}, got shape {np.shape(x)}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr, single


@dataclass
class ActivationSnapshot:
    item_id: int
    layer_index: int
    hidden: np.ndarray


@dataclass
class EncoderStack:
    config: EncoderConfig
    lifts: dict
    blocks: dict
    head: np.ndarray
    layer_calls: Counter = field(default_factory=Counter, compare=False, repr=False)

    @property
    def num_layers(self) -> int:
        return self.config.num_layers

    def _check_modality(self, modality: str) -> None:
        if modality not in self.blocks:
            raise KeyError(f"unknown modality {modality!r}")

    def embed_input(self, modality: str, raw) -> np.ndarray:
        self._check_modality(modality)
        x, single = _rows(raw, self.config.input_dim(modality), "raw")
        h = matmul_rows(x, self.lifts[modality])
        return h[0] if single else h

    def forward_layer(self, modality: str, i: int, x, lora_on: bool = True) -> np.ndarray:
        self._check_modality(modality)
        if not 1 <= i <= self.num_layers:
            raise IndexError(f"layer index {i} outside [1, {self.num_layers}]")
        h, single = _rows(x, self.config.d_model)
        self.layer_calls[(modality, i)] += h.shape[0]
        out = block_forward(self.blocks[modality][i - 1], h, self.config.lora_scale, lora_on)
        return out[0] if single else out

    def forward_range(self, modality: str, i: int, j: int, x, lora_on: bool = True) -> np.ndarray:
        if not 0 <= i < j <= self.num_layers:
            raise IndexError(f"bad layer range ({i}, {j}] for {self.num_layers} layers")
        h = x
        for k in range(i + 1, j + 1):
            h = self.forward_layer(modality, k, h, lora_on)
        return h

    def apply_head(self, hidden) -> np.ndarray:
        h, single = _rows(hidden, self.config.d_model, "hidden")
        out = l2_normalize(matmul_rows(h, self.head))
        return out[0] if single else out

    def coarse_embed(self, modality: str, raw, exit_layer: int, item_id: int = -1):
        """Embedding at ``exit_layer`` plus the pre-head snapshot at that layer.

        For a batch of inputs the snapshot's ``hidden`` holds one row per input.
        """
        if not 1 <= exit_layer <= self.num_layers:
            raise IndexError(f"exit {exit_layer} outside [1, {self.num_layers}]")
        h = self.forward_range(modality, 0, exit_layer, self.embed_input(modality, raw))
        return self.apply_head(h), ActivationSnapshot(item_id, exit_layer, h)

    def exit_hidden(self, modality: str, raw, n: int) -> np.ndarray:
        """Pre-head state of a standalone exit-``n`` pass."""
        return self.forward_range(modality, 0, n, self.embed_input(modality, raw))

    def fine_embed(self, modality: str, raw) -> np.ndarray:
        return self.coarse_embed(modality, raw, self.num_layers)[0]

    def hidden_trajectory(self, modality: str, raw, upto: int | None = None) -> np.ndarray:
        """Hidden states after every layer 1..upto, shape (upto, batch, d_model)."""
        upto = self.num_layers if upto is None else upto
        h = self.embed_input(modality, raw)
        h, _ = _rows(h, self.config.d_model)
        states = []
        for k in range(1, upto + 1):
            h = self.forward_layer(modality, k, h)
            states.append(h)
        return np.stack(states)

    def copy(self) -> "EncoderStack":
        return EncoderStack(
            config=self.config,
            lifts={m: v.copy() for m, v in self.lifts.items()},
            blocks={m: [copy.deepcopy(b) for b in bl] for m, bl in self.blocks.items()},
            head=self.head.copy(),
        )

    def weights_equal(self, other: "EncoderStack", include_lora: bool = True) -> bool:
        """Bitwise comparison of all (optionally non-LoRA) weights."""
        if self.config != other.config or self.head.tobytes() != other.head.tobytes():
            return False
        for m in self.blocks:
            if self.lifts[m].tobytes() != other.lifts[m].tobytes():
                return False
            for a, b in zip(self.blocks[m], other.blocks[m]):
                names = ["w_up", "w_down"] + (["lora_a", "lora_b"] if include_lora else [])
                for name in names:
                    x, y = getattr(a, name), getattr(b, name)
                    if (x is None) != (y is None):
                        return False
                    if x is not None and x.tobytes() != y.tobytes():
                        return False
        return True


def _nuisance_frame(cfg: EncoderConfig, proj: np.ndarray) -> np.ndarray:
    """Orthonormal basis (d_model, k) of every modality's lifted nuisance."""
    cols = []
    for m, d_in in zip(cfg.modalities, cfg.input_dims):
        g = mixing_matrix(cfg.seed, m, d_in, cfg.latent_dim).astype(np.float64)
        u = nuisance_basis(cfg.seed, m, d_in, cfg.nuisance_rank).astype(np.float64)
        cols.append(proj @ np.linalg.pinv(g) @ u)
    q, _ = np.linalg.qr(np.concatenate(cols, axis=1))
    return q


def init_encoder(cfg: EncoderConfig | None = None) -> EncoderStack:
    """Seeded stack. Residual blocks are drawn from one stream shared by all
    modalities, so every modality starts from the same backbone.

    With ``denoise_rate > 0`` the last ``2k`` hidden units of every block are
    paired as ``+v, -v`` so that ``gelu(u) - gelu(-u) = u`` makes them a linear
    map ``-rate * V V^T x`` that shrinks the corpus nuisance a little per layer.
    The remaining units only see the complement of ``V``, so nuisance never
    leaks into other directions and deeper exits carry cleaner embeddings.
    """
    cfg = cfg or EncoderConfig()
    d = cfg.d_model
    scale = 1.0 / math.sqrt(d)
    proj = Rng(derive_seed(cfg.seed, "latent-proj")).symmetric(
        (d, cfg.latent_dim), 1.0 / math.sqrt(cfg.latent_dim)
    ).astype(np.float64)
    frame = _nuisance_frame(cfg, proj) if cfg.denoise_rate > 0 and cfg.nuisance_rank > 0 else None
    lifts, blocks = {}, {}
    for m, d_in in zip(cfg.modalities, cfg.input_dims):
        g = mixing_matrix(cfg.seed, m, d_in, cfg.latent_dim).astype(np.float64)
        lifts[m] = (proj @ np.linalg.pinv(g)).astype(DTYPE)
        rng = Rng(derive_seed(cfg.seed, "blocks"))
        lora_rng = Rng(derive_seed(cfg.seed, "lora"))
        layer_list = []
        for _ in range(cfg.num_layers):
            w_up = rng.symmetric((d, d), scale)
            w_down = rng.symmetric((d, d), scale * cfg.residual_gain)
            if frame is not None:
                k = frame.shape[1]
                # random units read only the nuisance-free complement
                free = w_up[: d - 2 * k].astype(np.float64)
                w_up[: d - 2 * k] = (free - (free @ frame) @ frame.T).astype(DTYPE)
                w_up[d - 2 * k : d - k] = frame.T
                w_up[d - k :] = -frame.T
                w_down[:, d - 2 * k : d - k] = -cfg.denoise_rate * frame
                w_down[:, d - k :] = cfg.denoise_rate * frame
            a = b = None
            if cfg.lora_rank:
                a = lora_rng.symmetric((cfg.lora_rank, d), scale)
                b = np.zeros((d, cfg.lora_rank), dtype=DTYPE)
            layer_list.append(LayerBlock(w_up, w_down, a, b))
        blocks[m] = layer_list
    head = Rng(derive_seed(cfg.seed, "head")).symmetric((cfg.unified_dim, d), scale)
    return EncoderStack(cfg, lifts, blocks, head)


# ---------------------------------------------------------------------------
# Checkpoint / layer store file
# ---------------------------------------------------------------------------
#
# magic "EMBR" | version u32 | config fields | echo text
# per modality: lift, then per layer: w_up, w_down
# head
# LoRA suite: per modality, per layer: lora_a, lora_b   (absent when r == 0)
# crc32 u32 over everything above
# index table: magic "LIDX", then per (modality, layer) offsets of
#   w_up, w_down, lora_a, lora_b (u64, 0 when absent); then lift and head offsets
# trailer: u64 offset of the index table


def _config_to_bytes(w: _binio.Writer, cfg: EncoderConfig) -> None:
    w.u32(cfg.num_layers)
    w.u32(cfg.d_model)
    w.u32(cfg.unified_dim)
    w.u32(cfg.lora_rank)
    w.f64(cfg.lora_alpha)
    w.f64(cfg.residual_gain)
    w.f64(cfg.denoise_rate)
    w.u32(cfg.nuisance_rank)
    w.u64(cfg.seed & ((1 << 64) - 1))
    w.u32(cfg.latent_dim)
    w.u32(len(cfg.modalities))
    for m, d in zip(cfg.modalities, cfg.input_dims):
        w.u8(ord(m))
        w.u32(d)


def _config_from_reader(r: _binio.Reader) -> EncoderConfig:
    num_layers = r.u32()
    d_model = r.u32()
    unified = r.u32()
    rank = r.u32()
    alpha = r.f64()
    gain = r.f64()
    denoise = r.f64()
    nuis_rank = r.u32()
    seed = r.u64()
    latent = r.u32()
    n_mod = r.u32()
    mods, dims = [], []
    for _ in range(n_mod):
        mods.append(chr(r.u8()))
        dims.append(r.u32())
    return EncoderConfig(
        num_layers=num_layers, d_model=d_model, unified_dim=unified, modalities=tuple(mods),
        seed=seed, lora_rank=rank, lora_alpha=alpha, latent_dim=latent, input_dims=tuple(dims), residual_gain=gain,
        denoise_rate=denoise, nuisance_rank=nuis_rank,
    )


def checkpoint_bytes(stack: EncoderStack, echo: str = "") -> bytes:
    cfg = stack.config
    w = _binio.Writer()
    w.raw(CKPT_MAGIC)
    w.u32(CKPT_VERSION)
    _config_to_bytes(w, cfg)
    w.text(echo)
    offsets = {}
    for m in cfg.modalities:
        offsets[("lift", m)] = w.tell()
        w.array(stack.lifts[m])
        for i, blk in enumerate(stack.blocks[m], start=1):
            offsets[("w_up", m, i)] = w.tell()
            w.array(blk.w_up)
            offsets[("w_down", m, i)] = w.tell()
            w.array(blk.w_down)
    offsets["head"] = w.tell()
    w.array(stack.head)
    if cfg.lora_rank:
        for m in cfg.modalities:
            for i, blk in enumerate(stack.blocks[m], start=1):
                offsets[("lora_a", m, i)] = w.tell()
                w.array(blk.lora_a)
                offsets[("lora_b", m, i)] = w.tell()
                w.array(blk.lora_b)
    w.u32(zlib.crc32(w.getvalue()))
    index_at = w.tell()
    w.raw(INDEX_MAGIC)
    for m in cfg.modalities:
        for i in range(1, cfg.num_layers + 1):
            for name in ("w_up", "w_down", "lora_a", "lora_b"):
                w.u64(offsets.get((name, m, i), 0))
        w.u64(offsets[("lift", m)])
    w.u64(offsets["head"])
    w.u64(index_at)
    return w.getvalue()


def save_checkpoint(stack: EncoderStack, path, echo: str = "") -> None:
    Path(path).write_bytes(checkpoint_bytes(stack, echo))


def read_header(data: bytes) -> tuple[EncoderConfig, str, int]:
    r = _binio.Reader(data)
    if r.raw(4) != CKPT_MAGIC:
        raise ValueError("not an encoder checkpoint (bad magic)")
    version = r.u32()
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    cfg = _config_from_reader(r)
    echo = r.text()
    return cfg, echo, r.pos


def load_checkpoint(path) -> EncoderStack:
    data = Path(path).read_bytes()
    cfg, _, pos = read_header(data)
    r = _binio.Reader(data, pos)
    d = cfg.d_model
    lifts, blocks = {}, {}
    for m, d_in in zip(cfg.modalities, cfg.input_dims):
        lifts[m] = r.array((d, d_in))
        blocks[m] = [LayerBlock(r.array((d, d)), r.array((d, d))) for _ in range(cfg.num_layers)]
    head = r.array((cfg.unified_dim, d))
    if cfg.lora_rank:
        for m in cfg.modalities:
            for blk in blocks[m]:
                blk.lora_a = r.array((cfg.lora_rank, d))
                blk.lora_b = r.array((d, cfg.lora_rank))
    body_end = r.pos
    crc = r.u32()
    if crc != zlib.crc32(data[:body_end]):
        raise ValueError(f"{path}: checkpoint checksum mismatch")
    return EncoderStack(cfg, lifts, blocks, head)


def config_echo(cfg: EncoderConfig) -> str:
    return json.dumps(asdict(cfg), sort_keys=True)
