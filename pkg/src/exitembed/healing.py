"""Progressive LoRA healing with a single shared adapter suite.

Exits are healed in ascending order. At each step only the LoRA pairs inside
that step's layer window are trainable; everything before the window is
frozen, as are all base weights and the output head. Because one suite serves
every exit, the layer-n state of an exit-n pass is still the layer-n
intermediate of any deeper pass.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .numerics import DTYPE, Rng, derive_seed, gelu, l2_normalize, matmul_rows

_GELU_C = math.sqrt(2.0 / math.pi)


class HealingDivergence(RuntimeError):
    """Per-epoch loss rose by more than the allowed tolerance."""


@dataclass
class StepSchedule:
    pivot: int
    steps: list  # [(exit, (layer, ...)), ...]

    @property
    def exits(self) -> list:
        return [e for e, _ in self.steps]


@dataclass
class HealConfig:
    epochs: int = 50
    learning_rate: float = 1e-2
    min_pool: int = 8
    modality: str = "A"
    tolerance: float = 1e-4


@dataclass
class HealReport:
    noop: bool = False
    loss_curves: dict = field(default_factory=dict)
    pool_sizes: dict = field(default_factory=dict)
    pre_alignment: dict = field(default_factory=dict)
    post_alignment: dict = field(default_factory=dict)


def lower_median(histogram: dict) -> int:
    values = sorted(int(e) for e, c in histogram.items() for _ in range(int(c)))
    if not values:
        raise ValueError("empty exit histogram")
    return values[(len(values) - 1) // 2]


def make_schedule(histogram: dict, num_layers: int) -> StepSchedule:
    """Singleton windows up to the pivot (median exit), then doubling windows."""
    if not histogram or sum(histogram.values()) == 0:
        raise ValueError("empty exit histogram")
    pivot = lower_median(histogram)
    steps = [(e, (e,)) for e in range(1, pivot + 1)]
    prev, size = pivot, 2
    while prev < num_layers:
        size = min(size, num_layers - prev)
        window = tuple(range(prev + 1, prev + size + 1))
        steps.append((window[-1], window))
        prev, size = window[-1], size * 2
    return StepSchedule(pivot, steps)


# -- float64 training path ---------------------------------------------------


def _gelu(u):
    t = np.tanh(_GELU_C * (u + 0.044715 * u**3))
    return 0.5 * u * (1.0 + t), t


def _gelu_grad(u, t):
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * u * u)


def _window_loss(blocks, window_params, h0, head, targets, scale, need_grad=True):
    """Loss of ``mean(1 - cos(head . h_e, F))`` through the window layers.

    ``window_params`` is a list of (A, B) float64 arrays, one per window layer;
    ``blocks`` the matching base LayerBlocks. Returns (loss, grads).
    """
    cache = []
    h = h0
    for blk, (a, b) in zip(blocks, window_params):
        u = h @ blk.w_up.T.astype(np.float64)
        g, t = _gelu(u)
        ah = h @ a.T
        out = h + g @ blk.w_down.T.astype(np.float64) + scale * (ah @ b.T)
        cache.append((h, u, t, g, ah))
        h = out
    y = h @ head.T
    yn = np.linalg.norm(y, axis=1)
    fn = np.linalg.norm(targets, axis=1)
    safe = np.where(yn > 0, yn, 1.0)
    dots = np.sum(y * targets, axis=1)
    cos = np.where((yn > 0) & (fn > 0), dots / (safe * np.where(fn > 0, fn, 1.0)), 0.0)
    loss = float(np.mean(1.0 - cos))
    if not need_grad:
        return loss, None
    n = h.shape[0]
    f_unit = targets / np.where(fn > 0, fn, 1.0)[:, None]
    g_y = -(f_unit / safe[:, None] - (dots / np.where(fn > 0, fn, 1.0))[:, None] * y / (safe**3)[:, None]) / n
    g_h = g_y @ head
    grads = [None] * len(blocks)
    for k in range(len(blocks) - 1, -1, -1):
        blk, (a, b) = blocks[k], window_params[k]
        h_in, u, t, g, ah = cache[k]
        g_b = scale * g_h.T @ ah
        bt_g = g_h @ b
        g_a = scale * bt_g.T @ h_in
        g_u = (g_h @ blk.w_down.astype(np.float64)) * _gelu_grad(u, t)
        g_h = g_h + g_u @ blk.w_up.astype(np.float64) + scale * (bt_g @ a)
        grads[k] = (g_a, g_b)
    return loss, grads


def _hidden_before(stack, modality, raw, layer):
    """Deterministic float32 state entering ``layer`` (i.e. after layer-1)."""
    h = stack.embed_input(modality, raw)
    if layer > 1:
        h = stack.forward_range(modality, 0, layer - 1, h)
    return np.atleast_2d(h)


def alignment_by_exit(stack, modality, raw, targets) -> dict:
    """Mean cosine between each layer's coarse embedding and ``targets``."""
    traj = stack.hidden_trajectory(modality, raw)
    t = l2_normalize(np.asarray(targets, dtype=DTYPE)).astype(np.float64)
    out = {}
    for e, h in enumerate(traj, start=1):
        c = stack.apply_head(h).astype(np.float64)
        out[e] = float(np.mean(np.sum(c * t, axis=1)))
    return out


def heal(stack, corpus, labels, schedule: StepSchedule, cfg: HealConfig | None = None):
    """Return ``(healed_stack, report)``; the input stack is left untouched."""
    cfg = cfg or HealConfig()
    healed = stack.copy()
    report = HealReport()
    if stack.config.lora_rank == 0 or cfg.epochs == 0:
        report.noop = True
        return healed, report

    modality = cfg.modality
    raw = np.asarray(corpus.raw[modality], dtype=DTYPE)
    label_of = {lab.item_id: lab.exit for lab in labels}
    exits = np.array([label_of[int(i)] for i in corpus.ids])
    targets = stack.fine_embed(modality, raw).astype(np.float64)
    report.pre_alignment = alignment_by_exit(stack, modality, raw, targets)
    head = stack.head.astype(np.float64)
    scale = stack.config.lora_scale

    for e, window in schedule.steps:
        pool = np.flatnonzero(exits == e)
        if len(pool) < cfg.min_pool:
            pool = np.arange(len(raw))
        report.pool_sizes[e] = int(len(pool))
        blocks = [healed.blocks[modality][i - 1] for i in window]
        h0 = _hidden_before(healed, modality, raw[pool], window[0]).astype(np.float64)
        params = [(blk.lora_a.astype(np.float64), blk.lora_b.astype(np.float64)) for blk in blocks]
        curve = []
        for epoch in range(cfg.epochs):
            loss, grads = _window_loss(blocks, params, h0, head, targets[pool], scale)
            if curve and loss > curve[-1] + cfg.tolerance:
                raise HealingDivergence(
                    f"exit {e}: loss rose from {curve[-1]:.6f} to {loss:.6f} at epoch {epoch}"
                )
            curve.append(loss)
            params = [(a - cfg.learning_rate * ga, b - cfg.learning_rate * gb)
                      for (a, b), (ga, gb) in zip(params, grads)]
        final, _ = _window_loss(blocks, params, h0, head, targets[pool], scale, need_grad=False)
        if final > curve[-1] + cfg.tolerance:
            raise HealingDivergence(f"exit {e}: final loss {final:.6f} above {curve[-1]:.6f}")
        curve.append(final)
        for blk, (a, b) in zip(blocks, params):
            blk.lora_a = a.astype(DTYPE)
            blk.lora_b = b.astype(DTYPE)
        report.loss_curves[e] = curve

    report.post_alignment = alignment_by_exit(healed, modality, raw, targets)
    return healed, report


def gradient_check(stack, raw, targets, window, modality: str = "A", n_probes: int = 10,
                   seed: int = 0, eps: float = 1e-6) -> list:
    """Relative error between analytic and central-difference LoRA gradients.

    LoRA pairs in ``window`` are first randomized (a zero B would make every
    A-gradient vanish). Returns one relative error per probe.
    """
    rng = Rng(derive_seed(seed, "gradcheck"))
    blocks = [stack.blocks[modality][i - 1] for i in window]
    params = [(blk.lora_a.astype(np.float64), rng.symmetric(blk.lora_b.shape, 0.1).astype(np.float64))
              for blk in blocks]
    h0 = _hidden_before(stack, modality, raw, window[0]).astype(np.float64)
    head = stack.head.astype(np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    scale = stack.config.lora_scale
    _, grads = _window_loss(blocks, params, h0, head, targets, scale)

    errors = []
    picks = rng.integers(n_probes * 3, 1 << 30)
    for p in range(n_probes):
        k = int(picks[3 * p] % len(blocks))
        which = int(picks[3 * p + 1] % 2)
        mat = params[k][which]
        flat = int(picks[3 * p + 2] % mat.size)
        idx = np.unravel_index(flat, mat.shape)

        def loss_at(delta):
            trial = [(a.copy(), b.copy()) for a, b in params]
            trial[k][which][idx] += delta
            return _window_loss(blocks, trial, h0, head, targets, scale, need_grad=False)[0]

        numeric = (loss_at(eps) - loss_at(-eps)) / (2 * eps)
        analytic = grads[k][which][idx]
        denom = max(abs(numeric), abs(analytic), 1e-12)
        errors.append(abs(numeric - analytic) / denom)
    return errors


# -- prefix reuse ------------------------------------------------------------


@dataclass
class PrefixReuseReport:
    passed: bool
    n_inputs: int
    checked: int
    mismatched_layers: list


def verify_prefix_reuse(model, modality: str = "A", n_inputs: int = 50, seed: int = 0) -> PrefixReuseReport:
    """Bitwise check that every exit-n pass reproduces the full pass's layer n.

    ``model`` needs ``exit_hidden(modality, raw, n)``, ``hidden_trajectory``,
    ``num_layers`` and ``config``.
    """
    cfg = model.config
    raw = Rng(derive_seed(seed, "prefix-probe")).symmetric((n_inputs, cfg.input_dim(modality)))
    full = model.hidden_trajectory(modality, raw)
    bad = []
    checked = 0
    for n in range(1, model.num_layers):
        h = np.atleast_2d(model.exit_hidden(modality, raw, n))
        checked += n_inputs
        if h.tobytes() != full[n - 1].tobytes():
            bad.append(n)
    return PrefixReuseReport(not bad, n_inputs, checked, bad)


class PerExitSuiteStack:
    """Negative control: a separate LoRA suite per exit.

    An exit-n pass runs layers 1..n with suite n; the full pass uses suite L.
    Layer-n states of the two generally differ, so prefix reuse breaks.
    """

    def __init__(self, stack, seed: int = 0, modality: str = "A"):
        self.stack = stack
        self.config = stack.config
        self.num_layers = stack.num_layers
        rng = Rng(derive_seed(seed, "per-exit-suites"))
        d, r = stack.config.d_model, max(stack.config.lora_rank, 1)
        self.suites = {
            n: [(rng.symmetric((r, d), 1 / math.sqrt(d)), rng.symmetric((d, r), 0.1)) for _ in range(n)]
            for n in range(1, self.num_layers + 1)
        }
        self.scale = stack.config.lora_alpha / r

    def _run(self, modality, raw, n, suite):
        h = np.atleast_2d(self.stack.embed_input(modality, raw))
        states = []
        for i in range(1, n + 1):
            blk = self.stack.blocks[modality][i - 1]
            a, b = suite[i - 1]
            h = (h + matmul_rows(gelu(matmul_rows(h, blk.w_up)), blk.w_down)
                 + DTYPE(self.scale) * matmul_rows(matmul_rows(h, a), b))
            states.append(h)
        return states

    def exit_hidden(self, modality, raw, n):
        return self._run(modality, raw, n, self.suites[n])[-1]

    def hidden_trajectory(self, modality, raw):
        return np.stack(self._run(modality, raw, self.num_layers, self.suites[self.num_layers]))


class ProgressiveLoRAHealer(BaseEstimator):
    """Estimator wrapper: ``fit(raw_inputs, exit_labels)`` heals a copy of
    ``stack`` and exposes ``stack_``, ``schedule_`` and ``report_``."""

    def __init__(self, stack=None, modality="A", epochs=50, learning_rate=1e-2, min_pool=8, tolerance=1e-4):
        self.stack = stack
        self.modality = modality
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.min_pool = min_pool
        self.tolerance = tolerance

    def fit(self, X, y):
        from collections import Counter

        from .datagen import Corpus
        from .exit_oracle import ExitLabel

        if self.stack is None:
            raise ValueError("ProgressiveLoRAHealer needs an encoder stack")
        X = np.asarray(X, dtype=DTYPE)
        y = np.asarray(y, dtype=np.int64)
        if len(X) != len(y) or len(X) == 0:
            raise ValueError("X and y must be non-empty and aligned")
        ids = np.arange(len(X))
        corpus = Corpus(ids=ids, latents=np.zeros((len(X), 0), DTYPE), raw={self.modality: X},
                        difficulty=np.zeros(len(X), DTYPE), seed=0)
        labels = [ExitLabel(int(i), int(e)) for i, e in zip(ids, y)]
        self.schedule_ = make_schedule(dict(Counter(y.tolist())), self.stack.num_layers)
        cfg = HealConfig(self.epochs, self.learning_rate, self.min_pool, self.modality, self.tolerance)
        self.stack_, self.report_ = heal(self.stack, corpus, labels, self.schedule_, cfg)
        return self


def write_heal_csvs(report: HealReport, alignment_path, loss_path, echo: str = "") -> None:
    """``exit,pre_cosine,post_cosine`` and ``exit,epoch,loss`` tables."""
    import csv

    with open(alignment_path, "w", newline="") as fh:
        if echo:
            fh.write(f"# config: {echo}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["exit", "pre_cosine", "post_cosine"])
        for e in sorted(report.pre_alignment):
            w.writerow([e, repr(report.pre_alignment[e]), repr(report.post_alignment.get(e, report.pre_alignment[e]))])
    with open(loss_path, "w", newline="") as fh:
        if echo:
            fh.write(f"# config: {echo}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["exit", "epoch", "loss"])
        for e in sorted(report.loss_curves):
            for epoch, loss in enumerate(report.loss_curves[e]):
                w.writerow([e, epoch, repr(loss)])
