"""Pre-exit predictor: an MLP over superficial (layer-N) hidden states.

The predictor is a plain sklearn classifier over exit classes 1..L. Exits at
or before N are meaningless once N layers have already run, so targets are
clamped up to N+1 for training and scoring, and predictions are clamped into
[N+1, L].
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import _binio
from .numerics import Rng, derive_seed

PRED_MAGIC = b"EMBP"
PRED_VERSION = 1


@dataclass
class TrainReport:
    epochs: int
    final_cross_entropy: float
    exit_accuracy: float
    tolerance_accuracy: float
    mean_predicted: float
    mean_actual: float


def superficial_embed(stack, modality: str, raw, n_superficial: int) -> np.ndarray:
    """Hidden state after the first ``n_superficial`` layers (pre-head)."""
    if not 1 <= n_superficial < stack.num_layers:
        raise ValueError(f"n_superficial must be in [1, {stack.num_layers - 1}], got {n_superficial}")
    return stack.forward_range(modality, 0, n_superficial, stack.embed_input(modality, raw))


class ExitPredictor(ClassifierMixin, BaseEstimator):
    """Two-layer ReLU MLP trained by full-batch gradient descent on softmax
    cross-entropy.

    Parameters
    ----------
    n_superficial : int
        Number of encoder layers already computed when the predictor runs.
    num_layers : int
        Encoder depth L; the model scores exit classes 1..L.
    hidden : int
        Width of the hidden layer.
    learning_rate, epochs : float, int
        Plain gradient-descent settings.
    seed : int
        Seed for the weight initialization.
    """

    def __init__(self, n_superficial=3, num_layers=12, hidden=32, learning_rate=0.5, epochs=400, seed=0):
        self.n_superficial = n_superficial
        self.num_layers = num_layers
        self.hidden = hidden
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.seed = seed

    def _check_params(self):
        if self.num_layers < 2:
            raise ValueError("num_layers must be >= 2")
        if not 0 <= self.n_superficial < self.num_layers:
            raise ValueError("n_superficial must be in [0, num_layers)")
        if self.hidden < 1 or self.epochs < 0 or self.learning_rate <= 0:
            raise ValueError("hidden >= 1, epochs >= 0 and learning_rate > 0 required")

    def clamp(self, exits) -> np.ndarray:
        return np.clip(np.asarray(exits, dtype=np.int64), self.n_superficial + 1, self.num_layers)

    def _forward(self, Xs):
        pre = Xs @ self.w1_.T + self.b1_
        h = np.maximum(pre, 0.0)
        return pre, h, h @ self.w2_.T + self.b2_

    def fit(self, X, y):
        self._check_params()
        X, y = check_X_y(X, y, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        if X.shape[0] == 0:
            raise ValueError("empty training set")
        if y.min() < 1 or y.max() > self.num_layers:
            raise ValueError(f"exit labels must lie in [1, {self.num_layers}]")
        self.n_features_in_ = X.shape[1]
        self.classes_ = np.arange(1, self.num_layers + 1)
        self.mean_ = X.mean(axis=0)
        std = X.std(axis=0)
        self.scale_ = np.where(std > 0, std, 1.0)
        Xs = (X - self.mean_) / self.scale_

        rng = Rng(derive_seed(self.seed, "predictor-init"))
        d, h, L = X.shape[1], self.hidden, self.num_layers
        self.w1_ = rng.symmetric((h, d), 1.0 / np.sqrt(d)).astype(np.float64)
        self.b1_ = np.zeros(h)
        self.w2_ = rng.symmetric((L, h), 1.0 / np.sqrt(h)).astype(np.float64)
        self.b2_ = np.zeros(L)

        target = self.clamp(y) - 1
        onehot = np.zeros((len(y), L))
        onehot[np.arange(len(y)), target] = 1.0
        n = len(y)
        self.loss_curve_ = []
        for _ in range(self.epochs):
            pre, hid, logits = self._forward(Xs)
            p = _softmax(logits)
            self.loss_curve_.append(_cross_entropy(p, target))
            g_logits = (p - onehot) / n
            g_w2 = g_logits.T @ hid
            g_b2 = g_logits.sum(axis=0)
            g_hid = (g_logits @ self.w2_) * (pre > 0)
            g_w1 = g_hid.T @ Xs
            g_b1 = g_hid.sum(axis=0)
            self.w1_ -= self.learning_rate * g_w1
            self.b1_ -= self.learning_rate * g_b1
            self.w2_ -= self.learning_rate * g_w2
            self.b2_ -= self.learning_rate * g_b2

        p = _softmax(self._forward(Xs)[2])
        pred = self.predict(X)
        actual = self.clamp(y)
        self.report_ = TrainReport(
            epochs=self.epochs,
            final_cross_entropy=_cross_entropy(p, target),
            exit_accuracy=float(np.mean(pred == actual)),
            tolerance_accuracy=float(np.mean(np.abs(pred - actual) <= 1)),
            mean_predicted=float(pred.mean()),
            mean_actual=float(actual.mean()),
        )
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "w1_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return self._forward((X - self.mean_) / self.scale_)[2]

    def predict_proba(self, X) -> np.ndarray:
        return _softmax(self.decision_function(X))

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        # last maximum wins: ties go to the deeper exit
        L = scores.shape[1]
        raw = L - np.argmax(scores[:, ::-1], axis=1)
        return self.clamp(raw)

    def score(self, X, y, sample_weight=None) -> float:
        """Exact-exit accuracy against clamped targets."""
        pred = self.predict(X)
        hit = (pred == self.clamp(y)).astype(np.float64)
        return float(np.average(hit, weights=sample_weight))

    @property
    def nbytes(self) -> int:
        check_is_fitted(self, "w1_")
        return sum(a.size * 4 for a in (self.mean_, self.scale_, self.w1_, self.b1_, self.w2_, self.b2_))


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _cross_entropy(p: np.ndarray, target: np.ndarray) -> float:
    return float(-np.mean(np.log(np.maximum(p[np.arange(len(target)), target], 1e-300))))


def train_predictor(features, labels, n_superficial: int, num_layers: int, **params):
    """Fit an :class:`ExitPredictor`; returns ``(model, report)``."""
    y = np.array([getattr(lab, "exit", lab) for lab in labels], dtype=np.int64)
    features = np.asarray(features)
    if len(y) == 0 or features.shape[0] == 0:
        raise ValueError("empty training set")
    if features.shape[0] != len(y):
        raise ValueError("features and labels are not aligned")
    model = ExitPredictor(n_superficial=n_superficial, num_layers=num_layers, **params).fit(features, y)
    return model, model.report_


def predict_exit(model: ExitPredictor, feature) -> int:
    feature = np.asarray(feature, dtype=np.float64)
    return int(model.predict(feature.reshape(1, -1))[0])


def split_indices(n: int, seed: int, train_fraction: float = 0.8) -> tuple[np.ndarray, np.ndarray]:
    perm = Rng(derive_seed(seed, "split")).permutation(n)
    cut = int(round(train_fraction * n))
    return np.sort(perm[:cut]), np.sort(perm[cut:])


def sweep_superficial_depth(stack, corpus, labels, n_list, modality: str = "A", seed: int = 0, **params) -> dict:
    """Held-out exit accuracy for each superficial depth, on one seeded 80/20 split."""
    n_list = list(n_list)
    if not n_list:
        raise ValueError("n_list must not be empty")
    y = np.array([lab.exit for lab in labels], dtype=np.int64)
    train, test = split_indices(len(y), seed)
    traj = stack.hidden_trajectory(modality, corpus.raw[modality], upto=max(n_list))
    out = {}
    for n_sup in n_list:
        if not 1 <= n_sup < stack.num_layers:
            raise ValueError(f"superficial depth {n_sup} outside [1, {stack.num_layers - 1}]")
        X = traj[n_sup - 1]
        model = ExitPredictor(n_superficial=n_sup, num_layers=stack.num_layers, seed=seed, **params)
        model.fit(X[train], y[train])
        out[n_sup] = model.score(X[test], y[test])
    return out


# Checkpoint: magic "EMBP" | version | echo | N, L, hidden, d_in | f64 arrays


def save_predictor(model: ExitPredictor, path, echo: str = "") -> None:
    check_is_fitted(model, "w1_")
    w = _binio.Writer()
    w.raw(PRED_MAGIC)
    w.u32(PRED_VERSION)
    w.text(echo)
    for v in (model.n_superficial, model.num_layers, model.hidden, model.n_features_in_, model.epochs):
        w.u32(int(v))
    w.f64(model.learning_rate)
    w.u64(int(model.seed) & ((1 << 64) - 1))
    for a in (model.mean_, model.scale_, model.w1_, model.b1_, model.w2_, model.b2_):
        w.raw(np.ascontiguousarray(a, dtype="<f8").tobytes())
    Path(path).write_bytes(w.getvalue())


def load_predictor(path) -> ExitPredictor:
    data = Path(path).read_bytes()
    r = _binio.Reader(data)
    if r.raw(4) != PRED_MAGIC:
        raise ValueError(f"{path}: not a predictor checkpoint")
    if r.u32() != PRED_VERSION:
        raise ValueError(f"{path}: unsupported predictor version")
    r.text()
    n_sup, L, h, d, epochs = (r.u32() for _ in range(5))
    lr = r.f64()
    seed = r.u64()
    model = ExitPredictor(n_superficial=n_sup, num_layers=L, hidden=h, learning_rate=lr, epochs=epochs, seed=seed)

    def arr(shape):
        n = int(np.prod(shape))
        return np.frombuffer(r.raw(8 * n), dtype="<f8").astype(np.float64).reshape(shape)

    model.mean_, model.scale_ = arr((d,)), arr((d,))
    model.w1_, model.b1_ = arr((h, d)), arr((h,))
    model.w2_, model.b2_ = arr((L, h)), arr((L,))
    model.n_features_in_ = d
    model.classes_ = np.arange(1, L + 1)
    return model


def report_dict(report: TrainReport) -> dict:
    return asdict(report)
