"""Reference perception model: a 784 -> hidden -> 4 tanh/softmax network.

Any classifier that maps a glyph to a categorical distribution over the
four symbols can stand in for it; the rest of the package only relies on
:func:`predict_proba`, :func:`classify_sequence` and :func:`embed`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .task import GLYPH_BYTES, N_SYMBOLS, EquationSample, to_string

INPUT_DIM = GLYPH_BYTES
PARAM_NAMES = ("W1", "b1", "W2", "b2")


@dataclass
class PerceptionModel:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    seed: int = 0

    @property
    def hidden(self) -> int:
        return self.b1.shape[0]

    @property
    def n_params(self) -> int:
        return sum(getattr(self, n).size for n in PARAM_NAMES)

    def params(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in PARAM_NAMES}

    def copy(self) -> "PerceptionModel":
        return PerceptionModel(*(getattr(self, n).copy() for n in PARAM_NAMES), seed=self.seed)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.params().values())


def init_model(hidden: int = 64, seed: int = 0) -> PerceptionModel:
    """Uniform init in +-1/sqrt(fan_in) for every layer."""
    rng = np.random.default_rng(seed)
    lim1 = 1.0 / np.sqrt(INPUT_DIM)
    lim2 = 1.0 / np.sqrt(hidden)
    return PerceptionModel(
        W1=rng.uniform(-lim1, lim1, (INPUT_DIM, hidden)),
        b1=rng.uniform(-lim1, lim1, hidden),
        W2=rng.uniform(-lim2, lim2, (hidden, N_SYMBOLS)),
        b2=rng.uniform(-lim2, lim2, N_SYMBOLS),
        seed=seed,
    )


def zero_model(hidden: int = 64) -> PerceptionModel:
    return PerceptionModel(
        np.zeros((INPUT_DIM, hidden)), np.zeros(hidden), np.zeros((hidden, N_SYMBOLS)), np.zeros(N_SYMBOLS)
    )


def _as_inputs(images) -> np.ndarray:
    X = np.asarray(images, dtype=np.float64)
    return X.reshape(-1, INPUT_DIM)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def hidden_activations(model: PerceptionModel, images) -> np.ndarray:
    X = _as_inputs(images)
    return np.tanh(X @ model.W1 + model.b1)


def predict_proba(model: PerceptionModel, images) -> np.ndarray:
    """Rows of symbol probabilities, one per image."""
    H = hidden_activations(model, images)
    return np.exp(_log_softmax(H @ model.W2 + model.b2))


def forward(model: PerceptionModel, image) -> np.ndarray:
    return predict_proba(model, image)[0]


@dataclass(frozen=True)
class PseudoLabel:
    """Per-position symbol distribution for one equation."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != N_SYMBOLS or len(p) == 0:
            raise ValueError("probs must be a nonempty (n, 4) matrix")
        if np.any(p < 0) or np.any(p > 1) or not np.allclose(p.sum(axis=1), 1.0, atol=1e-6):
            raise ValueError("rows of probs must be probability distributions")
        object.__setattr__(self, "probs", p)

    def __len__(self) -> int:
        return len(self.probs)

    @property
    def argmax_indices(self) -> list[int]:
        # np.argmax returns the first maximum, i.e. the lowest symbol index
        return [int(i) for i in np.argmax(self.probs, axis=1)]

    @property
    def argmax_symbols(self) -> str:
        return to_string(self.argmax_indices)

    @property
    def confidences(self) -> np.ndarray:
        return self.probs.max(axis=1)

    @property
    def mean_confidence(self) -> float:
        return float(self.confidences.mean())


def classify_sequence(model: PerceptionModel, sample: EquationSample) -> PseudoLabel:
    if sample.length == 0:
        raise ValueError("cannot classify an empty equation")
    return PseudoLabel(predict_proba(model, sample.images()))


@dataclass(frozen=True)
class Embedding:
    vector: np.ndarray
    pooling: str = "mean"


def embed(model: PerceptionModel, sample: EquationSample) -> Embedding:
    """Mean hidden activation over the glyph positions."""
    if sample.length == 0:
        raise ValueError("cannot embed an empty equation")
    return Embedding(hidden_activations(model, sample.images()).mean(axis=0))


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


def as_targets(targets) -> np.ndarray:
    """Hard symbol indices or soft rows -> (n, 4) target matrix."""
    rows = []
    for t in targets:
        if np.ndim(t) == 0:
            row = np.zeros(N_SYMBOLS)
            row[int(t)] = 1.0
        else:
            row = np.asarray(t, dtype=np.float64)
            if row.shape != (N_SYMBOLS,):
                raise ValueError("soft targets must have 4 entries")
        rows.append(row)
    return np.array(rows, dtype=np.float64).reshape(-1, N_SYMBOLS)


def loss_and_grads(model: PerceptionModel, X, T, weights=None) -> tuple[float, dict[str, np.ndarray]]:
    """Weighted cross-entropy and its parameter gradients.

    Without ``weights`` the loss is the batch mean.  With weights it is
    ``sum_i w_i * CE_i``.
    """
    X = _as_inputs(X)
    T = np.asarray(T, dtype=np.float64)
    n = len(X)
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)
    H = np.tanh(X @ model.W1 + model.b1)
    logp = _log_softmax(H @ model.W2 + model.b2)
    ce = -(T * logp).sum(axis=1)
    loss = float(w @ ce)
    # d(sum_k t_k * -log p_k)/dlogits = p * sum(t) - t
    dlogits = (np.exp(logp) * T.sum(axis=1, keepdims=True) - T) * w[:, None]
    dH = (dlogits @ model.W2.T) * (1.0 - H * H)
    grads = {
        "W1": X.T @ dH,
        "b1": dH.sum(axis=0),
        "W2": H.T @ dlogits,
        "b2": dlogits.sum(axis=0),
    }
    return loss, grads


def train_step_arrays(model: PerceptionModel, X, T, lr: float, weights=None) -> float:
    """One full-batch gradient descent step; returns the pre-update loss."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if len(X) == 0:
        raise ValueError("empty batch")
    loss, grads = loss_and_grads(model, X, T, weights)
    if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise TrainingDiverged(
            "non-finite loss or gradient",
            {
                "loss": loss,
                "batch_size": len(X),
                "lr": lr,
                "grad_norms": {k: float(np.linalg.norm(g)) for k, g in grads.items()},
                "params_finite": model.is_finite(),
            },
        )
    for name, g in grads.items():
        getattr(model, name)[...] -= lr * g
    return loss


def train_step(model: PerceptionModel, batch: Sequence[tuple[np.ndarray, object]], lr: float = 0.1) -> float:
    """Gradient step on ``(image, target)`` pairs; targets are symbols or rows."""
    if not batch:
        raise ValueError("empty batch")
    X = np.stack([np.asarray(img, dtype=np.float64).reshape(INPUT_DIM) for img, _ in batch])
    return train_step_arrays(model, X, as_targets([t for _, t in batch]), lr)


def grad_check(model: PerceptionModel, X, T, weights=None, n_samples: int = 40, step: float = 1e-4, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``n_samples`` entries are drawn from each parameter tensor.
    """
    _, grads = loss_and_grads(model, X, T, weights)
    probe = model.copy()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in PARAM_NAMES:
        p = getattr(probe, name).reshape(-1)
        g = grads[name].reshape(-1)
        idx = rng.choice(p.size, size=min(n_samples, p.size), replace=False)
        for i in idx:
            orig = p[i]
            p[i] = orig + step
            lp, _ = loss_and_grads(probe, X, T, weights)
            p[i] = orig - step
            lm, _ = loss_and_grads(probe, X, T, weights)
            p[i] = orig
            fd = (lp - lm) / (2 * step)
            worst = max(worst, abs(g[i] - fd) / max(abs(fd), 1e-8))
    return worst


def accuracy(model: PerceptionModel, images, labels) -> float:
    pred = np.argmax(predict_proba(model, images), axis=1)
    return float(np.mean(pred == np.asarray(labels)))


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

CKPT_MAGIC = b"CABLPERC"
CKPT_VERSION = 1
_HEADER = struct.Struct("<8sIIIIQ")


def save_checkpoint(model: PerceptionModel, path: str | Path) -> None:
    """Header (magic, version, input, hidden, output, seed) + float64 LE params."""
    header = _HEADER.pack(CKPT_MAGIC, CKPT_VERSION, INPUT_DIM, model.hidden, N_SYMBOLS, model.seed)
    payload = b"".join(np.ascontiguousarray(getattr(model, n), dtype="<f8").tobytes() for n in PARAM_NAMES)
    Path(path).write_bytes(header + payload)


def load_checkpoint(path: str | Path) -> PerceptionModel:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError("truncated checkpoint")
    magic, version, d_in, hidden, d_out, seed = _HEADER.unpack_from(raw)
    if magic != CKPT_MAGIC:
        raise ValueError("not a perception checkpoint")
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    shapes = [(d_in, hidden), (hidden,), (hidden, d_out), (d_out,)]
    offset = _HEADER.size
    arrays = []
    for shape in shapes:
        count = int(np.prod(shape))
        chunk = raw[offset : offset + 8 * count]
        if len(chunk) != 8 * count:
            raise ValueError("truncated checkpoint payload")
        arrays.append(np.frombuffer(chunk, dtype="<f8").reshape(shape).astype(np.float64))
        offset += 8 * count
    if offset != len(raw):
        raise ValueError("trailing bytes in checkpoint")
    return PerceptionModel(*arrays, seed=seed)
