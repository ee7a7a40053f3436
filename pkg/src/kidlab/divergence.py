"""Token-level divergences between a frozen teacher ``p`` and a student ``q``.

Probabilities are floored at ``EPS`` wherever they enter a logarithm, which
keeps every divergence finite and differentiable; the weights multiplying the
logs are the distributions themselves (so ``0 * log 0`` contributes nothing).
Natural log throughout, so JSD is bounded by ln 2.
"""
from __future__ import annotations

from enum import Enum

import numpy as np

from .model import softmax

EPS = 1e-9


class DivergenceKind(str, Enum):
    FKL = "FKL"  # KL(p || q)
    RKL = "RKL"  # KL(q || p)
    JSD = "JSD"
    TVD = "TVD"


class LengthMismatch(ValueError):
    pass


def _kind(kind) -> DivergenceKind:
    return kind if isinstance(kind, DivergenceKind) else DivergenceKind(str(kind).upper())


def _log(x: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(x, EPS))


def _value(kind: DivergenceKind, p: np.ndarray, q: np.ndarray) -> np.ndarray:
    if kind is DivergenceKind.FKL:
        return (p * (_log(p) - _log(q))).sum(-1)
    if kind is DivergenceKind.RKL:
        return (q * (_log(q) - _log(p))).sum(-1)
    if kind is DivergenceKind.JSD:
        lm = _log(0.5 * (p + q))
        return 0.5 * ((p * (_log(p) - lm)).sum(-1) + (q * (_log(q) - lm)).sum(-1))
    return 0.5 * np.abs(p - q).sum(-1)


def pointwise(kind, p, q):
    """Divergence of teacher ``p`` from student ``q`` (vectorised over leading axes)."""
    v = _value(_kind(kind), np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64))
    # the floor can push a near-zero KL a hair below zero
    v = np.maximum(v, 0.0)
    return float(v) if np.ndim(v) == 0 else v


def sequence_divergence(kind, teacher_steps, student_steps) -> float:
    """Mean pointwise divergence over aligned decoding steps."""
    p = np.asarray(teacher_steps, dtype=np.float64)
    q = np.asarray(student_steps, dtype=np.float64)
    if p.shape != q.shape:
        raise LengthMismatch(f"{p.shape} vs {q.shape}")
    if p.ndim != 2 or len(p) == 0:
        raise LengthMismatch("need at least one step")
    return float(np.mean(pointwise(kind, p, q)))


def _grad_wrt_q(kind: DivergenceKind, p: np.ndarray, q: np.ndarray) -> np.ndarray:
    live = q > EPS  # the floor is flat below EPS
    if kind is DivergenceKind.FKL:
        return np.where(live, -p / np.maximum(q, EPS), 0.0)
    if kind is DivergenceKind.RKL:
        return _log(q) - _log(p) + live
    if kind is DivergenceKind.JSD:
        m = 0.5 * (p + q)
        return 0.5 * (_log(q) - _log(m) + live - (m > EPS))
    return 0.5 * np.sign(q - p)


def value_and_grad(kind, p: np.ndarray, student_logits: np.ndarray, temperature: float = 1.0):
    """Divergence values and exact gradients w.r.t. the student logits, row-wise."""
    kind = _kind(kind)
    z = np.asarray(student_logits, dtype=np.float64)
    q = softmax(z, temperature)
    p = np.asarray(p, dtype=np.float64)
    val = _value(kind, p, q)
    gq = _grad_wrt_q(kind, p, q)
    gz = q * (gq - (gq * q).sum(-1, keepdims=True)) / temperature
    return val, gz


def divergence_grad(kind, p, student_logits, temperature: float = 1.0) -> np.ndarray:
    """Gradient of ``pointwise(kind, p, softmax(logits))`` w.r.t. ``logits``; ``p`` is constant."""
    return value_and_grad(kind, p, student_logits, temperature)[1]


# --------------------------------------------------------------------------- mode-seeking probe


def bimodal_teacher(delta: float, vocab: int = 4) -> np.ndarray:
    """Teacher with two modes of mass ``0.5 - delta`` and ``0.5 + delta``; zero elsewhere."""
    p = np.zeros(vocab)
    p[0], p[1] = 0.5 - delta, 0.5 + delta
    return p


def peaked_student(theta: float, vocab: int = 4, mode: int = 1) -> np.ndarray:
    """One-parameter student: ``theta`` on one token, the rest spread uniformly.

    The family cannot express a two-mode teacher exactly, so the fitted
    ``theta`` depends on how the divergence trades covering against seeking.
    """
    q = np.full(vocab, (1.0 - theta) / vocab)
    q[mode] += theta
    return q


def fit_peaked_student(kind, p: np.ndarray, resolution: float = 1e-3) -> tuple[float, float]:
    """Grid search over ``theta`` in [0, 1]; returns ``(theta*, student argmax mass)``."""
    n = int(round(1.0 / resolution))
    thetas = np.linspace(0.0, 1.0, n + 1)
    mode = int(np.argmax(p))
    qs = np.stack([peaked_student(t, len(p), mode) for t in thetas])
    vals = pointwise(kind, np.broadcast_to(p, qs.shape), qs)
    best = int(np.argmin(vals))
    return float(thetas[best]), float(qs[best].max())
