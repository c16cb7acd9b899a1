"""Analytical cost predictors and representation-similarity diagnostics."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, ShapeError

__all__ = [
    "predict_space_ratio_transformer",
    "predict_space_ratio_stt",
    "predict_time_ratio",
    "cka_linear",
    "frame_redundancy",
    "mean_offdiagonal",
    "layerwise_cka",
    "RunStats",
    "measure_ratios",
]


def predict_space_ratio_transformer(d: int, n: int, r: float) -> float:
    """Cached-memory fraction of a wrapped transformer block vs full caching.

    Full caching holds 15*h*d*n + 2*h*n^2 elements per block; a wrapped block
    holds 4*h*d*n + (11*h*d*n + 2*h*n^2)*r.  The ratio is independent of the
    head count:  (r*(11 d/n + 2) + 4 d/n) / ((11 d/n + 2) + 4 d/n).
    """
    if d < 1 or n < 1:
        raise ConfigError(f"head dim and token count must be >= 1, got d={d}, n={n}")
    if not (0.0 < r <= 1.0):
        raise ConfigError(f"keep-ratio must be in (0, 1], got {r}")
    dn = d / n
    return (r * (11.0 * dn + 2.0) + 4.0 * dn) / ((11.0 * dn + 2.0) + 4.0 * dn)


def predict_space_ratio_stt(m_s: float, m_c: float, r: float) -> float:
    """(r*M_s + M_c) / (M_s + M_c) for a spatial-charge M_s, temporal M_c."""
    if m_s <= 0 or m_c < 0:
        raise ConfigError(f"memory terms must be positive, got M_s={m_s}, M_c={m_c}")
    return (r * m_s + m_c) / (m_s + m_c)


def predict_time_ratio(r: float) -> float:
    """(1 + 2r) / 2: one full forward, r of a re-forward, r of a backward,
    against a full forward plus an (assumed equal-cost) full backward."""
    if not (0.0 < r <= 1.0):
        raise ConfigError(f"keep-ratio must be in (0, 1], got {r}")
    return (1.0 + 2.0 * r) / 2.0


def cka_linear(x, y) -> float:
    """Linear centered-kernel-alignment similarity of two representations.

    Columns are centered per feature; the statistic is
    ||Yc^T Xc||_F^2 / (||Xc^T Xc||_F * ||Yc^T Yc||_F), in [0, 1], symmetric,
    and invariant to orthogonal transforms and isotropic scaling of either
    argument.  Zero-variance inputs yield 0.0 with a warning.
    """
    xv = np.asarray(getattr(x, "array", x), dtype=np.float64)
    yv = np.asarray(getattr(y, "array", y), dtype=np.float64)
    if xv.ndim != 2 or yv.ndim != 2:
        raise ShapeError("cka_linear expects 2-D (examples x features) inputs")
    if xv.shape[0] != yv.shape[0]:
        raise ShapeError(f"example counts differ: {xv.shape[0]} vs {yv.shape[0]}")
    if xv.shape[0] < 2:
        raise ShapeError("cka_linear needs at least 2 examples")

    xc = xv - xv.mean(axis=0, keepdims=True)
    yc = yv - yv.mean(axis=0, keepdims=True)
    xx = np.linalg.norm(xc.T @ xc)
    yy = np.linalg.norm(yc.T @ yc)
    if xx == 0.0 or yy == 0.0:
        warnings.warn("cka_linear: zero-variance input, similarity defined as 0")
        return 0.0
    xy = np.linalg.norm(yc.T @ xc) ** 2
    return float(xy / (xx * yy))


def frame_redundancy(activations) -> np.ndarray:
    """T x T cosine-similarity matrix of per-frame activation vectors.

    Zero vectors get cosine 0 against everything; the diagonal is 1 for
    nonzero frames.
    """
    a = np.asarray(getattr(activations, "array", activations), dtype=np.float64)
    if a.ndim < 2:
        raise ShapeError("frame_redundancy expects (T, ...) per-frame activations")
    t = a.shape[0]
    if t < 2:
        raise ShapeError("need at least 2 frames")
    flat = a.reshape(t, -1)
    norms = np.sqrt((flat * flat).sum(axis=1))
    sim = flat @ flat.T
    denom = np.outer(norms, norms)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(denom > 0, sim / np.where(denom > 0, denom, 1.0), 0.0)
    return out


def mean_offdiagonal(matrix: np.ndarray) -> float:
    m = np.asarray(matrix)
    t = m.shape[0]
    return float((m.sum() - np.trace(m)) / (t * (t - 1)))


def layerwise_cka(acts_a: list, acts_b: list) -> list[float]:
    """Per-layer linear CKA between two models' activations on one batch.

    Each entry is a (B, n, c) activation map; tokens are treated as examples
    (rows), features as columns.  Returns one scalar in [0, 1] per layer.
    """
    if len(acts_a) != len(acts_b):
        raise ShapeError(f"layer counts differ: {len(acts_a)} vs {len(acts_b)}")
    out = []
    for a, b in zip(acts_a, acts_b):
        a = np.asarray(a)
        b = np.asarray(b)
        out.append(cka_linear(a.reshape(-1, a.shape[-1]), b.reshape(-1, b.shape[-1])))
    return out


@dataclass(frozen=True)
class RunStats:
    """Per-step instrumentation of one training configuration."""

    cached_elements: int
    forward_ops: int
    backward_ops: int
    fingerprint: str = ""  # model/batch identity; ratios only compare like with like

    @property
    def total_ops(self) -> int:
        return self.forward_ops + self.backward_ops


def measure_ratios(run_full: RunStats, run_sbp: RunStats) -> dict[str, float]:
    """Measured space and time ratios of a wrapped run against its full run."""
    if run_full.fingerprint != run_sbp.fingerprint:
        raise ContractError(
            f"runs measure different configurations: "
            f"{run_full.fingerprint!r} vs {run_sbp.fingerprint!r}")
    if run_full.cached_elements == 0 or run_full.total_ops == 0:
        raise ContractError("full run recorded no cache or op activity")
    return {
        "space_ratio": run_sbp.cached_elements / run_full.cached_elements,
        "time_ratio": run_sbp.total_ops / run_full.total_ops,
    }
