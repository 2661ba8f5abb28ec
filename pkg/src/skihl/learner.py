"""Weakly supervised training of a pluggable pixel classifier.

Supervision arrives as soft labels on frontier cells; a cell's predicted
probability is the mean of its pixels' probabilities (multi-instance
aggregation), trained with soft binary cross-entropy. A small dense network
(ReferenceClassifier) implements the classifier interface with exact
analytic gradients.
"""

from __future__ import annotations

import os
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import uniform_filter
from scipy.special import expit

from .hierarchy import CellId, Frontier, cell_mean
from .raster import FeatureStack, LabelMap, SparseLabels

EPS = 1e-7
MODEL_MAGIC = "SKIHL-MODEL"
MODEL_VERSION = 1

_F32 = np.dtype("<f4")


class PixelClassifier(ABC):
    """Differentiable map from a feature stack to per-pixel flood probability.

    predict returns probabilities clipped to (EPS, 1-EPS) so log losses stay
    finite; loss_gradient returns (loss, dloss/dtheta) for soft cell labels
    aggregated over a frontier.
    """

    @property
    @abstractmethod
    def parameters(self) -> np.ndarray:
        """Flat parameter vector (copy)."""

    @abstractmethod
    def set_parameters(self, theta: np.ndarray) -> None:
        ...

    @abstractmethod
    def predict(self, stack: FeatureStack) -> LabelMap:
        ...

    @abstractmethod
    def loss_gradient(self, stack: FeatureStack, labels: np.ndarray,
                      frontier: Frontier) -> tuple:
        ...


class ReferenceClassifier(PixelClassifier):
    """One-hidden-layer network over per-pixel window features.

    Input per pixel: the m raw band values, elevation, and the m 3x3
    neighborhood band means (2m+1 features), each column standardized over
    the stack being predicted. tanh hidden layer of width `hidden`, sigmoid
    output. Parameters are initialized from a seeded uniform(-0.1, 0.1)
    (counter-based Philox generator, so runs are reproducible).
    """

    def __init__(self, bands: int, hidden: int = 16, seed: int = 0):
        if bands < 1 or hidden < 1:
            raise ValueError(f"invalid architecture: bands={bands} hidden={hidden}")
        self.bands = bands
        self.hidden = hidden
        self.n_features = 2 * bands + 1
        rng = np.random.Generator(np.random.Philox(seed))
        n = hidden * self.n_features + hidden + hidden + 1
        self._theta = rng.uniform(-0.1, 0.1, size=n)
        self._feat_cache = (None, None)

    # -- parameters -----------------------------------------------------

    @property
    def parameters(self) -> np.ndarray:
        return self._theta.copy()

    def set_parameters(self, theta: np.ndarray) -> None:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != self._theta.shape:
            raise ValueError(f"parameter vector has length {theta.shape}, "
                             f"expected {self._theta.shape}")
        self._theta = theta.copy()

    def _unpack(self):
        H, F = self.hidden, self.n_features
        t = self._theta
        W1 = t[:H * F].reshape(H, F)
        b1 = t[H * F:H * F + H]
        w2 = t[H * F + H:H * F + 2 * H]
        b2 = t[-1]
        return W1, b1, w2, b2

    # -- features ---------------------------------------------------------

    def _features(self, stack: FeatureStack) -> np.ndarray:
        cached_stack, cached = self._feat_cache
        if cached_stack is stack:
            return cached
        cols = [stack.values[b].astype(np.float64) for b in range(stack.bands)]
        cols.append(stack.elevation.astype(np.float64))
        for b in range(stack.bands):
            cols.append(uniform_filter(stack.values[b].astype(np.float64),
                                       size=3, mode="nearest"))
        phi = np.stack([c.ravel() for c in cols], axis=1)
        mu = phi.mean(axis=0)
        sd = phi.std(axis=0)
        phi = (phi - mu) / np.maximum(sd, 1e-8)
        self._feat_cache = (stack, phi)
        return phi

    def _forward(self, phi: np.ndarray):
        W1, b1, w2, b2 = self._unpack()
        h = np.tanh(phi @ W1.T + b1)
        p_raw = expit(h @ w2 + b2)
        grad_ok = (p_raw > EPS) & (p_raw < 1.0 - EPS)
        p = np.clip(p_raw, EPS, 1.0 - EPS)
        return p, h, grad_ok

    def predict(self, stack: FeatureStack) -> LabelMap:
        p, _, _ = self._forward(self._features(stack))
        return LabelMap(rows=stack.rows, cols=stack.cols,
                        values=p.reshape(stack.rows, stack.cols))

    # -- gradients --------------------------------------------------------

    def _backprop(self, phi, h, dz2):
        _, _, w2, _ = self._unpack()
        dh = np.outer(dz2, w2)
        dz1 = dh * (1.0 - h * h)
        gW1 = dz1.T @ phi
        gb1 = dz1.sum(axis=0)
        gw2 = h.T @ dz2
        gb2 = dz2.sum()
        return np.concatenate([gW1.ravel(), gb1, gw2, [gb2]])

    def loss_gradient(self, stack: FeatureStack, labels: np.ndarray,
                      frontier: Frontier) -> tuple:
        """Multi-instance soft-BCE loss (sum over cells) and its gradient."""
        labels = np.asarray(labels, dtype=np.float64)
        if labels.shape != (len(frontier),):
            raise ValueError(f"{labels.shape[0] if labels.ndim else 0} labels "
                             f"for {len(frontier)} leaves")
        phi = self._features(stack)
        p, h, grad_ok = self._forward(phi)
        owner = frontier.owner_map().ravel()
        counts = np.bincount(owner, minlength=len(frontier)).astype(np.float64)
        P = np.bincount(owner, weights=p, minlength=len(frontier)) / counts
        P = np.clip(P, EPS, 1.0 - EPS)
        loss = float(np.sum(-(labels * np.log(P) + (1.0 - labels) * np.log1p(-P))))
        dP = (P - labels) / (P * (1.0 - P))
        dz2 = (dP[owner] / counts[owner]) * (p * (1.0 - p)) * grad_ok
        return loss, self._backprop(phi, h, dz2)

    def pixel_loss_gradient(self, stack: FeatureStack, pixel_flat_idx: np.ndarray,
                            targets: np.ndarray) -> tuple:
        """Crisp/soft BCE on an explicit pixel subset (sparse-label training)."""
        phi = self._features(stack)
        p, h, grad_ok = self._forward(phi)
        pi = p[pixel_flat_idx]
        y = np.asarray(targets, dtype=np.float64)
        loss = float(np.sum(-(y * np.log(pi) + (1.0 - y) * np.log1p(-pi))))
        upstream = np.zeros_like(p)
        upstream[pixel_flat_idx] = (pi - y) / (pi * (1.0 - pi))
        dz2 = upstream * (p * (1.0 - p)) * grad_ok
        return loss, self._backprop(phi, h, dz2)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def cell_probability(p: LabelMap, cell: CellId) -> float:
    """Mean predicted probability over the cell's pixels."""
    return cell_mean(p.values, cell)


def soft_bce(y_hat: float, P: float, eps: float = EPS) -> float:
    """Cross-entropy of probability P against a soft target y_hat;
    P is clipped to [eps, 1-eps] so the logs stay finite."""
    P = min(max(float(P), eps), 1.0 - eps)
    y = float(y_hat)
    return float(-(y * np.log(P) + (1.0 - y) * np.log1p(-P)))


def mil_loss(p: LabelMap, labels: np.ndarray, frontier: Frontier) -> float:
    """Sum over frontier leaves of soft_bce(label, cell probability).

    With an all-level-0 frontier every cell is one pixel, so this reduces to
    the pixelwise soft-BCE sum.
    """
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != (len(frontier),):
        raise ValueError(f"label count {labels.shape} != {len(frontier)} leaves")
    owner = frontier.owner_map().ravel()
    counts = np.bincount(owner, minlength=len(frontier)).astype(np.float64)
    P = np.bincount(owner, weights=p.values.ravel(), minlength=len(frontier)) / counts
    P = np.clip(P, EPS, 1.0 - EPS)
    return float(np.sum(-(labels * np.log(P) + (1.0 - labels) * np.log1p(-P))))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainParams:
    epochs: int = 200
    learning_rate: float = 0.05
    seed: int = 0
    plateau_patience: int = 10  # epochs without improvement before halving lr

    def __post_init__(self):
        if self.epochs < 0 or self.learning_rate <= 0 or self.plateau_patience < 1:
            raise ValueError(f"invalid training params: {self}")


def _descend(classifier: PixelClassifier, loss_grad_fn, n_bags: int,
             params: TrainParams) -> list:
    """Full-batch gradient descent on the mean per-bag loss; keeps the best
    parameters seen. Returns the loss curve as (epoch, mean loss) rows."""
    if params.epochs == 0:
        return []
    best_theta = classifier.parameters
    best_loss = np.inf
    lr = params.learning_rate
    stale = 0
    curve = []
    for epoch in range(1, params.epochs + 1):
        loss_sum, grad = loss_grad_fn()
        mean_loss = float(loss_sum) / n_bags
        if not np.isfinite(mean_loss):
            raise RuntimeError(f"training diverged at epoch {epoch}: "
                               f"loss={mean_loss!r}, lr={lr!r}")
        curve.append((epoch, mean_loss))
        if mean_loss < best_loss:
            best_loss = mean_loss
            best_theta = classifier.parameters
            stale = 0
        else:
            stale += 1
            if stale >= params.plateau_patience:
                lr *= 0.5
                stale = 0
        classifier.set_parameters(classifier.parameters - lr * (grad / n_bags))
    final_loss = loss_grad_fn()[0] / n_bags
    if final_loss < best_loss:
        best_theta = classifier.parameters
    classifier.set_parameters(best_theta)
    return curve


def train(classifier: PixelClassifier, stack: FeatureStack, labels: np.ndarray,
          frontier: Frontier, params: TrainParams = TrainParams()) -> tuple:
    """Train against soft cell labels via multi-instance aggregation.

    Updates the classifier in place to the best-loss parameters and returns
    (classifier, loss curve). Deterministic given the parameters.
    """
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != (len(frontier),):
        raise ValueError(f"label count {labels.shape} != {len(frontier)} leaves")
    curve = _descend(classifier,
                     lambda: classifier.loss_gradient(stack, labels, frontier),
                     n_bags=len(frontier), params=params)
    return classifier, curve


def train_sparse_baseline(classifier: ReferenceClassifier, stack: FeatureStack,
                          sparse: SparseLabels,
                          params: TrainParams = TrainParams()) -> tuple:
    """Train only on the sparsely labeled pixels (crisp BCE) - the
    low-supervision comparison baseline."""
    if len(sparse) == 0:
        raise ValueError("sparse label set is empty")
    sparse.check_bounds(stack.rows, stack.cols)
    idx = np.array([r * stack.cols + c for r, c, _ in sparse.entries], dtype=np.int64)
    targets = np.array([lab for _, _, lab in sparse.entries], dtype=np.float64)
    curve = _descend(classifier,
                     lambda: classifier.pixel_loss_gradient(stack, idx, targets),
                     n_bags=len(sparse), params=params)
    return classifier, curve


# ---------------------------------------------------------------------------
# Checkpoints and curves
# ---------------------------------------------------------------------------


def save_checkpoint(classifier: PixelClassifier, path: str | os.PathLike) -> None:
    """Versioned binary checkpoint: ASCII header line with the parameter
    count, then the flat parameter vector as little-endian f32."""
    theta = classifier.parameters
    with open(path, "wb") as fh:
        fh.write(f"{MODEL_MAGIC} {MODEL_VERSION} {theta.size}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(theta, dtype=_F32).tobytes())


def load_checkpoint(path: str | os.PathLike) -> np.ndarray:
    """Read a checkpoint's flat parameter vector."""
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        if len(header) != 3 or header[0] != MODEL_MAGIC or header[1] != str(MODEL_VERSION):
            raise ValueError(f"{path}: not a {MODEL_MAGIC} {MODEL_VERSION} checkpoint")
        n = int(header[2])
        body = fh.read()
    if len(body) != n * 4:
        raise ValueError(f"{path}: expected {n} f32 parameters, got {len(body) // 4}")
    return np.frombuffer(body, dtype=_F32).astype(np.float64)


def write_loss_curve(curve: Sequence, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write("epoch,loss\n")
        for epoch, loss in curve:
            fh.write(f"{epoch},{loss!r}\n")
