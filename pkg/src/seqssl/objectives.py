"""Contrastive and supervised losses.

Two implementations of each loss live here:

* ``nt_xent_loss``, ``simsiam_loss``, ``cross_entropy_9way`` work in float64
  numpy and return the loss together with its closed-form gradient. They are
  the reference used by the tests.
* ``nt_xent_torch``, ``simsiam_torch`` and ``cross_entropy_torch`` are the
  autograd versions the trainer optimizes.

Pair layout for NT-Xent: rows ``2k`` and ``2k + 1`` hold the two views of
source ``k``.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ValidationError, require

DEFAULT_TEMPERATURE = 0.5


def _as_rows(x, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    require(x.ndim == 2, f"{name} must be 2D, got shape {x.shape}")
    require(bool(np.isfinite(x).all()), f"{name} contains non-finite values")
    return x


def _row_norms(x: np.ndarray, name: str) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0):
        raise ValidationError(f"{name} has a zero-norm row; cosine similarity is undefined")
    return norms


def positive_index(n_rows: int) -> np.ndarray:
    """Partner row of each row under the (2k, 2k+1) layout."""
    return np.arange(n_rows) ^ 1


def nt_xent_loss(projections, temperature: float = DEFAULT_TEMPERATURE) -> tuple[float, np.ndarray]:
    """Normalized-temperature cross entropy and its gradient w.r.t. ``projections``.

    For anchor ``i`` with partner ``j``::

        l(i) = -log( exp(s_ij) / sum_{k != i} exp(s_ik) ),  s = cos / temperature

    and the loss is the mean of ``l`` over all ``2N`` rows.
    """
    z = _as_rows(projections, "projections")
    require(temperature > 0, f"temperature must be > 0, got {temperature}")
    m = z.shape[0]
    require(m >= 2 and m % 2 == 0, f"need an even number >= 2 of rows, got {m}")
    norms = _row_norms(z, "projections")
    u = z / norms[:, None]
    s = (u @ u.T) / temperature
    np.fill_diagonal(s, -np.inf)
    s_max = s.max(axis=1, keepdims=True)
    e = np.exp(s - s_max)
    log_denom = np.log(e.sum(axis=1)) + s_max[:, 0]
    pos = positive_index(m)
    loss = float(np.mean(log_denom - s[np.arange(m), pos]))

    # dL/ds_ik = (P_ik - [k == pos_i]) / m; s symmetric so both index orders contribute
    p = e / e.sum(axis=1, keepdims=True)
    g = p.copy()
    g[np.arange(m), pos] -= 1.0
    g /= m
    grad_u = ((g + g.T) @ u) / temperature
    grad_z = (grad_u - u * np.sum(grad_u * u, axis=1, keepdims=True)) / norms[:, None]
    return loss, grad_z


def simsiam_loss(p1, p2, z1, z2) -> tuple[float, dict[str, np.ndarray]]:
    """Symmetric negative cosine with stop-gradient on the projector outputs.

    ``loss = D(p1, sg(z2)) / 2 + D(p2, sg(z1)) / 2`` with ``D`` the batch mean of
    ``-cos(p, z)``. Gradients for ``z1`` and ``z2`` are zero arrays by design.
    """
    p1, p2 = _as_rows(p1, "p1"), _as_rows(p2, "p2")
    z1, z2 = _as_rows(z1, "z1"), _as_rows(z2, "z2")
    require(p1.shape == p2.shape == z1.shape == z2.shape,
            f"shape mismatch: {p1.shape}, {p2.shape}, {z1.shape}, {z2.shape}")
    n = p1.shape[0]

    def half(p, z, name):
        pn = _row_norms(p, name)
        zn = _row_norms(z, "projector output")
        ph, zh = p / pn[:, None], z / zn[:, None]
        cos = np.sum(ph * zh, axis=1)
        # d(-cos)/dp = -(zh - cos * ph) / |p|
        grad = -(zh - cos[:, None] * ph) / pn[:, None]
        return -cos.mean(), grad / n

    d1, g1 = half(p1, z2, "p1")
    d2, g2 = half(p2, z1, "p2")
    grads = {"p1": 0.5 * g1, "p2": 0.5 * g2, "z1": np.zeros_like(z1), "z2": np.zeros_like(z2)}
    return float(0.5 * d1 + 0.5 * d2), grads


def cross_entropy_9way(logits, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-softmax of the true class, and its gradient w.r.t. ``logits``."""
    x = _as_rows(logits, "logits")
    require(x.shape[1] == 9, f"expected 9 logits per row, got {x.shape[1]}")
    y = np.asarray(labels)
    require(y.shape == (x.shape[0],), f"labels shape {y.shape} does not match batch {x.shape[0]}")
    if y.size and (y.min() < 0 or y.max() > 8 or not np.issubdtype(y.dtype, np.integer)):
        raise ValidationError("labels must be integers in 0..8")
    b = x.shape[0]
    shifted = x - x.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_p = shifted - log_z[:, None]
    loss = float(-log_p[np.arange(b), y].mean())
    grad = np.exp(log_p)
    grad[np.arange(b), y] -= 1.0
    return loss, grad / b


# --------------------------------------------------------------------------
# autograd versions


def nt_xent_torch(z: torch.Tensor, temperature: float = DEFAULT_TEMPERATURE) -> torch.Tensor:
    m = z.shape[0]
    u = F.normalize(z, dim=1)
    s = (u @ u.T) / temperature
    s = s.masked_fill(torch.eye(m, dtype=torch.bool, device=z.device), float("-inf"))
    pos = torch.arange(m, device=z.device) ^ 1
    return F.cross_entropy(s, pos)


def simsiam_torch(p1, p2, z1, z2) -> torch.Tensor:
    d1 = -F.cosine_similarity(p1, z2.detach(), dim=1).mean()
    d2 = -F.cosine_similarity(p2, z1.detach(), dim=1).mean()
    return 0.5 * d1 + 0.5 * d2


def cross_entropy_torch(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, labels)


def interleave_views(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Stack ``(N, d)`` view batches into the ``(2N, d)`` pair layout."""
    return torch.stack([a, b], dim=1).reshape(-1, a.shape[-1])
