"""Standard and grammar-forced cross-entropy with analytic gradients.

All arithmetic is float64. Logit rows may contain ``-inf`` entries; those
tokens get probability exactly 0 and gradient exactly 0.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np


class EmptyValidSet(ValueError):
    pass


class TargetMasked(ValueError):
    pass


class TargetNotValid(ValueError):
    """A target token lies outside its grammar-valid set."""

    def __init__(self, token: int, position: int | None = None, record: int | None = None):
        where = []
        if record is not None:
            where.append(f"record {record}")
        if position is not None:
            where.append(f"position {position}")
        loc = f" ({', '.join(where)})" if where else ""
        super().__init__(f"target token {token} is not grammar-valid{loc}")
        self.token = token
        self.position = position
        self.record = record


class EmptyBatch(ValueError):
    pass


def as_mask(valid, size: int) -> np.ndarray:
    """Coerce a token set (bool mask or iterable of ids) to a bool mask."""
    if isinstance(valid, np.ndarray) and valid.dtype == bool:
        if valid.shape[-1] != size:
            raise ValueError(f"mask length {valid.shape[-1]} != vocabulary size {size}")
        return valid
    m = np.zeros(size, dtype=bool)
    m[list(valid)] = True
    return m


def mask_logits(row, valid) -> np.ndarray:
    """Keep scores of valid tokens, set the rest to ``-inf``."""
    row = np.asarray(row, dtype=np.float64)
    m = as_mask(valid, row.shape[-1])
    if not m.any():
        raise EmptyValidSet("valid token set is empty")
    return np.where(m, row, -np.inf)


def _softmax_rows(z: np.ndarray, keep: np.ndarray) -> np.ndarray:
    # masked entries never enter the arithmetic, so (-inf) - (-inf) cannot occur
    zz = np.where(keep, z, np.finfo(np.float64).min)
    m = zz.max(axis=-1, keepdims=True)
    e = np.where(keep, np.exp(zz - m), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def _logsumexp_rows(z: np.ndarray, keep: np.ndarray) -> np.ndarray:
    zz = np.where(keep, z, np.finfo(np.float64).min)
    m = zz.max(axis=-1)
    e = np.where(keep, np.exp(zz - m[..., None]), 0.0)
    return m + np.log(e.sum(axis=-1))


def _minus_rest(p: np.ndarray, y):
    """p[y] - 1 computed as -(sum of the other probabilities).

    The direct subtraction cancels to exactly 0 once p[y] rounds to 1,
    while the other entries are still representable.
    """
    if p.ndim == 1:
        return -(p[:y].sum() + p[y + 1:].sum())
    rows = np.arange(p.shape[0])
    rest = p.copy()
    rest[rows, y] = 0.0
    return -rest.sum(axis=1)


def softmax(row) -> np.ndarray:
    row = np.asarray(row, dtype=np.float64)
    return _softmax_rows(row, np.isfinite(row))


def constrained_softmax(row, valid) -> np.ndarray:
    """Distribution renormalised over the valid set; exact zeros elsewhere."""
    row = np.asarray(row, dtype=np.float64)
    m = as_mask(valid, row.shape[-1])
    if not m.any():
        raise EmptyValidSet("valid token set is empty")
    keep = m & np.isfinite(row)
    if not keep.any():
        raise EmptyValidSet("every valid token has a -inf score")
    return _softmax_rows(row, keep)


def cross_entropy(z, y: int) -> float:
    z = np.asarray(z, dtype=np.float64)
    if not np.isfinite(z[y]):
        raise TargetMasked(f"target {y} has a non-finite logit")
    return float(_logsumexp_rows(z, np.isfinite(z)) - z[y])


def _check_target(valid_mask: np.ndarray, y: int):
    if not valid_mask.any():
        raise EmptyValidSet("valid token set is empty")
    if not valid_mask[y]:
        raise TargetNotValid(y)


def forced_cross_entropy(z, y: int, valid) -> float:
    z = np.asarray(z, dtype=np.float64)
    m = as_mask(valid, z.shape[-1])
    _check_target(m, y)
    return cross_entropy(mask_logits(z, m), y)


def grad_ce(z, y: int) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if not np.isfinite(z[y]):
        raise TargetMasked(f"target {y} has a non-finite logit")
    g = softmax(z)
    g[y] = _minus_rest(g, y)
    return g


def grad_forced_ce(z, y: int, valid) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    m = as_mask(valid, z.shape[-1])
    _check_target(m, y)
    return grad_ce(mask_logits(z, m), y)


def rows_loss_and_grad(
    z: np.ndarray, y: np.ndarray, valid: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Per-row loss and d(loss)/dz for a stack of rows.

    ``z`` is (N, V), ``y`` is (N,), ``valid`` an optional (N, V) bool mask.
    Without ``valid`` this is standard cross-entropy.
    """
    n = z.shape[0]
    rows = np.arange(n)
    if valid is None:
        keep = np.isfinite(z)
    else:
        bad = np.flatnonzero(~valid[rows, y])
        if bad.size:
            raise TargetNotValid(int(y[bad[0]]), position=int(bad[0]))
        keep = valid & np.isfinite(z)
    if not np.isfinite(z[rows, y]).all():
        raise TargetMasked("a target has a non-finite logit")
    loss = _logsumexp_rows(z, keep) - z[rows, y]
    g = _softmax_rows(z, keep)
    g[rows, y] = _minus_rest(g, y)
    return loss, g


def grad_second_moment(grads: Sequence[np.ndarray] | Iterable[np.ndarray]) -> float:
    """Mean squared Euclidean norm over a list of gradient vectors."""
    grads = list(grads)
    if not grads:
        raise EmptyBatch("need at least one gradient")
    return float(np.mean([np.dot(np.ravel(g), np.ravel(g)) for g in grads]))
