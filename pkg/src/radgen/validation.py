"""Input checks shared by the estimators."""

from __future__ import annotations

from typing import List, Optional, Sequence

import numpy as np

from radgen.exceptions import DataError, DimensionError


def check_feature_batch(X, d_f: Optional[int] = None) -> List[np.ndarray]:
    """Coerce ``X`` to a list of finite float32 ``(p, d_f)`` matrices.

    Accepts a 3-D array ``(n, p, d_f)``, a sequence of 2-D matrices, or a
    plain 2-D ``(n, d_f)`` array, read as one feature row per sample.
    """
    if isinstance(X, np.ndarray) and X.ndim == 2:
        mats = [row[None, :] for row in X]
    elif isinstance(X, np.ndarray) and X.ndim == 3:
        mats = list(X)
    else:
        mats = [np.asarray(m) for m in X]
    out = []
    for i, m in enumerate(mats):
        m = np.asarray(m, dtype=np.float32)
        if m.ndim == 1:
            m = m[None, :]
        if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
            raise DimensionError(f"sample {i}: expected a (p, d_f) feature matrix, got shape {m.shape}")
        if d_f is not None and m.shape[1] != d_f:
            raise DimensionError(f"sample {i}: feature dimension {m.shape[1]}, expected {d_f}")
        if not np.all(np.isfinite(m)):
            raise DataError(f"sample {i}: non-finite feature values")
        d_f = m.shape[1]
        out.append(m)
    if not out:
        raise DataError("empty feature batch")
    return out


def check_reports(y, n: int) -> List[str]:
    reports = [str(r) for r in y]
    if len(reports) != n:
        raise DimensionError(f"{n} feature matrices but {len(reports)} reports")
    return reports


def check_ids(ids: Optional[Sequence[str]], n: int) -> List[str]:
    if ids is None:
        return [f"x{i:06d}" for i in range(n)]
    ids = [str(i) for i in ids]
    if len(ids) != n:
        raise DimensionError(f"{n} samples but {len(ids)} ids")
    if len(set(ids)) != n:
        raise DataError("sample ids must be unique")
    return ids
