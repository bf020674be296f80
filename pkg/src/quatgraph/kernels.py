"""Hot inner loops: CSR sparse-dense products, segment sums, window co-occurrence.

Every kernel has a numba ``@njit`` body and a pure-numpy twin.  The numba path
is used when numba imports cleanly and ``QUATGRAPH_DISABLE_NUMBA`` is unset (or
``0``).  Both paths return identical results up to float summation order; the
numba path sums in CSR order and is bit-reproducible run to run.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    numba = None


def _numba_requested() -> bool:
    return os.environ.get("QUATGRAPH_DISABLE_NUMBA", "0") in ("", "0", "false", "False")


USE_NUMBA = numba is not None and _numba_requested()


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"


# --------------------------------------------------------------------------
# numpy reference paths
# --------------------------------------------------------------------------


def _csr_matmul_numpy(indptr, indices, data, dense):
    n_rows = indptr.shape[0] - 1
    out = np.zeros((n_rows, dense.shape[1]), dtype=np.float64)
    if indices.shape[0] == 0:
        return out
    rows = np.repeat(np.arange(n_rows), np.diff(indptr))
    np.add.at(out, rows, data[:, None] * dense[indices])
    return out


def _segment_sum_numpy(values, offsets):
    out = np.zeros((offsets.shape[0] - 1, values.shape[1]), dtype=np.float64)
    nonempty = offsets[1:] > offsets[:-1]
    if values.shape[0]:
        sums = np.add.reduceat(values, offsets[:-1][nonempty], axis=0)
        out[nonempty] = sums
    return out


def _window_counts_numpy(doc_tokens, doc_offsets, window, vocab_size):
    """Count windows containing each word and each unordered word pair."""
    word_windows = np.zeros(vocab_size, dtype=np.int64)
    pair_windows: dict[tuple[int, int], int] = {}
    n_windows = 0
    for d in range(doc_offsets.shape[0] - 1):
        toks = doc_tokens[doc_offsets[d]:doc_offsets[d + 1]]
        length = toks.shape[0]
        starts = [0] if length <= window else range(length - window + 1)
        for s in starts:
            uniq = np.unique(toks[s:s + window])
            n_windows += 1
            word_windows[uniq] += 1
            for a in range(uniq.shape[0]):
                for b in range(a + 1, uniq.shape[0]):
                    key = (int(uniq[a]), int(uniq[b]))
                    pair_windows[key] = pair_windows.get(key, 0) + 1
    if pair_windows:
        keys = np.array(sorted(pair_windows), dtype=np.int64)
        counts = np.array([pair_windows[tuple(k)] for k in keys], dtype=np.int64)
    else:
        keys = np.zeros((0, 2), dtype=np.int64)
        counts = np.zeros(0, dtype=np.int64)
    return n_windows, word_windows, keys[:, 0].copy(), keys[:, 1].copy(), counts


# --------------------------------------------------------------------------
# numba paths
# --------------------------------------------------------------------------

if numba is not None:
    from numba import types as _nbtypes
    from numba.typed import Dict as _NbDict

    @numba.njit(cache=True)
    def _csr_matmul_numba(indptr, indices, data, dense):
        n_rows = indptr.shape[0] - 1
        n_cols = dense.shape[1]
        out = np.zeros((n_rows, n_cols), dtype=np.float64)
        for r in range(n_rows):
            for p in range(indptr[r], indptr[r + 1]):
                c = indices[p]
                w = data[p]
                for j in range(n_cols):
                    out[r, j] += w * dense[c, j]
        return out

    @numba.njit(cache=True)
    def _segment_sum_numba(values, offsets):
        n_seg = offsets.shape[0] - 1
        n_cols = values.shape[1]
        out = np.zeros((n_seg, n_cols), dtype=np.float64)
        for g in range(n_seg):
            for r in range(offsets[g], offsets[g + 1]):
                for j in range(n_cols):
                    out[g, j] += values[r, j]
        return out

    @numba.njit(cache=True)
    def _window_counts_numba(doc_tokens, doc_offsets, window, vocab_size):
        word_windows = np.zeros(vocab_size, dtype=np.int64)
        pair_windows = _NbDict.empty(key_type=_nbtypes.int64, value_type=_nbtypes.int64)
        n_windows = 0
        seen = np.full(vocab_size, -1, dtype=np.int64)
        uniq = np.empty(window, dtype=np.int64)
        for d in range(doc_offsets.shape[0] - 1):
            lo = doc_offsets[d]
            length = doc_offsets[d + 1] - lo
            n_starts = 1 if length <= window else length - window + 1
            for s in range(n_starts):
                n_uniq = 0
                stop = min(s + window, length)
                for t in range(s, stop):
                    w = doc_tokens[lo + t]
                    if seen[w] != n_windows:
                        seen[w] = n_windows
                        uniq[n_uniq] = w
                        n_uniq += 1
                n_windows += 1
                for a in range(n_uniq):
                    word_windows[uniq[a]] += 1
                for a in range(n_uniq):
                    for b in range(n_uniq):
                        if uniq[a] < uniq[b]:
                            key = uniq[a] * vocab_size + uniq[b]
                            pair_windows[key] = pair_windows.get(key, 0) + 1
        n_pairs = len(pair_windows)
        keys = np.empty(n_pairs, dtype=np.int64)
        counts = np.empty(n_pairs, dtype=np.int64)
        i = 0
        for k, v in pair_windows.items():
            keys[i] = k
            counts[i] = v
            i += 1
        order = np.argsort(keys)
        keys = keys[order]
        counts = counts[order]
        return n_windows, word_windows, keys // vocab_size, keys % vocab_size, counts


# --------------------------------------------------------------------------
# dispatch
# --------------------------------------------------------------------------


def csr_matmul(indptr, indices, data, dense, use_numba: bool | None = None) -> np.ndarray:
    """Dense result of ``A @ dense`` for ``A`` given in CSR arrays."""
    dense = np.ascontiguousarray(dense, dtype=np.float64)
    if dense.ndim != 2:
        raise ValueError(f"dense operand must be 2-D, got shape {dense.shape}")
    if use_numba if use_numba is not None else USE_NUMBA:
        return _csr_matmul_numba(indptr, indices, data, dense)
    return _csr_matmul_numpy(indptr, indices, data, dense)


def segment_sum(values, offsets, use_numba: bool | None = None) -> np.ndarray:
    """Row sums of ``values`` over the half-open ranges ``offsets[g]:offsets[g+1]``."""
    values = np.ascontiguousarray(values, dtype=np.float64)
    offsets = np.ascontiguousarray(offsets, dtype=np.int64)
    if use_numba if use_numba is not None else USE_NUMBA:
        return _segment_sum_numba(values, offsets)
    return _segment_sum_numpy(values, offsets)


def window_counts(doc_tokens, doc_offsets, window: int, vocab_size: int, use_numba: bool | None = None):
    """Sliding-window statistics over a tokenized corpus.

    Documents shorter than ``window`` contribute a single window.  Returns
    ``(n_windows, word_windows, pair_a, pair_b, pair_counts)`` where pairs are
    unordered (``pair_a < pair_b``), sorted, and counted once per window.
    """
    doc_tokens = np.ascontiguousarray(doc_tokens, dtype=np.int64)
    doc_offsets = np.ascontiguousarray(doc_offsets, dtype=np.int64)
    if use_numba if use_numba is not None else USE_NUMBA:
        n, ww, a, b, c = _window_counts_numba(doc_tokens, doc_offsets, int(window), int(vocab_size))
        return int(n), ww, a, b, c
    return _window_counts_numpy(doc_tokens, doc_offsets, int(window), int(vocab_size))
