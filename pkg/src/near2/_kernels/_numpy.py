"""Pure-numpy scan kernels used when the compiled extension is unavailable.

Both backends share one contract: float32 corpus rows, float64 accumulation,
and per-row results that depend only on the row data and the prefix length m,
never on which other rows take part in a call.
"""

import numpy as np

# Rows per block. Blocking bounds the temporary float64 buffer; per-row dot
# products are unaffected because each row is reduced independently.
_BLOCK = 8192


def _iter_blocks(rows: np.ndarray):
    for start in range(0, rows.shape[0], _BLOCK):
        yield start, rows[start : start + _BLOCK]


def prefix_dot_products(matrix, query, m, row_indices=None):
    """float64 dot of each (selected) row's first m entries with `query`.

    `matrix` is (count, D) float32, `query` a float64 vector of length m,
    `row_indices` an optional int64 selection evaluated in the given order.
    """
    rows = matrix if row_indices is None else matrix[row_indices]
    out = np.empty(rows.shape[0], dtype=np.float64)
    for start, block in _iter_blocks(rows):
        out[start : start + block.shape[0]] = block[:, :m].astype(np.float64) @ query
    return out


def prefix_sq_norms(matrix, m, row_indices=None):
    """float64 squared L2 norm of each (selected) row's first m entries."""
    rows = matrix if row_indices is None else matrix[row_indices]
    out = np.empty(rows.shape[0], dtype=np.float64)
    for start, block in _iter_blocks(rows):
        prefix = block[:, :m].astype(np.float64)
        out[start : start + block.shape[0]] = (prefix * prefix).sum(axis=1)
    return out
