"""Small dataset builders shared by the test modules."""
import numpy as np

from mlcopula.data import MixedDataset, parse_schema
from mlcopula.linalg import make_rng


def make_dataset(values, mask=None, cluster=None, kinds=None, levels=None):
    values = np.asarray(values, dtype=float)
    n, c = values.shape
    kinds = kinds or ["continuous"] * c
    levels = levels or {}
    cols = []
    for j, kind in enumerate(kinds):
        col = {"name": f"y{j + 1}", "kind": kind}
        if j in levels:
            col["levels"] = levels[j]
        cols.append(col)
    schema = parse_schema({"cluster": "g", "columns": cols})
    cluster = np.zeros(n, dtype=int) if cluster is None else np.asarray(cluster)
    m = int(cluster.max()) + 1
    mask = np.ones((n, c), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    return MixedDataset(schema, values, mask, cluster, tuple(str(k + 1) for k in range(m)))


def gaussian_clustered(gamma, psi, m, n_i, seed):
    """Rows ``x = b_i + e`` with ``b_i ~ N(0, psi)`` and ``e ~ N(0, gamma)``."""
    rng = make_rng(seed)
    gamma = np.asarray(gamma, dtype=float)
    d = gamma.shape[0]
    cluster = np.repeat(np.arange(m), n_i)
    b = rng.multivariate_normal(np.zeros(d), psi, size=m) if psi is not None else np.zeros((m, d))
    e = rng.multivariate_normal(np.zeros(d), gamma, size=m * n_i)
    return b[cluster] + e, cluster
