"""Sample-set distances and mean-profile correlations."""

from __future__ import annotations

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .errors import ContractError, DomainError, NumericalError

ASSIGNMENT_CAP = 2048
SIGMA_FLOOR = 1e-8


def _points(x, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ContractError(f"{name} must be an (n, d) array, got shape {x.shape}")
    if x.shape[0] < 1 or not np.isfinite(x).all():
        raise ContractError(f"{name} must be a non-empty finite sample set")
    return x


def _equal_sets(p, q) -> tuple[np.ndarray, np.ndarray]:
    p, q = _points(p, "P"), _points(q, "Q")
    if p.shape != q.shape:
        raise ContractError(f"sample sets must have equal shapes, got {p.shape} and {q.shape}")
    return p, q


def _estimator(kxx: np.ndarray, kyy: np.ndarray, kxy: np.ndarray) -> float:
    """Within-set terms skip the diagonal (1/(n(n-1))); the cross term keeps all pairs (2/n^2)."""
    n = kxx.shape[0]
    if n < 2:
        raise ContractError("the estimator needs at least 2 points per set")
    within = (kxx.sum() - np.trace(kxx) + kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(within - 2.0 * kxy.sum() / (n * n))


def mmd_rbf(p, q) -> float:
    """MMD with kernel ``exp(-||x - y||^2)``; can be negative for near-identical sets."""
    p, q = _equal_sets(p, q)
    k = lambda a, b: np.exp(-cdist(a, b, "sqeuclidean"))
    return _estimator(k(p, p), k(q, q), k(p, q))


def knn_bandwidths(p: np.ndarray, q: np.ndarray, k_nn: int = 5) -> tuple[np.ndarray, np.ndarray]:
    """Mean distance from every point to its ``k_nn`` nearest neighbours in P and Q pooled."""
    pooled = np.concatenate([p, q])
    d = cdist(pooled, pooled)
    np.fill_diagonal(d, np.inf)
    nearest = np.partition(d, k_nn - 1, axis=1)[:, :k_nn]
    sigma = np.maximum(nearest.mean(axis=1), SIGMA_FLOOR)
    return sigma[: len(p)], sigma[len(p):]


def adaptive_mmd(p, q, k_nn: int = 5, sigma: float | None = None) -> float:
    """MMD with kernel ``exp(-||x - y||^2 / (2 sigma_x sigma_y))`` and local bandwidths.

    ``sigma`` overrides every bandwidth with one constant (a fixed-kernel mode).
    """
    p, q = _equal_sets(p, q)
    if sigma is None:
        if not 1 <= k_nn < len(p):
            raise ContractError(f"k_nn must lie in [1, {len(p)}), got {k_nn}")
        sp, sq = knn_bandwidths(p, q, k_nn)
    else:
        sp = np.full(len(p), max(float(sigma), SIGMA_FLOOR))
        sq = np.full(len(q), max(float(sigma), SIGMA_FLOOR))

    def k(a, b, sa, sb):
        return np.exp(-cdist(a, b, "sqeuclidean") / (2.0 * np.outer(sa, sb)))

    return _estimator(k(p, p, sp, sp), k(q, q, sq, sq), k(p, q, sp, sq))


def optimal_matching(p, q) -> np.ndarray:
    """Permutation ``pi`` minimising ``sum ||p_i - q_pi(i)||^2``."""
    p, q = _equal_sets(p, q)
    if len(p) > ASSIGNMENT_CAP:
        raise ContractError(f"assignment size {len(p)} exceeds the cap of {ASSIGNMENT_CAP}")
    _, cols = linear_sum_assignment(cdist(p, q, "sqeuclidean"))
    return cols


def wasserstein2(p, q) -> float:
    """Exact empirical 2-Wasserstein distance between equal-size sets."""
    p, q = _equal_sets(p, q)
    cost = cdist(p, q, "sqeuclidean")
    if len(p) > ASSIGNMENT_CAP:
        raise ContractError(f"assignment size {len(p)} exceeds the cap of {ASSIGNMENT_CAP}")
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(cost[rows, cols].mean()))


def rankdata(x: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share the average of their ranks."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    sorted_x = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64) - np.mean(a)
    b = np.asarray(b, dtype=np.float64) - np.mean(b)
    denom = np.sqrt((a @ a) * (b @ b))
    if denom == 0.0:
        raise DomainError("correlation is undefined for a constant vector")
    return float((a @ b) / denom)


def mean_profile_correlations(p, q) -> tuple[float, float, float]:
    """(R^2, Pearson, Spearman) between the mean vectors of P (generated) and Q (truth).

    R^2 is the coefficient of determination ``1 - SS_res / SS_tot`` of the
    generated means as predictions of the true means.
    """
    p, q = _points(p, "P"), _points(q, "Q")
    if p.shape[1] != q.shape[1] or p.shape[1] < 2:
        raise ContractError("mean profiles need equal dimension d >= 2")
    mp, mq = p.mean(axis=0), q.mean(axis=0)
    ss_tot = float(((mq - mq.mean()) ** 2).sum())
    if ss_tot == 0.0 or np.ptp(mp) == 0.0:
        raise DomainError("correlation is undefined for a constant mean profile")
    r2 = 1.0 - float(((mq - mp) ** 2).sum()) / ss_tot
    return r2, pearson(mp, mq), pearson(rankdata(mp), rankdata(mq))


def cluster_kld(p, q, n_clusters: int = 8, seed: int = 0, smoothing: float = 1e-6,
                max_attempts: int = 5) -> float:
    """KL(truth || generated) between k-means occupancy histograms fitted on Q."""
    p, q = _points(p, "P"), _points(q, "Q")
    if n_clusters < 2 or min(len(p), len(q)) < n_clusters:
        raise ContractError("need n_clusters >= 2 and at least n_clusters points per set")
    for attempt in range(max_attempts):
        centroids, labels_q = kmeans2(q, n_clusters, minit="++", seed=np.random.default_rng([seed, attempt]))
        counts_q = np.bincount(labels_q, minlength=n_clusters)
        if counts_q.min() > 0:
            break
    else:
        raise NumericalError(f"k-means left an empty cluster after {max_attempts} attempts")
    labels_p = cdist(p, centroids, "sqeuclidean").argmin(axis=1)
    counts_p = np.bincount(labels_p, minlength=n_clusters)
    h_q = (counts_q + smoothing) / (counts_q.sum() + smoothing * n_clusters)
    h_p = (counts_p + smoothing) / (counts_p.sum() + smoothing * n_clusters)
    return float(max(0.0, np.sum(h_q * np.log(h_q / h_p))))


METRICS = {
    "mmd": mmd_rbf,
    "adaptive_mmd": adaptive_mmd,
    "w2": wasserstein2,
    "cluster_kld": cluster_kld,
}


def evaluate(samples, target, names=("mmd", "w2"), seed: int = 0) -> dict[str, float]:
    """Named metrics of generated ``samples`` against ``target``; 'corr' expands to three columns."""
    out = {}
    for name in names:
        if name == "corr":
            out["r2"], out["pearson"], out["spearman"] = mean_profile_correlations(samples, target)
        elif name == "cluster_kld":
            out[name] = cluster_kld(samples, target, seed=seed)
        elif name in METRICS:
            out[name] = METRICS[name](samples, target)
        else:
            raise ContractError(f"unknown metric {name!r}; choose from {sorted(METRICS) + ['corr']}")
    return out
