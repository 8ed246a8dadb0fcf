"""Training-free discretisation: per-position PCA, k-means++ / Lloyd, code matrix.

Codes are 1-based: every entry of a :class:`CodeMatrix` lies in ``[1, k]``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ValidationError
from .storage import load_tensors, save_tensors


class RankError(ValidationError):
    pass


class UnresolvedCollisionError(ValidationError):
    pass


# -- PCA ---------------------------------------------------------------------


@dataclass
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # D x d, orthonormal columns
    explained_variance: np.ndarray
    explained_variance_ratio: np.ndarray

    @property
    def d(self) -> int:
        return self.components.shape[1]


def pca_fit(X, d: int) -> PcaModel:
    """Eigendecomposition of the covariance of mean-centred ``X`` (n x D).

    Components come in descending eigenvalue order with a fixed sign: the
    largest-magnitude coordinate of each component is positive (ties go to
    the lower index).
    """
    X = np.asarray(X, dtype=np.float64)
    n, D = X.shape
    if not 1 <= d <= D:
        raise ValidationError(f"d must be in [1, {D}]")
    if n <= d:
        raise ValidationError(f"PCA needs n > d (n={n}, d={d})")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / (n - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(-vals, kind="stable")
    vals, vecs = np.clip(vals[order], 0.0, None), vecs[:, order]
    tol = max(vals[0], 1e-300) * max(n, D) * np.finfo(np.float64).eps
    rank = int(np.count_nonzero(vals > tol))
    if rank < d:
        raise RankError(f"data rank {rank} is below requested d={d}; achievable rank is {rank}")
    comps = vecs[:, :d].copy()
    for j in range(d):
        col = comps[:, j]
        if col[int(np.argmax(np.abs(col)))] < 0:
            comps[:, j] = -col
    total = vals.sum()
    return PcaModel(mean, comps, vals[:d], vals[:d] / total if total > 0 else np.zeros(d))


def pca_transform(model: PcaModel, X) -> np.ndarray:
    return (np.asarray(X, dtype=np.float64) - model.mean) @ model.components


# -- k-means -----------------------------------------------------------------


@dataclass
class KMeansModel:
    centroids: np.ndarray
    counts: np.ndarray
    labels: np.ndarray
    inertia_history: list[float] = field(default_factory=list)
    iterations: int = 0

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def inertia(self) -> float:
        return self.inertia_history[-1]

    def predict(self, points) -> np.ndarray:
        return nearest(np.asarray(points, dtype=np.float64), self.centroids)


def sq_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def nearest(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # argmin returns the first minimum, i.e. ties go to the lowest centroid index
    return np.argmin(sq_distances(points, centroids), axis=1)


def _kmeans_pp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = sq_distances(X, X[chosen])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # all remaining points coincide with a centre; take the next unused index
            rest = [i for i in range(n) if i not in chosen]
            idx = rest[0]
        else:
            idx = int(rng.choice(n, p=d2 / total))
        chosen.append(idx)
        d2 = np.minimum(d2, sq_distances(X, X[idx: idx + 1])[:, 0])
    return X[chosen].copy()


def kmeans_fit(points, k: int, seed: int = 0, max_iter: int = 300) -> KMeansModel:
    """k-means++ seeding then Lloyd iterations to an assignment fixpoint.

    An emptied cluster is re-seeded with the point farthest from its own
    centroid, so every cluster of the returned model is non-empty.
    """
    X = np.asarray(points, dtype=np.float64)
    n = X.shape[0]
    if k < 1 or n < k:
        raise ValidationError(f"k-means needs 1 <= k <= n (n={n}, k={k})")
    rng = np.random.default_rng(seed)
    C = _kmeans_pp(X, k, rng)
    labels = nearest(X, C)
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        for j in range(k):
            members = labels == j
            if members.any():
                C[j] = X[members].mean(axis=0)
        labels, C = _fill_empty(X, labels, C)
        d = sq_distances(X, C)
        new = np.argmin(d, axis=1)
        history.append(float(d[np.arange(n), new].sum()))
        if np.array_equal(new, labels):
            break
        labels = new
    labels, C = _fill_empty(X, labels, C)
    counts = np.bincount(labels, minlength=k)
    return KMeansModel(C, counts, labels, history, it)


def _fill_empty(X, labels, C):
    k = C.shape[0]
    while True:
        counts = np.bincount(labels, minlength=k)
        empty = np.flatnonzero(counts == 0)
        if empty.size == 0:
            return labels, C
        own = ((X - C[labels]) ** 2).sum(axis=1)
        # never strip the last member of another cluster
        own[counts[labels] <= 1] = -1.0
        far = int(np.argmax(own))
        j = int(empty[0])
        C[j] = X[far]
        labels = labels.copy()
        labels[far] = j


# -- code matrix -------------------------------------------------------------


@dataclass
class CodeMatrix:
    codes: np.ndarray  # v x n, 1-based
    item_ids: list[str]

    @property
    def v(self) -> int:
        return self.codes.shape[0]

    @property
    def n(self) -> int:
        return self.codes.shape[1]

    def column(self, j: int) -> tuple[int, ...]:
        return tuple(int(c) for c in self.codes[:, j])

    def semantic_id(self, item_id: str) -> tuple[int, ...]:
        return self.column(self.index[item_id])

    @property
    def index(self) -> dict[str, int]:
        return {iid: j for j, iid in enumerate(self.item_ids)}

    def columns(self) -> list[tuple[int, ...]]:
        return [self.column(j) for j in range(self.n)]

    def all_distinct(self) -> bool:
        return len(set(self.columns())) == self.n

    def write_tsv(self, path: str | Path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("item_id\t" + "\t".join(f"c_{i}" for i in range(1, self.v + 1)) + "\n")
            for j, iid in enumerate(self.item_ids):
                fh.write(iid + "\t" + "\t".join(str(c) for c in self.column(j)) + "\n")

    @classmethod
    def read_tsv(cls, path: str | Path) -> "CodeMatrix":
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().rstrip("\n").split("\t")
            if not header or header[0] != "item_id":
                raise ValidationError(f"{path}: bad code-file header")
            ids, cols = [], []
            for line in fh:
                if line.strip():
                    parts = line.rstrip("\n").split("\t")
                    if len(parts) != len(header):
                        raise ValidationError(f"{path}: row width does not match header")
                    ids.append(parts[0])
                    cols.append([int(x) for x in parts[1:]])
        return cls(np.array(cols, dtype=np.int64).T.reshape(len(header) - 1, len(ids)), ids)


@dataclass
class ClusterResult:
    codes: CodeMatrix
    pcas: list[PcaModel]
    kmeans: list[KMeansModel]
    reduced: list[np.ndarray]


def assign_codes(E, item_ids: Sequence[str], d: int, k: int, seed: int = 0, global_pca: bool = False) -> ClusterResult:
    """PCA then k-means independently for each dense-token position (row of ``E``)."""
    E = np.asarray(E, dtype=np.float64)
    v, n, _ = E.shape
    if n < k:
        raise ValidationError(f"need at least k={k} items, got {n}")
    shared = pca_fit(E.reshape(v * n, -1), d) if global_pca else None
    pcas, kms, reduced = [], [], []
    codes = np.zeros((v, n), dtype=np.int64)
    for i in range(v):
        pca = shared or pca_fit(E[i], d)
        Z = pca_transform(pca, E[i])
        km = kmeans_fit(Z, k, seed=seed * 1000 + i)
        codes[i] = km.predict(Z) + 1
        pcas.append(pca)
        kms.append(km)
        reduced.append(Z)
    return ClusterResult(CodeMatrix(codes, list(item_ids)), pcas, kms, reduced)


def resolve_collisions(C: CodeMatrix, reduced: Sequence[np.ndarray], centroids: Sequence[np.ndarray],
                       strict: bool = False) -> tuple[CodeMatrix, list[str]]:
    """Make all columns distinct; returns the new matrix and the ids that moved.

    In each group of identical columns the item nearest its last-position
    centroid (then lowest id) keeps its code.  The others, in ascending id
    order, take the nearest alternative last-position code whose column is
    still free.  If every last-position alternative is taken, the search
    widens to earlier positions (nearest-first), unless ``strict``.
    """
    v, n = C.codes.shape
    codes = C.codes.copy()
    ids = C.item_ids
    dist = [sq_distances(np.asarray(reduced[p], dtype=np.float64), np.asarray(centroids[p], dtype=np.float64))
            for p in range(v)]
    groups: dict[tuple, list[int]] = {}
    for j in range(n):
        groups.setdefault(tuple(codes[:, j]), []).append(j)
    used = set(groups)
    movers = []
    for col, members in groups.items():
        if len(members) < 2:
            continue
        keep = min(members, key=lambda j: (dist[v - 1][j, col[v - 1] - 1], ids[j]))
        movers.extend(j for j in members if j != keep)
    movers.sort(key=lambda j: ids[j])
    moved = []
    for j in movers:
        new = _free_column(tuple(codes[:, j]), [d[j] for d in dist], used, strict)
        if new is None:
            raise UnresolvedCollisionError(f"no free code for item {ids[j]} (column {tuple(codes[:, j])})")
        used.add(new)
        codes[:, j] = new
        moved.append(ids[j])
    return CodeMatrix(codes, list(ids)), moved


def _free_column(col: tuple, dists: list[np.ndarray], used: set, strict: bool):
    v = len(col)
    ranked = [list(np.argsort(d, kind="stable") + 1) for d in dists]
    last = v - 1 if strict else 0
    for p in range(v - 1, last - 1, -1):
        for head in ranked[p]:
            if head == col[p]:
                continue
            for tail in itertools.product(*ranked[p + 1:]):
                cand = col[:p] + (int(head),) + tuple(int(t) for t in tail)
                if cand not in used:
                    return cand
    return None


def hamming_distance(a: Sequence[int], b: Sequence[int]) -> int:
    if len(a) != len(b):
        raise ValidationError("semantic ids must have equal length")
    return sum(x != y for x, y in zip(a, b))


def identifier_capacity(k: int, v: int) -> int:
    return k ** v


def identifier_memory(n: int, D: int, k: int, v: int) -> tuple[int, int]:
    """(id-embedding floats n*D, code storage k*v*D centroid floats + n*v integers)."""
    return n * D, k * v * D + n * v


def save_cluster_models(prefix, result: ClusterResult, meta: dict | None = None):
    tensors = {}
    for i, (pca, km) in enumerate(zip(result.pcas, result.kmeans)):
        tensors[f"pca{i}.mean"] = pca.mean
        tensors[f"pca{i}.components"] = pca.components
        tensors[f"pca{i}.explained_variance"] = pca.explained_variance
        tensors[f"pca{i}.ratio"] = pca.explained_variance_ratio
        tensors[f"kmeans{i}.centroids"] = km.centroids
    counts = [km.counts.tolist() for km in result.kmeans]
    return save_tensors(prefix, tensors, {"kind": "cluster_models", "v": len(result.pcas), "counts": counts, **(meta or {})})


def load_cluster_models(prefix) -> tuple[list[PcaModel], list[np.ndarray], dict]:
    manifest, t = load_tensors(prefix)
    if manifest.get("kind") != "cluster_models":
        raise ValidationError(f"{prefix} is not a cluster-model artifact")
    pcas, cents = [], []
    for i in range(manifest["v"]):
        pcas.append(PcaModel(t[f"pca{i}.mean"].astype(np.float64), t[f"pca{i}.components"].astype(np.float64),
                             t[f"pca{i}.explained_variance"].astype(np.float64), t[f"pca{i}.ratio"].astype(np.float64)))
        cents.append(t[f"kmeans{i}.centroids"].astype(np.float64))
    return pcas, cents, manifest
