"""Hierarchical clustering of unique spike variants.

Distances count mismatched residues.  Because every variant is called
against one reference, the distance between two variants equals the size
of the symmetric difference of their mutation sets, which costs a merge of
two short sorted lists instead of a pass over 1273 residues.

Agglomeration uses the Ward update on the raw distances (the ``ward.D``
convention)::

    d(k, i+j) = [(n_i + n_k) d(i,k) + (n_j + n_k) d(j,k) - n_k d(i,j)] / (n_i + n_j + n_k)

At every step the closest pair of active clusters is merged; ties go to the
lexicographically smallest ``(i, j)`` pair of cluster slots, where a merged
cluster keeps the smaller slot.  Node numbering follows the usual linkage
convention: leaves are ``0..n-1`` and the cluster formed at step ``s`` is
``n + s``.
"""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numba
import numpy as np
import pandas as pd

from .ingest import Mutation, UniqueVariant, roman


def hamming(a: str, b: str) -> int:
    """Number of positions at which two equal-length strings differ."""
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")
    return sum(x != y for x, y in zip(a, b))


# ----------------------------------------------------------- distances


@dataclass
class DistanceMatrix:
    """Condensed upper triangle, row-major: entry for ``i < j`` lives at
    ``n*i - i*(i+1)/2 + j - i - 1`` (the layout of ``scipy.spatial.distance``)."""

    n: int
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.n * (self.n - 1) // 2,):
            raise ValueError("condensed distances must have n(n-1)/2 entries")
        if (self.values < 0).any():
            raise ValueError("distances must be nonnegative")

    def __getitem__(self, ij) -> float:
        i, j = ij
        if i == j:
            return 0.0
        if i > j:
            i, j = j, i
        return float(self.values[self.n * i - i * (i + 1) // 2 + j - i - 1])

    def square(self) -> np.ndarray:
        out = np.zeros((self.n, self.n))
        iu = np.triu_indices(self.n, 1)
        out[iu] = self.values
        out[(iu[1], iu[0])] = self.values
        return out

    @classmethod
    def from_square(cls, square) -> "DistanceMatrix":
        square = np.asarray(square, dtype=float)
        n = square.shape[0]
        if square.shape != (n, n) or not np.allclose(square, square.T):
            raise ValueError("expected a symmetric square matrix")
        return cls(n, square[np.triu_indices(n, 1)])


def _encode(mutations) -> np.ndarray:
    # position and alternative letter identify a substitution against one reference
    return np.array(sorted(m.position * 256 + (ord(m.alt_aa) & 255) for m in mutations),
                    dtype=np.int64)


@numba.njit(cache=True, parallel=True)
def _mismatch_condensed(codes, offsets, n):
    out = np.empty(n * (n - 1) // 2)
    for i in numba.prange(n):
        a0, a1 = offsets[i], offsets[i + 1]
        base = n * i - i * (i + 1) // 2 - i - 1
        for j in range(i + 1, n):
            b0, b1 = offsets[j], offsets[j + 1]
            # merge by position: a site mutated in both counts once unless
            # both carry the same substitution
            x, y, diff = a0, b0, 0
            while x < a1 and y < b1:
                px, py = codes[x] >> 8, codes[y] >> 8
                if px == py:
                    if codes[x] != codes[y]:
                        diff += 1
                    x += 1
                    y += 1
                elif px < py:
                    diff += 1
                    x += 1
                else:
                    diff += 1
                    y += 1
            out[base + j] = diff + (a1 - x) + (b1 - y)
    return out


def distance_matrix(variants: Sequence[UniqueVariant]) -> DistanceMatrix:
    """Pairwise mismatch counts of unique variants from their mutation sets."""
    n = len(variants)
    lengths = {len(v.residues) for v in variants}
    if len(lengths) > 1:
        raise ValueError("variants must all have the same length")
    encoded = [_encode(v.mutations) for v in variants]
    offsets = np.zeros(n + 1, dtype=np.int64)
    offsets[1:] = np.cumsum([len(e) for e in encoded])
    codes = np.concatenate(encoded) if n else np.zeros(0, dtype=np.int64)
    if n < 2:
        return DistanceMatrix(n, np.zeros(0))
    return DistanceMatrix(n, _mismatch_condensed(codes, offsets, n))


# ------------------------------------------------------------ agglomeration


@dataclass
class Dendrogram:
    """Merge list; row ``s`` is ``(left, right, height, size)``."""

    n: int
    merges: np.ndarray

    def __post_init__(self):
        self.merges = np.asarray(self.merges, dtype=float).reshape(-1, 4)
        if len(self.merges) != self.n - 1:
            raise ValueError("a dendrogram over n leaves has n-1 merges")

    @property
    def heights(self) -> np.ndarray:
        return self.merges[:, 2]

    def to_dict(self) -> dict:
        return {"n": self.n, "merges": [
            {"left": int(l), "right": int(r), "height": float(h), "size": float(s)}
            for l, r, h, s in self.merges]}

    @classmethod
    def from_dict(cls, d) -> "Dendrogram":
        return cls(int(d["n"]), [[m["left"], m["right"], m["height"], m["size"]]
                                 for m in d["merges"]])


@numba.njit(cache=True)
def _row_nn(D, active, i):
    n = D.shape[0]
    best, arg = np.inf, -1
    for j in range(i + 1, n):
        if active[j] and D[i, j] < best:
            best, arg = D[i, j], j
    return best, arg


@numba.njit(cache=True)
def _ward_generic(D, sizes):
    n = D.shape[0]
    active = np.ones(n, dtype=np.bool_)
    node = np.arange(n)
    size = sizes.copy()
    nn = np.full(n, -1)
    nn_d = np.full(n, np.inf)
    for i in range(n - 1):
        nn_d[i], nn[i] = _row_nn(D, active, i)
    out = np.empty((n - 1, 4))
    for step in range(n - 1):
        # closest pair; strict comparison keeps the smallest slot on ties
        i, best = -1, np.inf
        for k in range(n):
            if active[k] and nn[k] >= 0 and nn_d[k] < best:
                best, i = nn_d[k], k
        j = nn[i]
        dij = D[i, j]
        ni, nj = size[i], size[j]
        a, b = node[i], node[j]
        out[step, 0] = min(a, b)
        out[step, 1] = max(a, b)
        out[step, 2] = dij
        out[step, 3] = ni + nj
        active[j] = False
        for k in range(n):
            if active[k] and k != i:
                nk = size[k]
                dk = ((ni + nk) * D[i, k] + (nj + nk) * D[j, k] - nk * dij) / (ni + nj + nk)
                D[i, k] = dk
                D[k, i] = dk
        size[i] = ni + nj
        node[i] = n + step
        nn_d[i], nn[i] = _row_nn(D, active, i)
        for k in range(i):
            if not active[k]:
                continue
            if nn[k] == i or nn[k] == j:
                nn_d[k], nn[k] = _row_nn(D, active, k)
            elif D[k, i] < nn_d[k] or (D[k, i] == nn_d[k] and i < nn[k]):
                nn_d[k], nn[k] = D[k, i], i
        for k in range(i + 1, j):
            if active[k] and nn[k] == j:
                nn_d[k], nn[k] = _row_nn(D, active, k)
    return out


def ward_cluster(D: DistanceMatrix, sizes=None) -> Dendrogram:
    """Ward (``ward.D``) agglomeration of a distance matrix.

    Parameters
    ----------
    D : DistanceMatrix
    sizes : array_like, optional
        Initial cluster sizes.  The default of one per leaf clusters unique
        variants unweighted; passing the variant counts treats each variant
        as that many coincident sequences.
    """
    if D.n < 2:
        raise ValueError("need at least two items to cluster")
    sizes = np.ones(D.n) if sizes is None else np.asarray(sizes, dtype=float)
    if sizes.shape != (D.n,) or (sizes <= 0).any():
        raise ValueError("sizes must be positive, one per item")
    square = D.square()
    # a group of w coincident leaves sits at Ward distance 2 w v / (w + v) d
    # from another group of v, which makes weighting equal to replication
    square *= 2 * np.outer(sizes, sizes) / np.add.outer(sizes, sizes)
    return Dendrogram(D.n, _ward_generic(square, sizes))


# ------------------------------------------------------------ assignment


@dataclass
class ClusterAssignment:
    """Cluster label (1..k) of every variant, ordered so that cluster 1 has
    the most sequences."""

    k: int
    labels: np.ndarray
    residues: list = field(default_factory=list)
    ids: list = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self._by_residues = {r: int(l) for r, l in zip(self.residues, self.labels)}
        self._by_id = {}
        for members, lab in zip(self.ids, self.labels):
            for m in members:
                self._by_id[m] = int(lab)

    def label_of(self, record) -> int:
        """Label of a sequence record, looked up by residues then by id."""
        lab = self._by_residues.get(getattr(record, "residues", record))
        if lab is None:
            lab = self._by_id.get(getattr(record, "id", record))
        if lab is None:
            raise KeyError(f"record {getattr(record, 'id', record)!r} has no cluster")
        return lab

    def members(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.labels == label)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "variant": np.arange(len(self.labels)),
            "variant_id": [m[0] if m else "" for m in self.ids] if self.ids
            else np.arange(len(self.labels)).astype(str),
            "cluster": self.labels,
            "cluster_name": [roman(int(l)) for l in self.labels],
        })


def _components(dg: Dendrogram, k: int) -> np.ndarray:
    n = dg.n
    parent = np.arange(2 * n - 1)

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for s, (l, r, _, _) in enumerate(dg.merges[: n - k]):
        parent[int(l)] = n + s
        parent[int(r)] = n + s
    return np.array([find(i) for i in range(n)])


def cut_tree(dg: Dendrogram, k: int, weights=None,
             variants: Sequence[UniqueVariant] | None = None) -> ClusterAssignment:
    """Undo the last ``k - 1`` merges and label the components.

    Labels run from 1 (largest) to ``k`` by the weighted member count;
    ``weights`` defaults to the variant counts when ``variants`` is given
    and to one per leaf otherwise.  Ties go to the cluster holding the
    smallest leaf index.
    """
    if not 1 <= k <= dg.n:
        raise ValueError(f"k must be between 1 and {dg.n}")
    if weights is None:
        weights = [v.count for v in variants] if variants is not None else np.ones(dg.n)
    weights = np.asarray(weights, dtype=float)
    roots = _components(dg, k)
    order = {}
    for root in dict.fromkeys(roots):
        members = np.flatnonzero(roots == root)
        order[root] = (-weights[members].sum(), members.min())
    ranked = sorted(order, key=order.get)
    relabel = {root: c + 1 for c, root in enumerate(ranked)}
    labels = np.array([relabel[r] for r in roots])
    residues = [v.residues for v in variants] if variants is not None else []
    ids = [list(v.member_ids) for v in variants] if variants is not None else []
    return ClusterAssignment(k, labels, residues, ids)


# --------------------------------------------------------------- summaries


def mutation_frequency_table(assignment: ClusterAssignment, variants: Sequence[UniqueVariant],
                             top_m: int = 10) -> pd.DataFrame:
    """Share of each cluster's sequences carrying each mutation, top ``top_m``
    per cluster (ties in position order)."""
    rows = []
    for c in range(1, assignment.k + 1):
        members = assignment.members(c)
        total = sum(variants[i].count for i in members)
        carried = Counter()
        for i in members:
            for m in variants[i].mutations:
                carried[m] += variants[i].count
        ranked = sorted(carried.items(), key=lambda kv: (-kv[1], kv[0]))[:top_m]
        for m, n in ranked:
            rows.append({"cluster": c, "cluster_name": roman(c), "mutation": str(m),
                         "sequences": n, "frequency": n / total if total else math.nan})
    return pd.DataFrame(rows, columns=["cluster", "cluster_name", "mutation", "sequences",
                                       "frequency"])


def top_variants(assignment: ClusterAssignment, variants: Sequence[UniqueVariant],
                 m: int = 3) -> pd.DataFrame:
    """The ``m`` most frequent unique sequences of each cluster with their
    mutation lists; ties are ordered by the sorted mutation list."""
    rows = []
    for c in range(1, assignment.k + 1):
        members = sorted(assignment.members(c),
                         key=lambda i: (-variants[i].count, tuple(sorted(variants[i].mutations))))
        for rank, i in enumerate(members[:m], start=1):
            rows.append({"cluster": c, "cluster_name": roman(c), "rank": rank,
                         "variant": int(i), "count": variants[i].count,
                         "mutations": variants[i].label()})
    return pd.DataFrame(rows, columns=["cluster", "cluster_name", "rank", "variant", "count",
                                       "mutations"])


def cluster_sizes(assignment: ClusterAssignment, variants: Sequence[UniqueVariant]) -> pd.DataFrame:
    rows = []
    for c in range(1, assignment.k + 1):
        members = assignment.members(c)
        rows.append({"cluster": c, "cluster_name": roman(c), "variants": len(members),
                     "sequences": int(sum(variants[i].count for i in members))})
    return pd.DataFrame(rows)


# ------------------------------------------------------------------- output


def write_outputs(outdir, dg: Dendrogram, assignment: ClusterAssignment,
                  variants: Sequence[UniqueVariant], top_m: int = 10, m: int = 3) -> dict:
    """Write the dendrogram, assignment and summary tables; returns the paths."""
    from pathlib import Path
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = {
        "dendrogram": outdir / "dendrogram.json",
        "assignment": outdir / "assignment.csv",
        "mutation_frequencies": outdir / "mutation_frequencies.csv",
        "top_variants": outdir / "top_variants.csv",
        "cluster_sizes": outdir / "cluster_sizes.csv",
    }
    with open(paths["dendrogram"], "w") as fh:
        json.dump(dg.to_dict(), fh)
    assignment.to_frame().to_csv(paths["assignment"], index=False, quoting=csv.QUOTE_MINIMAL)
    mutation_frequency_table(assignment, variants, top_m).to_csv(
        paths["mutation_frequencies"], index=False)
    top_variants(assignment, variants, m).to_csv(paths["top_variants"], index=False)
    cluster_sizes(assignment, variants).to_csv(paths["cluster_sizes"], index=False)
    return paths


def read_assignment(path, variants: Sequence[UniqueVariant]) -> ClusterAssignment:
    df = pd.read_csv(path)
    labels = df.sort_values("variant")["cluster"].to_numpy()
    if len(labels) != len(variants):
        raise ValueError("assignment does not match the variant table")
    return ClusterAssignment(int(labels.max()), labels, [v.residues for v in variants],
                             [list(v.member_ids) for v in variants])


__all__ = ["hamming", "DistanceMatrix", "distance_matrix", "Dendrogram", "ward_cluster",
           "ClusterAssignment", "cut_tree", "mutation_frequency_table", "top_variants",
           "cluster_sizes", "write_outputs", "read_assignment", "Mutation"]
