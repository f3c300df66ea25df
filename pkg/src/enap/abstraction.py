"""Symbol abstraction: feature encoding and discovery of the discrete alphabet.

Observations are mapped to features by a small feedforward encoder (or the
identity), clustered with a simplified HDBSCAN that picks the number of
symbols on its own, optionally refined with K-Means, and finally every step is
labelled with its nearest cluster centre.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .core import Dataset, DimensionMismatch, EnapError
from .nnkit import Params, init_mlp, mlp_forward, params_from_dict, params_to_dict

log = logging.getLogger(__name__)

NOISE = -1


class NoClustersFound(EnapError, ValueError):
    pass


class KTooLarge(EnapError, ValueError):
    pass


class EmptyCodebook(EnapError, ValueError):
    pass


# ---------------------------------------------------------------------------
# feature encoder


@dataclass
class EncoderParams:
    """Feature map phi(o). ``identity`` encoders have no parameters and are never fine-tuned."""

    in_dim: int
    params: Params | None = None
    identity: bool = False

    @property
    def out_dim(self) -> int:
        if self.identity:
            return self.in_dim
        n = sum(1 for k in self.params if k.startswith("W"))
        return self.params[f"W{n - 1}"].shape[1]

    def __call__(self, obs) -> np.ndarray:
        obs = np.asarray(obs, dtype=float)
        if obs.shape[-1] != self.in_dim:
            raise DimensionMismatch(f"encoder expects {self.in_dim}-d observations, got {obs.shape[-1]}")
        if self.identity:
            return obs.copy()
        return mlp_forward(self.params, obs)

    def to_dict(self) -> dict:
        header = {"kind": "feature_encoder", "identity": self.identity, "in_dim": self.in_dim}
        if self.identity:
            return {"format": "nnkit_v1", **header, "params": {}}
        return params_to_dict(self.params, header)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderParams":
        if d.get("identity"):
            return cls(int(d["in_dim"]), None, True)
        return cls(int(d["in_dim"]), params_from_dict(d), False)


def identity_encoder(dim: int) -> EncoderParams:
    return EncoderParams(dim, None, True)


def linear_encoder(weight, bias=None) -> EncoderParams:
    weight = np.asarray(weight, dtype=float)
    bias = np.zeros(weight.shape[1]) if bias is None else np.asarray(bias, dtype=float)
    return EncoderParams(weight.shape[0], {"W0": weight, "b0": bias})


def mlp_encoder(sizes, rng) -> EncoderParams:
    return EncoderParams(sizes[0], init_mlp(sizes, rng))


def standardizing_encoder(ds: Dataset) -> EncoderParams:
    """Trainable affine encoder initialised to per-dimension z-scoring of the dataset."""
    X = np.concatenate([t.obs for t in ds])
    mu, sd = X.mean(axis=0), X.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    return linear_encoder(np.diag(1.0 / sd), -mu / sd)


def encode_dataset(enc: EncoderParams, ds: Dataset) -> list[np.ndarray]:
    if ds.obs_dim != enc.in_dim:
        raise DimensionMismatch(f"encoder input {enc.in_dim} != dataset obs_dim {ds.obs_dim}")
    return [enc(t.obs) for t in ds]


# ---------------------------------------------------------------------------
# codebook


@dataclass
class Codebook:
    centroids: np.ndarray
    min_cluster_size: int = 0
    refined: bool = False

    def __post_init__(self):
        self.centroids = np.atleast_2d(np.asarray(self.centroids, dtype=float))

    def __len__(self):
        return 0 if self.centroids.size == 0 else len(self.centroids)

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def to_dict(self) -> dict:
        return {
            "centroids": [[float(v) for v in c] for c in self.centroids],
            "min_cluster_size": int(self.min_cluster_size),
            "refined": bool(self.refined),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Codebook":
        return cls(np.asarray(d["centroids"], dtype=float), int(d["min_cluster_size"]), bool(d["refined"]))


def save_codebook(cb: Codebook, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(cb.to_dict(), fh)
        fh.write("\n")


def load_codebook(path) -> Codebook:
    with open(path, encoding="utf-8") as fh:
        return Codebook.from_dict(json.load(fh))


def assign_symbols(cb: Codebook, features) -> np.ndarray:
    """Nearest centroid (Euclidean) per row; ties go to the smallest symbol id."""
    if len(cb) == 0:
        raise EmptyCodebook("codebook has no centroids")
    F = np.atleast_2d(np.asarray(features, dtype=float))
    if F.shape[1] != cb.dim:
        raise DimensionMismatch(f"feature dim {F.shape[1]} != codebook dim {cb.dim}")
    d2 = ((F[:, None, :] - cb.centroids[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1).astype(np.int64)


def assign_symbol(cb: Codebook, f) -> int:
    return int(assign_symbols(cb, np.asarray(f, dtype=float)[None])[0])


def annotate_dataset(ds: Dataset, cb: Codebook, enc: EncoderParams) -> Dataset:
    feats = encode_dataset(enc, ds)
    return Dataset(tuple(t.with_symbols(assign_symbols(cb, f)) for t, f in zip(ds, feats)))


# ---------------------------------------------------------------------------
# density clustering


def _core_distances(X: np.ndarray, k: int) -> np.ndarray:
    # k-th nearest neighbour counting the point itself
    k = min(k, len(X))
    d, _ = cKDTree(X).query(X, k=k)
    return d if k == 1 else d[:, -1]


def _mst_mutual_reachability(X: np.ndarray, core: np.ndarray) -> np.ndarray:
    """Prim's algorithm on the implicit complete mutual-reachability graph; rows (i, j, w)."""
    n = len(X)
    in_tree = np.zeros(n, dtype=bool)
    best = np.full(n, np.inf)
    src = np.zeros(n, dtype=np.int64)
    edges = np.empty((n - 1, 3))
    cur = 0
    in_tree[0] = True
    for i in range(n - 1):
        d = np.sqrt(((X - X[cur]) ** 2).sum(axis=1))
        mr = np.maximum(np.maximum(d, core), core[cur])
        upd = ~in_tree & (mr < best)
        best[upd] = mr[upd]
        src[upd] = cur
        cand = np.where(in_tree, np.inf, best)
        nxt = int(np.argmin(cand))
        edges[i] = (src[nxt], nxt, best[nxt])
        in_tree[nxt] = True
        cur = nxt
    return edges


def _single_linkage(n: int, mst: np.ndarray):
    order = np.argsort(mst[:, 2], kind="mergesort")
    parent = np.arange(2 * n - 1)
    size = np.ones(2 * n - 1, dtype=np.int64)
    children = {}
    dist = {}

    def find(x):
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    node = n
    for i in order:
        a, b, w = int(mst[i, 0]), int(mst[i, 1]), mst[i, 2]
        ra, rb = find(a), find(b)
        children[node] = (ra, rb)
        dist[node] = w
        size[node] = size[ra] + size[rb]
        parent[ra] = parent[rb] = node
        node += 1
    return children, dist, size


def _leaves(node, n, children):
    out, stack = [], [node]
    while stack:
        x = stack.pop()
        if x < n:
            out.append(x)
        else:
            stack.extend(children[x])
    return out


def _condense(n: int, children, dist, size, mcs: int):
    """Condensed cluster tree as rows (parent_cluster, child, lambda, child_size).

    Clusters are numbered from n upwards, the root being n.
    """
    root = 2 * n - 2
    label = {root: n}
    next_label = n + 1
    rows = []
    stack = [root]
    while stack:
        node = stack.pop(0)
        left, right = children[node]
        lam = 1.0 / max(dist[node], 1e-12)
        lc = size[left] if left >= n else 1
        rc = size[right] if right >= n else 1
        me = label[node]
        if lc >= mcs and rc >= mcs:
            for ch, cnt in ((left, lc), (right, rc)):
                label[ch] = next_label
                rows.append((me, next_label, lam, cnt))
                next_label += 1
                stack.append(ch)
        else:
            for ch, cnt in ((left, lc), (right, rc)):
                if cnt >= mcs:
                    label[ch] = me
                    stack.append(ch)
                else:
                    for p in _leaves(ch, n, children):
                        rows.append((me, p, lam, 1))
    return rows


def _hdbscan_labels(X: np.ndarray, mcs: int, min_samples: int, root_persistence: float,
                    selection: str = "leaf") -> np.ndarray:
    n = len(X)
    labels = np.full(n, NOISE, dtype=np.int64)
    if n < 2:
        return labels
    core = _core_distances(X, min_samples)
    mst = _mst_mutual_reachability(X, core)
    children, dist, size = _single_linkage(n, mst)
    rows = _condense(n, children, dist, size, mcs)

    cluster_children = {}
    point_parent = {}
    point_lambda = {}
    for parent, child, lam, cnt in rows:
        if child >= n:
            cluster_children.setdefault(parent, []).append(child)
        else:
            point_parent[child] = parent
            point_lambda[child] = lam
    clusters = sorted({r[0] for r in rows} | {r[1] for r in rows if r[1] >= n})
    leaves = [c for c in clusters if c not in cluster_children]

    if leaves == [n]:
        # no split ever produced two large children: accept the whole set only if
        # most points persist well beyond the density at which everything connects
        if mst[:, 2].max() == 0.0:
            labels[:] = 0  # every point coincides
            return labels
        lam_min = 1.0 / mst[:, 2].max()
        pers = np.array([point_lambda[i] for i in range(n)]) / lam_min
        if np.median(pers) < root_persistence or np.sum(pers >= root_persistence) < mcs:
            return labels
        selected = [n]
    elif selection == "eom":
        selected = _excess_of_mass(rows, n, clusters, cluster_children)
    else:
        selected = leaves
    owner = {}
    for c in selected:
        stack = [c]
        while stack:
            x = stack.pop()
            owner[x] = c
            stack.extend(cluster_children.get(x, []))
    label_of = {c: i for i, c in enumerate(sorted(selected))}
    for p, parent in point_parent.items():
        if parent in owner:
            labels[p] = label_of[owner[parent]]
    return labels


def _excess_of_mass(rows, n, clusters, cluster_children):
    birth = {n: 0.0}
    for parent, child, lam, cnt in rows:
        if child >= n:
            birth[child] = lam
    stab = dict.fromkeys(clusters, 0.0)
    for parent, child, lam, cnt in rows:
        stab[parent] += (lam - birth[parent]) * cnt
    chosen = {}
    for c in sorted(clusters, reverse=True):
        if c == n:
            continue
        kids = cluster_children.get(c, [])
        below = sum(stab[k] for k in kids)
        if kids and below > stab[c]:
            stab[c] = below
            chosen[c] = False
        else:
            chosen[c] = True
    out, stack = [], list(cluster_children.get(n, []))
    while stack:
        c = stack.pop()
        if chosen[c]:
            out.append(c)
        else:
            stack.extend(cluster_children.get(c, []))
    return sorted(out)


def cluster_features(features, min_cluster_size: int, min_samples: int | None = None,
                     root_persistence: float = 3.0, selection: str = "leaf") -> tuple[Codebook, np.ndarray]:
    """Density clustering with an automatic cluster count and a noise label (-1).

    Simplified HDBSCAN: core distances, a minimum spanning tree over mutual
    reachability, the condensed tree, and leaf cluster extraction.  ``selection="eom"``
    switches to excess-of-mass selection, which splits smooth densities less.
    """
    X = np.asarray(features, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    min_samples = min_cluster_size if min_samples is None else min_samples
    if len(X) < min_cluster_size:
        raise NoClustersFound(f"{len(X)} points is fewer than min_cluster_size={min_cluster_size}")
    if selection not in ("leaf", "eom"):
        raise ValueError(f"unknown cluster selection {selection!r}")
    labels = _hdbscan_labels(X, int(min_cluster_size), int(min_samples), root_persistence, selection)
    k = int(labels.max()) + 1
    if k == 0:
        raise NoClustersFound("every point was labelled noise")
    centroids = np.stack([X[labels == i].mean(axis=0) for i in range(k)])
    return Codebook(centroids, int(min_cluster_size), False), labels


# ---------------------------------------------------------------------------
# K-Means refinement


def _kmeanspp(X: np.ndarray, k: int, rng) -> np.ndarray:
    uniq = np.unique(X, axis=0)
    if k > len(uniq):
        raise KTooLarge(f"k={k} exceeds the {len(uniq)} distinct points")
    if k == len(uniq):
        return uniq.copy()
    centers = [uniq[rng.integers(len(uniq))]]
    d2 = ((uniq - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        probs = d2 / d2.sum()
        c = uniq[rng.choice(len(uniq), p=probs)]
        centers.append(c)
        d2 = np.minimum(d2, ((uniq - c) ** 2).sum(axis=1))
    return np.stack(centers)


def lloyd(X: np.ndarray, centroids: np.ndarray, max_iter: int = 300, tol: float = 1e-8):
    """Lloyd iterations; returns (centroids, labels, inertia after each assignment)."""
    C = centroids.astype(float).copy()
    history = []
    labels = None
    for _ in range(max_iter):
        d2 = ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)
        labels = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(len(X)), labels].sum()))
        new = C.copy()
        for j in range(len(C)):
            m = labels == j
            if m.any():
                new[j] = X[m].mean(axis=0)
        shift = float(np.max(np.linalg.norm(new - C, axis=1)))
        C = new
        if shift < tol:
            break
    d2 = ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)
    labels = np.argmin(d2, axis=1)
    history.append(float(d2[np.arange(len(X)), labels].sum()))
    return C, labels.astype(np.int64), history


def refine_kmeans(features, k: int, seed: int = 0, min_cluster_size: int = 0) -> tuple[Codebook, np.ndarray]:
    X = np.asarray(features, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if k < 1:
        raise ValueError("k must be positive")
    if k > len(X):
        raise KTooLarge(f"k={k} exceeds {len(X)} points")
    init = _kmeanspp(X, k, np.random.default_rng(seed))
    C, labels, _ = lloyd(X, init)
    return Codebook(C, min_cluster_size, True), labels


# ---------------------------------------------------------------------------
# full alphabet discovery


def default_min_cluster_size(n_points: int) -> int:
    return max(5, int(round(0.01 * n_points)))


def discover_alphabet(features, min_cluster_size: int | None = None, min_samples: int | None = None,
                      refine: bool = True, seed: int = 0, selection: str = "leaf") -> tuple[Codebook, np.ndarray]:
    """Cluster, fold noise into the nearest cluster, and optionally refine with K-Means."""
    X = np.concatenate(features) if isinstance(features, (list, tuple)) else np.asarray(features, dtype=float)
    mcs = default_min_cluster_size(len(X)) if min_cluster_size is None else min_cluster_size
    cb, labels = cluster_features(X, mcs, min_samples, selection=selection)
    log.info("density clustering found %d symbols (%d noise points)", len(cb), int(np.sum(labels == NOISE)))
    if refine:
        return refine_kmeans(X, len(cb), seed=seed, min_cluster_size=mcs)
    labels = assign_symbols(cb, X)
    return cb, labels
