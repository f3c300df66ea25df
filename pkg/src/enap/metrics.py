"""Structural evaluation of a mined machine, its rollouts and its training data."""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .abstraction import EncoderParams, encode_dataset
from .core import PMM, Dataset, EnapError, nd_trace

CSV_COLUMNS = ("sr", "srn", "apf", "lvr", "css", "asd")


class EmptyRollouts(EnapError, ValueError):
    pass


class UntracedDataset(EnapError, ValueError):
    pass


@dataclass
class StructuralReport:
    sr: float | None  # None when computed without rollouts
    srn: float | None
    apf: float
    lvr: float
    css: float | None  # None with fewer than two clusters
    asd: float
    node_count: int
    edge_count: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        w.writerow(["n/a" if getattr(self, k) is None else repr(float(getattr(self, k))) for k in CSV_COLUMNS])
        return buf.getvalue()


def success_rate(rollouts) -> float:
    rollouts = list(rollouts)
    if not rollouts:
        raise EmptyRollouts("no rollouts to score")
    return float(np.mean([bool(r.success if hasattr(r, "success") else r["success"]) for r in rollouts]))


def srn(sr: float, node_count: int) -> float:
    return sr / node_count


def lvr(pmm: PMM) -> float:
    """Share of edges that are self-loops."""
    if not pmm.edges:
        return 0.0
    return sum(e.src == e.dst for e in pmm.edges) / len(pmm.edges)


def asd(pmm: PMM) -> float:
    """Mean pairwise Euclidean distance between edge action means (0 for fewer than two edges).

    The sum is correctly rounded so the value does not depend on edge order.
    """
    means = [np.asarray(e.action_mean, dtype=float) for e in pmm.edges]
    if len(means) < 2:
        return 0.0
    dists = [math.dist(a, b) for a, b in itertools.combinations(means, 2)]
    return math.fsum(dists) / len(dists)


def apf(pmm: PMM, ds: Dataset, eps_err: float | None = None) -> float:
    """Mean squared error between demo actions and the action mean of the edge each step takes.

    Edges come from the lexicographically least surviving path of every
    trajectory (with the action tolerance when ``eps_err`` is given).
    """
    errs = []
    for t in ds:
        if t.symbols is None:
            raise UntracedDataset(f"trajectory {t.traj_id} has no symbols")
        tr = nd_trace(pmm, t.symbols, t.actions if eps_err is not None else None, eps_err)
        if not tr.ok:
            raise UntracedDataset(f"trajectory {t.traj_id} leaves the machine at step {tr.failed_at}")
        for k, (c, a) in enumerate(zip(t.symbols, t.actions)):
            edge = next(e for e in pmm.out_edges(tr.path[k], int(c)) if e.dst == tr.path[k + 1])
            errs.append(float(np.sum((a - edge.action_mean) ** 2)))
    return float(np.mean(errs))


def _cos_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(A, axis=1, keepdims=True)
    nb = np.linalg.norm(B, axis=1, keepdims=True)
    return (A / np.where(na > 0, na, 1.0)) @ (B / np.where(nb > 0, nb, 1.0)).T


def css(features: np.ndarray, labels: np.ndarray) -> float | None:
    """Mean cosine of each cluster's representative to its members over mean cosine between representatives.

    The representative is the member nearest the cluster mean.  The
    denominator is clipped at 1e-6.  None when there are fewer than two clusters.
    """
    F = np.asarray(features, dtype=float)
    labels = np.asarray(labels)
    ks = sorted(set(labels.tolist()))
    if len(ks) < 2:
        return None
    reps, intra = [], []
    for k in ks:
        M = F[labels == k]
        rep = M[int(np.argmin(np.linalg.norm(M - M.mean(axis=0), axis=1)))]
        reps.append(rep)
        intra.append(float(np.mean(_cos_matrix(rep[None], M))))
    R = np.stack(reps)
    C = _cos_matrix(R, R)
    inter = float(np.mean(C[np.triu_indices(len(ks), 1)]))
    return float(np.mean(intra)) / max(inter, 1e-6)


def structural_metrics(pmm: PMM, rollouts, ds: Dataset, enc: EncoderParams, eps_err: float | None = None) -> StructuralReport:
    """All six structural metrics; pass ``rollouts=None`` for a dataset-only report (sr/srn = None)."""
    sr = None if rollouts is None else success_rate(rollouts)
    feats = np.concatenate(encode_dataset(enc, ds))
    labels = np.concatenate([t.symbols for t in ds])
    return StructuralReport(
        sr=sr,
        srn=None if sr is None else srn(sr, pmm.n_states),
        apf=apf(pmm, ds, eps_err),
        lvr=lvr(pmm),
        css=css(feats, labels),
        asd=asd(pmm),
        node_count=pmm.n_states,
        edge_count=len(pmm.edges),
    )
