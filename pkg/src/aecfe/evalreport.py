"""Train-on-one-domain / test-on-every-domain evaluation and latent diagnostics."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Sequence

import numpy as np

from . import forest
from .forest import ForestConfig

EVAL_HEADER = ("train_domain", "test_domain", "accuracy_mean", "accuracy_std", "f1_mean", "f1_std", "n_test")
ALIGN_HEADER = ("domain_a", "domain_b", "distance")
EMBED_HEADER = ("record_id", "domain", "label", "p1", "p2")


@dataclass(frozen=True)
class EvalCell:
    accuracy_mean: float
    accuracy_std: float
    f1_mean: float
    f1_std: float
    n_test: int
    accuracies: tuple = ()
    f1s: tuple = ()


@dataclass(frozen=True)
class EvalMatrix:
    domains: tuple
    cells: dict  # (train_domain, test_domain) -> EvalCell

    def cell(self, train_domain: int, test_domain: int) -> EvalCell:
        return self.cells[(train_domain, test_domain)]

    def off_diagonal_accuracy(self) -> float:
        vals = [c.accuracy_mean for (a, b), c in self.cells.items() if a != b]
        return float(np.mean(vals))

    def diagonal_accuracy(self) -> float:
        return float(np.mean([self.cells[(d, d)].accuracy_mean for d in self.domains]))


def cross_domain_eval(latents, domains, labels, test_mask, forest_cfg: ForestConfig = ForestConfig(),
                      seeds: Sequence[int] = (0, 1, 2, 3, 4), n_classes=None) -> EvalMatrix:
    """Fit a forest on each domain's train rows; score it on every domain's test rows.

    ``test_mask`` marks held-out rows; forests never see them. Each cell
    reports mean and population std over one forest per seed.
    """
    X = np.asarray(latents, dtype=np.float64)
    domains = np.asarray(domains)
    labels = np.asarray(labels)
    test_mask = np.asarray(test_mask, dtype=bool)
    if not (len(X) == len(domains) == len(labels) == len(test_mask)):
        raise ValueError("latents, domains, labels and test_mask must be aligned")
    n_classes = int(labels.max()) + 1 if n_classes is None else n_classes
    ids = tuple(int(d) for d in np.unique(domains))
    for d in ids:
        if not np.any(test_mask & (domains == d)):
            raise ValueError(f"domain {d} has no test data")
        if np.count_nonzero(~test_mask & (domains == d)) < 2:
            raise ValueError(f"domain {d} has fewer than 2 training records")
    scores = {(a, b): ([], []) for a in ids for b in ids}
    for a in ids:
        train_rows = ~test_mask & (domains == a)
        for seed in seeds:
            model = forest.fit(X[train_rows], labels[train_rows], forest.with_seed(forest_cfg, seed), n_classes)
            for b in ids:
                test_rows = test_mask & (domains == b)
                pred = forest.predict(model, X[test_rows])
                scores[(a, b)][0].append(forest.accuracy(labels[test_rows], pred))
                scores[(a, b)][1].append(forest.weighted_f1(labels[test_rows], pred, n_classes))
    cells = {}
    for (a, b), (accs, f1s) in scores.items():
        cells[(a, b)] = EvalCell(float(np.mean(accs)), float(np.std(accs)), float(np.mean(f1s)),
                                 float(np.std(f1s)), int(np.count_nonzero(test_mask & (domains == b))),
                                 tuple(accs), tuple(f1s))
    return EvalMatrix(ids, cells)


@dataclass(frozen=True)
class EmbeddingExport:
    record_ids: np.ndarray
    domains: np.ndarray
    labels: np.ndarray
    projection: np.ndarray  # (n, 2)
    components: np.ndarray  # (2, Z) unit principal directions
    explained_variance: np.ndarray  # (2,)


def _power_iteration(cov, start, tol=1e-9, max_iter=10_000):
    v = start / np.linalg.norm(start)
    for _ in range(max_iter):
        w = cov @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return v, 0.0
        w /= norm
        if w @ v < 0:  # negative eigenvalue dominates; keep orientation stable
            w = -w
        if np.linalg.norm(w - v) < tol:
            v = w
            break
        v = w
    return v, float(v @ cov @ v)


def top_components(latents, k: int = 2, tol: float = 1e-9, max_iter: int = 10_000):
    """Top-k eigenpairs of the sample covariance by power iteration with deflation."""
    X = np.asarray(latents, dtype=np.float64)
    if len(X) < 3:
        raise ValueError("embedding needs at least 3 samples")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite latents")
    Xc = X - X.mean(axis=0)
    if not np.any(Xc):
        raise ValueError("degenerate embedding")
    cov = Xc.T @ Xc / (len(X) - 1)
    rng = np.random.default_rng(0)
    vecs, vals = [], []
    deflated = cov.copy()
    for _ in range(k):
        start = rng.standard_normal(cov.shape[0])
        for u in vecs:
            start -= (start @ u) * u
        v, lam = _power_iteration(deflated, start, tol, max_iter)
        # sign convention: the largest-magnitude entry is positive
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        vecs.append(v)
        vals.append(lam)
        deflated = deflated - lam * np.outer(v, v)
    return Xc, np.array(vecs), np.array(vals)


def pca_embed(latents, record_ids=None, domains=None, labels=None) -> EmbeddingExport:
    Xc, comps, vals = top_components(latents)
    n = len(Xc)
    proj = Xc @ comps.T
    proj -= proj.mean(axis=0)  # exact zero mean up to rounding
    ids = np.arange(n) if record_ids is None else np.asarray(record_ids)
    doms = np.zeros(n, dtype=np.int64) if domains is None else np.asarray(domains)
    labs = np.full(n, -1, dtype=np.int64) if labels is None else np.asarray(labels)
    return EmbeddingExport(ids, doms, labs, proj, comps, vals)


def write_embedding_csv(export: EmbeddingExport, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EMBED_HEADER)
        for rid, d, lab, (p1, p2) in zip(export.record_ids, export.domains, export.labels, export.projection):
            w.writerow([int(rid), int(d), int(lab), f"{p1:.6f}", f"{p2:.6f}"])


@dataclass(frozen=True)
class AlignmentReport:
    domains: tuple
    distances: np.ndarray  # (K, K) symmetric, zero diagonal

    @property
    def mean_distance(self) -> float:
        k = len(self.domains)
        return float(np.mean([self.distances[i, j] for i, j in combinations(range(k), 2)]))

    def pairs(self):
        for i, j in combinations(range(len(self.domains)), 2):
            yield self.domains[i], self.domains[j], float(self.distances[i, j])


def alignment_report(latents, domains) -> AlignmentReport:
    """L2 distances between per-domain latent centroids."""
    X = np.asarray(latents, dtype=np.float64)
    domains = np.asarray(domains)
    ids = tuple(int(d) for d in np.unique(domains))
    if len(ids) < 2:
        raise ValueError("alignment report needs at least two domains")
    centroids = np.array([X[domains == d].mean(axis=0) for d in ids])
    diff = centroids[:, None, :] - centroids[None, :, :]
    return AlignmentReport(ids, np.sqrt(np.sum(diff * diff, axis=-1)))


def write_report(matrix: EvalMatrix, alignment: AlignmentReport, out_dir) -> dict:
    """Write eval_matrix.csv, alignment.csv and summary.txt into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"matrix": out / "eval_matrix.csv", "alignment": out / "alignment.csv",
             "summary": out / "summary.txt"}
    with open(paths["matrix"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVAL_HEADER)
        for a in matrix.domains:
            for b in matrix.domains:
                c = matrix.cell(a, b)
                w.writerow([a, b, f"{c.accuracy_mean:.6f}", f"{c.accuracy_std:.6f}",
                            f"{c.f1_mean:.6f}", f"{c.f1_std:.6f}", c.n_test])
    with open(paths["alignment"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ALIGN_HEADER)
        for a, b, dist in alignment.pairs():
            w.writerow([a, b, f"{dist:.6f}"])
    lines = [
        f"domains: {len(matrix.domains)}",
        f"in_domain_accuracy_mean: {matrix.diagonal_accuracy():.6f}",
        f"cross_domain_accuracy_mean: {matrix.off_diagonal_accuracy():.6f}",
        f"mean_centroid_distance: {alignment.mean_distance:.6f}",
    ]
    paths["summary"].write_text("\n".join(lines) + "\n")
    return paths


def read_eval_csv(path) -> dict:
    """Parse an eval_matrix.csv back into {(train, test): row dict}."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames) != EVAL_HEADER:
            raise ValueError("unexpected eval matrix header")
        rows = {}
        for row in reader:
            key = (int(row["train_domain"]), int(row["test_domain"]))
            rows[key] = {k: (int(v) if k in ("train_domain", "test_domain", "n_test") else float(v))
                         for k, v in row.items()}
    return rows
