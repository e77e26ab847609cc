"""Unsupervised domain labels: LSA plus spherical k-means, iterated.

Documents go into a tf-idf term-document matrix, a rank-d truncated SVD
(orthogonal block power iteration, seeded start) gives document vectors,
spherical k-means clusters them, and the loop keeps only confidently
assigned documents, rebuilds the LSA space from those, and reclassifies
everything. The survivor labels come out as `__label__<id>` lines.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DataError

log = logging.getLogger(__name__)

_POWER_ITERS = 60
_RANK_TOL = 1e-10


def term_document_matrix(docs: list[list[str]]) -> tuple[list[str], np.ndarray, np.ndarray]:
    """(terms, idf, tf-idf matrix) with one column per document.

    tf is the raw in-document count; idf is the smoothed form
    ln((1+N)/(1+df)) + 1, which never vanishes.
    """
    terms = sorted({tok for doc in docs for tok in doc})
    if not terms:
        raise DataError("documents contain no tokens")
    index = {t: i for i, t in enumerate(terms)}
    n_docs = len(docs)
    df = np.zeros(len(terms))
    a = np.zeros((len(terms), n_docs))
    for j, doc in enumerate(docs):
        for tok in doc:
            a[index[tok], j] += 1.0
        for i in {index[tok] for tok in doc}:
            df[i] += 1.0
    idf = np.log((1.0 + n_docs) / (1.0 + df)) + 1.0
    return terms, idf, a * idf[:, None]


@dataclass
class LsaSpace:
    terms: list[str]
    idf: np.ndarray                  # (V_terms,)
    u_d: np.ndarray                  # (V_terms, d) left singular vectors
    singular_values: np.ndarray      # (d,) non-increasing, >= 0
    d: int
    term_index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.term_index = {t: i for i, t in enumerate(self.terms)}

    def project(self, doc: list[str]) -> np.ndarray:
        """Unit-normalized LSA vector of a tokenized document.

        A document sharing no terms with the space maps to the zero vector.
        """
        x = np.zeros(len(self.terms))
        for tok in doc:
            i = self.term_index.get(tok)
            if i is not None:
                x[i] += 1.0
        x *= self.idf
        v = self.u_d.T @ x
        n = np.linalg.norm(v)
        return v / n if n > 0 else v

    def project_many(self, docs: list[list[str]]) -> np.ndarray:
        return np.stack([self.project(doc) for doc in docs])


def build_lsa(docs: list[list[str]], d: int, seed: int = 42) -> LsaSpace:
    """Rank-d LSA space over tokenized documents.

    The truncation runs orthogonal block power iteration from a seeded
    Gaussian start, with a Rayleigh-Ritz rotation at the end; requested d
    above the matrix rank is reduced with a warning. Each left singular
    vector's sign is fixed so its largest-magnitude component is positive.
    """
    if len(docs) < 2:
        raise ContractError("LSA needs at least two documents")
    if d < 1:
        raise ContractError("d must be >= 1")
    terms, idf, a = term_document_matrix(docs)
    n_docs = len(docs)
    k = min(d, len(terms), n_docs)
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((len(terms), k)))
    for _ in range(_POWER_ITERS):
        z = a.T @ q
        q, _ = np.linalg.qr(a @ z)
    m = q.T @ a
    evals, evecs = np.linalg.eigh(m @ m.T)
    order = np.argsort(evals)[::-1]
    sigma = np.sqrt(np.clip(evals[order], 0.0, None))
    u_d = q @ evecs[:, order]
    # drop directions below numerical rank
    keep = sigma > _RANK_TOL * max(sigma[0], 1e-30)
    rank = int(keep.sum())
    if rank < d:
        log.warning("build_lsa: requested d=%d exceeds rank %d, reduced", d, max(rank, 1))
    rank = max(rank, 1)
    u_d = u_d[:, :rank]
    sigma = sigma[:rank]
    signs = np.sign(u_d[np.abs(u_d).argmax(axis=0), np.arange(rank)])
    signs[signs == 0] = 1.0
    u_d = u_d * signs
    return LsaSpace(terms=terms, idf=idf, u_d=u_d, singular_values=sigma, d=rank)


@dataclass
class ClusterState:
    centroids: np.ndarray            # (k, d), unit rows
    assignment: np.ndarray           # (n,)
    confidence: np.ndarray           # (n,) margin in [-1, 1]
    iterations: int
    objective: float


def _unit_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    return m / np.where(norms > 0, norms, 1.0)


def _assign(vectors: np.ndarray, centroids: np.ndarray):
    """(assignment, confidence, objective); confidence is the clamped
    margin between best and second-best cosine (1.0 when k = 1)."""
    sims = vectors @ centroids.T
    assignment = sims.argmax(axis=1)
    best = sims[np.arange(len(vectors)), assignment]
    if centroids.shape[0] == 1:
        conf = np.ones(len(vectors))
    else:
        part = np.partition(sims, -2, axis=1)
        conf = np.minimum(best - part[:, -2], 1.0)
    return assignment, conf, float(best.sum())


def _farthest_index(vectors: np.ndarray, centroids: np.ndarray) -> int:
    return int((vectors @ centroids.T).max(axis=1).argmin())


def kmeans(vectors: np.ndarray, k: int, seed: int = 42,
           max_iters: int = 100) -> ClusterState:
    """Spherical k-means with a k-means++-style seeded start.

    Runs to an assignment fixpoint or max_iters; an empty cluster is
    reseeded to the point farthest from all current centroids. The
    objective (sum of cosines to the assigned centroid) never decreases.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    n = vectors.shape[0]
    if k < 1 or k > n:
        raise ContractError(f"k={k} outside [1, {n}]")
    rng = np.random.default_rng(seed)
    centroids = np.empty((k, vectors.shape[1]))
    centroids[0] = vectors[rng.integers(n)]
    for j in range(1, k):
        dist = 1.0 - (vectors @ centroids[:j].T).max(axis=1)
        dist = np.clip(dist, 0.0, None)
        total = dist.sum()
        if total <= 0:
            pick = int(rng.integers(n))
        else:
            pick = int(np.searchsorted(np.cumsum(dist / total), rng.random(), side="right"))
            pick = min(pick, n - 1)
        centroids[j] = vectors[pick]
    centroids = _unit_rows(centroids)

    assignment, conf, objective = _assign(vectors, centroids)
    iterations = 0
    for _ in range(max_iters):
        iterations += 1
        for j in range(k):
            members = vectors[assignment == j]
            if len(members) == 0:
                centroids[j] = vectors[_farthest_index(vectors, centroids)]
                continue
            mean = members.sum(axis=0)
            norm = np.linalg.norm(mean)
            if norm > 1e-12:
                centroids[j] = mean / norm
        new_assignment, conf, objective = _assign(vectors, centroids)
        changed = (new_assignment != assignment).any()
        assignment = new_assignment
        if not changed:
            break
    return ClusterState(centroids=centroids, assignment=assignment,
                        confidence=conf, iterations=iterations, objective=objective)


def select_dissimilar(centroids: np.ndarray, k: int) -> list[int]:
    """Greedy farthest-point selection of k centroid indices.

    Starts from the pair with minimal cosine similarity (k=1 degenerates to
    index 0); each following pick minimizes the maximum similarity to the
    already-selected set. Ties break toward the lower index everywhere.
    """
    n = centroids.shape[0]
    if k < 1 or k > n:
        raise ContractError(f"k={k} outside [1, {n}]")
    if k == 1:
        return [0]
    sims = centroids @ centroids.T
    best_pair = (0, 1)
    best_val = np.inf
    for i in range(n):
        for j in range(i + 1, n):
            if sims[i, j] < best_val:
                best_val = sims[i, j]
                best_pair = (i, j)
    selected = list(best_pair)
    while len(selected) < k:
        remaining = [i for i in range(n) if i not in selected]
        worst = [(max(sims[i, j] for j in selected), i) for i in remaining]
        selected.append(min(worst)[1])
    return sorted(selected)


@dataclass
class RoundLog:
    round_no: int
    retained: int
    mean_confidence: float
    changed_fraction: float


@dataclass
class LabelingResult:
    labels: list[int]
    k: int
    rounds_run: int
    history: list[RoundLog]
    lsa: LsaSpace
    centroids: np.ndarray


def iterate_labeling(docs: list[list[str]], k: int, tau: float = 0.1,
                     rounds: int = 4, d: int = 64, seed: int = 42,
                     pool_factor: int = 2) -> LabelingResult:
    """Label every document with one of k clusters.

    Bootstrap: cluster all docs into pool_factor*k clusters in a full-corpus
    LSA space, keep the k most dissimilar centroids. Each round then retains
    docs whose margin is >= tau, rebuilds the LSA space from the retained
    docs only, recomputes centroids there, and reclassifies everything.
    Stops early once under 0.1% of assignments change.
    """
    if rounds < 1:
        raise ContractError("rounds must be >= 1")
    if not 1 <= k <= len(docs):
        raise ContractError(f"k={k} outside [1, {len(docs)}]")
    lsa = build_lsa(docs, d, seed=seed)
    vectors = lsa.project_many(docs)
    pool = kmeans(vectors, min(pool_factor * k, len(docs)), seed=seed)
    chosen = select_dissimilar(pool.centroids, k)
    centroids = pool.centroids[chosen]
    assignment, conf, _ = _assign(vectors, centroids)

    history: list[RoundLog] = []
    rounds_run = 0
    for round_no in range(1, rounds + 1):
        rounds_run = round_no
        keep = conf >= tau
        for j in range(k):
            if not (keep & (assignment == j)).any():
                raise DataError(
                    f"labeling round {round_no}: cluster {j} retained no documents "
                    f"(tau={tau}); lower tau or k")
        retained_conf = float(conf[keep].mean())
        retained_docs = [docs[i] for i in np.flatnonzero(keep)]
        lsa = build_lsa(retained_docs, d, seed=seed)
        retained_vecs = lsa.project_many(retained_docs)
        retained_assign = assignment[keep]
        centroids = _unit_rows(np.stack([
            retained_vecs[retained_assign == j].sum(axis=0) for j in range(k)]))
        vectors = lsa.project_many(docs)
        new_assignment, conf, _ = _assign(vectors, centroids)
        changed = float((new_assignment != assignment).mean())
        history.append(RoundLog(round_no=round_no, retained=int(keep.sum()),
                                mean_confidence=retained_conf,
                                changed_fraction=changed))
        assignment = new_assignment
        if changed < 0.001:
            break
    return LabelingResult(labels=[int(x) for x in assignment], k=k,
                          rounds_run=rounds_run, history=history,
                          lsa=lsa, centroids=centroids)


def format_labeled_lines(paragraph_texts: list[str], labels: list[int]) -> str:
    """`__label__<id>\\t<paragraph>` lines; newlines inside a paragraph
    collapse to spaces so one line stays one paragraph."""
    if len(paragraph_texts) != len(labels):
        raise ContractError("one label per paragraph required")
    lines = []
    for text, label in zip(paragraph_texts, labels):
        flat = " ".join(text.split())
        lines.append(f"__label__{label}\t{flat}")
    return "\n".join(lines) + "\n"
