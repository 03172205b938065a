"""Confounder dictionary (masked-sample embeddings -> PCA -> k-means++) and NWGM adjustment.

The dictionary is built once from a frozen backbone and is a constant during
training: prototypes and priors are plain arrays, never tensors that need grad.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensorcore as tc
from .bigraph import build_graph
from .scmgen import MultimodalSample
from .tensorcore import ParameterStore, Tensor

CORPUS_MODES = ("single", "multi")


class CorpusError(ValueError):
    pass


def masked_copies(samples: Sequence[MultimodalSample], mode: str, rng: np.random.Generator) -> list[MultimodalSample]:
    """Fully-observed samples with one more modality knocked out.

    ``single``: one copy per sample, the dropped modality drawn uniformly.
    ``multi``: one copy per modality per sample.
    """
    if mode not in CORPUS_MODES:
        raise ValueError(f"unknown corpus mode {mode!r}")
    eligible = [s for s in samples if s.fully_observed]
    if not eligible:
        raise CorpusError(
            "no fully-observed samples to build the confounder corpus from; "
            "lower the masking rate (alpha) of the training split"
        )
    M = eligible[0].num_modalities
    if M < 2:
        raise CorpusError("masking one modality needs at least two modalities")
    copies = []
    for s in eligible:
        drops = range(M) if mode == "multi" else [int(rng.integers(M))]
        for m in drops:
            mask = np.ones(M, dtype=np.int8)
            mask[m] = 0
            copies.append(s.with_mask(mask))
    return copies


def build_masked_corpus(samples, backbone, mode: str = "single", seed: int = 0) -> np.ndarray:
    """Embed masked copies with a frozen ``backbone`` (anything with ``embed(graph)``)."""
    copies = masked_copies(samples, mode, np.random.default_rng(seed))
    backbone.store.freeze()
    return np.array(backbone.embed(build_graph(copies)).data)


def pca_reduce(corpus: np.ndarray, target_dim: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project mean-centred rows onto the top ``target_dim`` principal directions.

    Returns ``(projected, mean, basis)`` with ``basis`` of shape (target_dim, d)
    and orthonormal rows; each row's sign is fixed so its largest-magnitude
    entry is positive.
    """
    corpus = np.asarray(corpus, dtype=float)
    n, d = corpus.shape
    if not 1 <= target_dim <= min(n, d):
        raise ValueError(f"target_dim must lie in [1, {min(n, d)}], got {target_dim}")
    mean = corpus.mean(axis=0)
    centred = corpus - mean
    _, s, vt = np.linalg.svd(centred, full_matrices=False)
    if s.size == 0 or s[0] <= 1e-12 * max(1.0, np.abs(corpus).max()):
        raise ValueError("degenerate corpus: all rows identical (rank 0)")
    basis = vt[:target_dim]
    flip = np.sign(basis[np.arange(target_dim), np.abs(basis).argmax(axis=1)])
    basis = basis * flip[:, None]
    return centred @ basis.T, mean, basis


@dataclass
class ConfounderDictionary:
    prototypes: np.ndarray
    counts: np.ndarray
    pca_mean: np.ndarray
    pca_basis: np.ndarray
    inertia_history: list[float] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)
    assignments: np.ndarray | None = field(default=None, repr=False)  # not persisted

    @property
    def K(self) -> int:
        return len(self.prototypes)

    @property
    def corpus_size(self) -> int:
        return int(self.counts.sum())

    @property
    def priors(self) -> np.ndarray:
        return self.counts / self.counts.sum()

    @property
    def weighted_prototypes(self) -> np.ndarray:
        """Rows P(z_i) * z_i."""
        return self.priors[:, None] * self.prototypes

    def to_dict(self) -> dict:
        return {
            "K": self.K,
            "prototypes": self.prototypes.tolist(),
            "counts": self.counts.astype(int).tolist(),
            "priors": self.priors.tolist(),
            "corpus_size": self.corpus_size,
            "pca_mean": self.pca_mean.tolist(),
            "pca_basis": self.pca_basis.tolist(),
            "inertia_history": list(self.inertia_history),
            "provenance": dict(self.provenance),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConfounderDictionary":
        return cls(
            prototypes=np.asarray(d["prototypes"], dtype=float),
            counts=np.asarray(d["counts"], dtype=float),
            pca_mean=np.asarray(d["pca_mean"], dtype=float),
            pca_basis=np.asarray(d["pca_basis"], dtype=float),
            inertia_history=list(d.get("inertia_history", [])),
            provenance=dict(d.get("provenance", {})),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "ConfounderDictionary":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)


def kmeanspp_seeds(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    centers = [X[rng.integers(n)]]
    d2 = _sq_dists(X, np.array(centers)).min(axis=1)
    for _ in range(1, K):
        total = d2.sum()
        # all remaining points coincide with a centre: any choice is equivalent
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers.append(X[idx])
        d2 = np.minimum(d2, _sq_dists(X, X[idx][None, :])[:, 0])
    return np.array(centers)


def _fill_empty(assign: np.ndarray, d2: np.ndarray, K: int) -> np.ndarray:
    """Re-seed each empty cluster with the point farthest from its centre (taken from a cluster of size > 1)."""
    assign = assign.copy()
    for k in range(K):
        if (assign == k).any():
            continue
        sizes = np.bincount(assign, minlength=K)
        cost = np.where(sizes[assign] > 1, d2[np.arange(len(assign)), assign], -np.inf)
        assign[int(cost.argmax())] = k
    return assign


def kmeanspp_cluster(
    projected: np.ndarray,
    K: int,
    seed: int,
    original: np.ndarray | None = None,
    pca_mean: np.ndarray | None = None,
    pca_basis: np.ndarray | None = None,
    max_iter: int = 100,
) -> ConfounderDictionary:
    """k-means++ seeding then Lloyd iterations in the projected space.

    Prototypes are cluster means of the ``original`` rows (defaults to the
    projected rows themselves); priors are cluster sizes over corpus size.
    """
    X = np.asarray(projected, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n = len(X)
    if not 1 <= K <= n:
        raise ValueError(f"K must lie in [1, {n}], got {K}")
    original = X if original is None else np.asarray(original, dtype=float)
    rng = np.random.default_rng(seed)
    centers = kmeanspp_seeds(X, K, rng)
    assign = None
    history: list[float] = []
    for _ in range(max_iter):
        d2 = _sq_dists(X, centers)
        new_assign = _fill_empty(d2.argmin(axis=1), d2, K)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        centers = np.array([X[assign == k].mean(axis=0) for k in range(K)])
        history.append(float(((X - centers[assign]) ** 2).sum()))
    counts = np.bincount(assign, minlength=K).astype(float)
    prototypes = np.array([original[assign == k].mean(axis=0) for k in range(K)])
    d = original.shape[1]
    return ConfounderDictionary(
        prototypes=prototypes,
        counts=counts,
        pca_mean=np.zeros(d) if pca_mean is None else pca_mean,
        pca_basis=np.eye(X.shape[1], d) if pca_basis is None else pca_basis,
        inertia_history=history,
        provenance={"seed": seed, "K": K},
        assignments=assign,
    )


def build_dictionary(
    corpus: np.ndarray, K: int, seed: int, pca_dim: int | None = None, provenance: dict | None = None
) -> ConfounderDictionary:
    d = corpus.shape[1]
    pca_dim = min(d, 16, len(corpus)) if pca_dim is None else pca_dim
    projected, mean, basis = pca_reduce(corpus, pca_dim)
    dictionary = kmeanspp_cluster(projected, K, seed, original=corpus, pca_mean=mean, pca_basis=basis)
    dictionary.provenance.update(provenance or {})
    dictionary.provenance["pca_dim"] = pca_dim
    return dictionary


def random_dictionary(reference: ConfounderDictionary, seed: int) -> ConfounderDictionary:
    """Gaussian prototypes matched to the reference's per-coordinate mean and spread."""
    rng = np.random.default_rng(seed)
    P = reference.prototypes
    spread = P.std(axis=0) if reference.K > 1 else np.abs(P).mean(axis=0)
    protos = P.mean(axis=0) + rng.standard_normal(P.shape) * np.maximum(spread, 1e-6)
    out = ConfounderDictionary(
        prototypes=protos,
        counts=reference.counts.copy(),
        pca_mean=reference.pca_mean.copy(),
        pca_basis=reference.pca_basis.copy(),
        provenance=dict(reference.provenance, random=True, random_seed=seed),
    )
    return out


# -- NWGM --------------------------------------------------------------------


def init_nwgm(store: ParameterStore, d: int, d_m: int, d_n: int, rng, prefix: str = "mdm") -> None:
    # W_h starts as the identity when shapes allow, so the adjustment begins as Z + shift
    W_h = np.eye(d_m, d) if d_m == d else tc.glorot(rng, d_m, d)
    store.add(f"{prefix}.W_h", W_h)
    store.add(f"{prefix}.W_g", tc.glorot(rng, d_m, d))
    store.add(f"{prefix}.W_q", tc.glorot(rng, d_n, d))
    store.add(f"{prefix}.W_k", tc.glorot(rng, d_n, d))


def attention_weights(h: Tensor, dictionary: ConfounderDictionary, W_q: Tensor, W_k: Tensor) -> Tensor:
    """Row i: softmax_k((W_q h_i) . (W_k z_k) / sqrt(d)) over the K prototypes."""
    h = tc.as_tensor(h)
    d = dictionary.prototypes.shape[1]
    if h.data.ndim != 2 or h.shape[1] != d:
        raise tc.ShapeError(f"embeddings of shape {h.shape} do not match prototype width {d}")
    keys = tc.linear(Tensor(dictionary.prototypes), W_k)
    scores = tc.matmul(tc.linear(h, W_q), tc.transpose(keys))
    return tc.softmax(tc.scale(scores, 1.0 / np.sqrt(d)))


def nwgm_adjust(Z: Tensor, dictionary: ConfounderDictionary, store: ParameterStore, prefix: str = "mdm") -> Tensor:
    """Z' = W_h Z + W_g sum_i lambda_i P(z_i) z_i, per patient row."""
    if Z.shape[1] != dictionary.prototypes.shape[1]:
        raise tc.ShapeError(f"embedding width {Z.shape[1]} != prototype width {dictionary.prototypes.shape[1]}")
    lam = attention_weights(Z, dictionary, store[f"{prefix}.W_q"], store[f"{prefix}.W_k"])
    expected = tc.matmul(lam, Tensor(dictionary.weighted_prototypes))
    return tc.add(tc.linear(Z, store[f"{prefix}.W_h"]), tc.linear(expected, store[f"{prefix}.W_g"]))
