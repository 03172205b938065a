"""Patient-modality bipartite graphs and the GRAPE-style message-passing encoder.

Edges are stored modality-major: all edges of modality 0 first (in patient
order), then modality 1, and so on.  That keeps each modality's raw features a
contiguous block, so the per-modality encoders can run as plain matmuls.

Per layer, with weights laid out output-by-input::

    h_i  <- U [h_i || mean_j w_ji * relu(W h_j + O e_ji)]
    e_ji <- w_ji * P [h_j || h_i || e_ji]

where ``j`` is the modality end of the edge and ``i`` the patient end when a
patient is updated (and vice versa for modality nodes).  ``w_ji`` is 1 in the
baseline and a gate weight in the dual-branch model.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensorcore as tc
from .scmgen import MultimodalSample
from .tensorcore import ParameterStore, Tensor

ACTIVATIONS = ("relu", "linear")


@dataclass
class BipartiteGraph:
    num_patients: int
    num_modalities: int
    edge_patient: np.ndarray
    edge_modality: np.ndarray
    features: list[np.ndarray]
    active: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.active is None:
            self.active = np.ones(len(self.edge_patient), dtype=bool)

    @property
    def num_edges(self) -> int:
        return len(self.edge_patient)

    def active_index(self) -> np.ndarray:
        return np.flatnonzero(self.active)

    def degrees(self, active_only: bool = True) -> np.ndarray:
        ep = self.edge_patient[self.active] if active_only else self.edge_patient
        return np.bincount(ep, minlength=self.num_patients)

    def with_active(self, active: np.ndarray) -> "BipartiteGraph":
        return BipartiteGraph(
            self.num_patients,
            self.num_modalities,
            self.edge_patient,
            self.edge_modality,
            self.features,
            np.asarray(active, dtype=bool).copy(),
        )


def build_graph(samples: Sequence[MultimodalSample]) -> BipartiteGraph:
    """One edge per observed (patient, modality) pair."""
    if not samples:
        raise ValueError("cannot build a graph from zero samples")
    M = samples[0].num_modalities
    masks = np.array([s.mask for s in samples], dtype=bool)
    if masks.shape[1] != M:
        raise ValueError("samples disagree on the number of modalities")
    ep, em, feats = [], [], []
    for m in range(M):
        rows = np.flatnonzero(masks[:, m])
        ep.append(rows)
        em.append(np.full(len(rows), m))
        width = len(samples[0].x[m])
        block = np.array([samples[p].x[m] for p in rows], dtype=float).reshape(len(rows), width)
        feats.append(block)
    return BipartiteGraph(
        num_patients=len(samples),
        num_modalities=M,
        edge_patient=np.concatenate(ep).astype(np.int64),
        edge_modality=np.concatenate(em).astype(np.int64),
        features=feats,
    )


def edge_dropout(graph: BipartiteGraph, rate: float, rng: np.random.Generator) -> BipartiteGraph:
    """Deactivate each edge with probability ``rate``, never a patient's last edge."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if rate == 0.0:
        return graph.with_active(graph.active)
    active = graph.active & (rng.random(graph.num_edges) >= rate)
    before = graph.degrees(active_only=True)
    after = np.bincount(graph.edge_patient[active], minlength=graph.num_patients)
    for p in np.flatnonzero((before > 0) & (after == 0)):
        candidates = np.flatnonzero((graph.edge_patient == p) & graph.active)
        active[rng.choice(candidates)] = True
    return graph.with_active(active)


# -- parameters --------------------------------------------------------------


def init_encoder(store: ParameterStore, feature_dims: Sequence[int], d: int, rng, prefix="encoder"):
    for m, F in enumerate(feature_dims):
        store.add(f"{prefix}.m{m}.W", tc.glorot(rng, d, F))
        store.add(f"{prefix}.m{m}.b", np.zeros(d))


def init_gnn(store: ParameterStore, d: int, num_layers: int, rng, prefix="gnn"):
    """U, W, O per layer; P for every layer whose edge output is consumed."""
    for l in range(num_layers):
        store.add(f"{prefix}.layer{l}.U", tc.glorot(rng, d, 2 * d))
        store.add(f"{prefix}.layer{l}.W", tc.glorot(rng, d, d))
        store.add(f"{prefix}.layer{l}.O", tc.glorot(rng, d, d))
        if l < num_layers - 1:
            store.add(f"{prefix}.layer{l}.P", tc.glorot(rng, d, 3 * d))


def layer_params(store: ParameterStore, prefix: str, l: int) -> dict[str, Tensor]:
    return {k: store[f"{prefix}.layer{l}.{k}"] for k in "UWOP" if f"{prefix}.layer{l}.{k}" in store}


# -- operations --------------------------------------------------------------


def encode_edges(
    graph: BipartiteGraph, store: ParameterStore, prefix: str = "encoder", activation: str = "relu"
) -> Tensor:
    """Initial edge features: per-modality perceptron on the raw modality vector."""
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown encoder activation {activation!r}")
    blocks = []
    for m, X in enumerate(graph.features):
        W = store[f"{prefix}.m{m}.W"]
        if X.shape[0] and X.shape[1] != W.shape[1]:
            raise tc.ShapeError(f"modality {m}: features have width {X.shape[1]}, encoder expects {W.shape[1]}")
        if X.shape[0] == 0:
            continue
        out = tc.linear(Tensor(X), W, store[f"{prefix}.m{m}.b"])
        blocks.append(tc.relu(out) if activation == "relu" else out)
    if len(blocks) == 1:
        return blocks[0]
    # row-stack the modality blocks via the last-axis concat of their transposes
    return tc.transpose(tc.concat([tc.transpose(b) for b in blocks]))


def init_nodes(num_patients: int, num_modalities: int, d: int) -> tuple[Tensor, Tensor]:
    """Patients start as all-ones; modality m starts as one-hot(m) padded to d."""
    if d < num_modalities:
        raise ValueError(f"one-hot modality init needs d >= M, got d={d}, M={num_modalities}")
    h_mod = np.zeros((num_modalities, d))
    h_mod[np.arange(num_modalities), np.arange(num_modalities)] = 1.0
    return Tensor(np.ones((num_patients, d))), Tensor(h_mod)


def _aggregate(src_states, src_idx, dst_idx, num_dst, e, params, weights):
    msg = tc.relu(tc.add(tc.linear(tc.gather(src_states, src_idx), params["W"]), tc.linear(e, params["O"])))
    if weights is not None:
        msg = tc.mul(msg, weights)
    return tc.segment_mean(msg, dst_idx, num_dst)


def message_pass_layer(
    h_pat: Tensor,
    h_mod: Tensor,
    e: Tensor,
    edge_patient: np.ndarray,
    edge_modality: np.ndarray,
    params: dict[str, Tensor],
    edge_weights: Tensor | None = None,
    update_modalities: bool = True,
) -> tuple[Tensor, Tensor | None]:
    """One node update for both partitions; ``edge_weights`` is (E, 1) or None for all-ones."""
    if edge_weights is not None and edge_weights.shape[0] != len(edge_patient):
        raise tc.ShapeError(f"{edge_weights.shape[0]} edge weights for {len(edge_patient)} edges")
    N, M = h_pat.shape[0], h_mod.shape[0]
    agg_p = _aggregate(h_mod, edge_modality, edge_patient, N, e, params, edge_weights)
    new_pat = tc.linear(tc.concat([h_pat, agg_p]), params["U"])
    new_mod = None
    if update_modalities:
        agg_m = _aggregate(h_pat, edge_patient, edge_modality, M, e, params, edge_weights)
        new_mod = tc.linear(tc.concat([h_mod, agg_m]), params["U"])
    return new_pat, new_mod


def update_edges(
    h_pat: Tensor,
    h_mod: Tensor,
    e: Tensor,
    edge_patient: np.ndarray,
    edge_modality: np.ndarray,
    P: Tensor,
    edge_weights: Tensor | None = None,
) -> Tensor:
    """e_ji <- w_ji * P [h_j || h_i || e_ji] with j the modality end, i the patient end."""
    cat = tc.concat([tc.gather(h_mod, edge_modality), tc.gather(h_pat, edge_patient), e])
    out = tc.linear(cat, P)
    return out if edge_weights is None else tc.mul(out, edge_weights)


def run_gnn(
    graph: BipartiteGraph,
    e0: Tensor,
    store: ParameterStore,
    num_layers: int,
    prefix: str = "gnn",
    d: int | None = None,
) -> Tensor:
    """Alternate node and edge updates for ``num_layers`` layers; return patient states."""
    if num_layers < 1:
        raise ValueError("need at least one layer")
    d = d or e0.shape[1]
    idx = graph.active_index()
    ep, em = graph.edge_patient[idx], graph.edge_modality[idx]
    e = e0 if len(idx) == graph.num_edges else tc.gather(e0, idx)
    h_pat, h_mod = init_nodes(graph.num_patients, graph.num_modalities, d)
    for l in range(num_layers):
        p = layer_params(store, prefix, l)
        last = l == num_layers - 1
        new_pat, new_mod = message_pass_layer(h_pat, h_mod, e, ep, em, p, update_modalities=not last)
        if not last:
            e = update_edges(h_pat, h_mod, e, ep, em, p["P"])
        h_pat, h_mod = new_pat, new_mod
    return h_pat


readout_patients = run_gnn


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under row-softmax(logits)."""
    probs = tc.softmax(logits)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    return tc.scale(tc.tsum(tc.mul(tc.log(probs), onehot)), -1.0 / len(labels))


class GrapeModel:
    """Baseline: per-modality encoders, one bipartite GNN, linear head on patient states."""

    def __init__(
        self,
        feature_dims: Sequence[int],
        num_classes: int,
        d: int = 32,
        num_layers: int = 2,
        seed: int = 0,
        encoder_activation: str = "relu",
        dropout: float = 0.1,
    ):
        self.feature_dims = list(feature_dims)
        self.num_classes = num_classes
        self.d = d
        self.num_layers = num_layers
        self.encoder_activation = encoder_activation
        self.dropout = dropout
        rng = np.random.default_rng(seed)
        self.store = ParameterStore()
        init_encoder(self.store, self.feature_dims, d, rng)
        init_gnn(self.store, d, num_layers, rng)
        self.store.add("head.W", tc.glorot(rng, num_classes, d))
        self.store.add("head.b", np.zeros(num_classes))

    def embed(self, graph: BipartiteGraph, rng: np.random.Generator | None = None) -> Tensor:
        """Patient embeddings; pass ``rng`` to apply training-time edge dropout."""
        if rng is not None and self.dropout > 0:
            graph = edge_dropout(graph, self.dropout, rng)
        e0 = encode_edges(graph, self.store, activation=self.encoder_activation)
        return run_gnn(graph, e0, self.store, self.num_layers, d=self.d)

    def logits(self, Z: Tensor) -> Tensor:
        return tc.linear(Z, self.store["head.W"], self.store["head.b"])

    def loss(self, graph: BipartiteGraph, labels: np.ndarray, rng=None) -> Tensor:
        return cross_entropy(self.logits(self.embed(graph, rng)), labels)

    def predict_proba(self, graph: BipartiteGraph) -> np.ndarray:
        return tc.softmax(self.logits(self.embed(graph))).data

    def causal_embedding(self, graph: BipartiteGraph) -> np.ndarray:
        # the baseline has a single representation; it plays the causal role
        return self.embed(graph).data
