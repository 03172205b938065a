"""Gated dual-branch GNN, CE/GCE disentanglement losses and counterfactual mixing.

Gradient routing is realised with stop-gradient barriers on the opposite half
of every concatenation: the CE head sees ``[Z_c || sg(Z_b)]`` and the GCE head
sees ``[sg(Z_c) || Z_b]``.  The per-edge gate is computed from the causal
branch's incoming node states; the bias branch receives ``1 - gate`` evaluated
on detached copies of those states, so bias-side losses cannot reach the
causal GNN through the gate either.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .bigraph import (
    BipartiteGraph,
    edge_dropout,
    init_nodes,
    layer_params,
    message_pass_layer,
    update_edges,
)
from .tensorcore import ParameterStore, Tensor


@dataclass
class DualEmbeddings:
    Z_c: Tensor
    Z_b: Tensor

    @property
    def Z_concat(self) -> Tensor:
        return tc.concat([self.Z_c, self.Z_b])


def init_gates(store: ParameterStore, d: int, num_layers: int, rng, prefix: str = "gate", hidden: int | None = None):
    hidden = hidden or d
    for l in range(num_layers):
        store.add(f"{prefix}.layer{l}.W1", tc.glorot(rng, hidden, 2 * d))
        store.add(f"{prefix}.layer{l}.b1", np.zeros(hidden))
        store.add(f"{prefix}.layer{l}.W2", tc.glorot(rng, 1, hidden))
        store.add(f"{prefix}.layer{l}.b2", np.zeros(1))


def gate_params(store: ParameterStore, prefix: str, l: int) -> dict[str, Tensor]:
    return {k: store[f"{prefix}.layer{l}.{k}"] for k in ("W1", "b1", "W2", "b2")}


def gate_logits(h_pat: Tensor, h_mod: Tensor, edge_patient, edge_modality, params) -> Tensor:
    """MLP([h_j || h_i]) per edge, j the modality end and i the patient end; (E, 1)."""
    x = tc.concat([tc.gather(h_mod, edge_modality), tc.gather(h_pat, edge_patient)])
    hidden = tc.relu(tc.linear(x, params["W1"], params["b1"]))
    return tc.linear(hidden, params["W2"], params["b2"])


def gate_edges(h_pat: Tensor, h_mod: Tensor, edge_patient, edge_modality, params) -> tuple[Tensor, Tensor]:
    """Soft edge split (c, b) with b = 1 - c; b is built from detached node states."""
    c = tc.sigmoid(gate_logits(h_pat, h_mod, edge_patient, edge_modality, params))
    detached = gate_logits(tc.stop_gradient(h_pat), tc.stop_gradient(h_mod), edge_patient, edge_modality, params)
    b = tc.sub(1.0, tc.sigmoid(detached))
    return c, b


def _branch_edges(graph: BipartiteGraph, e0: Tensor):
    idx = graph.active_index()
    e = e0 if len(idx) == graph.num_edges else tc.gather(e0, idx)
    return graph.edge_patient[idx], graph.edge_modality[idx], e


def dual_forward(
    graph: BipartiteGraph,
    e0: Tensor,
    store: ParameterStore,
    num_layers: int,
    dropout: float = 0.0,
    rngs: tuple[np.random.Generator, np.random.Generator] | None = None,
    separate_gates: bool = False,
    d: int | None = None,
) -> DualEmbeddings:
    """Run the causal (``gnn_c``) and biased (``gnn_b``) branches layer by layer.

    Each branch gets its own edge-dropout draw when ``rngs`` is given.  With
    ``separate_gates`` the bias branch uses its own gate MLP (``gate_b``) on
    its own states instead of ``1 - c``.
    """
    d = d or e0.shape[1]
    g_c = edge_dropout(graph, dropout, rngs[0]) if rngs is not None and dropout > 0 else graph
    g_b = edge_dropout(graph, dropout, rngs[1]) if rngs is not None and dropout > 0 else graph
    ep_c, em_c, e_c = _branch_edges(g_c, e0)
    ep_b, em_b, e_b = _branch_edges(g_b, e0)
    hc_pat, hc_mod = init_nodes(graph.num_patients, graph.num_modalities, d)
    hb_pat, hb_mod = hc_pat, hc_mod
    for l in range(num_layers):
        last = l == num_layers - 1
        gp = gate_params(store, "gate", l)
        w_c, _ = gate_edges(hc_pat, hc_mod, ep_c, em_c, gp)
        if separate_gates:
            bp = gate_params(store, "gate_b", l)
            w_b = tc.sub(1.0, tc.sigmoid(gate_logits(hb_pat, hb_mod, ep_b, em_b, bp)))
        else:
            _, w_b = gate_edges(hc_pat, hc_mod, ep_b, em_b, gp)
        pc = layer_params(store, "gnn_c", l)
        pb = layer_params(store, "gnn_b", l)
        new_c = message_pass_layer(hc_pat, hc_mod, e_c, ep_c, em_c, pc, w_c, update_modalities=not last)
        new_b = message_pass_layer(hb_pat, hb_mod, e_b, ep_b, em_b, pb, w_b, update_modalities=not last)
        if not last:
            e_c = update_edges(hc_pat, hc_mod, e_c, ep_c, em_c, pc["P"], w_c)
            e_b = update_edges(hb_pat, hb_mod, e_b, ep_b, em_b, pb["P"], w_b)
        (hc_pat, hc_mod), (hb_pat, hb_mod) = new_c, new_b
    return DualEmbeddings(hc_pat, hb_pat)


# -- losses ------------------------------------------------------------------


def _label_onehot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    onehot = np.zeros((len(labels), num_classes))
    onehot[np.arange(len(labels)), labels] = 1.0
    return onehot


def _check_probs(probs: Tensor) -> None:
    if np.max(np.abs(probs.data.sum(axis=1) - 1.0)) > 1e-6:
        raise ValueError("probability rows must sum to 1 within 1e-6")


def ce_loss(probs: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    _check_probs(probs)
    picked = tc.mul(tc.log(probs), _label_onehot(labels, probs.shape[1]))
    return tc.scale(tc.tsum(picked), -1.0 / len(labels))


def gce_loss(probs: Tensor, labels, q: float) -> Tensor:
    """Mean of (1 - p_y^q) / q."""
    if not 0.0 < q <= 1.0:
        raise ValueError(f"GCE q must lie in (0, 1], got {q}")
    labels = np.asarray(labels, dtype=np.int64)
    _check_probs(probs)
    # row-sum of the one-hot-masked probabilities picks p_y per sample
    p_y = tc.matmul(tc.mul(probs, _label_onehot(labels, probs.shape[1])), np.ones((probs.shape[1], 1)))
    return tc.scale(tc.mean(tc.sub(1.0, tc.power(p_y, q))), 1.0 / q)


def init_classifiers(store: ParameterStore, in_dim: int, num_classes: int, rng) -> None:
    for name in ("f_c", "f_b"):
        store.add(f"{name}.W", tc.glorot(rng, num_classes, in_dim))
        store.add(f"{name}.b", np.zeros(num_classes))


def classify(store: ParameterStore, name: str, Z_concat: Tensor) -> Tensor:
    return tc.softmax(tc.linear(Z_concat, store[f"{name}.W"], store[f"{name}.b"]))


@dataclass
class LossParts:
    ce: Tensor
    gce: Tensor

    @property
    def total(self) -> Tensor:
        return tc.add(self.ce, self.gce)


def disentangle_loss(
    Z_c: Tensor,
    Z_b: Tensor,
    labels,
    store: ParameterStore,
    q: float = 0.7,
    bias_labels=None,
) -> LossParts:
    """CE(f_c([Z_c || sg Z_b]), y) + GCE(f_b([sg Z_c || Z_b]), y_b); y_b defaults to y."""
    bias_labels = labels if bias_labels is None else bias_labels
    ce = ce_loss(classify(store, "f_c", tc.concat([Z_c, tc.stop_gradient(Z_b)])), labels)
    gce = gce_loss(classify(store, "f_b", tc.concat([tc.stop_gradient(Z_c), Z_b])), bias_labels, q)
    return LossParts(ce, gce)


def counterfactual_mix(Z_c: Tensor, Z_b: Tensor, labels, perm) -> tuple[Tensor, np.ndarray]:
    """Pair each patient's causal half with donor ``perm[i]``'s bias half and label."""
    perm = np.asarray(perm, dtype=np.int64)
    if sorted(perm.tolist()) != list(range(Z_c.shape[0])):
        raise ValueError("perm must be a permutation of the patient indices")
    return tc.concat([Z_c, tc.gather(Z_b, perm)]), np.asarray(labels)[perm]


def counterfactual_loss(Z_c: Tensor, Z_b: Tensor, labels, perm, store: ParameterStore, q: float = 0.7) -> LossParts:
    """Disentanglement loss on swapped bias halves: CE against y, GCE against the donor labels."""
    perm = np.asarray(perm, dtype=np.int64)
    _, donor_labels = counterfactual_mix(Z_c, Z_b, labels, perm)
    return disentangle_loss(Z_c, tc.gather(Z_b, perm), labels, store, q, bias_labels=donor_labels)


def total_loss(l_dis: Tensor, l_cf: Tensor | None, alpha: float) -> Tensor:
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    if l_cf is None or alpha == 0:
        return l_dis
    return tc.add(l_dis, tc.scale(l_cf, alpha))
