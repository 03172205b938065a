"""The full model behind the ablation flags.

cbdm  mdm   structure
 off  off   baseline bipartite GNN + linear head (delegates to GrapeModel)
 off  on    baseline GNN -> NWGM -> linear head (row A1)
 on   off   dual branch, CE/GCE and counterfactual, no adjustment (row A4)
 on   on    full model
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import tensorcore as tc
from ..bigraph import BipartiteGraph, GrapeModel, cross_entropy, encode_edges, init_encoder, init_gnn
from ..cbdm import (
    classify,
    counterfactual_loss,
    disentangle_loss,
    dual_forward,
    init_classifiers,
    init_gates,
    total_loss,
)
from ..mdm import ConfounderDictionary, init_nwgm, nwgm_adjust
from ..tensorcore import Tensor
from .config import TrainConfig


@dataclass
class StepLosses:
    total: Tensor
    dis: float
    cf: float | None


class CadModel:
    def __init__(
        self,
        feature_dims,
        num_classes: int,
        config: TrainConfig,
        dictionary: ConfounderDictionary | None = None,
        encoder_activation: str = "relu",
    ):
        if config.mdm and dictionary is None:
            raise ValueError("mdm enabled but no confounder dictionary given")
        self.config = config
        self.feature_dims = list(feature_dims)
        self.num_classes = num_classes
        self.dictionary = dictionary if config.mdm else None
        self.encoder_activation = encoder_activation
        self.cf_evaluations = 0
        d = config.d
        if not config.cbdm:
            # same seed and init order as a stand-alone baseline
            self.base = GrapeModel(
                feature_dims, num_classes, d, config.L, config.seed, encoder_activation, config.dropout
            )
            self.store = self.base.store
            if config.mdm:
                rng = np.random.default_rng([config.seed, 1])
                init_nwgm(self.store, d, config.dm, config.dn, rng, "mdm")
                del self.store.params["head.W"], self.store.params["head.b"]
                self.store.add("head.W", tc.glorot(rng, num_classes, config.dm))
                self.store.add("head.b", np.zeros(num_classes))
            return
        self.base = None
        rng = np.random.default_rng(config.seed)
        self.store = tc.ParameterStore()
        init_encoder(self.store, self.feature_dims, d, rng)
        init_gnn(self.store, d, config.L, rng, "gnn_c")
        init_gnn(self.store, d, config.L, rng, "gnn_b")
        init_gates(self.store, d, config.L, rng, "gate")
        if config.separate_gates:
            init_gates(self.store, d, config.L, rng, "gate_b")
        out = config.dm if config.mdm else d
        if config.mdm:
            init_nwgm(self.store, d, config.dm, config.dn, rng, "mdm_c")
            init_nwgm(self.store, d, config.dm, config.dn, rng, "mdm_b")
        init_classifiers(self.store, 2 * out, num_classes, rng)

    # -- forward -------------------------------------------------------------

    def branches(self, graph: BipartiteGraph, rng: np.random.Generator | None = None):
        """(Z'_c, Z'_b) for the dual model; (Z', None) for the single-branch variants."""
        cfg = self.config
        if self.base is not None:
            Z = self.base.embed(graph, rng)
            if cfg.mdm:
                Z = nwgm_adjust(Z, self.dictionary, self.store, "mdm")
            return Z, None
        rngs = None
        if rng is not None and cfg.dropout > 0:
            rngs = tuple(np.random.default_rng(s) for s in rng.integers(0, 2**63, size=2))
        e0 = encode_edges(graph, self.store, activation=self.encoder_activation)
        dual = dual_forward(
            graph, e0, self.store, cfg.L, cfg.dropout, rngs, separate_gates=cfg.separate_gates, d=cfg.d
        )
        Z_c, Z_b = dual.Z_c, dual.Z_b
        if cfg.mdm:
            Z_c = nwgm_adjust(Z_c, self.dictionary, self.store, "mdm_c")
            Z_b = nwgm_adjust(Z_b, self.dictionary, self.store, "mdm_b")
        return Z_c, Z_b

    def loss(
        self,
        graph: BipartiteGraph,
        labels,
        rng: np.random.Generator | None = None,
        perm: np.ndarray | None = None,
    ) -> StepLosses:
        """L_dis, plus alpha * L_cf when ``perm`` is given (single-branch variants: CE)."""
        labels = np.asarray(labels, dtype=np.int64)
        Z_c, Z_b = self.branches(graph, rng)
        if Z_b is None:
            ce = cross_entropy(self._head(Z_c), labels)
            return StepLosses(ce, ce.item(), None)
        l_dis = disentangle_loss(Z_c, Z_b, labels, self.store, self.config.q).total
        l_cf = None
        if perm is not None:
            self.cf_evaluations += 1
            l_cf = counterfactual_loss(Z_c, Z_b, labels, perm, self.store, self.config.q).total
        total = total_loss(l_dis, l_cf, self.config.alpha)
        return StepLosses(total, l_dis.item(), None if l_cf is None else l_cf.item())

    def _head(self, Z: Tensor) -> Tensor:
        return tc.linear(Z, self.store["head.W"], self.store["head.b"])

    # -- inference -----------------------------------------------------------

    def predict_proba(self, graph: BipartiteGraph) -> np.ndarray:
        Z_c, Z_b = self.branches(graph)
        if Z_b is None:
            return tc.softmax(self._head(Z_c)).data
        return classify(self.store, "f_c", tc.concat([Z_c, Z_b])).data

    def causal_embedding(self, graph: BipartiteGraph) -> np.ndarray:
        """Rows of Z'_c (the single-branch variants return their only embedding)."""
        return self.branches(graph)[0].data
