"""The blended expert projection: a frozen base map plus a routed mixture of
task adapters and an always-on pre-merged adapter.

For input x and routing input x_r the output is

    y = lam * sum_{g,m} w[g,m] * expert_{g,m}(x)
      + (1 - lam) * premerged(x)
      + W0 @ x (+ bias)

where w = combined_expert_weights(router, groups, x_r). The hot path never
materializes a dense delta matrix; ``composed_delta`` builds one for tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import adapters as lora
from .adapters import AdapterSet, LoraAdapter
from .router import GroupSpec, RouterLayerParams, combined_expert_weights

PAD_SLOT = "PAD"


@dataclass
class AtMoeLinear:
    """Frozen d x k projection with grouped experts and a balance parameter."""

    W0: np.ndarray
    bias0: np.ndarray | None
    groups: list[GroupSpec]
    experts: AdapterSet
    router: RouterLayerParams
    lam: float

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        d, k = self.W0.shape
        for g in self.groups:
            for eid in g.expert_ids:
                if eid not in self.experts:
                    raise KeyError(f"group {g.name!r} references unknown adapter {eid!r}")
                if self.experts[eid].shape != (d, k):
                    raise ValueError(f"adapter {eid!r} shape {self.experts[eid].shape} != {(d, k)}")
        if self.experts.premerged().shape != (d, k):
            raise ValueError("pre-merged adapter shape disagrees with base projection")

    @property
    def shape(self) -> tuple[int, int]:
        return self.W0.shape

    def slot_adapter(self, g: int, m: int) -> LoraAdapter | None:
        spec = self.groups[g]
        return self.experts[spec.expert_ids[m]] if m < spec.size else None


def forward(layer: AtMoeLinear, x: np.ndarray, x_routing: np.ndarray | None = None,
            weights: np.ndarray | None = None) -> np.ndarray:
    """Blended output for one length-k input vector.

    ``x_routing`` defaults to x itself (the layer-local activation routes the
    layer). ``weights`` pins the combined expert weights, bypassing the router.
    """
    x = np.asarray(x, dtype=np.float64)
    d, k = layer.W0.shape
    if x.shape != (k,):
        raise ValueError(f"expected input of length {k}, got shape {x.shape}")
    if weights is None:
        xr = x if x_routing is None else np.asarray(x_routing, dtype=np.float64)
        weights = combined_expert_weights(layer.router, layer.groups, xr)
    routed = np.zeros(d)
    for g in range(len(layer.groups)):
        for m in range(layer.groups[g].size):
            routed += weights[g, m] * lora.apply(layer.slot_adapter(g, m), x)
    y = layer.lam * routed + (1.0 - layer.lam) * lora.apply(layer.experts.premerged(), x)
    y = y + layer.W0 @ x
    if layer.bias0 is not None:
        y = y + layer.bias0
    return y


def composed_delta(layer: AtMoeLinear, x_routing: np.ndarray) -> np.ndarray:
    """Dense lam-blended delta matrix for a given routing input (oracle path)."""
    weights = combined_expert_weights(layer.router, layer.groups, x_routing)
    d, k = layer.W0.shape
    delta = np.zeros((d, k))
    for g in range(len(layer.groups)):
        for m in range(layer.groups[g].size):
            delta += weights[g, m] * lora.delta_weight(layer.slot_adapter(g, m))
    return layer.lam * delta + (1.0 - layer.lam) * lora.delta_weight(layer.experts.premerged())


@dataclass
class RoutingReport:
    """Routing weights for one input: per-group, per-slot, and combined."""

    group_names: list[str]
    slot_adapter_ids: list[list[str]]  # PAD_SLOT marks padded slots
    group_weights: np.ndarray  # [n_groups]
    intra_weights: np.ndarray  # [n_groups, max_slots]
    combined_weights: np.ndarray  # [n_groups, max_slots]

    def to_dict(self) -> dict:
        return {
            "group_names": list(self.group_names),
            "slot_adapter_ids": [list(r) for r in self.slot_adapter_ids],
            "group_weights": self.group_weights.tolist(),
            "intra_weights": self.intra_weights.tolist(),
            "combined_weights": self.combined_weights.tolist(),
        }


def routing_report(layer: AtMoeLinear, x: np.ndarray) -> RoutingReport:
    """Dynamic weight allocation for one routing input."""
    x = np.asarray(x, dtype=np.float64)
    from .router import group_weights, intra_group_weights

    gw = group_weights(layer.router, x)
    iw = np.stack([intra_group_weights(layer.router, x, g) for g in range(len(layer.groups))])
    slot_ids = [
        [spec.expert_ids[m] if m < spec.size else PAD_SLOT for m in range(layer.router.max_slots)]
        for spec in layer.groups
    ]
    return RoutingReport(
        group_names=[g.name for g in layer.groups],
        slot_adapter_ids=slot_ids,
        group_weights=gw,
        intra_weights=iw,
        combined_weights=gw[:, None] * iw,
    )
