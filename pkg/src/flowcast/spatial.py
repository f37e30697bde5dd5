"""Graph convolution over node features, applied independently per time step."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ShapeError


@dataclass
class SpatialParams:
    """One square feature-mixing matrix per adjacency term."""

    w_adaptive: ad.Tensor
    w_forward: ad.Tensor
    w_backward: ad.Tensor

    def named(self, prefix: str) -> dict[str, ad.Tensor]:
        return {
            f"{prefix}.w_adaptive": self.w_adaptive,
            f"{prefix}.w_forward": self.w_forward,
            f"{prefix}.w_backward": self.w_backward,
        }


def _mix(adjacency, x_time_major: ad.Tensor, weight: ad.Tensor) -> ad.Tensor:
    return ad.matmul(ad.matmul(adjacency, x_time_major), weight)


def spatial_forward(
    x: ad.Tensor,
    a_adp: ad.Tensor | None,
    a_fwd,
    a_bwd,
    params: SpatialParams,
    use_adaptive: bool = True,
    use_fixed: bool = True,
) -> ad.Tensor:
    """Sum of adaptive and two directional fixed graph-mixing terms.

    ``x`` has trailing axes (nodes, time, features); each term is
    adjacency @ x @ weight applied per time step. The ablation switches drop
    individual terms; with every term dropped the result is the zero map.
    """
    if x.ndim < 3:
        raise ShapeError(f"spatial input needs (nodes, time, features) axes, got {x.shape}")
    nodes = x.shape[-3]
    for name, adj in (("adaptive", a_adp), ("forward", a_fwd), ("backward", a_bwd)):
        if adj is None:
            continue
        shape = adj.shape if isinstance(adj, ad.Tensor) else np.shape(adj)
        if shape != (nodes, nodes):
            raise ShapeError(f"{name} adjacency shape {shape} does not match {nodes} nodes")

    xt = ad.swapaxes(x, -3, -2)  # (time, nodes, features) per leading batch
    terms = []
    if use_adaptive:
        if a_adp is None:
            raise ShapeError("adaptive adjacency required unless the term is ablated")
        terms.append(_mix(a_adp, xt, params.w_adaptive))
    if use_fixed:
        terms.append(_mix(ad.as_tensor(a_fwd), xt, params.w_forward))
        terms.append(_mix(ad.as_tensor(a_bwd), xt, params.w_backward))
    if not terms:
        return ad.mul(x, 0.0)
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    return ad.swapaxes(total, -3, -2)


def gcn_two_layer_reference(x, a, w0, w1) -> ad.Tensor:
    """Two stacked relu(A·X·W) layers; kept as an oracle/benchmark, not used in the model."""
    x, a, w0, w1 = map(ad.as_tensor, (x, a, w0, w1))
    h1 = ad.relu(ad.matmul(ad.matmul(a, x), w0))
    return ad.relu(ad.matmul(ad.matmul(a, h1), w1))
