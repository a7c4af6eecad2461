"""Feature encoders: point sets to node features, instance-attribute pairs
to edge features, and surrogate visual rows to oracle node features.

The raw edge descriptor concatenates attribute differences

    x_ij = cat(mu_i - mu_j, sigma_i - sigma_j, b_i - b_j,
               ln l_i - ln l_j, ln v_i - ln v_j)          # width 11

The log ratios are computed as differences of logs so that the exact
antisymmetry x_ij == -x_ji holds bitwise.

Descriptors and point sets are data constants; gradients flow only
through the MLP parameters.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DataError, DimensionError
from .scene import InstanceAttributes

EDGE_DESCRIPTOR_WIDTH = 11


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_point_mlp(rng: np.random.Generator, hidden: int, d: int) -> dict[str, Tensor]:
    """Shared per-point MLP 3 -> h -> h, max-pool, then h -> D."""
    return {
        "w1": Tensor(_glorot(rng, 3, hidden), requires_grad=True),
        "b1": Tensor(np.zeros(hidden), requires_grad=True),
        "w2": Tensor(_glorot(rng, hidden, hidden), requires_grad=True),
        "b2": Tensor(np.zeros(hidden), requires_grad=True),
        "w3": Tensor(_glorot(rng, hidden, d), requires_grad=True),
        "b3": Tensor(np.zeros(d), requires_grad=True),
    }


def init_edge_mlp(rng: np.random.Generator, hidden: int, d: int) -> dict[str, Tensor]:
    """Edge MLP: linear(11 -> h), ReLU, linear(h -> D)."""
    return {
        "w1": Tensor(_glorot(rng, EDGE_DESCRIPTOR_WIDTH, hidden), requires_grad=True),
        "b1": Tensor(np.zeros(hidden), requires_grad=True),
        "w2": Tensor(_glorot(rng, hidden, d), requires_grad=True),
        "b2": Tensor(np.zeros(d), requires_grad=True),
    }


def init_visual_proj(rng: np.random.Generator, d_vis: int, d: int) -> dict[str, Tensor]:
    return {
        "w": Tensor(_glorot(rng, d_vis, d), requires_grad=True),
        "b": Tensor(np.zeros(d), requires_grad=True),
    }


def encode_node_3d(points: np.ndarray, params: dict[str, Tensor]) -> Tensor:
    """Instance point set (n, 3) -> (1, D) feature via shared MLP + max-pool."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
        raise DataError("point set must be a non-empty (n, 3) array")
    h = ad.relu(ad.linear(Tensor(pts), params["w1"], params["b1"]))
    h = ad.relu(ad.linear(h, params["w2"], params["b2"]))
    pooled = ad.amax(h, axis=0, keepdims=True)
    return ad.linear(pooled, params["w3"], params["b3"])


def encode_nodes_3d(point_sets: list[np.ndarray], params: dict[str, Tensor]) -> Tensor:
    """All instances of a scene -> (K, D)."""
    return ad.concat([encode_node_3d(p, params) for p in point_sets], axis=0)


def edge_descriptor(attr_i: InstanceAttributes, attr_j: InstanceAttributes) -> np.ndarray:
    """Raw 11-dim pair descriptor; exactly antisymmetric under (i, j) swap."""
    out = np.empty(EDGE_DESCRIPTOR_WIDTH)
    out[0:3] = attr_i.mean - attr_j.mean
    out[3:6] = attr_i.std - attr_j.std
    out[6:9] = attr_i.bbox_size - attr_j.bbox_size
    out[9] = np.log(attr_i.max_side) - np.log(attr_j.max_side)
    out[10] = np.log(attr_i.volume) - np.log(attr_j.volume)
    if not np.all(np.isfinite(out)):
        raise DataError("non-finite edge descriptor (degenerate attributes?)")
    return out


def descriptor_matrix(attrs: list[InstanceAttributes], pairs: list[tuple[int, int]]) -> np.ndarray:
    if not pairs:
        return np.zeros((0, EDGE_DESCRIPTOR_WIDTH))
    return np.stack([edge_descriptor(attrs[i], attrs[j]) for i, j in pairs])


def encode_edges(descriptors: np.ndarray, params: dict[str, Tensor]) -> Tensor:
    """(E, 11) descriptors -> (E, D) edge features."""
    if descriptors.shape[1] != EDGE_DESCRIPTOR_WIDTH:
        raise DimensionError(f"edge descriptors must have width {EDGE_DESCRIPTOR_WIDTH}")
    h = ad.relu(ad.linear(Tensor(descriptors), params["w1"], params["b1"]))
    return ad.linear(h, params["w2"], params["b2"])


def encode_edge_3d(attr_i: InstanceAttributes, attr_j: InstanceAttributes,
                   params: dict[str, Tensor]) -> Tensor:
    """Single ordered pair -> (1, D) edge feature."""
    return encode_edges(edge_descriptor(attr_i, attr_j)[None, :], params)


def encode_node_oracle(visual_row: np.ndarray, params: dict[str, Tensor]) -> Tensor:
    """Single visual feature row -> (1, D) oracle node feature."""
    row = np.asarray(visual_row, dtype=np.float64).reshape(1, -1)
    return encode_nodes_oracle(row, params)


def encode_nodes_oracle(visual: np.ndarray, params: dict[str, Tensor]) -> Tensor:
    """(K, D_vis) visual rows -> (K, D) via a single learnable projection."""
    if visual.shape[1] != params["w"].data.shape[0]:
        raise DimensionError(
            f"visual width {visual.shape[1]} does not match projection input {params['w'].data.shape[0]}")
    return ad.linear(Tensor(visual), params["w"], params["b"])
