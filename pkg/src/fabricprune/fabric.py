"""The 2D convolutional network fabric: a layer x scale grid of nodes.

Every node holds an activation tensor; activations flow along directed
links, each applying conv -> (optional resample) -> batch norm -> ReLU6.
A never-pruned stem convolution feeds the input node at (0, 0) and a
never-pruned fully connected head reads the output node at (L-1, S-1),
whose spatial resolution is 1x1.

Grid wiring: node (l+1, s) receives links from (l, s-1), (l, s) and
(l, s+1) where those exist; layers 0 and L-1 additionally carry
downward column links (l, s) -> (l, s+1) that spread information along
the scale axis. Down and column links use stride-2 convolution; up links
convolve at the source resolution and then upsample x2 bilinearly.
"""

from __future__ import annotations

import enum
import io
import json
from dataclasses import dataclass

import numpy as np

from .tensor import (
    BatchNormState,
    Parameter,
    Tensor,
    batch_norm,
    conv2d,
    linear,
    relu6,
    upsample_bilinear_x2,
)

NodeId = tuple[int, int]  # (layer, scale)

CHECKPOINT_VERSION = 1


class FabricError(ValueError):
    """Inconsistent fabric construction or state."""


class Direction(enum.Enum):
    SAME = "same"
    DOWN = "down"
    UP = "up"
    COLUMN_DOWN = "column_down"

    @property
    def stride(self) -> int:
        return 2 if self in (Direction.DOWN, Direction.COLUMN_DOWN) else 1


@dataclass
class Link:
    """One directed edge of the grid and all of its parameters."""

    index: int
    src: NodeId
    dst: NodeId
    direction: Direction
    conv_weight: Parameter  # (C, C, 3, 3); carries the prune mask
    conv_bias: Parameter  # (C,)
    bn_gamma: Parameter
    bn_beta: Parameter
    bn_state: BatchNormState
    alive: bool = True

    def parameters(self) -> list[Parameter]:
        return [self.conv_weight, self.conv_bias, self.bn_gamma, self.bn_beta]

    def unmasked_weight_count(self) -> int:
        if self.conv_weight.mask is None:
            return self.conv_weight.data.size
        return int(self.conv_weight.mask.sum())


@dataclass
class ParamBreakdown:
    stem: int
    links: int
    head: int

    @property
    def total(self) -> int:
        return self.stem + self.links + self.head


def stem_param_count(channels: int) -> int:
    # conv 3->C with bias, plus BN affine
    return 3 * channels * 9 + channels + 2 * channels


def per_link_param_count(channels: int) -> int:
    return channels * channels * 9 + channels + 2 * channels


def head_param_count(channels: int, num_classes: int) -> int:
    return channels * num_classes + num_classes


def grid_link_count(layers: int, scales: int) -> int:
    """Alive links at construction: (L-1)(3S-2) between-layer + 2(S-1) column."""
    return (layers - 1) * (3 * scales - 2) + 2 * (scales - 1)


def param_breakdown(layers: int, scales: int, channels: int, num_classes: int,
                    alive_links: int | None = None) -> ParamBreakdown:
    """Parameter accounting for given dims; defaults to the full grid."""
    if alive_links is None:
        alive_links = grid_link_count(layers, scales)
    return ParamBreakdown(
        stem=stem_param_count(channels),
        links=alive_links * per_link_param_count(channels),
        head=head_param_count(channels, num_classes),
    )


class Fabric:
    """Grid of nodes and links plus stem and head, ready for forward passes."""

    def __init__(self, layers: int, scales: int, channels: int,
                 input_resolution: int, num_classes: int, dtype=np.float32):
        self.L = layers
        self.S = scales
        self.C = channels
        self.input_resolution = input_resolution
        self.num_classes = num_classes
        self.dtype = np.dtype(dtype)

        self.stem_weight: Parameter
        self.stem_bias: Parameter
        self.stem_gamma: Parameter
        self.stem_beta: Parameter
        self.stem_bn_state: BatchNormState
        self.head_weight: Parameter
        self.head_bias: Parameter
        self.links: list[Link] = []
        self._in_links: dict[NodeId, list[Link]] = {}
        self._out_links: dict[NodeId, list[Link]] = {}

    @property
    def input_node(self) -> NodeId:
        return (0, 0)

    @property
    def output_node(self) -> NodeId:
        return (self.L - 1, self.S - 1)

    def nodes(self) -> list[NodeId]:
        return [(l, s) for l in range(self.L) for s in range(self.S)]

    def _register_link(self, link: Link) -> None:
        self.links.append(link)
        self._in_links.setdefault(link.dst, []).append(link)
        self._out_links.setdefault(link.src, []).append(link)

    def in_links(self, node: NodeId, alive_only: bool = True) -> list[Link]:
        found = self._in_links.get(node, [])
        return [l for l in found if l.alive] if alive_only else list(found)

    def out_links(self, node: NodeId, alive_only: bool = True) -> list[Link]:
        found = self._out_links.get(node, [])
        return [l for l in found if l.alive] if alive_only else list(found)

    def alive_links(self) -> list[Link]:
        return [l for l in self.links if l.alive]

    def stem_parameters(self) -> list[Parameter]:
        return [self.stem_weight, self.stem_bias, self.stem_gamma, self.stem_beta]

    def head_parameters(self) -> list[Parameter]:
        return [self.head_weight, self.head_bias]

    def parameters(self) -> list[Parameter]:
        """Trainable parameters of the stem, all alive links, and the head."""
        params = self.stem_parameters()
        for link in self.alive_links():
            params.extend(link.parameters())
        params.extend(self.head_parameters())
        return params

    def _apply_link(self, link: Link, activation: Tensor, mode: str) -> Tensor:
        h = conv2d(activation, link.conv_weight, link.conv_bias,
                   stride=link.direction.stride)
        if link.direction is Direction.UP:
            h = upsample_bilinear_x2(h)
        h = batch_norm(h, link.bn_gamma, link.bn_beta, link.bn_state, mode)
        return relu6(h)

    def forward(self, batch: Tensor | np.ndarray, mode: str = "train") -> Tensor:
        """Run a (B, 3, R, R) batch through the fabric, returning logits."""
        logits, _ = self._forward_impl(batch, mode)
        return logits

    def forward_with_activations(self, batch, mode: str = "train"):
        """Forward pass that also returns the per-node activation tensors."""
        return self._forward_impl(batch, mode)

    def _forward_impl(self, batch, mode: str):
        if not isinstance(batch, Tensor):
            batch = Tensor(np.asarray(batch, dtype=self.dtype))
        B, C_in, H, W = batch.data.shape
        if C_in != 3 or H != self.input_resolution or W != self.input_resolution:
            raise FabricError(
                f"expected (B, 3, {self.input_resolution}, {self.input_resolution}) "
                f"input, got {batch.data.shape}")

        h = conv2d(batch, self.stem_weight, self.stem_bias, stride=1)
        h = batch_norm(h, self.stem_gamma, self.stem_beta, self.stem_bn_state, mode)
        activations: dict[NodeId, Tensor] = {self.input_node: relu6(h)}

        # (layer asc, scale asc) is a topological order: grid links go to the
        # next layer and column links to the next scale within a layer
        for l in range(self.L):
            for s in range(self.S):
                node = (l, s)
                if node == self.input_node:
                    continue
                total: Tensor | None = None
                for link in self.in_links(node):
                    src_act = activations.get(link.src)
                    if src_act is None:
                        continue
                    contribution = self._apply_link(link, src_act, mode)
                    total = contribution if total is None else total + contribution
                if total is not None:
                    activations[node] = total

        out = activations.get(self.output_node)
        if out is None:
            raise FabricError("output node received no activation; "
                              "input->output connectivity is broken")
        flat = out.reshape((B, self.C))
        return linear(flat, self.head_weight, self.head_bias), activations

    def predict(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Argmax class indices in eval mode, without recording gradients."""
        from .tensor import no_grad

        preds = []
        with no_grad():
            for start in range(0, images.shape[0], batch_size):
                logits = self.forward(images[start : start + batch_size], mode="eval")
                preds.append(logits.data.argmax(axis=1))
        return np.concatenate(preds)

    def param_count(self) -> ParamBreakdown:
        return param_breakdown(self.L, self.S, self.C, self.num_classes,
                               alive_links=len(self.alive_links()))

    def live_param_count(self) -> int:
        """Surviving parameters: unmasked conv weights plus everything unpruned."""
        total = stem_param_count(self.C) + head_param_count(self.C, self.num_classes)
        for link in self.alive_links():
            total += link.unmasked_weight_count() + self.C + 2 * self.C
        return total

    def node_resolution(self, node: NodeId) -> int:
        return self.input_resolution // (2 ** node[1])


def _link_direction(src: NodeId, dst: NodeId) -> Direction:
    if src[0] == dst[0]:
        return Direction.COLUMN_DOWN
    if dst[1] == src[1] + 1:
        return Direction.DOWN
    if dst[1] == src[1] - 1:
        return Direction.UP
    return Direction.SAME


def _grid_edges(layers: int, scales: int) -> list[tuple[NodeId, NodeId]]:
    edges: list[tuple[NodeId, NodeId]] = []
    for l in range(layers - 1):
        for s in range(scales):
            for ds in (-1, 0, 1):
                src_scale = s + ds
                if 0 <= src_scale < scales:
                    edges.append(((l, src_scale), (l + 1, s)))
    for l in (0, layers - 1):
        for s in range(scales - 1):
            edges.append(((l, s), (l, s + 1)))
    return edges


def build_fabric(layers: int, scales: int, channels: int, input_resolution: int,
                 num_classes: int, seed: int = 0, dtype=np.float32) -> Fabric:
    """Construct a fully alive fabric with seeded He-normal initialization."""
    if layers < 2 or scales < 2:
        raise FabricError(f"need at least 2 layers and 2 scales, got L={layers}, S={scales}")
    if input_resolution != 2 ** (scales - 1):
        raise FabricError(
            f"input resolution {input_resolution} inconsistent with {scales} scales; "
            f"expected {2 ** (scales - 1)} so the smallest scale is 1x1")

    fabric = Fabric(layers, scales, channels, input_resolution, num_classes, dtype)
    rng = np.random.default_rng(seed)
    dt = fabric.dtype

    def he_conv(c_out, c_in):
        std = np.sqrt(2.0 / (c_in * 9))
        return Parameter((rng.standard_normal((c_out, c_in, 3, 3)) * std).astype(dt))

    fabric.stem_weight = he_conv(channels, 3)
    fabric.stem_bias = Parameter(np.zeros(channels, dtype=dt))
    fabric.stem_gamma = Parameter(np.ones(channels, dtype=dt))
    fabric.stem_beta = Parameter(np.zeros(channels, dtype=dt))
    fabric.stem_bn_state = BatchNormState.create(channels, dt)

    for index, (src, dst) in enumerate(_grid_edges(layers, scales)):
        fabric._register_link(Link(
            index=index,
            src=src,
            dst=dst,
            direction=_link_direction(src, dst),
            conv_weight=he_conv(channels, channels),
            conv_bias=Parameter(np.zeros(channels, dtype=dt)),
            bn_gamma=Parameter(np.ones(channels, dtype=dt)),
            bn_beta=Parameter(np.zeros(channels, dtype=dt)),
            bn_state=BatchNormState.create(channels, dt),
        ))

    head_std = np.sqrt(1.0 / channels)
    fabric.head_weight = Parameter(
        (rng.standard_normal((num_classes, channels)) * head_std).astype(dt))
    fabric.head_bias = Parameter(np.zeros(num_classes, dtype=dt))
    return fabric


def longest_linear_path(fabric: Fabric) -> int:
    """Longest input->output chain, in links, over the alive graph.

    Linear paths are scale-monotone: a chain network processes its input at
    ever coarser resolution, so up links never appear in one. On the full
    grid this equals (L-1) + (S-1).
    """
    dist: dict[NodeId, int] = {fabric.input_node: 0}
    for l in range(fabric.L):
        for s in range(fabric.S):
            node = (l, s)
            if node == fabric.input_node:
                continue
            best = -1
            for link in fabric.in_links(node):
                if link.direction is Direction.UP:
                    continue
                src_dist = dist.get(link.src, -1)
                if src_dist >= 0:
                    best = max(best, src_dist + 1)
            if best >= 0:
                dist[node] = best
    result = dist.get(fabric.output_node, -1)
    if result < 0:
        raise FabricError("no scale-monotone input->output path is alive")
    return result


def export_dot(fabric: Fabric, include_pruned: bool = False) -> str:
    """Render the grid as a DOT digraph; pruned links dashed or omitted."""
    buf = io.StringIO()
    buf.write("digraph fabric {\n")
    buf.write("  rankdir=LR;\n")
    buf.write("  node [shape=circle, fontsize=10];\n")
    for l, s in fabric.nodes():
        attrs = f'label="({l},{s})"'
        if (l, s) == fabric.input_node:
            attrs += ", style=filled, fillcolor=lightblue"
        elif (l, s) == fabric.output_node:
            attrs += ", style=filled, fillcolor=lightgreen"
        buf.write(f"  n{l}_{s} [{attrs}];\n")
    for link in fabric.links:
        if not link.alive and not include_pruned:
            continue
        style = "" if link.alive else ' [style=dashed, color=gray]'
        (l0, s0), (l1, s1) = link.src, link.dst
        buf.write(f"  n{l0}_{s0} -> n{l1}_{s1}{style};\n")
    buf.write("}\n")
    return buf.getvalue()


def save_fabric(fabric: Fabric, path) -> None:
    """Write a lossless, versioned checkpoint (npz container)."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "layers": fabric.L,
        "scales": fabric.S,
        "channels": fabric.C,
        "input_resolution": fabric.input_resolution,
        "num_classes": fabric.num_classes,
        "dtype": fabric.dtype.name,
        "alive": [link.alive for link in fabric.links],
        "has_mask": [link.conv_weight.mask is not None for link in fabric.links],
    }
    arrays = {
        "stem_weight": fabric.stem_weight.data,
        "stem_bias": fabric.stem_bias.data,
        "stem_gamma": fabric.stem_gamma.data,
        "stem_beta": fabric.stem_beta.data,
        "stem_running_mean": fabric.stem_bn_state.running_mean,
        "stem_running_var": fabric.stem_bn_state.running_var,
        "head_weight": fabric.head_weight.data,
        "head_bias": fabric.head_bias.data,
    }
    for link in fabric.links:
        key = f"link{link.index}"
        arrays[f"{key}_conv"] = link.conv_weight.data
        arrays[f"{key}_bias"] = link.conv_bias.data
        arrays[f"{key}_gamma"] = link.bn_gamma.data
        arrays[f"{key}_beta"] = link.bn_beta.data
        arrays[f"{key}_running_mean"] = link.bn_state.running_mean
        arrays[f"{key}_running_var"] = link.bn_state.running_var
        if link.conv_weight.mask is not None:
            arrays[f"{key}_mask"] = link.conv_weight.mask
    np.savez(path, __meta__=np.array(json.dumps(meta)), **arrays)


def load_fabric(path) -> Fabric:
    """Reconstruct a fabric from a checkpoint written by save_fabric."""
    with np.load(path) as archive:
        meta = json.loads(str(archive["__meta__"]))
        if meta["version"] != CHECKPOINT_VERSION:
            raise FabricError(f"unsupported checkpoint version {meta['version']}")
        fabric = build_fabric(meta["layers"], meta["scales"], meta["channels"],
                              meta["input_resolution"], meta["num_classes"],
                              dtype=np.dtype(meta["dtype"]))
        fabric.stem_weight.data = archive["stem_weight"]
        fabric.stem_bias.data = archive["stem_bias"]
        fabric.stem_gamma.data = archive["stem_gamma"]
        fabric.stem_beta.data = archive["stem_beta"]
        fabric.stem_bn_state.running_mean = archive["stem_running_mean"]
        fabric.stem_bn_state.running_var = archive["stem_running_var"]
        fabric.head_weight.data = archive["head_weight"]
        fabric.head_bias.data = archive["head_bias"]
        for link, alive, has_mask in zip(fabric.links, meta["alive"], meta["has_mask"]):
            key = f"link{link.index}"
            link.alive = alive
            link.conv_weight.data = archive[f"{key}_conv"]
            link.conv_bias.data = archive[f"{key}_bias"]
            link.bn_gamma.data = archive[f"{key}_gamma"]
            link.bn_beta.data = archive[f"{key}_beta"]
            link.bn_state.running_mean = archive[f"{key}_running_mean"]
            link.bn_state.running_var = archive[f"{key}_running_var"]
            if has_mask:
                link.conv_weight.mask = archive[f"{key}_mask"]
    return fabric


def clone_parameters(fabric: Fabric) -> dict:
    """Snapshot of all parameter arrays and BN state, for checkpoint-in-memory."""
    snap = {"params": [], "states": []}
    for p in _all_parameters(fabric):
        snap["params"].append((p.data.copy(), None if p.mask is None else p.mask.copy()))
    for st in _all_bn_states(fabric):
        snap["states"].append((st.running_mean.copy(), st.running_var.copy()))
    snap["alive"] = [link.alive for link in fabric.links]
    return snap


def restore_parameters(fabric: Fabric, snap: dict) -> None:
    for p, (data, mask) in zip(_all_parameters(fabric), snap["params"]):
        p.data = data.copy()
        p.mask = None if mask is None else mask.copy()
    for st, (rm, rv) in zip(_all_bn_states(fabric), snap["states"]):
        st.running_mean = rm.copy()
        st.running_var = rv.copy()
    for link, alive in zip(fabric.links, snap["alive"]):
        link.alive = alive


def _all_parameters(fabric: Fabric) -> list[Parameter]:
    params = fabric.stem_parameters()
    for link in fabric.links:
        params.extend(link.parameters())
    params.extend(fabric.head_parameters())
    return params


def _all_bn_states(fabric: Fabric) -> list[BatchNormState]:
    states = [fabric.stem_bn_state]
    states.extend(link.bn_state for link in fabric.links)
    return states
