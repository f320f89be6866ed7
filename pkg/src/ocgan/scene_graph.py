"""Positional scene graphs built from layouts, and their GCN encoder."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn as nn

from .layout import Layout, ObjectInstance


class Relation(enum.IntEnum):
    LEFT_OF = 0
    RIGHT_OF = 1
    ABOVE = 2
    BELOW = 3
    INSIDE = 4
    SURROUNDING = 5

    @property
    def text(self) -> str:
        return _RELATION_TEXT[self]

    def inverse(self) -> "Relation":
        return _INVERSE[self]

    @classmethod
    def from_text(cls, text: str) -> "Relation":
        for rel, t in _RELATION_TEXT.items():
            if t == text:
                return rel
        raise ValueError(f"unknown relation {text!r}")


_RELATION_TEXT = {
    Relation.LEFT_OF: "left of",
    Relation.RIGHT_OF: "right of",
    Relation.ABOVE: "above",
    Relation.BELOW: "below",
    Relation.INSIDE: "inside",
    Relation.SURROUNDING: "surrounding",
}

_INVERSE = {
    Relation.LEFT_OF: Relation.RIGHT_OF,
    Relation.RIGHT_OF: Relation.LEFT_OF,
    Relation.ABOVE: Relation.BELOW,
    Relation.BELOW: Relation.ABOVE,
    Relation.INSIDE: Relation.SURROUNDING,
    Relation.SURROUNDING: Relation.INSIDE,
}

NUM_RELATIONS = len(Relation)


def relation_between(subject: ObjectInstance, obj: ObjectInstance) -> Relation:
    """Spatial relation of ``subject`` with respect to ``obj``.

    Containment is checked first (non-strict on all sides; identical boxes count
    as neither). Otherwise the dominant axis of the center offset decides, with
    ties going to the horizontal axis. Coincident centers fall back to instance
    order so the relation stays antisymmetric.
    """
    a, b = subject.box, obj.box
    a_in_b, b_in_a = b.contains(a), a.contains(b)
    if a_in_b and not b_in_a:
        return Relation.INSIDE
    if b_in_a and not a_in_b:
        return Relation.SURROUNDING
    (sx, sy), (ox, oy) = a.center(), b.center()
    dx, dy = sx - ox, sy - oy
    if abs(dx) >= abs(dy):
        if dx == 0:
            return Relation.LEFT_OF if subject.instance_index < obj.instance_index else Relation.RIGHT_OF
        return Relation.LEFT_OF if dx < 0 else Relation.RIGHT_OF
    # image rows grow downwards
    return Relation.ABOVE if dy < 0 else Relation.BELOW


@dataclass
class SceneGraph:
    nodes: list[int]
    edges: list[tuple[int, Relation, int]] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.nodes)
        for s, rel, o in self.edges:
            if not (0 <= s < n and 0 <= o < n):
                raise ValueError(f"edge ({s}, {rel}, {o}) references a missing node (|nodes|={n})")
            if s == o:
                raise ValueError(f"self-edge on node {s}")

    def to_json(self, class_names: Sequence[str] | None = None) -> str:
        name = (lambda c: class_names[c]) if class_names is not None else str
        return json.dumps({
            "nodes": [name(c) for c in self.nodes],
            "edges": [[name(self.nodes[s]), Relation(r).text, name(self.nodes[o])] for s, r, o in self.edges],
            "edge_index": [[s, int(r), o] for s, r, o in self.edges],
        })


def build_scene_graph(layout: Layout, max_edges: int | None = None) -> SceneGraph:
    """All ordered object pairs, each unordered pair emitted with its inverse.

    With ``max_edges`` set, only the pairs with the closest box centers are kept
    (two edges per pair, ties broken by index).
    """
    objs = layout.objects
    pairs = [(i, j) for i in range(len(objs)) for j in range(i + 1, len(objs))]
    if max_edges is not None and 2 * len(pairs) > max_edges:
        def dist(p):
            (ax, ay), (bx, by) = objs[p[0]].box.center(), objs[p[1]].box.center()
            return ((ax - bx) ** 2 + (ay - by) ** 2, p)
        pairs = sorted(sorted(pairs, key=dist)[: max_edges // 2])
    edges = []
    for i, j in pairs:
        rel = relation_between(objs[i], objs[j])
        edges.append((i, rel, j))
        edges.append((j, rel.inverse(), i))
    return SceneGraph([o.class_id for o in objs], edges)


@dataclass
class GraphEmbedding:
    local: torch.Tensor   # J x D
    global_: torch.Tensor  # D


@dataclass
class GraphBatch:
    """Several graphs flattened into one node/edge list."""

    classes: torch.Tensor      # (N,)
    edges: torch.Tensor        # (T, 3) rows of (subject, relation, object) with global node ids
    node_to_graph: torch.Tensor  # (N,)
    num_graphs: int

    @classmethod
    def from_graphs(cls, graphs: Sequence[SceneGraph], device=None) -> "GraphBatch":
        classes, edges, owner = [], [], []
        offset = 0
        for g_idx, g in enumerate(graphs):
            classes.extend(g.nodes)
            owner.extend([g_idx] * len(g.nodes))
            edges.extend((s + offset, int(r), o + offset) for s, r, o in g.edges)
            offset += len(g.nodes)
        edge_t = torch.tensor(edges, dtype=torch.long).view(-1, 3)
        return cls(torch.tensor(classes, dtype=torch.long, device=device), edge_t.to(device),
                   torch.tensor(owner, dtype=torch.long, device=device), len(graphs))

    @property
    def sizes(self) -> list[int]:
        return torch.bincount(self.node_to_graph, minlength=self.num_graphs).tolist()


def _mlp(dims: Sequence[int]) -> nn.Sequential:
    layers = []
    for k in range(len(dims) - 1):
        layers.append(nn.Linear(dims[k], dims[k + 1]))
        if k < len(dims) - 2:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class GraphTripleConv(nn.Module):
    """One round of message passing over (subject, relation, object) triples.

    Each node averages its own projected state with every message it receives as
    subject or object, so isolated nodes still propagate through the self term.
    """

    def __init__(self, dim: int, hidden_dim: int):
        super().__init__()
        self.hidden_dim = hidden_dim
        self.net1 = _mlp([3 * dim, hidden_dim, 2 * hidden_dim + dim])
        self.net2 = _mlp([hidden_dim, hidden_dim, dim])
        self.self_proj = nn.Linear(dim, hidden_dim)

    def forward(self, obj_vecs, pred_vecs, edges):
        H = self.hidden_dim
        s_idx, o_idx = edges[:, 0], edges[:, 1]
        t = self.net1(torch.cat([obj_vecs[s_idx], pred_vecs, obj_vecs[o_idx]], dim=1))
        new_s, new_p, new_o = t[:, :H], t[:, H:-H], t[:, -H:]
        pooled = self.self_proj(obj_vecs)
        pooled = pooled.index_add(0, s_idx, new_s).index_add(0, o_idx, new_o)
        deg = torch.ones(obj_vecs.shape[0], dtype=obj_vecs.dtype, device=obj_vecs.device)
        deg = deg.index_add(0, s_idx, torch.ones_like(s_idx, dtype=deg.dtype))
        deg = deg.index_add(0, o_idx, torch.ones_like(o_idx, dtype=deg.dtype))
        return self.net2(pooled / deg[:, None]), new_p


class GraphEncoder(nn.Module):
    """Graph convolutions plus mean pooling, projected into the common space."""

    def __init__(self, num_classes: int, embed_dim: int = 128, hidden_dim: int = 128,
                 num_layers: int = 3, common_dim: int = 256, add_global_node: bool = False):
        super().__init__()
        self.num_classes = num_classes
        self.add_global_node = add_global_node
        extra = 1 if add_global_node else 0
        self.obj_embedding = nn.Embedding(num_classes + extra, embed_dim)
        self.pred_embedding = nn.Embedding(NUM_RELATIONS + extra, embed_dim)
        self.convs = nn.ModuleList(GraphTripleConv(embed_dim, hidden_dim) for _ in range(num_layers))
        self.local_proj = nn.Linear(embed_dim, common_dim, bias=False)
        self.global_proj = nn.Linear(embed_dim, common_dim, bias=False)

    def _with_global_nodes(self, batch: GraphBatch) -> GraphBatch:
        n = batch.classes.shape[0]
        G = batch.num_graphs
        device = batch.classes.device
        img_nodes = torch.arange(n, n + G, device=device)
        in_image = torch.stack([torch.arange(n, device=device),
                                torch.full((n,), NUM_RELATIONS, device=device),
                                img_nodes[batch.node_to_graph]], dim=1)
        return GraphBatch(
            torch.cat([batch.classes, torch.full((G,), self.num_classes, device=device)]),
            torch.cat([batch.edges, in_image]),
            torch.cat([batch.node_to_graph, torch.arange(G, device=device)]),
            G,
        )

    def forward(self, batch: GraphBatch) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns flat local embeddings ``(N, D)`` and global embeddings ``(G, D)``."""
        n_real = batch.classes.shape[0]
        if self.add_global_node:
            batch = self._with_global_nodes(batch)
        obj = self.obj_embedding(batch.classes)
        pred = self.pred_embedding(batch.edges[:, 1])
        pair = batch.edges[:, [0, 2]]
        for conv in self.convs:
            obj, pred = conv(obj, pred, pair)
        counts = torch.bincount(batch.node_to_graph, minlength=batch.num_graphs).to(obj.dtype)
        pooled = obj.new_zeros(batch.num_graphs, obj.shape[1]).index_add(0, batch.node_to_graph, obj)
        pooled = pooled / counts[:, None]
        return self.local_proj(obj[:n_real]), self.global_proj(pooled)


def pad_nodes(local: torch.Tensor, sizes: Sequence[int]) -> tuple[torch.Tensor, torch.Tensor]:
    """Split flat node rows into a padded ``(G, Jmax, D)`` tensor and a boolean mask."""
    G, J = len(sizes), max(sizes)
    out = local.new_zeros(G, J, local.shape[1])
    mask = torch.zeros(G, J, dtype=torch.bool, device=local.device)
    start = 0
    for g, n in enumerate(sizes):
        out[g, :n] = local[start:start + n]
        mask[g, :n] = True
        start += n
    return out, mask


def gcn_encode(graph: SceneGraph, encoder: GraphEncoder) -> GraphEmbedding:
    local, global_ = encoder(GraphBatch.from_graphs([graph], device=encoder.obj_embedding.weight.device))
    return GraphEmbedding(local, global_[0])
