"""Scene-graph similarity module: cross-modal matching between scene graphs and images.

The functional core (``attend``, ``local_similarity``, ``global_similarity``,
``matching_posteriors``, ``sgsm_loss_from_similarities``) works on plain tensors
so it can be checked against loop transcriptions; :class:`SGSM` wires it to an
image encoder and a :class:`~ocgan.scene_graph.GraphEncoder`.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .scene_graph import GraphBatch, GraphEncoder, SceneGraph, build_scene_graph, pad_nodes

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class SGSMConfig:
    gamma1: float = 4.0
    gamma2: float = 5.0
    gamma3: float = 10.0
    encoder_kind: str = "small-cnn"  # or "pretrained-inception-style"
    common_dim: int = 256
    input_resize: int = 64
    encoder_width: int = 32
    gcn_embed_dim: int = 128
    gcn_hidden_dim: int = 128
    gcn_layers: int = 3
    add_global_node: bool = False
    max_edges: int | None = None
    reduction: str = "mean"

    def __post_init__(self):
        bad = [k for k in ("gamma1", "gamma2", "gamma3") if not getattr(self, k) > 0]
        if bad:
            raise ValueError(f"normalization constants must be positive: {bad}")
        if self.encoder_kind not in ("small-cnn", "pretrained-inception-style"):
            raise ValueError(f"unknown encoder_kind {self.encoder_kind!r}")
        if self.reduction not in ("mean", "sum"):
            raise ValueError(f"reduction must be 'mean' or 'sum', got {self.reduction!r}")


@dataclass
class FeatureBundle:
    local: torch.Tensor   # (..., R, D)
    global_: torch.Tensor  # (..., D)


@dataclass
class AttentionResult:
    scores: torch.Tensor    # (..., R, J)
    attended: torch.Tensor  # (..., J, D)


# ---------------------------------------------------------------------------
# functional core


def safe_cosine(a: torch.Tensor, b: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Cosine similarity that is 0 (with zero gradient) when either vector has zero norm."""
    na2 = (a * a).sum(dim)
    nb2 = (b * b).sum(dim)
    ok = (na2 > 0) & (nb2 > 0)
    denom = torch.sqrt(torch.where(ok, na2, torch.ones_like(na2))) * torch.sqrt(torch.where(ok, nb2, torch.ones_like(nb2)))
    return torch.where(ok, (a * b).sum(dim) / denom, torch.zeros_like(na2))


def attend(v: torch.Tensor, g: torch.Tensor, gamma1: float) -> AttentionResult:
    """Graph-to-region attention.

    ``v`` is ``(..., R, D)`` region features, ``g`` is ``(..., J, D)`` node features.
    Scores are ``gamma1`` times a softmax over regions of ``g_j . v_i``; each node's
    attended vector is the softmax(scores)-weighted average of the regions.
    """
    raw = torch.einsum("...rd,...jd->...rj", v, g)
    scores = gamma1 * torch.softmax(raw, dim=-2)
    weights = torch.softmax(scores, dim=-2)
    attended = torch.einsum("...rj,...rd->...jd", weights, v)
    return AttentionResult(scores, attended)


def local_similarity(g: torch.Tensor, g_att: torch.Tensor, gamma2: float,
                     mask: torch.Tensor | None = None) -> torch.Tensor:
    """``(1/gamma2) * log sum_j exp(gamma2 * cos(g_att_j, g_j))`` over valid nodes."""
    cos = safe_cosine(g_att, g)
    z = gamma2 * cos
    if mask is not None:
        z = z.masked_fill(~mask, float("-inf"))
    return torch.logsumexp(z, dim=-1) / gamma2


def global_similarity(v_global: torch.Tensor, g_global: torch.Tensor) -> torch.Tensor:
    return safe_cosine(v_global, g_global)


def pairwise_similarities(v_local: torch.Tensor, v_global: torch.Tensor,
                          g_local: torch.Tensor, g_mask: torch.Tensor, g_global: torch.Tensor,
                          gamma1: float, gamma2: float) -> tuple[torch.Tensor, torch.Tensor]:
    """Local and global similarity for every (image a, graph b) pair.

    Shapes: ``v_local (Bi, R, D)``, ``v_global (Bi, D)``, ``g_local (Bg, J, D)`` padded
    with boolean ``g_mask (Bg, J)``, ``g_global (Bg, D)``. Returns two ``(Bi, Bg)``
    matrices indexed ``[image, graph]``.
    """
    att = attend(v_local[:, None], g_local[None], gamma1)
    sim_l = local_similarity(g_local[None], att.attended, gamma2, g_mask[None])
    sim_g = global_similarity(v_global[:, None, :], g_global[None, :, :])
    return sim_l, sim_g


def matching_posteriors(sim: torch.Tensor, gamma3: float) -> tuple[torch.Tensor, torch.Tensor]:
    """``(P(S|I), P(I|S))`` from an ``[image, graph]`` similarity matrix.

    Row ``a`` of ``P(S|I)`` is a distribution over the batch's graphs for image ``a``;
    column ``b`` of ``P(I|S)`` is a distribution over images for graph ``b``.
    """
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ValueError(f"need a square similarity matrix, got {tuple(sim.shape)}")
    if sim.shape[0] < 2:
        raise ValueError("matching needs a batch of at least 2 pairs (negatives come from the batch)")
    logits = gamma3 * sim
    return torch.softmax(logits, dim=1), torch.softmax(logits, dim=0)


def _matched_nll(sim: torch.Tensor, gamma3: float) -> torch.Tensor:
    """Per-pair ``-log P(S|I) - log P(I|S)`` on the diagonal."""
    if sim.shape[0] < 2:
        raise ValueError("matching needs a batch of at least 2 pairs (negatives come from the batch)")
    logits = gamma3 * sim
    diag = torch.arange(sim.shape[0], device=sim.device)
    return -(torch.log_softmax(logits, 1)[diag, diag] + torch.log_softmax(logits, 0)[diag, diag])


def sgsm_loss_from_similarities(sim_local: torch.Tensor, sim_global: torch.Tensor, gamma3: float,
                                reduction: str = "mean") -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Returns ``(L_SGSM, L_local, L_global)`` aggregated over matched pairs."""
    loss_l = _matched_nll(sim_local, gamma3)
    loss_g = _matched_nll(sim_global, gamma3)
    agg = torch.mean if reduction == "mean" else torch.sum
    loss_l, loss_g = agg(loss_l), agg(loss_g)
    return loss_l + loss_g, loss_l, loss_g


def recall_at_1(sim: torch.Tensor) -> float:
    """Fraction of images whose best-scoring graph is their own."""
    return (sim.argmax(dim=1) == torch.arange(sim.shape[0], device=sim.device)).float().mean().item()


# ---------------------------------------------------------------------------
# encoders


class SmallCNNEncoder(nn.Module):
    """Four stride-2 conv blocks; regions come from the third block's map."""

    min_size = 32

    def __init__(self, width: int = 32, common_dim: int = 256):
        super().__init__()
        chans = [3, width, 2 * width, 4 * width, 8 * width]
        self.blocks = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(chans[k], chans[k + 1], 3, stride=2, padding=1),
                nn.LeakyReLU(0.2),
                nn.Conv2d(chans[k + 1], chans[k + 1], 3, padding=1),
                nn.LeakyReLU(0.2),
            )
            for k in range(4)
        )
        self.local_proj = nn.Linear(chans[3], common_dim, bias=False)
        self.global_proj = nn.Linear(chans[4], common_dim, bias=False)

    def backbone_parameters(self):
        return self.blocks.parameters()

    def forward(self, x: torch.Tensor) -> FeatureBundle:
        for block in self.blocks[:3]:
            x = block(x)
        mid = x
        top = self.blocks[3](x).mean(dim=(2, 3))
        local = self.local_proj(mid.flatten(2).transpose(1, 2))
        return FeatureBundle(local, self.global_proj(top))


class InceptionEncoder(nn.Module):
    """ImageNet Inception-V3: regions from ``Mixed_6e``, global from the final pool.

    The backbone is frozen; only the two projections train. Needs torchvision
    weights (downloaded on first use) unless ``pretrained=False``.
    """

    min_size = 75

    def __init__(self, common_dim: int = 256, pretrained: bool = True):
        super().__init__()
        from torchvision.models import Inception_V3_Weights, inception_v3

        weights = Inception_V3_Weights.IMAGENET1K_V1 if pretrained else None
        net = inception_v3(weights=weights, aux_logits=True, init_weights=not pretrained)
        net.aux_logits = False
        net.AuxLogits = None
        self.net = net
        for p in self.net.parameters():
            p.requires_grad_(False)
        self.local_proj = nn.Linear(768, common_dim, bias=False)
        self.global_proj = nn.Linear(2048, common_dim, bias=False)
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))

    def backbone_parameters(self):
        return self.net.parameters()

    def forward(self, x: torch.Tensor) -> FeatureBundle:
        n = self.net
        x = ((x + 1) / 2 - self.mean) / self.std
        for name in ("Conv2d_1a_3x3", "Conv2d_2a_3x3", "Conv2d_2b_3x3", "maxpool1", "Conv2d_3b_1x1",
                     "Conv2d_4a_3x3", "maxpool2", "Mixed_5b", "Mixed_5c", "Mixed_5d", "Mixed_6a",
                     "Mixed_6b", "Mixed_6c", "Mixed_6d", "Mixed_6e"):
            x = getattr(n, name)(x)
        mid = x
        for name in ("Mixed_7a", "Mixed_7b", "Mixed_7c"):
            x = getattr(n, name)(x)
        top = x.mean(dim=(2, 3))
        return FeatureBundle(self.local_proj(mid.flatten(2).transpose(1, 2)), self.global_proj(top))


def build_image_encoder(config: SGSMConfig) -> nn.Module:
    if config.encoder_kind == "small-cnn":
        return SmallCNNEncoder(config.encoder_width, config.common_dim)
    return InceptionEncoder(config.common_dim)


# ---------------------------------------------------------------------------
# module


class SGSM(nn.Module):
    def __init__(self, num_classes: int, config: SGSMConfig | None = None):
        super().__init__()
        self.config = config or SGSMConfig()
        self.num_classes = num_classes
        self.image_encoder = build_image_encoder(self.config)
        c = self.config
        self.graph_encoder = GraphEncoder(num_classes, c.gcn_embed_dim, c.gcn_hidden_dim, c.gcn_layers,
                                          c.common_dim, c.add_global_node)
        self.frozen = False

    def encode_image(self, images: torch.Tensor) -> FeatureBundle:
        """Encode ``(B, 3, H, W)`` images in [-1, 1], resized to ``input_resize``."""
        size = self.config.input_resize
        if size < self.image_encoder.min_size:
            raise ValueError(f"input_resize {size} is below the encoder minimum {self.image_encoder.min_size}")
        if images.shape[-1] != size or images.shape[-2] != size:
            images = F.interpolate(images, size=(size, size), mode="bilinear", align_corners=False)
        return self.image_encoder(images)

    def encode_graphs(self, graphs: Sequence[SceneGraph]):
        device = next(self.parameters()).device
        batch = GraphBatch.from_graphs(graphs, device=device)
        local, global_ = self.graph_encoder(batch)
        padded, mask = pad_nodes(local, batch.sizes)
        return padded, mask, global_

    def similarities(self, images: torch.Tensor, graphs: Sequence[SceneGraph]):
        feats = self.encode_image(images)
        g_local, g_mask, g_global = self.encode_graphs(graphs)
        return pairwise_similarities(feats.local, feats.global_, g_local, g_mask, g_global,
                                     self.config.gamma1, self.config.gamma2)

    def posteriors(self, images, graphs, level: str = "local"):
        sim_l, sim_g = self.similarities(images, graphs)
        sim = {"local": sim_l, "global": sim_g}[level]
        return matching_posteriors(sim, self.config.gamma3)

    def loss(self, images: torch.Tensor, graphs: Sequence[SceneGraph]):
        """``(L_SGSM, L_local, L_global)`` for matched (image, graph) pairs."""
        sim_l, sim_g = self.similarities(images, graphs)
        return sgsm_loss_from_similarities(sim_l, sim_g, self.config.gamma3, self.config.reduction)

    def freeze(self) -> "SGSM":
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        self.frozen = True
        return self

    def train(self, mode: bool = True):
        # frozen modules stay in eval mode
        return super().train(mode and not getattr(self, "frozen", False))


def sgsm_loss(sgsm: SGSM, images: torch.Tensor, graphs: Sequence[SceneGraph]) -> torch.Tensor:
    return sgsm.loss(images, graphs)[0]


# ---------------------------------------------------------------------------
# pretraining


@dataclass
class SGSMTrainConfig:
    epochs: int = 50
    batch_size: int = 16
    lr: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.999)
    seed: int = 0
    eval_batches: int = 16
    target_recall: float | None = None  # stop once held-out recall@1 reaches this


@dataclass
class SGSMTrainLog:
    rows: list[dict] = field(default_factory=list)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["epoch", "L_L", "L_G", "recall@1"])
            writer.writeheader()
            writer.writerows(self.rows)


def images_to_tensor(images: Sequence[np.ndarray]) -> torch.Tensor:
    """uint8 ``H x W x 3`` arrays to a float ``(B, 3, H, W)`` tensor in [-1, 1]."""
    arr = torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).float()
    return arr / 127.5 - 1.0


def evaluate_retrieval(sgsm: SGSM, images: torch.Tensor, graphs: Sequence[SceneGraph],
                       batch_size: int, max_batches: int | None = None) -> float:
    """Mean batch recall@1 (image to graph) over consecutive held-out batches."""
    scores = []
    was_training = sgsm.training
    sgsm.eval()
    with torch.no_grad():
        n_batches = len(graphs) // batch_size
        if max_batches is not None:
            n_batches = min(n_batches, max_batches)
        for k in range(n_batches):
            sl = slice(k * batch_size, (k + 1) * batch_size)
            sim_l, sim_g = sgsm.similarities(images[sl], graphs[sl])
            scores.append(recall_at_1(sim_l + sim_g))
    sgsm.train(was_training)
    return float(np.mean(scores)) if scores else float("nan")


def pretrain_sgsm(train_images: torch.Tensor, train_graphs: Sequence[SceneGraph], num_classes: int,
                  config: SGSMConfig | None = None, train_config: SGSMTrainConfig | None = None,
                  val_images: torch.Tensor | None = None,
                  val_graphs: Sequence[SceneGraph] | None = None) -> tuple[SGSM, SGSMTrainLog]:
    """Train encoder projections and GCN on matched pairs, then freeze everything.

    With a pretrained backbone only the projections and the GCN receive updates.
    """
    tc = train_config or SGSMTrainConfig()
    if tc.epochs <= 0:
        raise ValueError("epochs must be positive")
    if tc.batch_size < 2:
        raise ValueError("batch_size must be at least 2")
    torch.manual_seed(tc.seed)
    sgsm = SGSM(num_classes, config).to(train_images.dtype)
    backbone = set(map(id, sgsm.image_encoder.backbone_parameters())) if sgsm.config.encoder_kind != "small-cnn" else set()
    params = [p for p in sgsm.parameters() if p.requires_grad and id(p) not in backbone]
    opt = torch.optim.Adam(params, lr=tc.lr, betas=tc.betas)
    gen = torch.Generator().manual_seed(tc.seed)
    n = len(train_graphs)
    history = SGSMTrainLog()
    for epoch in range(1, tc.epochs + 1):
        sgsm.train()
        order = torch.randperm(n, generator=gen).tolist()
        sums = np.zeros(2)
        steps = 0
        for k in range(n // tc.batch_size):
            idx = order[k * tc.batch_size:(k + 1) * tc.batch_size]
            total, l_l, l_g = sgsm.loss(train_images[idx], [train_graphs[i] for i in idx])
            if not torch.isfinite(total):
                raise FloatingPointError(
                    f"non-finite SGSM loss at epoch {epoch}, step {k}: L_L={l_l.item()}, L_G={l_g.item()}")
            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()
            sums += (l_l.item(), l_g.item())
            steps += 1
        recall = float("nan")
        if val_images is not None and val_graphs is not None:
            recall = evaluate_retrieval(sgsm, val_images, val_graphs, tc.batch_size, tc.eval_batches)
        row = {"epoch": epoch, "L_L": sums[0] / max(steps, 1), "L_G": sums[1] / max(steps, 1), "recall@1": recall}
        history.rows.append(row)
        log.info("sgsm epoch %d  L_L=%.4f  L_G=%.4f  recall@1=%.3f", epoch, row["L_L"], row["L_G"], recall)
        if tc.target_recall is not None and recall >= tc.target_recall:
            break
    return sgsm.freeze(), history


def graphs_for(layouts, max_edges: int | None = None) -> list[SceneGraph]:
    return [build_scene_graph(l, max_edges) for l in layouts]


def save_sgsm(sgsm: SGSM, path: str | Path) -> None:
    torch.save({
        "format": "ocgan-sgsm",
        "version": CHECKPOINT_VERSION,
        "num_classes": sgsm.num_classes,
        "config": asdict(sgsm.config),
        "state_dict": sgsm.state_dict(),
        "frozen": sgsm.frozen,
    }, path)


def load_sgsm(path: str | Path) -> SGSM:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != "ocgan-sgsm":
        raise ValueError(f"{path} is not an SGSM checkpoint")
    if blob["version"] > CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version {blob['version']} is newer than supported {CHECKPOINT_VERSION}")
    sgsm = SGSM(blob["num_classes"], SGSMConfig(**blob["config"]))
    sgsm.load_state_dict(blob["state_dict"])
    if blob["frozen"]:
        sgsm.freeze()
    return sgsm
