"""Full detector: shared backbone+neck, optional one-to-many head, efficient encoder and decoder.

Submodule names are the checkpoint naming scheme: ``backbone.*``, ``neck.*``,
``o2m_head.*``, ``proj.*``, ``selector.*``, ``decoder.*``, ``query_embed.*``.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .decoder import CDNConfig, CDNQueries, Decoder, DecoderOutput, build_attn_mask, build_cdn
from .encoder import Projection, ProposalSet, QuerySelector, TokenMemory, inverse_sigmoid
from .gradflow import stop_gradient
from .nets import FeaturePyramid, ModelScale, build_backbone_neck, get_scale
from .o2m import DenseHeadOutput, O2MHead

PREFIXES = ("backbone", "neck", "o2m_head", "proj", "selector", "decoder", "query_embed")


@dataclass
class ModelOutput:
    pyramid: FeaturePyramid
    o2m: DenseHeadOutput | None = None
    memory: TokenMemory | None = None
    proposals: ProposalSet | None = None
    decoder: DecoderOutput | None = None
    cdn: CDNQueries | None = None
    padded: torch.Tensor | None = None  # (B, K) bool, queries removed before the decoder


class DEYO(nn.Module):
    """``with_o2m`` builds the dense head, ``with_o2o`` the encoder + decoder."""

    def __init__(self, scale: ModelScale | str = "N", num_classes: int = 3, with_o2m: bool = True,
                 with_o2o: bool = True):
        super().__init__()
        if not (with_o2m or with_o2o):
            raise ValueError("a detector needs at least one branch")
        if num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        self.scale = get_scale(scale)
        self.num_classes = num_classes
        self.with_o2m = with_o2m
        self.with_o2o = with_o2o
        s = self.scale
        self.backbone, self.neck = build_backbone_neck(s)
        if with_o2m:
            self.o2m_head = O2MHead(s.neck_dims, num_classes, s.head_dim)
        if with_o2o:
            self.proj = Projection(s.neck_dims, s.hidden_dim)
            self.selector = QuerySelector(s.hidden_dim, num_classes, s.num_queries)
            self.decoder = Decoder(s.hidden_dim, s.num_heads, s.ffn_dim, s.decoder_layers, num_classes)
            self.query_embed = nn.Embedding(s.num_queries, s.hidden_dim)

    def pyramid(self, images: torch.Tensor) -> FeaturePyramid:
        return self.neck(*self.backbone(images))

    def forward(
        self,
        images: torch.Tensor,
        gts=None,
        cdn_cfg: CDNConfig | None = None,
        gen: torch.Generator | None = None,
        self_attn: bool = True,
        pad_threshold: float | None = None,
    ) -> ModelOutput:
        """``gts`` plus ``cdn_cfg`` add denoising queries (training only).

        ``pad_threshold`` marks selected queries whose selection score falls
        below it as padding and removes them from the decoder: they are
        hidden from every other query and emit no predictions.
        """
        fp = self.pyramid(images)
        out = ModelOutput(fp)
        if self.with_o2m:
            out.o2m = self.o2m_head(fp)
        if not self.with_o2o:
            return out
        mem = self.proj(fp)
        prop = self.selector(mem)
        B = images.shape[0]
        K = prop.selected.shape[1]
        content = self.query_embed.weight.unsqueeze(0).expand(B, -1, -1)
        anchors = stop_gradient(prop.selected_box_logits)
        cdn = None
        if gts is not None and cdn_cfg is not None:
            cdn = build_cdn(gts, self.num_classes, cdn_cfg, gen)
            if cdn.num == 0:
                cdn = None
        if cdn is not None:
            content = torch.cat([self.decoder.label_embed(cdn.labels.to(images.device)), content], 1)
            anchors = torch.cat([inverse_sigmoid(cdn.boxes.to(anchors)), anchors], 1)
        n_cdn = 0 if cdn is None else cdn.num
        mask = build_attn_mask(cdn, B, K).to(images.device)
        pad_any = False
        if pad_threshold is not None:
            out.padded = prop.selected_scores.detach() < pad_threshold
            pad_any = bool(out.padded.any())
        if pad_any:
            block = torch.zeros(B, n_cdn + K, dtype=torch.bool, device=images.device)
            block[:, n_cdn:] = out.padded
            mask = mask | block[:, None, :]
            mask &= ~torch.eye(n_cdn + K, dtype=torch.bool, device=images.device)
        use_mask = mask if (n_cdn or pad_any) else None
        out.memory, out.proposals, out.cdn = mem, prop, cdn
        out.decoder = self.decoder(mem, content, anchors, use_mask, self_attn=self_attn, num_cdn=n_cdn)
        return out

    def parameter_groups(self) -> dict[str, list[str]]:
        """Parameter names per top-level prefix."""
        groups: dict[str, list[str]] = {}
        for name, _ in self.named_parameters():
            groups.setdefault(name.split(".", 1)[0], []).append(name)
        return groups


def target_list(gts, device=None):
    """``GroundTruth`` objects -> list of (labels long, boxes float32) tensors."""
    out = []
    for g in gts:
        labels = torch.as_tensor(g.class_ids, dtype=torch.long, device=device)
        boxes = torch.as_tensor(g.boxes, dtype=torch.float32, device=device).reshape(-1, 4)
        out.append((labels, boxes))
    return out
