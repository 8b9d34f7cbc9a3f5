"""The assembled MoQ -> FTRE -> fusion network and its per-step losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional

import torch
from torch import nn

from . import dcq, ftre, moq
from .config import RunConfig
from .data import MODALITIES, ModalityBatch
from .fusion import FusionEncoder, LossReport, LossWeights, UnimodalDecoder, total_loss
from .numcore import Tensor, init_uniform_fan_in, make_generator


@dataclass
class ModelOutput:
    y_hat: Tensor
    y_uni: Dict[str, Tensor]
    z: Tensor
    feats: Dict[str, ftre.FactorizedFeatures]
    labels: Optional[ftre.LabelEmbeddings]
    decisions: Dict[str, Optional[moq.RoutingDecision]]


class FineModel(nn.Module):
    def __init__(self, cfg: RunConfig, data_dims: Dict[str, int], label_range=(-3.0, 3.0)):
        super().__init__()
        self.modalities = MODALITIES
        self.label_range = tuple(label_range)
        self.zeroed = set(cfg.zeroed())
        moq_dims = cfg.moq_dims()
        d = cfg.task_dim()
        self.moq = nn.ModuleDict({
            m: moq.build_moq(data_dims[m], moq_dims[m], cfg["moq.num_experts"], cfg["moq.top_k_ratio"],
                             cfg["moq.num_query_tokens"], cfg["moq.heads"], enabled=not cfg["disable_moq"])
            for m in MODALITIES
        })
        self.ftre_enabled = not cfg["disable_ftre"]
        if self.ftre_enabled:
            self.ftre = ftre.FTRE(MODALITIES, moq_dims, d, cfg["ftre.reduction_ratio"], self.label_range)
        else:
            self.ftre = ftre.PassThroughEncoder(MODALITIES, moq_dims, d)
        self.fusion = FusionEncoder(MODALITIES, d, cfg["fusion.layers"], cfg["fusion.heads"])
        self.decoders = nn.ModuleDict({m: UnimodalDecoder(d, cfg["fusion.decoder_queries"]) for m in MODALITIES})

    def forward(self, batch: ModalityBatch) -> ModelOutput:
        x_hats, decisions = {}, {}
        for m in self.modalities:
            x = batch.features[m]
            if m in self.zeroed:
                x = torch.zeros_like(x)
            x_hats[m], decisions[m] = self.moq[m](x, batch.lengths[m])
        feats = self.ftre(x_hats)
        labels = self.ftre.label_encode(batch.labels) if self.ftre_enabled else None
        y_hat, z = self.fusion({m: (feats[m].x_str, feats[m].x_utr) for m in self.modalities})
        y_uni = {m: self.decoders[m](feats[m].x_str, feats[m].x_utr) for m in self.modalities}
        return ModelOutput(y_hat, y_uni, z, feats, labels, decisions)


def build(cfg: RunConfig, data_dims: Dict[str, int], label_range=(-3.0, 3.0), dtype=torch.float32):
    """Model and critic bank, initialised from one generator seeded by ``cfg['seed']``."""
    gen = make_generator(cfg["seed"])
    model = FineModel(cfg, data_dims, label_range)
    critics = ftre.CriticBank(MODALITIES, cfg.task_dim(), cfg["ftre.critic_dim"], cfg["ftre.critic_temperature"])
    init_uniform_fan_in(model, gen)
    init_uniform_fan_in(critics, gen)
    return model.to(dtype), critics.to(dtype), gen


def accon_config(cfg: RunConfig, label_range) -> dcq.AcconConfig:
    return dcq.AcconConfig(
        tau=cfg["dcq.tau"], epsilon=cfg["dcq.epsilon"], y_min=label_range[0], y_max=label_range[1],
        alpha=cfg["dcq.alpha"], s_min=cfg["dcq.s_min"], bins=cfg["dcq.bins"],
    )


def loss_weights(cfg: RunConfig) -> LossWeights:
    return LossWeights(
        lambda_up=cfg["loss.lambda_up"],
        lambda_cl=0.0 if cfg["disable_dcq"] else cfg["loss.lambda_cl"],
        lambda_aux=cfg["loss.lambda_aux"],
        beta_mi=cfg["loss.beta_mi"],
    )


def compute_losses(model: FineModel, critics: ftre.CriticBank, out: ModelOutput, batch: ModalityBatch,
                   queue: Optional[dcq.QueueState], acc_cfg: dcq.AcconConfig, weights: LossWeights,
                   stats: Optional[dict] = None) -> LossReport:
    zero = out.y_hat.new_zeros(())
    if queue is not None and weights.lambda_cl > 0:
        l_cl = dcq.accon_loss(out.z, batch.labels, queue, acc_cfg, stats)
    else:
        l_cl = zero
    aux = [moq.aux_loss(d) for d in out.decisions.values() if d is not None]
    l_aux = sum(aux) / len(aux) if aux else zero
    if model.ftre_enabled and batch.size >= 2:
        mi = ftre.mi_loss(out.feats, out.labels, critics)
        l_mi = mi.l_mi
    else:
        mi, l_mi = None, zero
    return total_loss(out.y_hat, list(out.y_uni.values()), batch.labels, l_cl, l_aux, l_mi, weights, mi)
