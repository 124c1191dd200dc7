"""Hard-routed Mixture-of-Experts banks.

Two banks exist: a Modality MoE (one expert per MRI modality) and an Age
Stage MoE (one expert per lifespan stage). Routing is deterministic by
key; exactly one expert's parameters participate per call, so gradients
of every other expert are exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import LatentRepresentation
from .errors import ContractError
from .staging import STAGE_NAMES, Stage
from .volume_io import MODALITIES


@dataclass(frozen=True)
class ExpertBank:
    """A bank of identically shaped 2-layer gelu MLP experts, one per key."""

    name: str
    keys: tuple[str, ...]
    in_dim: int
    out_dim: int
    hidden: int

    def param_names(self, key: str) -> tuple[str, ...]:
        p = f"{self.name}.{key}"
        return (f"{p}.fc1.weight", f"{p}.fc1.bias", f"{p}.fc2.weight", f"{p}.fc2.bias")

    def init_params(self, rng) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for key in self.keys:
            w1, b1, w2, b2 = self.param_names(key)
            params[w1] = Tensor(rng.normal(0.0, 0.02, size=(self.in_dim, self.hidden)), requires_grad=True)
            params[b1] = Tensor(np.zeros(self.hidden), requires_grad=True)
            params[w2] = Tensor(rng.normal(0.0, 0.02, size=(self.hidden, self.out_dim)), requires_grad=True)
            params[b2] = Tensor(np.zeros(self.out_dim), requires_grad=True)
        return params


def modality_bank(embed_dim: int) -> ExpertBank:
    return ExpertBank("modality_moe", MODALITIES, embed_dim, embed_dim, 2 * embed_dim)


def stage_bank(embed_dim: int) -> ExpertBank:
    return ExpertBank("stage_moe", STAGE_NAMES, embed_dim, 1, 2 * embed_dim)


def route(bank: ExpertBank, params: dict, key: str, z: Tensor) -> Tensor:
    """Apply exactly the expert registered for `key` to z ([1, in_dim])."""
    if key not in bank.keys:
        raise ContractError(f"routing error: key {key!r} not in {bank.name} keys {bank.keys}")
    if z.shape != (1, bank.in_dim):
        raise ContractError(f"{bank.name} expects input shape (1, {bank.in_dim}), got {z.shape}")
    w1, b1, w2, b2 = (params[n] for n in bank.param_names(key))
    h = ad.gelu(ad.add_bias(ad.matmul(z, w1), b1))
    return ad.add_bias(ad.matmul(h, w2), b2)


def modality_moe_forward(bank: ExpertBank, params: dict, latent: LatentRepresentation, modality: str) -> Tensor:
    """Route the pooled latent through the modality's expert."""
    return route(bank, params, modality, latent.pooled)


def stage_moe_forward(bank: ExpertBank, params: dict, feat: Tensor, stage: Stage) -> Tensor:
    """Scalar within-stage normalized age in (0, 1) for the routed stage."""
    return ad.sigmoid(route(bank, params, stage.name, feat))
