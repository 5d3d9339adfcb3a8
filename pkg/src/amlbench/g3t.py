"""Gated multi-view fusion transformer.

Pipeline: project monocular + two synthesized-view token sets into a
shared width, one residual self-attention pass over the joint sequence
(alignment), a per-token sigmoid gate choosing between the two views,
convex fusion, and a final residual self-attention pass (refinement)
over [mono'; fused]. Ablation strategies (plain concat, cross-attention
both ways, ungated self-attention) share the same projectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .tensor import RngStream, Tensor

G3T = "g3t"
CONCAT = "concat"
CROSS_ATTN = "cross_attn"
INVERSE_CROSS_ATTN = "inverse_cross_attn"
SELF_ATTN = "self_attn"
STRATEGIES = (G3T, CONCAT, CROSS_ATTN, INVERSE_CROSS_ATTN, SELF_ATTN)


class InvariantError(ValueError):
    pass


@dataclass
class GateMap:
    gates: np.ndarray  # (M, 1), strictly inside (0,1)


class ResidualMHSA(nn.Module):
    """Pre-norm residual attention block: x + MHSA(LN(x))."""

    def __init__(self, dim: int, heads: int, rng: RngStream):
        self.norm = nn.LayerNorm(dim)
        self.attn = nn.MultiHeadAttention(dim, heads, rng)

    def __call__(self, x: Tensor, kv: Tensor | None = None) -> Tensor:
        if kv is None:
            return x + self.attn(self.norm(x))
        return x + self.attn(self.norm(x), kv)


class G3TStack(nn.Module):
    def __init__(self, c_v: int, c_z: int, c: int, heads: int, n_mono: int, m_view: int,
                 rng: RngStream, pos_emb: bool = True):
        self.c = c
        self.n_mono = n_mono
        self.m_view = m_view
        self.proj_mono = nn.Linear(c_v, c, rng.child(1))
        self.proj_view = nn.Linear(c_z, c, rng.child(2))  # shared across left/right
        self.pos = nn.Parameter(0.02 * rng.child(3).normal((n_mono + 2 * m_view, c))) if pos_emb else None
        self.align = ResidualMHSA(c, heads, rng.child(4))
        # tanh hidden units: zero-centered features keep the responses of
        # clean and corrupted tokens decorrelated, so suppression learned on
        # corrupted tokens does not bleed into every other token the way it
        # does with one-signed activations
        self.gate_mlp = nn.MLP([2 * c, 2 * c, 1], rng.child(5), activation=Tensor.tanh)
        # zero logits at init: the gate opens at exactly 0.5 and cannot start
        # saturated, which would stall its gradient
        self.gate_mlp.layers[-1].weight.data[...] = 0.0
        self.gate_mlp.layers[-1].bias.data[...] = 0.0
        self.refine = ResidualMHSA(c, heads, rng.child(6))

    # -- pipeline stages -------------------------------------------------

    def project_and_concat(self, mono, left, right) -> Tensor:
        parts = [
            self.proj_mono(Tensor.as_tensor(mono)),
            self.proj_view(Tensor.as_tensor(left)),
            self.proj_view(Tensor.as_tensor(right)),
        ]
        joint = Tensor.concat(parts, axis=0)
        if self.pos is not None:
            joint = joint + self.pos
        return joint

    def cross_view_align(self, joint: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        n, m = self.n_mono, self.m_view
        aligned = self.align(joint)
        return aligned[:n, :], aligned[n : n + m, :], aligned[n + m :, :]

    def compute_gate(self, left_a: Tensor, right_a: Tensor) -> Tensor:
        logits = self.gate_mlp(Tensor.concat([left_a, right_a], axis=1))
        return nn.sigmoid(logits)

    @staticmethod
    def gated_fuse(left_a: Tensor, right_a: Tensor, gate: Tensor) -> Tensor:
        g = gate.data if isinstance(gate, Tensor) else np.asarray(gate)
        if np.any(g <= 0.0) or np.any(g >= 1.0):
            raise InvariantError("gate values must lie strictly inside (0,1)")
        gate = Tensor.as_tensor(gate)
        return gate * left_a + (1.0 - gate) * right_a

    def consistency_refine(self, mono_a: Tensor, fused: Tensor) -> Tensor:
        return self.refine(Tensor.concat([mono_a, fused], axis=0))

    # -- strategies ------------------------------------------------------

    def forward_g3t(self, mono, left, right, return_gate: bool = False):
        joint = self.project_and_concat(mono, left, right)
        mono_a, left_a, right_a = self.cross_view_align(joint)
        gate = self.compute_gate(left_a, right_a)
        fused = self.gated_fuse(left_a, right_a, gate)
        geo = self.consistency_refine(mono_a, fused)
        if return_gate:
            return geo, gate
        return geo

    def forward(self, strategy: str, mono, left, right) -> Tensor:
        if strategy == G3T:
            return self.forward_g3t(mono, left, right)
        joint = self.project_and_concat(mono, left, right)
        n, m = self.n_mono, self.m_view
        mono_p, views_p = joint[:n, :], joint[n:, :]
        if strategy == CONCAT:
            return joint
        if strategy == CROSS_ATTN:
            return self.align(mono_p, views_p)
        if strategy == INVERSE_CROSS_ATTN:
            return self.align(views_p, mono_p)
        if strategy == SELF_ATTN:
            return self.align(joint)
        raise nn.ConfigError(f"unknown fusion strategy: {strategy!r}")


class SemanticGeometricFusion(nn.Module):
    """Residual cross-attention: semantic tokens query the geometric ones."""

    def __init__(self, c_sem: int, c_geo: int, heads: int, rng: RngStream):
        self.norm = nn.LayerNorm(c_sem)
        self.attn = nn.MultiHeadAttention(c_sem, heads, rng, kv_dim=c_geo)

    def __call__(self, sem, geo) -> Tensor:
        sem = Tensor.as_tensor(sem)
        return sem + self.attn(self.norm(sem), Tensor.as_tensor(geo))
