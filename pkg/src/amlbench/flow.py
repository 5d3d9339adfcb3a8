"""Flow-matching action heads.

The direct clean-action head predicts the denoised chunk itself and is
trained with the velocity-consistent loss, which is the same thing as a
1/(1-tau)^2 reweighted action regression. Velocity and noise heads are
kept as baselines, all three unified behind one sampler via algebraic
conversion on the straight interpolation path
    x_tau = tau * clean + (1 - tau) * noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import NumericError, RngStream, Tensor, no_grad
from . import nn

# tau is clipped to [0, 1 - DELTA]: the loss weight diverges at tau -> 1
# and the velocity formula divides by (1 - tau).
DELTA = 1e-3

ACTION = "action"
VELOCITY = "velocity"
EPSILON = "epsilon"
KINDS = (ACTION, VELOCITY, EPSILON)


class DomainError(ValueError):
    pass


@dataclass
class FlowSample:
    noisy: np.ndarray  # (H, D) or (B, H*D)
    tau: float | np.ndarray
    noise: np.ndarray | None = None


def interpolate(clean: np.ndarray, noise: np.ndarray, tau: float) -> FlowSample:
    clean = np.asarray(clean, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if clean.shape != noise.shape:
        raise DomainError(f"interpolate: clean {clean.shape} vs noise {noise.shape}")
    if not (0.0 <= tau <= 1.0 - DELTA):
        raise DomainError(f"interpolate: tau={tau} outside [0, {1.0 - DELTA}]")
    return FlowSample(noisy=tau * clean + (1.0 - tau) * noise, tau=float(tau), noise=noise)


def derive_velocity(pred_clean: np.ndarray, sample: FlowSample) -> np.ndarray:
    if sample.tau > 1.0 - DELTA:
        raise DomainError(f"derive_velocity: tau={sample.tau} too close to 1")
    return (np.asarray(pred_clean) - sample.noisy) / (1.0 - sample.tau)


def loss_weight(tau: float) -> float:
    if tau > 1.0 - DELTA:
        raise DomainError(f"loss_weight: tau={tau} exceeds {1.0 - DELTA}")
    return 1.0 / (1.0 - tau) ** 2


def convert_prediction(kind: str, net_output: np.ndarray, sample: FlowSample) -> np.ndarray:
    """Map a head's raw output to an estimate of the clean chunk."""
    out = np.asarray(net_output, dtype=np.float64)
    if kind == ACTION:
        return out
    if kind == VELOCITY:
        return sample.noisy + (1.0 - sample.tau) * out
    if kind == EPSILON:
        # clean = (noisy - (1-tau)*eps_hat) / tau; near tau=0 the clean
        # chunk is unidentifiable from a noise estimate, so clamp the
        # divisor instead of dividing by ~0.
        t_eff = max(float(sample.tau), DELTA)
        return (sample.noisy - (1.0 - sample.tau) * out) / t_eff
    raise DomainError(f"unknown prediction kind: {kind!r}")


def mixture_posterior_oracle(x_tau: float, tau: float, atoms, weights=None) -> float:
    """E[clean | noisy state] for a discrete 1-D atom mixture prior.

    With clean drawn from the atoms and x_tau = tau*clean + (1-tau)*eps,
    eps ~ N(0,1), the posterior over atoms is a softmax with logits
    log w_i - (x_tau - tau*a_i)^2 / (2 (1-tau)^2).
    """
    atoms = np.asarray(atoms, dtype=np.float64)
    if atoms.size == 0:
        raise DomainError("mixture_posterior_oracle: empty atom list")
    if not (0.0 <= tau <= 1.0 - DELTA):
        raise DomainError(f"mixture_posterior_oracle: tau={tau} out of range")
    if weights is None:
        weights = np.full(atoms.size, 1.0 / atoms.size)
    weights = np.asarray(weights, dtype=np.float64)
    logits = np.log(weights) - (x_tau - tau * atoms) ** 2 / (2.0 * (1.0 - tau) ** 2)
    logits -= logits.max()
    post = np.exp(logits)
    post /= post.sum()
    return float(np.dot(post, atoms))


@dataclass
class TrainBatch:
    contexts: np.ndarray | Tensor  # (B, Cc)
    states: np.ndarray  # (B, Dq)
    actions: np.ndarray  # (B, H, D), already normalized

    @property
    def batch_size(self) -> int:
        return np.asarray(self.actions.data if isinstance(self.actions, Tensor) else self.actions).shape[0]


class PolicyNetwork(nn.Module):
    """Residual MLP trunk over [noisy chunk; state; context], with the
    flow time injected by per-block scale/shift from its sinusoidal
    embedding. The output head is always H x D regardless of the
    prediction kind."""

    def __init__(self, h: int, d: int, ctx_dim: int, q_dim: int, kind: str = ACTION,
                 width: int = 128, blocks: int = 4, time_dim: int = 32, rng: RngStream | None = None):
        if kind not in KINDS:
            raise DomainError(f"unknown prediction kind: {kind!r}")
        rng = rng or RngStream(0)
        self.h = h
        self.d = d
        self.ctx_dim = ctx_dim
        self.q_dim = q_dim
        self.kind = kind
        self.width = width
        self.time_dim = time_dim
        cond_dim = time_dim
        self.in_proj = nn.Linear(h * d + q_dim + ctx_dim, width, rng.child(1))
        self.film = [nn.Linear(cond_dim, 2 * width, rng.child(10 + i)) for i in range(blocks)]
        self.norms = [nn.LayerNorm(width) for _ in range(blocks)]
        self.fc1 = [nn.Linear(width, 2 * width, rng.child(40 + i)) for i in range(blocks)]
        self.fc2 = [nn.Linear(2 * width, width, rng.child(70 + i), scale=0.1) for i in range(blocks)]
        self.out_norm = nn.LayerNorm(width)
        self.out_proj = nn.Linear(width, h * d, rng.child(99), scale=0.1)

    def forward(self, noisy_flat, taus: np.ndarray, states: np.ndarray, contexts) -> Tensor:
        """noisy_flat: (B, H*D); taus: (B,); returns (B, H*D) raw head output."""
        temb = nn.time_embedding_batch(taus, self.time_dim)
        cond = Tensor(temb)
        trunk_in = Tensor.concat(
            [Tensor.as_tensor(noisy_flat), Tensor.as_tensor(states), Tensor.as_tensor(contexts)], axis=1
        )
        x = self.in_proj(trunk_in)
        for film, norm, fc1, fc2 in zip(self.film, self.norms, self.fc1, self.fc2):
            mod = film(cond)
            scale = mod[:, : self.width]
            shift = mod[:, self.width :]
            hid = norm(x) * (scale + 1.0) + shift
            x = x + fc2(nn.silu(fc1(hid)))
        return self.out_proj(self.out_norm(x))

    def predict_clean(self, noisy: np.ndarray, tau: float, ctx: np.ndarray, q: np.ndarray) -> np.ndarray:
        with no_grad():
            out = self.forward(noisy.reshape(1, -1), np.array([tau]), q.reshape(1, -1), ctx.reshape(1, -1))
        sample = FlowSample(noisy=noisy, tau=tau)
        return convert_prediction(self.kind, out.data.reshape(self.h, self.d), sample)


# Training-time tau is drawn uniform on [0, TAU_MAX]. Letting tau run to
# 1-DELTA makes the action-head weight reach 1e6 and the refinement tail
# starve the conditional structure at low tau; 0.9 caps the weight at 100.
TAU_MAX = 0.9


def training_loss(net: PolicyNetwork, batch: TrainBatch, rng: RngStream,
                  tau_max: float = TAU_MAX) -> Tensor:
    """Samples tau ~ U[0, tau_max] and noise per element, builds the noisy
    inputs, and returns the scalar loss for the net's head kind."""
    actions = np.asarray(batch.actions, dtype=np.float64)
    b = actions.shape[0]
    flat_clean = actions.reshape(b, -1)
    if not (0.0 < tau_max <= 1.0 - DELTA):
        raise DomainError(f"tau_max={tau_max} outside (0, {1.0 - DELTA}]")
    taus = rng.uniform(b, 0.0, tau_max)
    noise = rng.normal(flat_clean.shape)
    noisy = taus[:, None] * flat_clean + (1.0 - taus[:, None]) * noise
    out = net.forward(noisy, taus, batch.states, batch.contexts)

    if net.kind == ACTION:
        err = out - Tensor(flat_clean)
        per_row = (err * err).mean(axis=1)
        weights = 1.0 / (1.0 - taus) ** 2
        loss = (per_row * Tensor(weights)).mean()
    elif net.kind == VELOCITY:
        err = out - Tensor(flat_clean - noise)
        loss = (err * err).mean()
    elif net.kind == EPSILON:
        err = out - Tensor(noise)
        loss = (err * err).mean()
    else:
        raise DomainError(f"unknown prediction kind: {net.kind!r}")

    if not np.isfinite(loss.data):
        raise NumericError(f"non-finite training loss; taus={np.array2string(taus, precision=4)}")
    return loss


def sample_actions(predictor, ctx: np.ndarray, q: np.ndarray, steps: int, rng: RngStream,
                   h: int | None = None, d: int | None = None) -> np.ndarray:
    """Euler integration of the learned flow from pure noise to tau=1.

    predictor needs a predict_clean(noisy, tau, ctx, q) -> (H, D) method;
    the last velocity is evaluated at tau = 1 - 1/steps, so the division
    guard is never hit.
    """
    if steps < 1:
        raise DomainError(f"sample_actions: steps={steps} < 1")
    h = predictor.h if h is None else h
    d = predictor.d if d is None else d
    state = rng.normal((h, d))
    dt = 1.0 / steps
    for k in range(steps):
        tau = k * dt
        pred_clean = predictor.predict_clean(state, tau, ctx, q)
        vel = (pred_clean - state) / (1.0 - tau)
        state = state + dt * vel
    return state
