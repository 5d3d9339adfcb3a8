"""Layers and optimizer built on the tensor engine.

Linear, layer norm, MLP, multi-head (self/cross) attention, sinusoidal
time embedding, AdamW with decoupled weight decay, and a finite
difference gradient checker.
"""

from __future__ import annotations

import numpy as np

from .tensor import NumericError, RngStream, ShapeError, Tensor, no_grad


class ConfigError(ValueError):
    """Raised on invalid layer / model configuration."""


class Parameter(Tensor):
    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name


class Module:
    """Base class: parameter discovery by attribute walk."""

    def named_parameters(self, prefix: str = ""):
        for attr, value in vars(self).items():
            path = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                value.name = path
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix=f"{path}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(prefix=f"{path}.{i}.")
                    elif isinstance(item, Parameter):
                        item.name = f"{path}.{i}"
                        yield f"{path}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    def __init__(self, c_in: int, c_out: int, rng: RngStream, bias: bool = True, scale: float = 1.0):
        bound = scale / np.sqrt(c_in)
        self.weight = Parameter(rng.uniform((c_in, c_out), -bound, bound))
        self.bias = Parameter(np.zeros(c_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        x = Tensor.as_tensor(x)
        if x.shape[-1] != self.weight.shape[0]:
            raise ShapeError(f"linear: input shape {x.shape} incompatible with weight {self.weight.shape}")
        y = x @ self.weight
        if self.bias is not None:
            y = y + self.bias
        return y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        self.gain = Parameter(np.ones(dim))
        self.shift = Parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        x = Tensor.as_tensor(x)
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        normed = centered / (var + self.eps) ** 0.5
        return normed * self.gain + self.shift


def silu(x: Tensor) -> Tensor:
    return x * x.sigmoid()


def sigmoid(x: Tensor) -> Tensor:
    x = Tensor.as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise NumericError("sigmoid: non-finite input")
    return x.sigmoid()


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = Tensor.as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax: non-finite input")
    # constant shift: softmax is shift-invariant so detaching the max is exact
    shifted = x - Tensor(x.data.max(axis=axis, keepdims=True))
    e = shifted.exp()
    return e / e.sum(axis=axis, keepdims=True)


class MLP(Module):
    def __init__(self, dims: list[int], rng: RngStream, activation=silu):
        self.layers = [Linear(dims[i], dims[i + 1], rng.child(1000 + i)) for i in range(len(dims) - 1)]
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = self.activation(x)
        return x


class MultiHeadAttention(Module):
    """Scaled dot-product attention over 2-D token matrices.

    Self-attention is the kv_tokens is None / identical case; a distinct
    kv_dim turns it into cross-attention with the query dimension kept
    as the model dimension.
    """

    def __init__(self, dim: int, heads: int, rng: RngStream, kv_dim: int | None = None):
        if dim % heads != 0:
            raise ConfigError(f"attention dim {dim} not divisible by {heads} heads")
        kv_dim = dim if kv_dim is None else kv_dim
        self.heads = heads
        self.d_head = dim // heads
        self.w_q = Linear(dim, dim, rng.child(1))
        self.w_k = Linear(kv_dim, dim, rng.child(2))
        self.w_v = Linear(kv_dim, dim, rng.child(3))
        self.w_o = Linear(dim, dim, rng.child(4))

    def __call__(self, q_tokens: Tensor, kv_tokens: Tensor | None = None) -> Tensor:
        if kv_tokens is None:
            kv_tokens = q_tokens
        q = self.w_q(q_tokens)
        k = self.w_k(kv_tokens)
        v = self.w_v(kv_tokens)
        outs = []
        inv_scale = 1.0 / np.sqrt(self.d_head)
        for h in range(self.heads):
            sl = slice(h * self.d_head, (h + 1) * self.d_head)
            qh, kh, vh = q[:, sl], k[:, sl], v[:, sl]
            attn = softmax((qh @ kh.T) * inv_scale, axis=-1)
            outs.append(attn @ vh)
        return self.w_o(Tensor.concat(outs, axis=1))

    def zero_(self):
        """Zero all projections (attention contributes nothing); test hook."""
        for p in self.parameters():
            p.data[...] = 0.0


def time_embedding(tau: float, dim: int) -> np.ndarray:
    """Sinusoidal embedding of a flow time in [0,1]; deterministic."""
    if dim % 2 != 0:
        raise ConfigError(f"time embedding dim must be even, got {dim}")
    half = dim // 2
    freqs = 500.0 ** (np.arange(half) / max(half - 1, 1))
    angles = tau * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)])


def time_embedding_batch(taus: np.ndarray, dim: int) -> np.ndarray:
    if dim % 2 != 0:
        raise ConfigError(f"time embedding dim must be even, got {dim}")
    half = dim // 2
    freqs = 500.0 ** (np.arange(half) / max(half - 1, 1))
    angles = np.asarray(taus, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


class AdamW:
    """Adam with decoupled (multiplicative, pre-update) weight decay."""

    def __init__(self, params: list[Parameter], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter '{p.name or i}'")
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            self._m[i] = self.beta1 * self._m[i] + (1 - self.beta1) * g
            self._v[i] = self.beta2 * self._v[i] + (1 - self.beta2) * g * g
            m_hat = self._m[i] / (1 - self.beta1**self.t)
            v_hat = self._v[i] / (1 - self.beta2**self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def grad_check(params: list[Parameter], loss_fn, h: float = 1e-5) -> dict:
    """Compare reverse-mode gradients against central finite differences.

    loss_fn takes no arguments and returns a scalar Tensor built from the
    given parameters. Returns a report; never raises on mismatch.
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    worst_name = ""
    per_param = {}
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        num = np.zeros_like(flat)
        for j in range(flat.size):
            orig = flat[j]
            with no_grad():
                flat[j] = orig + h
                f_plus = loss_fn().item()
                flat[j] = orig - h
                f_minus = loss_fn().item()
            flat[j] = orig
            num[j] = (f_plus - f_minus) / (2 * h)
        a_flat = a.reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a_flat), np.abs(num)), 1.0)
        rel = np.abs(a_flat - num) / denom
        err = float(rel.max()) if rel.size else 0.0
        per_param[p.name] = err
        if err > worst:
            worst, worst_name = err, p.name
    return {"max_rel_error": worst, "worst_param": worst_name, "per_param": per_param}
