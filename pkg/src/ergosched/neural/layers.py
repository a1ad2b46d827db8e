"""Network building blocks: affine/noisy layers, attention, encoders."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

FROZEN_ZERO = "frozen-zero"
SAMPLED = "sampled"


def positional_encoding(pos: int, i: int, d_model: int) -> float:
    """Sinusoidal code: sin for even dimensions, cos for odd ones."""
    if not 0 <= i < d_model:
        raise ValueError(f"dimension index {i} outside [0, {d_model})")
    angle = pos / 10000 ** (2 * (i // 2) / d_model)
    return math.sin(angle) if i % 2 == 0 else math.cos(angle)


def positional_encoding_table(n_positions: int, d_model: int) -> np.ndarray:
    pos = np.arange(n_positions)[:, None]
    dim = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, 2 * (dim // 2) / d_model)
    table = np.where(dim % 2 == 0, np.sin(angle), np.cos(angle))
    return table


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention over the last two axes."""
    d_k = q.shape[-1]
    scores = ad.scale(q @ ad.transpose(k, _swap_last(k)), 1.0 / math.sqrt(d_k))
    return ad.softmax(scores) @ v


def _swap_last(t: Tensor):
    axes = list(range(len(t.shape)))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


class Module:
    def parameters(self) -> dict:
        out = {}
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out[name] = value
            elif isinstance(value, Module):
                for sub, p in value.parameters().items():
                    out[f"{name}.{sub}"] = p
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        for sub, p in item.parameters().items():
                            out[f"{name}.{i}.{sub}"] = p
        return out


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        bound = 1.0 / math.sqrt(n_in)
        self.weight = ad.parameter(rng.uniform(-bound, bound, size=(n_in, n_out)))
        self.bias = ad.parameter(rng.uniform(-bound, bound, size=(n_out,)))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class NoisyLinear(Module):
    """Affine layer with learned factorized-Gaussian parameter noise.

    In ``frozen-zero`` mode it reduces exactly to the deterministic affine
    transform given by the mu parameters. ``resample`` draws one noise
    realization used by subsequent sampled-mode calls.
    """

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, sigma0: float = 0.1):
        bound = 1.0 / math.sqrt(n_in)
        self.mu_w = ad.parameter(rng.uniform(-bound, bound, size=(n_in, n_out)))
        self.mu_b = ad.parameter(rng.uniform(-bound, bound, size=(n_out,)))
        self.sigma_w = ad.parameter(np.full((n_in, n_out), sigma0 / math.sqrt(n_in)))
        self.sigma_b = ad.parameter(np.full((n_out,), sigma0 / math.sqrt(n_in)))
        self._eps_w = np.zeros((n_in, n_out))
        self._eps_b = np.zeros(n_out)

    @staticmethod
    def _scaled_noise(rng, size):
        x = rng.normal(size=size)
        return np.sign(x) * np.sqrt(np.abs(x))

    def resample(self, rng: np.random.Generator) -> None:
        eps_in = self._scaled_noise(rng, self.mu_w.shape[0])
        eps_out = self._scaled_noise(rng, self.mu_w.shape[1])
        self._eps_w = np.outer(eps_in, eps_out)
        self._eps_b = eps_out

    def __call__(self, x: Tensor, noise_mode: str = FROZEN_ZERO) -> Tensor:
        if noise_mode == FROZEN_ZERO:
            return x @ self.mu_w + self.mu_b
        weight = self.mu_w + ad.mul(self.sigma_w, Tensor(self._eps_w))
        bias = self.mu_b + ad.mul(self.sigma_b, Tensor(self._eps_b))
        return x @ weight + bias


class Embedding(Module):
    def __init__(self, vocab: int, d_model: int, rng: np.random.Generator):
        self.table = ad.parameter(rng.normal(0.0, 0.02, size=(vocab, d_model)))

    def __call__(self, idx) -> Tensor:
        return ad.gather_rows(self.table, idx)


class LayerNorm(Module):
    def __init__(self, d_model: int):
        self.gain = ad.parameter(np.ones(d_model))
        self.bias = ad.parameter(np.zeros(d_model))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias)


class MultiHeadAttention(Module):
    """Self- or cross-attention with head splitting on the channel axis."""

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator):
        if d_model % heads != 0:
            raise ValueError("d_model must be divisible by the head count")
        self.heads = heads
        self.d_model = d_model
        self.proj_q = Linear(d_model, d_model, rng)
        self.proj_k = Linear(d_model, d_model, rng)
        self.proj_v = Linear(d_model, d_model, rng)
        self.proj_out = Linear(d_model, d_model, rng)

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        x = ad.reshape(x, (b, n, self.heads, self.d_model // self.heads))
        return ad.transpose(x, (0, 2, 1, 3))

    def _merge(self, x: Tensor) -> Tensor:
        b, h, n, dh = x.shape
        return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))

    def __call__(self, query: Tensor, keys: Tensor, values: Tensor) -> Tensor:
        q = self._split(self.proj_q(query))
        k = self._split(self.proj_k(keys))
        v = self._split(self.proj_v(values))
        return self.proj_out(self._merge(attention(q, k, v)))


class TransformerBlock(Module):
    """Pre-norm self-attention block with a two-layer feed-forward tail."""

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator, ff_mult: int = 2):
        self.attn = MultiHeadAttention(d_model, heads, rng)
        self.norm1 = LayerNorm(d_model)
        self.norm2 = LayerNorm(d_model)
        self.ff1 = Linear(d_model, ff_mult * d_model, rng)
        self.ff2 = Linear(ff_mult * d_model, d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, h)
        return x + self.ff2(ad.relu(self.ff1(self.norm2(x))))
