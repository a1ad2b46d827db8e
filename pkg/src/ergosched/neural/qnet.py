"""Action-value network over tokenized production state.

Tokens are encoded by kind-specific linear maps over their continuous
features plus shared embeddings for kind, task, subtask, and status ids,
with sinusoidal positional codes added. A self-attention stack processes
the sequence; the safe-action mask, projected to one query row, cross-
attends into it; value and advantage streams produce the Q-vector.

Variants: ``full`` (everything), ``mlp`` (mean-pooled tokens through a
feed-forward net), ``self-attn-only`` (no cross-attention, mean pooling),
``no-noisy`` (deterministic head layers).
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import (
    FROZEN_ZERO,
    SAMPLED,
    Embedding,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    NoisyLinear,
    TransformerBlock,
    positional_encoding_table,
)

VARIANTS = ("full", "mlp", "self-attn-only", "no-noisy")

# Continuous feature widths by token kind (see env token layout).
_KIND_ORDER = ("human", "robot", "machine", "material", "task", "subtask", "fparam")


@dataclass(frozen=True)
class NetworkConfig:
    n_actions: int
    cont_width: int
    n_task_ids: int
    n_subtask_ids: int
    d_model: int = 64
    heads: int = 4
    layers: int = 2
    head: str = "dueling"  # dueling | plain
    noisy: bool = True
    noisy_sigma0: float = 0.1
    cross_attention: bool = True
    variant: str = "full"
    n_status: int = 10
    n_kinds: int = 7
    max_tokens: int = 128

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ValueError("d_model must be divisible by heads")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.head not in ("dueling", "plain"):
            raise ValueError("head must be 'dueling' or 'plain'")

    def resolved(self) -> "NetworkConfig":
        """Apply variant switches to the architecture flags."""
        from dataclasses import replace

        cfg = self
        if cfg.variant == "mlp":
            cfg = replace(cfg, cross_attention=False)
        elif cfg.variant == "self-attn-only":
            cfg = replace(cfg, cross_attention=False)
        elif cfg.variant == "no-noisy":
            cfg = replace(cfg, noisy=False)
        return cfg


@dataclass
class ObsBatch:
    kinds: np.ndarray  # (N,) shared token layout
    cats: np.ndarray  # (B, N, 3)
    cont: np.ndarray  # (B, N, C)
    mask: np.ndarray  # (B, A) float: 1 = safe


def stack_observations(observations, masks) -> ObsBatch:
    """Stack same-layout observations and their action masks."""
    kinds = observations[0].kinds
    for obs in observations[1:]:
        if not np.array_equal(obs.kinds, kinds):
            raise ValueError("cannot batch observations with different token layouts")
    return ObsBatch(
        kinds=kinds,
        cats=np.stack([o.cats for o in observations]),
        cont=np.stack([o.cont for o in observations]),
        mask=np.stack(masks).astype(np.float64),
    )


class _Head(Module):
    def __init__(self, cfg: NetworkConfig, rng):
        d = cfg.d_model
        hidden = max(d // 2, 8)
        self.dueling = cfg.head == "dueling"

        def make(n_in, n_out):
            if cfg.noisy:
                return NoisyLinear(n_in, n_out, rng, cfg.noisy_sigma0)
            return Linear(n_in, n_out, rng)

        self.noisy = cfg.noisy
        self.value_hidden = make(d, hidden)
        self.value_out = make(hidden, 1)
        self.adv_hidden = make(d, hidden)
        self.adv_out = make(hidden, cfg.n_actions)

    def _apply(self, layer, x, noise_mode):
        if self.noisy:
            return layer(x, noise_mode)
        return layer(x)

    def __call__(self, phi: Tensor, noise_mode: str) -> Tensor:
        adv = self._apply(
            self.adv_out, ad.relu(self._apply(self.adv_hidden, phi, noise_mode)), noise_mode
        )
        if not self.dueling:
            return adv
        value = self._apply(
            self.value_out, ad.relu(self._apply(self.value_hidden, phi, noise_mode)), noise_mode
        )
        centered = ad.sub(adv, ad.mean(adv, axis=-1, keepdims=True))
        return ad.add(value, centered)

    def resample_noise(self, rng) -> None:
        if not self.noisy:
            return
        for layer in (self.value_hidden, self.value_out, self.adv_hidden, self.adv_out):
            layer.resample(rng)


class QNetwork(Module):
    def __init__(self, cfg: NetworkConfig, seed=0):
        cfg = cfg.resolved()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d = cfg.d_model
        self.kind_embed = Embedding(cfg.n_kinds, d, rng)
        self.task_embed = Embedding(cfg.n_task_ids + 1, d, rng)
        self.subtask_embed = Embedding(cfg.n_subtask_ids + 1, d, rng)
        self.status_embed = Embedding(cfg.n_status, d, rng)
        self.cont_proj = [Linear(cfg.cont_width, d, rng) for _ in range(cfg.n_kinds)]
        self._pe = positional_encoding_table(cfg.max_tokens, d)
        if cfg.variant == "mlp":
            self.mlp1 = Linear(d, 2 * d, rng)
            self.mlp2 = Linear(2 * d, d, rng)
        else:
            self.blocks = [TransformerBlock(d, cfg.heads, rng) for _ in range(cfg.layers)]
            self.out_norm = LayerNorm(d)
        if cfg.cross_attention:
            self.mask_proj = Linear(cfg.n_actions, d, rng)
            self.cross = MultiHeadAttention(d, cfg.heads, rng)
        self.head = _Head(cfg, rng)

    # -- encoding -------------------------------------------------------------

    def _encode(self, batch: ObsBatch) -> Tensor:
        kinds = batch.kinds
        n = len(kinds)
        pieces = []
        start = 0
        while start < n:
            kind = int(kinds[start])
            stop = start
            while stop < n and kinds[stop] == kind:
                stop += 1
            pieces.append(self.cont_proj[kind](Tensor(batch.cont[:, start:stop, :])))
            start = stop
        enc = ad.concat(pieces, axis=1)
        enc = enc + self.kind_embed(np.broadcast_to(kinds, batch.cats.shape[:2]))
        enc = enc + self.task_embed(batch.cats[:, :, 0])
        enc = enc + self.subtask_embed(batch.cats[:, :, 1])
        enc = enc + self.status_embed(batch.cats[:, :, 2])
        return enc + Tensor(self._pe[:n])

    def forward(self, batch: ObsBatch, noise_mode: str = FROZEN_ZERO) -> Tensor:
        """Q-values (B, n_actions). Masking is applied at argmax, not here."""
        x = self._encode(batch)
        if self.cfg.variant == "mlp":
            phi = ad.mean(x, axis=1)
            phi = self.mlp2(ad.relu(self.mlp1(phi)))
        else:
            for block in self.blocks:
                x = block(x)
            x = self.out_norm(x)
            if self.cfg.cross_attention:
                query = self.mask_proj(Tensor(batch.mask[:, None, :]))
                phi = ad.reshape(self.cross(query, x, x), (x.shape[0], self.cfg.d_model))
            else:
                phi = ad.mean(x, axis=1)
        return self.head(phi, noise_mode)

    def resample_noise(self, rng) -> None:
        self.head.resample_noise(rng)

    def clone(self) -> "QNetwork":
        other = QNetwork(self.cfg, seed=0)
        for name, param in other.parameters().items():
            param.data[...] = self.parameters()[name].data
        return other


def forward_q(net: QNetwork, obs, safe_mask, noise_mode: str = FROZEN_ZERO) -> np.ndarray:
    """Q-values for one observation under one safe mask."""
    batch = stack_observations([obs], [np.asarray(safe_mask, dtype=np.float64)])
    return net.forward(batch, noise_mode).data[0]


def zero_grads(params: dict) -> None:
    for p in params.values():
        p.grad = None


# ---------------------------------------------------------------------------
# Checkpoint blob

_MAGIC = b"ERGQ"
_VERSION = 1


def save_params(path, params: dict, meta: dict | None = None) -> None:
    """Versioned binary blob of named float64 tensors with shape headers."""
    meta_blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(meta_blob)))
        fh.write(meta_blob)
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            value = params[name]
            data = np.ascontiguousarray(getattr(value, "data", value), dtype=np.float64)
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


def load_params(path) -> tuple[dict, dict]:
    """Read a checkpoint blob back into plain arrays plus its metadata."""
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError("not a checkpoint file")
        version, meta_len = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        meta = json.loads(fh.read(meta_len).decode("utf-8"))
        (count,) = struct.unpack("<I", fh.read(4))
        params = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            size = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(8 * size), dtype=np.float64).reshape(shape)
            params[name] = data.copy()
        return params, meta


def restore_into(net: QNetwork, arrays: dict) -> None:
    params = net.parameters()
    missing = set(params) ^ set(arrays)
    if missing:
        raise ValueError(f"checkpoint/network parameter mismatch: {sorted(missing)}")
    for name, array in arrays.items():
        if params[name].data.shape != array.shape:
            raise ValueError(
                f"checkpoint/network parameter mismatch: {name} has shape "
                f"{array.shape}, expected {params[name].data.shape}"
            )
        params[name].data[...] = array


def config_hash(*configs) -> str:
    text = json.dumps([repr(c) for c in configs], sort_keys=True)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Gradient verification


def grad_check(net: QNetwork, loss_fn, n_entries: int = 40, step: float = 1e-4, seed=0) -> float:
    """Max relative error of reverse-mode grads vs central finite differences.

    ``loss_fn(net)`` must return a scalar Tensor and be deterministic (use
    frozen-zero noise). Checks a random subset of parameter entries.
    """
    rng = np.random.default_rng(seed)
    params = net.parameters()
    zero_grads(params)
    loss = loss_fn(net)
    loss.backward()
    grads = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in params.items()}

    names = sorted(params)
    worst = 0.0
    for _ in range(n_entries):
        name = names[int(rng.integers(len(names)))]
        p = params[name]
        flat_idx = int(rng.integers(p.data.size))
        idx = np.unravel_index(flat_idx, p.data.shape)
        original = p.data[idx]
        p.data[idx] = original + step
        hi = float(loss_fn(net).data)
        p.data[idx] = original - step
        lo = float(loss_fn(net).data)
        p.data[idx] = original
        fd = (hi - lo) / (2 * step)
        an = grads[name][idx]
        denom = max(abs(fd), abs(an), 1e-8)
        worst = max(worst, abs(fd - an) / denom)
    return worst
