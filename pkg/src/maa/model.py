"""The modality-agnostic adapter network with hand-written backward passes.

Pipeline: per-modality adapter (LN -> FC -> Act) -> + modality embedding ->
position-free Transformer encoder -> masked mean pool -> linear classifier.
Layers cache what backward needs on ``self``, so an instance must not run two
forward passes concurrently.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.stats import truncnorm

from .config import TrainConfig
from .dataio import Batch, modality_letter
from .errors import ShapeError, ValidationError
from .numcore import (
    Param,
    activation_backward,
    activation_forward,
    check_finite,
    layer_norm_backward,
    layer_norm_forward,
    log_softmax_rows,
    masked_mean_pool_backward,
    masked_mean_pool_forward,
    matmul,
    matmul_backward,
    softmax_backward,
    softmax_rows,
)

MASK_BIAS = -1e9


def trunc_normal(rng, shape, std, dtype):
    """Normal(0, std) truncated at two standard deviations."""
    return truncnorm.rvs(-2.0, 2.0, scale=std, size=shape, random_state=rng).astype(dtype)


class Linear:
    def __init__(self, name, d_in, d_out, rng, std, dtype, bias=True):
        self.weight = Param(f"{name}.weight", trunc_normal(rng, (d_in, d_out), std, dtype))
        self.bias = Param(f"{name}.bias", np.zeros((1, d_out), dtype=dtype), decay=False) if bias else None
        self.params = [self.weight] + ([self.bias] if bias else [])

    def forward(self, x):
        self.x = x
        y = matmul(x, self.weight.value)
        return y if self.bias is None else y + self.bias.value

    def backward(self, dy):
        d_in, d_out = self.weight.shape
        dy2 = dy.reshape(-1, d_out)
        dx2, dw = matmul_backward(dy2, self.x.reshape(-1, d_in), self.weight.value)
        self.weight.grad += dw
        if self.bias is not None:
            self.bias.grad += dy2.sum(axis=0, keepdims=True)
        return dx2.reshape(self.x.shape)


class LayerNorm:
    def __init__(self, name, dim, dtype, eps=1e-5):
        self.gamma = Param(f"{name}.gamma", np.ones((1, dim), dtype=dtype), decay=False)
        self.beta = Param(f"{name}.beta", np.zeros((1, dim), dtype=dtype), decay=False)
        self.eps = eps
        self.params = [self.gamma, self.beta]

    def forward(self, x):
        out, self.cache = layer_norm_forward(x, self.gamma.value, self.beta.value, self.eps)
        return out

    def backward(self, dy):
        dx, dgamma, dbeta = layer_norm_backward(dy, self.cache)
        self.gamma.grad += dgamma
        self.beta.grad += dbeta
        return dx


class AdapterBlock:
    """One LN -> FC -> Act stage."""

    def __init__(self, name, d_in, d_out, act, rng, std, dtype, eps):
        self.ln = LayerNorm(f"{name}.ln", d_in, dtype, eps)
        self.fc = Linear(f"{name}.fc", d_in, d_out, rng, std, dtype)
        self.act = act
        self.params = self.ln.params + self.fc.params

    def forward(self, x):
        y, self.act_cache = activation_forward(self.fc.forward(self.ln.forward(x)), self.act)
        return y

    def backward(self, dy):
        return self.ln.backward(self.fc.backward(activation_backward(dy, self.act_cache, self.act)))


class Adapter:
    """Modal difference elimination.

    ``independent``: one block per modality (D_m -> D). ``shared``: a stack of
    M blocks applied to every token, M = number of modalities, so both modes
    hold the same number of parameters when every D_m equals D. ``none``:
    identity, only legal when every D_m equals D.
    """

    def __init__(self, mode, input_dims: dict[int, int], dim, act, rng, std, dtype, eps=1e-5):
        self.mode = mode
        self.input_dims = dict(sorted(input_dims.items()))
        self.dim = dim
        self.blocks: dict[int, AdapterBlock] = {}
        self.stack: list[AdapterBlock] = []
        if mode == "independent":
            for m, d in self.input_dims.items():
                self.blocks[m] = AdapterBlock(f"adapter.{modality_letter(m)}", d, dim, act, rng, std, dtype, eps)
        elif mode == "shared":
            in_dims = set(self.input_dims.values())
            if len(in_dims) != 1:
                raise ValidationError(f"shared adapter needs equal input dims, got {self.input_dims}")
            d_in = in_dims.pop()
            for i in range(len(self.input_dims)):
                self.stack.append(
                    AdapterBlock(f"adapter.shared.{i}", d_in if i == 0 else dim, dim, act, rng, std, dtype, eps)
                )
        elif mode == "none":
            bad = {m: d for m, d in self.input_dims.items() if d != dim}
            if bad:
                raise ValidationError(f"adapter mode 'none' needs every D_m == D={dim}; got {bad}")
        else:
            raise ValidationError(f"unknown adapter mode {mode!r}")
        self.params = [p for b in list(self.blocks.values()) + self.stack for p in b.params]

    def num_params(self) -> int:
        return sum(p.size for p in self.params)

    def forward(self, tokens, modality_ids, mask):
        known = np.isin(modality_ids, list(self.input_dims))
        if np.any(mask & ~known):
            unknown = sorted(set(modality_ids[mask & ~known].tolist()))
            raise LookupError(f"tokens from modalities {unknown} have no adapter")
        b, s, _ = tokens.shape
        out = np.zeros((b, s, self.dim), dtype=tokens.dtype)
        if self.mode == "none":
            out[mask] = tokens[mask][:, : self.dim]
            return out
        if self.mode == "shared":
            self._idx = np.nonzero(mask)
            d_in = next(iter(self.input_dims.values()))
            x = tokens[self._idx][:, :d_in]
            for block in self.stack:
                x = block.forward(x)
            out[self._idx] = x
            return out
        self._idx = {}
        for m, block in self.blocks.items():
            idx = np.nonzero(mask & (modality_ids == m))
            if idx[0].size == 0:
                continue
            self._idx[m] = idx
            out[idx] = block.forward(tokens[idx][:, : self.input_dims[m]])
        return out

    def backward(self, dout):
        """Accumulates parameter gradients; inputs are data, so no dX."""
        if self.mode == "none":
            return
        if self.mode == "shared":
            dx = dout[self._idx]
            for block in reversed(self.stack):
                dx = block.backward(dx)
            return
        for m, idx in self._idx.items():
            self.blocks[m].backward(dout[idx])


class ModalityEmbedding:
    def __init__(self, num_rows, dim, allowed, rng, std, dtype):
        self.table = Param("modality_embedding", trunc_normal(rng, (num_rows, dim), std, dtype), decay=False)
        self.allowed = sorted(allowed)
        self.params = [self.table]

    def forward(self, x, modality_ids, mask):
        if x.shape[-1] != self.table.shape[1]:
            raise ShapeError(f"token dim {x.shape[-1]} != embedding dim {self.table.shape[1]}")
        ids = modality_ids[mask]
        bad = ~np.isin(ids, self.allowed)
        if np.any(bad):
            raise LookupError(f"unknown modality ids {sorted(set(ids[bad].tolist()))}")
        self.ids, self.mask = ids, mask
        out = x.copy()
        out[mask] += self.table.value[ids]
        return out

    def backward(self, dout):
        np.add.at(self.table.grad, self.ids, dout[self.mask])
        return dout


def _dropout(x, rate, train, rng):
    if not train or rate == 0.0:
        return x, None
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * keep, keep


class EncoderLayer:
    """Self-attention + FFN with residuals; post-LN unless ``pre_ln``."""

    def __init__(self, index, dim, ffn_dim, heads, act, pre_ln, dropout, rng, std, dtype, eps):
        p = f"encoder.{index}"
        self.index = index
        self.heads = heads
        self.head_dim = dim // heads
        self.act = act
        self.pre_ln = pre_ln
        self.dropout = dropout
        self.q = Linear(f"{p}.attn.q", dim, dim, rng, std, dtype)
        # no key bias: it shifts every score of a query by the same amount,
        # which softmax cancels, so its gradient is identically zero
        self.k = Linear(f"{p}.attn.k", dim, dim, rng, std, dtype, bias=False)
        self.v = Linear(f"{p}.attn.v", dim, dim, rng, std, dtype)
        self.o = Linear(f"{p}.attn.o", dim, dim, rng, std, dtype)
        self.ln1 = LayerNorm(f"{p}.ln1", dim, dtype, eps)
        self.fc1 = Linear(f"{p}.ffn.fc1", dim, ffn_dim, rng, std, dtype)
        self.fc2 = Linear(f"{p}.ffn.fc2", ffn_dim, dim, rng, std, dtype)
        self.ln2 = LayerNorm(f"{p}.ln2", dim, dtype, eps)
        mods = [self.q, self.k, self.v, self.o, self.ln1, self.fc1, self.fc2, self.ln2]
        self.params = [prm for m in mods for prm in m.params]

    def _split(self, x):
        b, s, _ = x.shape
        return x.reshape(b, s, self.heads, self.head_dim).transpose(0, 2, 1, 3)

    def _merge(self, x):
        b, _, s, _ = x.shape
        return x.transpose(0, 2, 1, 3).reshape(b, s, self.heads * self.head_dim)

    def _attn_forward(self, x, key_bias, train, rng):
        q = self._split(self.q.forward(x))
        k = self._split(self.k.forward(x))
        v = self._split(self.v.forward(x))
        scale = 1.0 / math.sqrt(self.head_dim)
        p = softmax_rows((q @ k.transpose(0, 1, 3, 2)) * scale + key_bias)
        pd, keep = _dropout(p, self.dropout, train, rng)
        self.attn_cache = (q, k, v, p, pd, keep, scale)
        return self.o.forward(self._merge(pd @ v))

    def _attn_backward(self, dout):
        q, k, v, p, pd, keep, scale = self.attn_cache
        dctx = self._split(self.o.backward(dout))
        dpd = dctx @ v.transpose(0, 1, 3, 2)
        dv = pd.transpose(0, 1, 3, 2) @ dctx
        dp = dpd if keep is None else dpd * keep
        dscores = softmax_backward(dp, p) * scale
        dq = dscores @ k
        dk = dscores.transpose(0, 1, 3, 2) @ q
        return (
            self.q.backward(self._merge(dq))
            + self.k.backward(self._merge(dk))
            + self.v.backward(self._merge(dv))
        )

    def _ffn_forward(self, x, train, rng):
        h, self.act_cache = activation_forward(self.fc1.forward(x), self.act)
        hd, self.ffn_keep = _dropout(h, self.dropout, train, rng)
        return self.fc2.forward(hd)

    def _ffn_backward(self, dout):
        dh = self.fc2.backward(dout)
        if self.ffn_keep is not None:
            dh = dh * self.ffn_keep
        return self.fc1.backward(activation_backward(dh, self.act_cache, self.act))

    def forward(self, x, mask, train=False, rng=None):
        key_bias = np.where(mask, 0.0, MASK_BIAS).astype(x.dtype)[:, None, None, :]
        self.row_mask = mask[..., None].astype(x.dtype)
        if self.pre_ln:
            r = x + self._attn_forward(self.ln1.forward(x), key_bias, train, rng)
            out = r + self._ffn_forward(self.ln2.forward(r), train, rng)
        else:
            h1 = self.ln1.forward(x + self._attn_forward(x, key_bias, train, rng))
            out = self.ln2.forward(h1 + self._ffn_forward(h1, train, rng))
        return out * self.row_mask

    def backward(self, dout):
        d = dout * self.row_mask
        if self.pre_ln:
            dr = d + self.ln2.backward(self._ffn_backward(d))
            return dr + self.ln1.backward(self._attn_backward(dr))
        ds2 = self.ln2.backward(d)
        dh1 = ds2 + self._ffn_backward(ds2)
        ds1 = self.ln1.backward(dh1)
        return ds1 + self._attn_backward(ds1)


def ce_loss(logits: np.ndarray, labels: np.ndarray):
    """Mean cross entropy via log-sum-exp; returns (loss, dlogits)."""
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if np.any(labels < 0) or np.any(labels >= c):
        raise ValidationError(f"label outside [0, {c})")
    logp = log_softmax_rows(logits)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    dlogits = np.exp(logp)
    dlogits[rows, labels] -= 1.0
    return float(loss), dlogits / n


class MAAModel:
    def __init__(self, config: TrainConfig, input_dims: dict[int, int], num_classes: int):
        enabled = config.modality_ids
        missing = [m for m in enabled if m not in input_dims]
        if missing:
            raise ValidationError(f"config enables modalities {missing} that the dataset lacks")
        self.config = config
        self.input_dims = {m: input_dims[m] for m in enabled}
        self.num_classes = num_classes
        self.dtype = config.dtype
        rng = np.random.default_rng([config.seed, 0])
        std, dt, eps = config.init_std, self.dtype, config.ln_eps
        self.adapter = Adapter(config.adapter_mode, self.input_dims, config.dim, config.activation, rng, std, dt, eps)
        self.modemb = ModalityEmbedding(max(enabled) + 1, config.dim, enabled, rng, std, dt)
        self.layers = [
            EncoderLayer(
                i, config.dim, config.ffn_dim, config.heads, config.activation,
                config.pre_ln, config.dropout, rng, std, dt, eps,
            )
            for i in range(config.layers)
        ]
        self.classifier = Linear("classifier", config.dim, num_classes, rng, std, dt)

    def params(self) -> list[Param]:
        ps = self.adapter.params + self.modemb.params
        for layer in self.layers:
            ps = ps + layer.params
        return ps + self.classifier.params

    def num_params(self) -> int:
        return sum(p.size for p in self.params())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.value for p in self.params()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        ps = self.params()
        names = [p.name for p in ps]
        if sorted(names) != sorted(state):
            raise ValidationError("parameter names do not match the model")
        for p in ps:
            if state[p.name].shape != p.shape:
                raise ValidationError(f"{p.name}: shape {state[p.name].shape} != {p.shape}")
            p.value[...] = state[p.name]

    def forward(self, batch: Batch, train: bool = False, rng=None) -> np.ndarray:
        mask = batch.mask
        x = batch.tokens.astype(self.dtype, copy=False)
        h = check_finite(self.adapter.forward(x, batch.modality_ids, mask), "adapter")
        h = self.modemb.forward(h, batch.modality_ids, mask)
        for layer in self.layers:
            h = check_finite(layer.forward(h, mask, train, rng), f"encoder layer {layer.index}")
        z, self.pool_w = masked_mean_pool_forward(h, mask)
        return check_finite(self.classifier.forward(z), "classifier")

    def backward(self, dlogits: np.ndarray) -> None:
        dz = self.classifier.backward(dlogits.astype(self.dtype, copy=False))
        dh = masked_mean_pool_backward(dz, self.pool_w)
        for layer in reversed(self.layers):
            dh = layer.backward(dh)
        dh = self.modemb.backward(dh)
        self.adapter.backward(dh)

    def forward_backward(self, batch: Batch, train: bool = False, rng=None):
        logits = self.forward(batch, train, rng)
        loss, dlogits = ce_loss(logits, batch.labels)
        check_finite(np.asarray(loss), "cross-entropy loss")
        self.backward(dlogits)
        return loss, logits
