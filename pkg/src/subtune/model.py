"""Miniature pre-norm single-head attention classifier with hand-derived
gradients.

Attention projections (q, k, v, o per block) start as plain matrices; after
backbone pretraining they can be decomposed into a frozen semantic subspace
plus trainable artifact subspaces.  Everything outside those projections and
the head (token embed, layer norms, MLPs) is frozen during fine-tuning.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from . import losses
from .decomposition import (
    ArtifactPart,
    DecomposedLayer,
    DecompositionConfig,
    decompose,
    recompose,
)

Projection = Union[np.ndarray, DecomposedLayer]

LN_EPS = 1e-6
_GELU_A = math.sqrt(2.0 / math.pi)
_GELU_B = 0.044715


@dataclass
class ModelConfig:
    d_model: int = 16
    n_blocks: int = 6
    n_tokens: int = 8
    n_classes_pretrain: int = 4
    decomposition: DecompositionConfig = field(default_factory=DecompositionConfig)

    @property
    def n_decomposable(self) -> int:
        return 4 * self.n_blocks

    @property
    def mlp_hidden(self) -> int:
        return 2 * self.d_model

    def validate(self) -> None:
        if self.d_model < 2 or self.n_blocks < 1 or self.n_tokens < 1:
            raise ValueError(
                f"bad model dimensions d_model={self.d_model} "
                f"n_blocks={self.n_blocks} n_tokens={self.n_tokens}"
            )
        if self.n_classes_pretrain < 2:
            raise ValueError("need at least two base classes for pretraining")
        self.decomposition.validate()


@dataclass
class Block:
    norm1_gain: np.ndarray
    norm1_bias: np.ndarray
    q: Projection
    k: Projection
    v: Projection
    o: Projection
    norm2_gain: np.ndarray
    norm2_bias: np.ndarray
    mlp_in: np.ndarray
    mlp_out: np.ndarray


PROJECTION_NAMES = ("q", "k", "v", "o")


@dataclass
class Model:
    config: ModelConfig
    token_embed: np.ndarray
    blocks: list[Block]
    head: np.ndarray

    @property
    def decomposed(self) -> bool:
        return isinstance(self.blocks[0].q, DecomposedLayer)

    @property
    def n_outputs(self) -> int:
        return int(self.head.shape[0])


def init_model(cfg: ModelConfig, rng: np.random.Generator) -> Model:
    cfg.validate()
    d, h = cfg.d_model, cfg.mlp_hidden
    scale = 1.0 / math.sqrt(d)
    blocks = []
    for _ in range(cfg.n_blocks):
        blocks.append(
            Block(
                norm1_gain=np.ones(d),
                norm1_bias=np.zeros(d),
                q=rng.normal(scale=scale, size=(d, d)),
                k=rng.normal(scale=scale, size=(d, d)),
                v=rng.normal(scale=scale, size=(d, d)),
                o=rng.normal(scale=scale, size=(d, d)),
                norm2_gain=np.ones(d),
                norm2_bias=np.zeros(d),
                mlp_in=rng.normal(scale=scale, size=(h, d)),
                mlp_out=rng.normal(scale=1.0 / math.sqrt(h), size=(d, h)),
            )
        )
    head = rng.normal(scale=scale, size=(cfg.n_classes_pretrain, d))
    return Model(config=cfg, token_embed=rng.normal(scale=scale, size=(d, d)), blocks=blocks, head=head)


def attention_slots(model: Model) -> list[tuple[int, Block, str]]:
    """(layer_id, block, projection name) for every maskable layer, in a fixed
    order: block 0 q,k,v,o then block 1 q,k,v,o and so on."""
    out = []
    lid = 0
    for block in model.blocks:
        for name in PROJECTION_NAMES:
            out.append((lid, block, name))
            lid += 1
    return out


def layer_names(model: Model) -> list[str]:
    return [f"block{i // 4}.{PROJECTION_NAMES[i % 4]}" for i in range(model.config.n_decomposable)]


def decompose_attention(model: Model) -> None:
    """Replace every plain attention projection with its subspace split."""
    if model.decomposed:
        raise ValueError("attention projections are already decomposed")
    for lid, block, name in attention_slots(model):
        w = getattr(block, name)
        setattr(block, name, decompose(w, model.config.decomposition, layer_id=lid))


def reset_head(
    model: Model, n_outputs: int, rng: np.random.Generator, scale: float | None = None
) -> None:
    if scale is None:
        scale = 1.0 / math.sqrt(model.config.d_model)
    model.head = rng.normal(scale=scale, size=(n_outputs, model.config.d_model))


def effective_weight(p: Projection) -> np.ndarray:
    return recompose(p) if isinstance(p, DecomposedLayer) else p


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(_GELU_A * (x + _GELU_B * x**3)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    t = np.tanh(_GELU_A * (x + _GELU_B * x**3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_A * (1.0 + 3.0 * _GELU_B * x * x)


def _layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mean) * inv_std
    return xhat * gain + bias, xhat, inv_std


def _layer_norm_backward(
    dy: np.ndarray, xhat: np.ndarray, inv_std: np.ndarray, gain: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    dgain = np.sum(dy * xhat, axis=(0, 1))
    dbias = np.sum(dy, axis=(0, 1))
    g = dy * gain
    dx = inv_std * (
        g - g.mean(axis=-1, keepdims=True) - xhat * np.mean(g * xhat, axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


@dataclass
class _BlockCache:
    a_in: np.ndarray
    ln1_xhat: np.ndarray
    ln1_inv_std: np.ndarray
    u: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    probs: np.ndarray
    ctx: np.ndarray
    m_in: np.ndarray
    ln2_xhat: np.ndarray
    ln2_inv_std: np.ndarray
    wn: np.ndarray
    z1: np.ndarray
    act: np.ndarray
    weights: dict[str, np.ndarray]


@dataclass
class ForwardCache:
    blocks: list[_BlockCache]
    pool: np.ndarray
    logits: np.ndarray
    probs: np.ndarray


def forward(model: Model, inputs: np.ndarray) -> ForwardCache:
    cfg = model.config
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 3 or x.shape[1] != cfg.n_tokens or x.shape[2] != cfg.d_model:
        raise ValueError(
            f"inputs must be (N, {cfg.n_tokens}, {cfg.d_model}), got {x.shape}"
        )
    if x.shape[0] < 1:
        raise ValueError("empty batch")
    if not np.all(np.isfinite(x)):
        raise ValueError("inputs contain non-finite values")

    scale = 1.0 / math.sqrt(cfg.d_model)
    h = x @ model.token_embed.T
    caches: list[_BlockCache] = []
    for b, block in enumerate(model.blocks):
        weights = {name: effective_weight(getattr(block, name)) for name in PROJECTION_NAMES}
        a_in = h
        u, ln1_xhat, ln1_inv = _layer_norm(a_in, block.norm1_gain, block.norm1_bias)
        q = u @ weights["q"].T
        k = u @ weights["k"].T
        v = u @ weights["v"].T
        scores = (q @ k.transpose(0, 2, 1)) * scale
        scores -= scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        probs = e / e.sum(axis=-1, keepdims=True)
        ctx = probs @ v
        m_in = a_in + ctx @ weights["o"].T
        wn, ln2_xhat, ln2_inv = _layer_norm(m_in, block.norm2_gain, block.norm2_bias)
        z1 = wn @ block.mlp_in.T
        act = gelu(z1)
        h = m_in + act @ block.mlp_out.T
        if not np.all(np.isfinite(h)):
            raise ValueError(f"non-finite activations in block {b}")
        caches.append(
            _BlockCache(
                a_in=a_in, ln1_xhat=ln1_xhat, ln1_inv_std=ln1_inv, u=u,
                q=q, k=k, v=v, probs=probs, ctx=ctx, m_in=m_in,
                ln2_xhat=ln2_xhat, ln2_inv_std=ln2_inv, wn=wn, z1=z1, act=act,
                weights=weights,
            )
        )

    pool = h.mean(axis=1)
    logits = pool @ model.head.T
    if model.n_outputs == 1:
        # |logit| beyond 40 saturates past the probability clamp anyway;
        # clipping first keeps exp() in range
        p = 1.0 / (1.0 + np.exp(-np.clip(logits[:, 0], -40.0, 40.0)))
        probs_out = np.clip(p, losses.PROB_FLOOR, 1.0 - losses.PROB_FLOOR)
    else:
        z = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(z)
        probs_out = e / e.sum(axis=-1, keepdims=True)
    return ForwardCache(blocks=caches, pool=pool, logits=logits, probs=probs_out)


def predict(model: Model, inputs: np.ndarray) -> np.ndarray:
    """Probabilities only: (N,) fake-probability for the binary head, (N, C)
    class distribution for the pretraining head."""
    return forward(model, inputs).probs


@dataclass
class FactorGrads:
    """Per-artifact (dU, ds, dV) for one decomposed projection."""

    parts: list[tuple[np.ndarray, np.ndarray, np.ndarray]]


@dataclass
class BlockGrads:
    norm1_gain: np.ndarray
    norm1_bias: np.ndarray
    q: Union[np.ndarray, FactorGrads]
    k: Union[np.ndarray, FactorGrads]
    v: Union[np.ndarray, FactorGrads]
    o: Union[np.ndarray, FactorGrads]
    norm2_gain: np.ndarray
    norm2_bias: np.ndarray
    mlp_in: np.ndarray
    mlp_out: np.ndarray


@dataclass
class Gradients:
    token_embed: np.ndarray
    blocks: list[BlockGrads]
    head: np.ndarray


def _project_weight_grad(
    layer: DecomposedLayer,
    g_w: np.ndarray,
    w_eff: np.ndarray,
    weights: losses.LossWeights,
    n_layers: int,
) -> FactorGrads:
    """Map an effective-weight gradient onto artifact factors and add the
    regularizer gradients (semantic factors receive nothing)."""
    g_total = g_w
    if weights.spectral_weight != 0.0:
        delta = float(np.sum(w_eff * w_eff)) - layer.pretrained_frob_sq
        # subgradient of the absolute value at its kink taken as 0; "at the
        # kink" means within float-noise of the pretrained energy, so a fresh
        # decomposition (delta ~ 1e-13 from rounding) gets an exact zero here
        if abs(delta) > 1e-9 * max(1.0, layer.pretrained_frob_sq):
            g_total = g_w + (weights.spectral_weight / n_layers) * math.copysign(2.0, delta) * w_eff
    orth = (
        losses.orth_loss_grads(layer, weights.orth_weight / n_layers)
        if weights.orth_weight != 0.0
        else None
    )
    parts = []
    for idx, a in enumerate(layer.artifacts):
        du = (g_total @ a.v) * a.s
        ds = np.einsum("or,oi,ir->r", a.u, g_total, a.v)
        dv = (g_total.T @ a.u) * a.s
        if orth is not None:
            du = du + orth[idx][0]
            dv = dv + orth[idx][1]
        parts.append((du, ds, dv))
    return FactorGrads(parts=parts)


def backward(
    model: Model,
    inputs: np.ndarray,
    labels: np.ndarray,
    weights: losses.LossWeights | None = None,
) -> tuple[losses.LossReport, Gradients, ForwardCache]:
    """Loss and exact analytic gradients for every parameter slot.

    Binary head: labels in {0,1}, loss = clamped cross-entropy plus (for a
    decomposed model) the orthogonality and spectral penalties averaged over
    decomposed layers.  Pretraining head: integer class labels, softmax
    cross-entropy, no regularizers.
    """
    cfg = model.config
    weights = weights if weights is not None else losses.LossWeights()
    cache = forward(model, inputs)
    n = inputs.shape[0]

    if model.n_outputs == 1:
        y = np.asarray(labels, dtype=np.float64)
        cls = losses.cls_loss(cache.probs, y)
        dlogits = ((cache.probs - y) / n)[:, None]
    else:
        y_idx = np.asarray(labels)
        if y_idx.ndim != 1 or y_idx.shape[0] != n:
            raise ValueError("labels must be one class id per sample")
        if y_idx.min() < 0 or y_idx.max() >= model.n_outputs:
            raise ValueError("class id out of range")
        picked = np.clip(cache.probs[np.arange(n), y_idx], losses.PROB_FLOOR, 1.0)
        cls = float(-np.mean(np.log(picked)))
        onehot = np.zeros_like(cache.probs)
        onehot[np.arange(n), y_idx] = 1.0
        dlogits = (cache.probs - onehot) / n

    d_head = dlogits.T @ cache.pool
    d_pool = dlogits @ model.head
    dh = np.repeat(d_pool[:, None, :], cfg.n_tokens, axis=1) / cfg.n_tokens

    orth_values: list[float] = []
    spec_values: list[float] = []
    scale = 1.0 / math.sqrt(cfg.d_model)
    block_grads: list[BlockGrads] = [None] * cfg.n_blocks  # type: ignore[list-item]

    for b in range(cfg.n_blocks - 1, -1, -1):
        block = model.blocks[b]
        c = cache.blocks[b]

        # MLP half: h_out = m_in + gelu(ln2(m_in) @ W1^T) @ W2^T
        dz2 = dh
        d_mlp_out = np.einsum("nto,nth->oh", dz2, c.act)
        dact = dz2 @ block.mlp_out
        dz1 = dact * gelu_grad(c.z1)
        d_mlp_in = np.einsum("nth,ntd->hd", dz1, c.wn)
        dwn = dz1 @ block.mlp_in
        dm_ln, d_g2, d_b2 = _layer_norm_backward(dwn, c.ln2_xhat, c.ln2_inv_std, block.norm2_gain)
        dm_in = dh + dm_ln

        # attention half: m_in = a_in + (softmax(q k^T / sqrt(d)) v) @ Wo^T
        do_ctx = dm_in @ c.weights["o"]
        d_wo = np.einsum("nto,ntd->od", dm_in, c.ctx)
        dprobs = do_ctx @ c.v.transpose(0, 2, 1)
        dv_tok = c.probs.transpose(0, 2, 1) @ do_ctx
        # softmax rows backward
        dscores = c.probs * (dprobs - np.sum(dprobs * c.probs, axis=-1, keepdims=True))
        dq_tok = (dscores @ c.k) * scale
        dk_tok = (dscores.transpose(0, 2, 1) @ c.q) * scale
        d_wq = np.einsum("nto,ntd->od", dq_tok, c.u)
        d_wk = np.einsum("nto,ntd->od", dk_tok, c.u)
        d_wv = np.einsum("nto,ntd->od", dv_tok, c.u)
        du = dq_tok @ c.weights["q"] + dk_tok @ c.weights["k"] + dv_tok @ c.weights["v"]
        da_ln, d_g1, d_b1 = _layer_norm_backward(du, c.ln1_xhat, c.ln1_inv_std, block.norm1_gain)
        dh = dm_in + da_ln

        proj_grads: dict[str, Union[np.ndarray, FactorGrads]] = {}
        for name, g_w in (("q", d_wq), ("k", d_wk), ("v", d_wv), ("o", d_wo)):
            p = getattr(block, name)
            if isinstance(p, DecomposedLayer):
                w_eff = c.weights[name]
                orth_values.append(losses.orth_loss(p))
                spec_values.append(losses.spec_loss(p, w_eff))
                proj_grads[name] = _project_weight_grad(
                    p, g_w, w_eff, weights, cfg.n_decomposable
                )
            else:
                proj_grads[name] = g_w

        block_grads[b] = BlockGrads(
            norm1_gain=d_g1, norm1_bias=d_b1,
            q=proj_grads["q"], k=proj_grads["k"], v=proj_grads["v"], o=proj_grads["o"],
            norm2_gain=d_g2, norm2_bias=d_b2,
            mlp_in=d_mlp_in, mlp_out=d_mlp_out,
        )

    d_embed = np.einsum("ntd,nti->di", dh, np.asarray(inputs, dtype=np.float64))

    if orth_values:
        # backward walks blocks in reverse and q,k,v,o within each; restore
        # layer-id order for the means (the mean itself is order-free)
        report = losses.total_loss(cls, orth_values, spec_values, weights)
    else:
        report = losses.LossReport(cls=cls, orth_mean=0.0, spec_mean=0.0, total=cls, n_layers=0)
    grads = Gradients(token_embed=d_embed, blocks=block_grads, head=d_head)
    return report, grads, cache


# --- flat parameter views -------------------------------------------------
# The masking optimizer and the finite-difference checker address trainable
# values as flat vectors; order is fixed: per artifact U raveled, then s,
# then V raveled, artifacts in subspace order.


def layer_param_vector(layer: DecomposedLayer) -> np.ndarray:
    chunks = []
    for a in layer.artifacts:
        chunks.extend((a.u.ravel(), a.s.ravel(), a.v.ravel()))
    return np.concatenate(chunks)


def set_layer_params(layer: DecomposedLayer, vec: np.ndarray) -> None:
    pos = 0
    for a in layer.artifacts:
        for attr in ("u", "s", "v"):
            arr = getattr(a, attr)
            n = arr.size
            setattr(a, attr, vec[pos : pos + n].reshape(arr.shape).copy())
            pos += n
    if pos != vec.size:
        raise ValueError(f"vector length {vec.size} does not match layer size {pos}")


def factor_grads_vector(fg: FactorGrads) -> np.ndarray:
    chunks = []
    for du, ds, dv in fg.parts:
        chunks.extend((du.ravel(), ds.ravel(), dv.ravel()))
    return np.concatenate(chunks)


def projection_param_vector(p: Projection) -> np.ndarray:
    return layer_param_vector(p) if isinstance(p, DecomposedLayer) else p.ravel().copy()


def set_projection_params(model_block: Block, name: str, vec: np.ndarray) -> None:
    p = getattr(model_block, name)
    if isinstance(p, DecomposedLayer):
        set_layer_params(p, vec)
    else:
        setattr(model_block, name, vec.reshape(p.shape).copy())


def projection_grad_vector(g: Union[np.ndarray, FactorGrads]) -> np.ndarray:
    return factor_grads_vector(g) if isinstance(g, FactorGrads) else g.ravel().copy()


def trainable_layer_vectors(model: Model, grads: Gradients | None = None) -> list[np.ndarray]:
    """One flat vector per maskable attention layer (params, or gradients
    when ``grads`` is given), in layer-id order."""
    out = []
    for lid, block, name in attention_slots(model):
        if grads is None:
            out.append(projection_param_vector(getattr(block, name)))
        else:
            out.append(projection_grad_vector(getattr(grads.blocks[lid // 4], name)))
    return out


def finetune_param_vector(model: Model) -> np.ndarray:
    return np.concatenate(trainable_layer_vectors(model) + [model.head.ravel()])


def set_finetune_params(model: Model, vec: np.ndarray) -> None:
    pos = 0
    for _, block, name in attention_slots(model):
        size = projection_param_vector(getattr(block, name)).size
        set_projection_params(block, name, vec[pos : pos + size])
        pos += size
    n = model.head.size
    model.head = vec[pos : pos + n].reshape(model.head.shape).copy()
    pos += n
    if pos != vec.size:
        raise ValueError(f"vector length {vec.size} does not match trainable size {pos}")


def finetune_grad_vector(model: Model, grads: Gradients) -> np.ndarray:
    return np.concatenate(trainable_layer_vectors(model, grads) + [grads.head.ravel()])


_FULL_SLOTS = (
    "norm1_gain", "norm1_bias", "q", "k", "v", "o",
    "norm2_gain", "norm2_bias", "mlp_in", "mlp_out",
)


def full_param_vector(model: Model) -> np.ndarray:
    """Every parameter of a plain (not yet decomposed) model, for pretraining."""
    if model.decomposed:
        raise ValueError("full parameter view is for the plain pretraining model")
    chunks = [model.token_embed.ravel()]
    for block in model.blocks:
        for slot in _FULL_SLOTS:
            chunks.append(getattr(block, slot).ravel())
    chunks.append(model.head.ravel())
    return np.concatenate(chunks)


def set_full_params(model: Model, vec: np.ndarray) -> None:
    if model.decomposed:
        raise ValueError("full parameter view is for the plain pretraining model")
    pos = 0

    def take(shape: tuple[int, ...]) -> np.ndarray:
        nonlocal pos
        size = int(np.prod(shape))
        out = vec[pos : pos + size].reshape(shape).copy()
        pos += size
        return out

    model.token_embed = take(model.token_embed.shape)
    for block in model.blocks:
        for slot in _FULL_SLOTS:
            setattr(block, slot, take(getattr(block, slot).shape))
    model.head = take(model.head.shape)
    if pos != vec.size:
        raise ValueError(f"vector length {vec.size} does not match model size {pos}")


def full_grad_vector(model: Model, grads: Gradients) -> np.ndarray:
    chunks = [grads.token_embed.ravel()]
    for bg in grads.blocks:
        for slot in _FULL_SLOTS:
            g = getattr(bg, slot)
            chunks.append(g.ravel())
    chunks.append(grads.head.ravel())
    return np.concatenate(chunks)


def clone_model(model: Model) -> Model:
    """Deep copy; decomposed layers share nothing with the source."""
    import copy

    return copy.deepcopy(model)
