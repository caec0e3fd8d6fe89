"""Fusion heads mapping text/image feature packs to class logits.

Three mechanisms are provided:

- ``concat``: input projections, pooled-vector concatenation, 2-layer MLP.
- ``cross_attention``: one decoder-style block in which projected text tokens
  query projected image tokens, followed by mean pooling and an MLP.
- ``deep_prefix``: learned visual prefix tokens derived from the pooled image
  vector are prepended to the text tokens and the joint sequence runs through
  a small self-attention encoder stack (no positional encoding on the prefix),
  then mean pooling over all positions and an MLP.

Only the head trains; encoders are external providers and stay frozen.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .embedding import FeaturePack
from . import tensorcore as tc
from .tensorcore import ParamStore, ShapeError

MECHANISMS = ("concat", "cross_attention", "deep_prefix")

# Pythonic display order used by report tables comparing mechanisms.
MECHANISM_ORDER = {name: i for i, name in enumerate(MECHANISMS)}


class FusionConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FusionConfig:
    mechanism: str = "cross_attention"
    model_dim: int = 16
    heads: int = 2
    encoder_layers: int = 2  # deep_prefix only
    visual_prefix_len: int = 2  # deep_prefix only
    num_classes: int = 2
    hidden_dim: int = 32
    dropout_rate: float = 0.0  # applied before the classifier MLP in train mode

    def __post_init__(self):
        if self.mechanism not in MECHANISMS:
            raise FusionConfigError(f"unknown fusion mechanism {self.mechanism!r}")
        if self.model_dim < 1 or self.hidden_dim < 1:
            raise FusionConfigError("model_dim and hidden_dim must be positive")
        if self.heads < 1 or self.model_dim % self.heads != 0:
            raise FusionConfigError(
                f"heads={self.heads} must divide model_dim={self.model_dim}"
            )
        if self.num_classes < 2:
            raise FusionConfigError("num_classes must be >= 2")
        if self.mechanism == "deep_prefix":
            if self.encoder_layers < 1:
                raise FusionConfigError("deep_prefix needs encoder_layers >= 1")
            if self.visual_prefix_len < 1:
                raise FusionConfigError("deep_prefix needs visual_prefix_len >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise FusionConfigError("dropout_rate must be in [0, 1)")


@dataclass
class AttentionBundle:
    """Post-softmax attention weights captured during a forward pass.

    ``kind`` is "cross" (queries = text tokens, keys = image tokens) or
    "self" (joint sequence of ``prefix_len`` visual tokens + text tokens).
    ``maps`` holds one (heads, queries, keys) array per attention block.
    """

    kind: str
    maps: list[np.ndarray]
    prefix_len: int = 0


@dataclass
class FusionOutput:
    logits: np.ndarray  # shape (num_classes,)
    attention: AttentionBundle | None
    backward: Callable[[np.ndarray], None]  # accumulates parameter grads


@dataclass
class FusionHead:
    config: FusionConfig
    text_dim: int
    image_dim: int
    params: ParamStore
    # Advances across train-mode forwards; reseed via reset_train_rng for a
    # deterministic run. Inference never touches it.
    train_rng: np.random.Generator | None = None

    @property
    def num_params(self) -> int:
        return self.params.num_params

    def reset_train_rng(self, seed: int) -> None:
        self.train_rng = np.random.default_rng(seed)


def _ffn_dim(config: FusionConfig) -> int:
    return 2 * config.model_dim


def build_fusion_head(
    config: FusionConfig,
    text_dim: int,
    image_dim: int,
    seed: int,
    dtype=np.float32,
) -> FusionHead:
    """Allocate and seed all parameters for the configured mechanism.

    Builds are deterministic: same config, dims, and seed give bit-identical
    initial parameters.
    """
    if text_dim < 1 or image_dim < 1:
        raise FusionConfigError("input dims must be positive")
    d = config.model_dim
    store = ParamStore(seed, dtype=dtype)
    store.add("text_proj.w", text_dim, d)
    store.add("text_proj.b", 1, d, init="zeros")

    def add_block(prefix: str):
        store.add(f"{prefix}.attn.wq", d, d)
        store.add(f"{prefix}.attn.wk", d, d)
        store.add(f"{prefix}.attn.wv", d, d)
        store.add(f"{prefix}.attn.wo", d, d)
        store.add(f"{prefix}.ln1.gain", 1, d, init="ones")
        store.add(f"{prefix}.ln1.shift", 1, d, init="zeros")
        store.add(f"{prefix}.ffn.w1", d, _ffn_dim(config))
        store.add(f"{prefix}.ffn.b1", 1, _ffn_dim(config), init="zeros")
        store.add(f"{prefix}.ffn.w2", _ffn_dim(config), d)
        store.add(f"{prefix}.ffn.b2", 1, d, init="zeros")
        store.add(f"{prefix}.ln2.gain", 1, d, init="ones")
        store.add(f"{prefix}.ln2.shift", 1, d, init="zeros")

    if config.mechanism == "concat":
        store.add("image_proj.w", image_dim, d)
        store.add("image_proj.b", 1, d, init="zeros")
        cls_in = 2 * d
    elif config.mechanism == "cross_attention":
        store.add("image_proj.w", image_dim, d)
        store.add("image_proj.b", 1, d, init="zeros")
        add_block("xattn")
        cls_in = d
    else:  # deep_prefix
        store.add("prefix.w", image_dim, config.visual_prefix_len * d)
        store.add("prefix.b", 1, config.visual_prefix_len * d, init="zeros")
        for layer in range(config.encoder_layers):
            add_block(f"enc{layer}")
        cls_in = d

    store.add("cls.w1", cls_in, config.hidden_dim)
    store.add("cls.b1", 1, config.hidden_dim, init="zeros")
    store.add("cls.w2", config.hidden_dim, config.num_classes)
    store.add("cls.b2", 1, config.num_classes, init="zeros")
    return FusionHead(config=config, text_dim=text_dim, image_dim=image_dim, params=store)


def _check_pack(head: FusionHead, pack: FeaturePack) -> None:
    if pack.text_tokens.shape[1] != head.text_dim:
        raise ShapeError(
            f"pack text dim {pack.text_tokens.shape[1]} != head text dim {head.text_dim}"
        )
    if pack.image_tokens.shape[1] != head.image_dim:
        raise ShapeError(
            f"pack image dim {pack.image_tokens.shape[1]} != head image dim {head.image_dim}"
        )
    if pack.text_tokens.shape[0] < 1 or pack.image_tokens.shape[0] < 1:
        raise ShapeError("token sequences must be non-empty")


def _classifier(store: ParamStore, x: np.ndarray, train_mode: bool, config: FusionConfig, rng):
    steps = []
    if train_mode and config.dropout_rate > 0.0:
        x, b_drop = tc.dropout(x, config.dropout_rate, rng)
        steps.append(("drop", b_drop))
    h, b1 = tc.dense_affine(x, store.params["cls.w1"], store.params["cls.b1"])
    g, bg = tc.gelu(h)
    logits, b2 = tc.dense_affine(g, store.params["cls.w2"], store.params["cls.b2"])

    def backward(grad: np.ndarray) -> np.ndarray:
        dg, dw2, db2 = b2(grad)
        store.accumulate("cls.w2", dw2)
        store.accumulate("cls.b2", db2)
        (dh,) = bg(dg)
        dx, dw1, db1 = b1(dh)
        store.accumulate("cls.w1", dw1)
        store.accumulate("cls.b1", db1)
        for kind, back in reversed(steps):
            (dx,) = back(dx)
        return dx

    return logits, backward


def _encoder_block(store: ParamStore, prefix: str, q_in: np.ndarray, kv_in: np.ndarray, heads: int):
    """Attention + residual + norm + feed-forward + residual + norm.

    When ``q_in is kv_in`` the block is a self-attention encoder layer and the
    returned backward folds both gradient paths into one input gradient.
    """
    p = store.params
    attn, maps, b_attn = tc.multi_head_attention(
        q_in, kv_in,
        p[f"{prefix}.attn.wq"], p[f"{prefix}.attn.wk"],
        p[f"{prefix}.attn.wv"], p[f"{prefix}.attn.wo"],
        heads,
    )
    r1 = q_in + attn
    n1, b_ln1 = tc.layer_norm(r1, p[f"{prefix}.ln1.gain"], p[f"{prefix}.ln1.shift"])
    f1, b_f1 = tc.dense_affine(n1, p[f"{prefix}.ffn.w1"], p[f"{prefix}.ffn.b1"])
    g1, b_g = tc.gelu(f1)
    f2, b_f2 = tc.dense_affine(g1, p[f"{prefix}.ffn.w2"], p[f"{prefix}.ffn.b2"])
    r2 = n1 + f2
    out, b_ln2 = tc.layer_norm(r2, p[f"{prefix}.ln2.gain"], p[f"{prefix}.ln2.shift"])
    self_attention = q_in is kv_in

    def backward(grad: np.ndarray):
        dr2, dg2, ds2 = b_ln2(grad)
        store.accumulate(f"{prefix}.ln2.gain", dg2)
        store.accumulate(f"{prefix}.ln2.shift", ds2)
        dn1 = dr2.copy()
        dg1, dwf2, dbf2 = b_f2(dr2)
        store.accumulate(f"{prefix}.ffn.w2", dwf2)
        store.accumulate(f"{prefix}.ffn.b2", dbf2)
        (df1,) = b_g(dg1)
        dn1_ffn, dwf1, dbf1 = b_f1(df1)
        store.accumulate(f"{prefix}.ffn.w1", dwf1)
        store.accumulate(f"{prefix}.ffn.b1", dbf1)
        dn1 += dn1_ffn
        dr1, dg, ds = b_ln1(dn1)
        store.accumulate(f"{prefix}.ln1.gain", dg)
        store.accumulate(f"{prefix}.ln1.shift", ds)
        dq, dkv, dwq, dwk, dwv, dwo = b_attn(dr1)
        store.accumulate(f"{prefix}.attn.wq", dwq)
        store.accumulate(f"{prefix}.attn.wk", dwk)
        store.accumulate(f"{prefix}.attn.wv", dwv)
        store.accumulate(f"{prefix}.attn.wo", dwo)
        dq_total = dq + dr1  # residual path
        if self_attention:
            return dq_total + dkv, None
        return dq_total, dkv

    return out, maps, backward


def fuse_forward(head: FusionHead, pack: FeaturePack, train_mode: bool = False) -> FusionOutput:
    """Run the head on one sample's feature pack.

    Returns logits of shape (num_classes,), attention maps for the attention
    mechanisms, and a ``backward`` closure that accumulates parameter
    gradients from d(loss)/d(logits).
    """
    _check_pack(head, pack)
    config = head.config
    store = head.params
    dtype = store.dtype
    rng = None
    if train_mode and config.dropout_rate > 0.0:
        if head.train_rng is None:
            head.reset_train_rng(store.seed)
        rng = head.train_rng

    text_tokens = pack.text_tokens.astype(dtype)
    image_tokens = pack.image_tokens.astype(dtype)
    text_pooled = pack.text_pooled.astype(dtype).reshape(1, -1)
    image_pooled = pack.image_pooled.astype(dtype).reshape(1, -1)

    if config.mechanism == "concat":
        ht, b_t = tc.dense_affine(text_pooled, store.params["text_proj.w"], store.params["text_proj.b"])
        hi, b_i = tc.dense_affine(image_pooled, store.params["image_proj.w"], store.params["image_proj.b"])
        joined, b_cat = tc.concat_cols(ht, hi)
        logits2d, b_cls = _classifier(store, joined, train_mode, config, rng)

        def backward(dlogits: np.ndarray) -> None:
            djoined = b_cls(np.asarray(dlogits).reshape(1, -1))
            dht, dhi = b_cat(djoined)
            _, dwt, dbt = b_t(dht)
            store.accumulate("text_proj.w", dwt)
            store.accumulate("text_proj.b", dbt)
            _, dwi, dbi = b_i(dhi)
            store.accumulate("image_proj.w", dwi)
            store.accumulate("image_proj.b", dbi)

        return FusionOutput(logits=logits2d[0], attention=None, backward=backward)

    if config.mechanism == "cross_attention":
        t_seq, b_tp = tc.dense_affine(text_tokens, store.params["text_proj.w"], store.params["text_proj.b"])
        i_seq, b_ip = tc.dense_affine(image_tokens, store.params["image_proj.w"], store.params["image_proj.b"])
        fused, maps, b_block = _encoder_block(store, "xattn", t_seq, i_seq, config.heads)
        pooled, b_pool = tc.mean_rows(fused)
        logits2d, b_cls = _classifier(store, pooled, train_mode, config, rng)
        bundle = AttentionBundle(kind="cross", maps=[maps])

        def backward(dlogits: np.ndarray) -> None:
            dpooled = b_cls(np.asarray(dlogits).reshape(1, -1))
            (dfused,) = b_pool(dpooled)
            dt, di = b_block(dfused)
            _, dwt, dbt = b_tp(dt)
            store.accumulate("text_proj.w", dwt)
            store.accumulate("text_proj.b", dbt)
            _, dwi, dbi = b_ip(di)
            store.accumulate("image_proj.w", dwi)
            store.accumulate("image_proj.b", dbi)

        return FusionOutput(logits=logits2d[0], attention=bundle, backward=backward)

    # deep_prefix
    k = config.visual_prefix_len
    d = config.model_dim
    prefix_flat, b_pref = tc.dense_affine(image_pooled, store.params["prefix.w"], store.params["prefix.b"])
    prefix_tokens = prefix_flat.reshape(k, d)
    t_seq, b_tp = tc.dense_affine(text_tokens, store.params["text_proj.w"], store.params["text_proj.b"])
    joint = np.concatenate([prefix_tokens, t_seq], axis=0)

    block_backs = []
    all_maps = []
    x = joint
    for layer in range(config.encoder_layers):
        x, maps, b_block = _encoder_block(store, f"enc{layer}", x, x, config.heads)
        all_maps.append(maps)
        block_backs.append(b_block)
    pooled, b_pool = tc.mean_rows(x)
    logits2d, b_cls = _classifier(store, pooled, train_mode, config, rng)
    bundle = AttentionBundle(kind="self", maps=all_maps, prefix_len=k)

    def backward(dlogits: np.ndarray) -> None:
        dpooled = b_cls(np.asarray(dlogits).reshape(1, -1))
        (dx,) = b_pool(dpooled)
        for b_block in reversed(block_backs):
            dx, _ = b_block(dx)
        dprefix = dx[:k].reshape(1, k * d)
        dt = dx[k:]
        _, dwp, dbp = b_pref(dprefix)
        store.accumulate("prefix.w", dwp)
        store.accumulate("prefix.b", dbp)
        _, dwt, dbt = b_tp(dt)
        store.accumulate("text_proj.w", dwt)
        store.accumulate("text_proj.b", dbt)

    return FusionOutput(logits=logits2d[0], attention=bundle, backward=backward)


def head_averaged_map(bundle: AttentionBundle, layer: int = -1) -> np.ndarray:
    """Average the chosen block's attention weights over heads -> (queries, keys)."""
    if not bundle.maps:
        raise ValueError("bundle has no attention maps")
    return bundle.maps[layer].mean(axis=0)


def export_attention(
    bundle: AttentionBundle,
    text_token_labels: list[str],
    image_token_labels: list[str],
    layer: int = -1,
) -> str:
    """Render head-averaged attention weights as a tab-delimited heatmap table.

    For "cross" bundles rows are text tokens and columns are image tokens; for
    "self" bundles both axes are the joint sequence (visual prefix labels
    followed by text labels). Every row of post-softmax weights sums to 1.
    """
    matrix = head_averaged_map(bundle, layer)
    if bundle.kind == "cross":
        row_labels = list(text_token_labels)
        col_labels = list(image_token_labels)
    elif bundle.kind == "self":
        if len(image_token_labels) != bundle.prefix_len:
            raise ValueError(
                f"expected {bundle.prefix_len} visual prefix labels, got {len(image_token_labels)}"
            )
        joint = list(image_token_labels) + list(text_token_labels)
        row_labels = joint
        col_labels = joint
    else:
        raise ValueError(f"unknown bundle kind {bundle.kind!r}")

    if matrix.shape != (len(row_labels), len(col_labels)):
        raise ValueError(
            f"label counts {(len(row_labels), len(col_labels))} do not match map shape {matrix.shape}"
        )
    row_sums = matrix.sum(axis=1)
    if np.abs(row_sums - 1.0).max() > 1e-6:
        raise ValueError("attention rows must sum to 1")

    lines = ["token\t" + "\t".join(col_labels)]
    for label, row in zip(row_labels, matrix):
        lines.append(label + "\t" + "\t".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"
