"""Pixel-wise cross-attention between a query feature and per-class supports.

The query feature and each support feature are encoded into a low-dimensional
key map (C/8 channels, used for matching) and a value map (C/2 channels, the
content that gets retrieved).  Every query pixel attends over every support
pixel of every class; the retrieved value maps are summed over classes and
concatenated with the query's own value map, giving back a C-channel feature
that drops into the downstream detector unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ConfigurationError
from .nn import Conv2d, Parameter, he_normal
from .tensor import Tensor, concat, matmul, reshape, softmax, transpose, tsum


@dataclass
class KeyValueMaps:
    """Paired key (C/8 channels) and value (C/2 channels) maps for one feature."""

    key: Tensor
    value: Tensor

    def __post_init__(self):
        if self.key.shape[-2:] != self.value.shape[-2:]:
            raise ValueError(
                f"key spatial size {self.key.shape[-2:]} != value spatial size {self.value.shape[-2:]}"
            )


class SupportKV:
    """Key/value maps for all N support classes, stored stacked as [N, ., H, W]."""

    def __init__(self, keys, values):
        if keys.shape[0] != values.shape[0]:
            raise ValueError(f"class counts differ: keys {keys.shape[0]} vs values {values.shape[0]}")
        if keys.shape[0] < 1:
            raise ValueError("support set must contain at least one class")
        self.keys = keys
        self.values = values

    @property
    def num_classes(self):
        return self.keys.shape[0]

    @property
    def per_class(self):
        """Per-class views for inspection (detached from the tape)."""
        return [
            KeyValueMaps(Tensor(self.keys.data[i]), Tensor(self.values.data[i]))
            for i in range(self.num_classes)
        ]

    @classmethod
    def from_maps(cls, maps):
        from .tensor import stack

        if not maps:
            raise ValueError("support set must contain at least one class")
        return cls(stack([m.key for m in maps], axis=0), stack([m.value for m in maps], axis=0))

    def permuted(self, order):
        """Reorder classes (forward-only; used by invariance checks)."""
        order = list(order)
        return SupportKV(Tensor(self.keys.data[order]), Tensor(self.values.data[order]))


@dataclass
class AttentionWeights:
    """Row-stochastic weights, one row per query pixel over support pixels."""

    w: Tensor


class KVEncoder:
    """Two parallel 3x3 convolutions producing key and value maps."""

    def __init__(self, name, feature_dim, rng, dtype=np.float64):
        if feature_dim % 8:
            raise ConfigurationError(f"feature dim {feature_dim} must be divisible by 8")
        self.feature_dim = feature_dim
        self.key_conv = Conv2d(f"{name}.key", feature_dim, feature_dim // 8, 3, rng, padding=1, dtype=dtype)
        self.value_conv = Conv2d(f"{name}.value", feature_dim, feature_dim // 2, 3, rng, padding=1, dtype=dtype)

    def encode(self, feat):
        if feat.shape[-3] != self.feature_dim:
            raise ValueError(f"feature has {feat.shape[-3]} channels, encoder expects {self.feature_dim}")
        return KeyValueMaps(self.key_conv(feat), self.value_conv(feat))

    def parameters(self):
        return self.key_conv.parameters() + self.value_conv.parameters()


def encode_query(feat, encoder):
    """Encode one query feature [C, H, W] into key/value maps."""
    if feat.ndim != 3:
        raise ValueError(f"query feature must be [C, H, W], got shape {feat.shape}")
    return encoder.encode(feat)


def encode_support(feats, encoder):
    """Encode N support features (list of [C,H,W] or stacked [N,C,H,W])."""
    if isinstance(feats, (list, tuple)):
        if not feats:
            raise ValueError("support feature list is empty")
        from .tensor import stack

        feats = stack(list(feats), axis=0)
    if feats.ndim != 4 or feats.shape[0] < 1:
        raise ValueError(f"support features must be [N, C, H, W] with N >= 1, got shape {feats.shape}")
    kv = encoder.encode(feats)
    return SupportKV(kv.key, kv.value)


def similarity(k_q, k_s, phi, phi_prime):
    """Dot products between transformed key pixels: out[i, j] = phi(q_i) . phi'(s_j).

    phi and phi_prime are [C/8, C/8] matrices, the per-pixel linear maps
    (equivalent to 1x1 convolutions on the key maps).
    """
    phi_t = phi.tensor if isinstance(phi, Parameter) else phi
    phip_t = phi_prime.tensor if isinstance(phi_prime, Parameter) else phi_prime
    ck = k_q.shape[-3]
    if k_s.shape[-3] != ck:
        raise ValueError(f"key channels differ: query {ck} vs support {k_s.shape[-3]}")
    if phi_t.shape[-1] != ck or phip_t.shape[-1] != ck:
        raise ValueError(f"transform input dim must be {ck}")
    hq, wq = k_q.shape[-2:]
    q = matmul(phi_t, reshape(k_q, (ck, hq * wq)))  # [C8', HqWq]
    if k_s.ndim == 3:
        hs, ws = k_s.shape[-2:]
        s = matmul(phip_t, reshape(k_s, (ck, hs * ws)))
    else:
        n, _, hs, ws = k_s.shape
        s = matmul(phip_t, reshape(k_s, (n, ck, hs * ws)))
    return matmul(transpose(q, (1, 0)), s)  # [HqWq, HsWs] or [N, HqWq, HsWs]


def attend(sim):
    """Softmax over support locations; every row sums to 1."""
    return AttentionWeights(softmax(sim, axis=-1))


def distill(kv_q, support, phi, phi_prime, return_attention=False):
    """Retrieve support value content into the query feature.

    Per class, every query pixel takes an attention-weighted sum of that
    class's support value pixels; the N retrieved maps are summed and then
    concatenated with the query value map, restoring C channels.
    """
    if support.num_classes < 1:
        raise ValueError("support set must contain at least one class")
    n = support.num_classes
    c2, hq, wq = kv_q.value.shape
    hs, ws = support.values.shape[-2:]
    sim = similarity(kv_q.key, support.keys, phi, phi_prime)  # [N, HqWq, HsWs]
    attn = softmax(sim, axis=-1)
    vs = transpose(reshape(support.values, (n, c2, hs * ws)), (0, 2, 1))  # [N, HsWs, C2]
    retrieved = tsum(matmul(attn, vs), axis=0)  # [HqWq, C2]
    retrieved = reshape(transpose(retrieved, (1, 0)), (c2, hq, wq))
    out = concat([kv_q.value, retrieved], axis=0)
    if return_attention:
        return out, AttentionWeights(attn)
    return out


class DenseCrossAttention:
    """Query/support encoders plus learned similarity transforms.

    The query and support encoders share structure but not parameters; the
    similarity transforms phi / phi_prime preserve the C/8 key dimension.
    """

    def __init__(self, name, feature_dim, rng, dtype=np.float64):
        self.feature_dim = feature_dim
        self.query_encoder = KVEncoder(f"{name}.query_enc", feature_dim, rng, dtype=dtype)
        self.support_encoder = KVEncoder(f"{name}.support_enc", feature_dim, rng, dtype=dtype)
        c8 = feature_dim // 8
        self.phi = Parameter(f"{name}.phi", he_normal(rng, (c8, c8), c8, dtype))
        self.phi_prime = Parameter(f"{name}.phi_prime", he_normal(rng, (c8, c8), c8, dtype))
        self.debug = False
        self.last_debug = None

    def refine(self, query_feat, support_feats):
        """Full pass: encode, attend, retrieve; output has C channels again."""
        kv_q = encode_query(query_feat, self.query_encoder)
        skv = (
            support_feats
            if isinstance(support_feats, SupportKV)
            else encode_support(support_feats, self.support_encoder)
        )
        if not self.debug:
            return distill(kv_q, skv, self.phi, self.phi_prime)
        out, attn = distill(kv_q, skv, self.phi, self.phi_prime, return_attention=True)
        self.last_debug = {
            "attention": attn.w.data.copy(),
            "attention_row_sums_max_dev": float(np.abs(attn.w.data.sum(axis=-1) - 1.0).max()),
            "pre_norm": float(np.linalg.norm(query_feat.data)),
            "post_norm": float(np.linalg.norm(out.data)),
            "num_support_classes": int(skv.num_classes),
        }
        return out

    def encode_supports(self, support_feats):
        return encode_support(support_feats, self.support_encoder)

    def parameters(self):
        return (
            self.query_encoder.parameters()
            + self.support_encoder.parameters()
            + [self.phi, self.phi_prime]
        )
