"""TransformEEG: depthwise convolutional tokenizer, transformer encoder, MLP head.

The network is written directly in numpy with explicit backward passes.
Parameters live in a flat ``name -> array`` dict so optimizers, gradient
checks and checkpoints can address every layer by name.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import layers as L


class ModelConfigError(ValueError):
    pass


class ShapeError(ValueError):
    pass


class NumericalError(ArithmeticError):
    pass


@dataclass
class TokenizerConfig:
    in_channels: int = 32
    depth_multiplier: int = 2
    conv_kernel: int = 5
    pool_kernel: int = 4
    pool_stride: int = 2
    dropout_p: float = 0.2
    n_blocks: int = 2

    def validate(self):
        if self.depth_multiplier < 1 or self.in_channels < 1:
            raise ModelConfigError("in_channels and depth_multiplier must be >= 1")
        if self.conv_kernel % 2 == 0:
            raise ModelConfigError("conv_kernel must be odd for symmetric same padding")
        if self.pool_stride < 1 or self.pool_kernel < self.pool_stride:
            raise ModelConfigError("need pool_stride >= 1 and pool_kernel >= pool_stride")
        if not 0 <= self.dropout_p < 1:
            raise ModelConfigError("dropout_p must lie in [0, 1)")

    @property
    def out_features(self) -> int:
        return self.in_channels * self.depth_multiplier ** self.n_blocks


@dataclass
class EncoderConfig:
    embed_dim: int = 128
    n_heads: int = 1
    n_layers: int = 2
    ffn_hidden: int = 128
    dropout_p: float = 0.2
    activation: str = "relu"
    use_positional_embedding: bool = False
    use_class_token: bool = False

    def validate(self):
        if self.embed_dim % self.n_heads:
            raise ModelConfigError(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
        if self.activation not in L.ACTIVATIONS:
            raise ModelConfigError(f"activation must be one of {sorted(L.ACTIVATIONS)}")
        if not 0 <= self.dropout_p < 1:
            raise ModelConfigError("dropout_p must lie in [0, 1)")


@dataclass
class HeadConfig:
    hidden: int | None = None  # defaults to embed_dim // 2
    leaky_slope: float = 0.01


@dataclass
class ModelConfig:
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    in_samples: int = 2000

    def __post_init__(self):
        for name, cls in (("tokenizer", TokenizerConfig), ("encoder", EncoderConfig), ("head", HeadConfig)):
            if isinstance(getattr(self, name), dict):
                setattr(self, name, cls(**getattr(self, name)))
        if self.head.hidden is None:
            self.head.hidden = self.encoder.embed_dim // 2

    def validate(self):
        self.tokenizer.validate()
        self.encoder.validate()
        if self.head.hidden < 1:
            raise ModelConfigError("head hidden size must be >= 1")
        if self.encoder.embed_dim != self.tokenizer.out_features:
            raise ModelConfigError(
                f"embed_dim {self.encoder.embed_dim} must equal tokenizer features "
                f"{self.tokenizer.out_features} (channels * multiplier ** blocks)"
            )
        if self.n_tokens < 1:
            raise ModelConfigError(f"input length {self.in_samples} too short for the tokenizer")

    @property
    def n_tokens(self) -> int:
        t = self.tokenizer
        n = self.in_samples
        for _ in range(t.n_blocks):
            n = (n - t.pool_kernel) // t.pool_stride + 1
        return n

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(TokenizerConfig(**d["tokenizer"]), EncoderConfig(**d["encoder"]),
                   HeadConfig(**d["head"]), int(d["in_samples"]))

    @classmethod
    def small(cls, channels: int, samples: int, n_layers: int = 2, **enc) -> "ModelConfig":
        """Default architecture scaled to ``channels`` inputs (embedding = 4 * channels)."""
        e = channels * 4
        return cls(TokenizerConfig(in_channels=channels),
                   EncoderConfig(embed_dim=e, ffn_hidden=e, n_layers=n_layers, **enc),
                   HeadConfig(), samples)


def token_dims(L_in: int, S: int, K: int) -> int:
    """Sequence length after two conv blocks (each pooling with kernel K, stride S)."""
    return (L_in + (S - K) * (1 + S)) // (S * S)


@dataclass
class ModelParams:
    config: ModelConfig
    weights: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config,
                           {k: v.copy() for k, v in self.weights.items()},
                           {k: v.copy() for k, v in self.buffers.items()})


def count_params(params: ModelParams | dict, prefix: str = "") -> int:
    w = params.weights if isinstance(params, ModelParams) else params
    return int(sum(v.size for k, v in w.items() if k.startswith(prefix)))


def layer_param_counts(params: ModelParams) -> dict[str, int]:
    """Learnable entries per layer (weight + bias grouped), in network order."""
    out: dict[str, int] = {}
    for k, v in params.weights.items():
        layer = k.rsplit(".", 1)[0]
        if ".attn" in layer:
            layer = layer.split(".attn")[0] + ".attn"
        out[layer] = out.get(layer, 0) + v.size
    return out


# ---------------------------------------------------------------------------
# construction


def build_model(config: ModelConfig, init_seed: int = 42) -> ModelParams:
    """Initialize weights: affine/conv ~ U(+-1/sqrt(fan_in)), norms at (1, 0)."""
    config.validate()
    rng = np.random.default_rng(init_seed)
    tok, enc, head = config.tokenizer, config.encoder, config.head
    w: dict[str, np.ndarray] = {}
    buf: dict[str, np.ndarray] = {}

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    def affine(name, n_out, n_in):
        w[f"{name}.weight"] = uniform((n_out, n_in), n_in)
        w[f"{name}.bias"] = uniform((n_out,), n_in)

    def norm(name, n, running=False):
        w[f"{name}.weight"] = np.ones(n)
        w[f"{name}.bias"] = np.zeros(n)
        if running:
            buf[f"{name}.running_mean"] = np.zeros(n)
            buf[f"{name}.running_var"] = np.ones(n)

    c = tok.in_channels
    k = tok.conv_kernel
    for b in range(tok.n_blocks):
        c_out = c * tok.depth_multiplier
        for conv in ("conv1", "conv2"):
            w[f"tok.{b}.{conv}.weight"] = uniform((c_out, 1, k), k)
            w[f"tok.{b}.{conv}.bias"] = uniform((c_out,), k)
            norm(f"tok.{b}.{'bn1' if conv == 'conv1' else 'bn2'}", c_out, running=True)
        c = c_out

    E = enc.embed_dim
    if enc.use_class_token:
        w["enc.cls_token"] = rng.normal(0, 0.02, size=(1, E))
    if enc.use_positional_embedding:
        w["enc.pos_embedding"] = rng.normal(0, 0.02, size=(config.n_tokens + enc.use_class_token, E))
    for i in range(enc.n_layers):
        p = f"enc.{i}"
        w[f"{p}.attn.in_proj_weight"] = uniform((3 * E, E), E)
        w[f"{p}.attn.in_proj_bias"] = uniform((3 * E,), E)
        affine(f"{p}.attn.out_proj", E, E)
        norm(f"{p}.norm1", E)
        affine(f"{p}.linear1", enc.ffn_hidden, E)
        affine(f"{p}.linear2", E, enc.ffn_hidden)
        norm(f"{p}.norm2", E)

    affine("head.linear1", head.hidden, E)
    affine("head.linear2", 1, head.hidden)
    return ModelParams(config, w, buf)


# ---------------------------------------------------------------------------
# forward


def _check_input(config: ModelConfig, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3 or X.shape[1] != config.tokenizer.in_channels:
        raise ShapeError(f"expected (B, {config.tokenizer.in_channels}, L), got {X.shape}")
    if config.encoder.use_positional_embedding and X.shape[2] != config.in_samples:
        raise ShapeError(f"positional embedding fixes L = {config.in_samples}, got {X.shape[2]}")
    return X


def tokenizer_forward(params: ModelParams, X, training: bool = False, rng=None, _caches=None, _stats=None):
    """(B, C, L) -> (B, C*D**2, T) tokens (feature-major, as the conv stack emits them)."""
    cfg = params.config
    tok = cfg.tokenizer
    w = params.weights
    x = _check_input(cfg, X)
    drop_rng = rng if training else None
    for b in range(tok.n_blocks):
        p = f"tok.{b}"
        h, c_conv1 = L.dwconv_fwd(x, w[f"{p}.conv1.weight"], w[f"{p}.conv1.bias"], tok.depth_multiplier)
        h, c_bn1, s1 = L.batchnorm_fwd(h, w[f"{p}.bn1.weight"], w[f"{p}.bn1.bias"], training,
                                       params.buffers.get(f"{p}.bn1.running_mean"),
                                       params.buffers.get(f"{p}.bn1.running_var"))
        h, c_elu1 = L.elu_fwd(h)
        h, c_pool = L.avgpool_fwd(h, tok.pool_kernel, tok.pool_stride)
        # channel-wise (whole feature map) dropout
        mask = L.dropout_mask(h.shape[:2] + (1,), tok.dropout_p, drop_rng)
        if mask is not None:
            h = h * mask
        r, c_conv2 = L.dwconv_fwd(h, w[f"{p}.conv2.weight"], w[f"{p}.conv2.bias"], 1)
        r, c_bn2, s2 = L.batchnorm_fwd(r, w[f"{p}.bn2.weight"], w[f"{p}.bn2.bias"], training,
                                       params.buffers.get(f"{p}.bn2.running_mean"),
                                       params.buffers.get(f"{p}.bn2.running_var"))
        r, c_elu2 = L.elu_fwd(r)
        x = r + h
        if _caches is not None:
            _caches.append((c_conv1, c_bn1, c_elu1, c_pool, mask, c_conv2, c_bn2, c_elu2))
        if _stats is not None and training:
            _stats[f"{p}.bn1"] = s1
            _stats[f"{p}.bn2"] = s2
    return x


def encoder_forward(params: ModelParams, tokens, training: bool = False, rng=None, _caches=None):
    """(B, T, E) -> (B, T', E); T' = T + 1 when a class token is prepended."""
    enc = params.config.encoder
    w = params.weights
    x = np.asarray(tokens, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != enc.embed_dim:
        raise ShapeError(f"expected (B, T, {enc.embed_dim}) tokens, got {x.shape}")
    if enc.use_class_token:
        cls = np.broadcast_to(w["enc.cls_token"][None], (x.shape[0], 1, enc.embed_dim))
        x = np.concatenate([cls, x], axis=1)
    if enc.use_positional_embedding:
        if x.shape[1] != w["enc.pos_embedding"].shape[0]:
            raise ShapeError("token count does not match the positional embedding")
        x = x + w["enc.pos_embedding"][None]
    act_fwd, _ = L.ACTIVATIONS[enc.activation]
    drop_rng = rng if training else None
    p_drop = enc.dropout_p
    for i in range(enc.n_layers):
        p = f"enc.{i}"
        a, c_attn = L.attention_fwd(x, w[f"{p}.attn.in_proj_weight"], w[f"{p}.attn.in_proj_bias"],
                                    w[f"{p}.attn.out_proj.weight"], w[f"{p}.attn.out_proj.bias"],
                                    enc.n_heads)
        m1 = L.dropout_mask(a.shape, p_drop, drop_rng)
        if m1 is not None:
            a = a * m1
        x1, c_n1 = L.layernorm_fwd(x + a, w[f"{p}.norm1.weight"], w[f"{p}.norm1.bias"])
        f, c_l1 = L.linear_fwd(x1, w[f"{p}.linear1.weight"], w[f"{p}.linear1.bias"])
        f, c_act = act_fwd(f)
        m2 = L.dropout_mask(f.shape, p_drop, drop_rng)
        if m2 is not None:
            f = f * m2
        f, c_l2 = L.linear_fwd(f, w[f"{p}.linear2.weight"], w[f"{p}.linear2.bias"])
        m3 = L.dropout_mask(f.shape, p_drop, drop_rng)
        if m3 is not None:
            f = f * m3
        x, c_n2 = L.layernorm_fwd(x1 + f, w[f"{p}.norm2.weight"], w[f"{p}.norm2.bias"])
        if _caches is not None:
            _caches.append((c_attn, m1, c_n1, c_l1, c_act, m2, c_l2, m3, c_n2))
    return x


def head_logits(params: ModelParams, encoded, _caches=None):
    cfg = params.config
    w = params.weights
    if cfg.encoder.use_class_token:
        pooled = encoded[:, 0, :]
    else:
        pooled = encoded.mean(axis=1)
    h, c1 = L.linear_fwd(pooled, w["head.linear1.weight"], w["head.linear1.bias"])
    h, c_act = L.leaky_fwd(h, cfg.head.leaky_slope)
    z, c2 = L.linear_fwd(h, w["head.linear2.weight"], w["head.linear2.bias"])
    if _caches is not None:
        _caches.append((encoded.shape, c1, c_act, c2))
    return z


def head_forward(params: ModelParams, encoded):
    """(B, T, E) -> (B, 1) probabilities."""
    return L.sigmoid(head_logits(params, encoded))


def model_logits(params, X, training=False, rng=None, caches=None, stats=None):
    tok_c, enc_c, head_c = ([], [], []) if caches is not None else (None, None, None)
    tokens = tokenizer_forward(params, X, training, rng, tok_c, stats)
    encoded = encoder_forward(params, tokens.transpose(0, 2, 1), training, rng, enc_c)
    z = head_logits(params, encoded, head_c)
    if caches is not None:
        caches.update(tok=tok_c, enc=enc_c, head=head_c)
    return z


def model_forward(params: ModelParams, X, training: bool = False, rng=None) -> np.ndarray:
    """(B, C, L) -> (B, 1) probability of the positive (Parkinson's) class."""
    return L.sigmoid(model_logits(params, X, training, rng))


def predict_proba(params: ModelParams, X, batch_size: int = 64) -> np.ndarray:
    X = np.asarray(X)
    out = [model_forward(params, X[i:i + batch_size])[:, 0] for i in range(0, len(X), batch_size)]
    return np.concatenate(out) if out else np.zeros(0)


# ---------------------------------------------------------------------------
# loss and backward

PROB_CLAMP = 1e-7


def bce_loss(probs, targets) -> float:
    p = np.clip(np.asarray(probs, dtype=np.float64).reshape(-1), PROB_CLAMP, 1 - PROB_CLAMP)
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    return float(np.mean(-(y * np.log(p) + (1 - y) * np.log(1 - p))))


def loss_and_grads(params: ModelParams, X, targets, rng=None):
    """Mean BCE, its gradient for every weight, and batch-norm batch statistics.

    Batch norm always uses batch statistics here. Dropout is active only
    when ``rng`` is given.
    """
    caches: dict = {}
    stats: dict = {}
    z = model_logits(params, X, training=True, rng=rng, caches=caches, stats=stats)
    probs = L.sigmoid(z)
    y = np.asarray(targets, dtype=np.float64).reshape(-1, 1)
    loss = bce_loss(probs, y)
    if not np.isfinite(loss):
        raise NumericalError("non-finite loss")
    B = len(y)
    # gradient through the clamp is zero where it binds
    live = (probs > PROB_CLAMP) & (probs < 1 - PROB_CLAMP)
    dz = (probs - y) / B * live
    grads = _backward(params, dz, caches)
    return loss, grads, stats


def model_backward(params: ModelParams, X, targets, rng=None) -> dict[str, np.ndarray]:
    return loss_and_grads(params, X, targets, rng)[1]


def _backward(params: ModelParams, dz, caches) -> dict[str, np.ndarray]:
    cfg = params.config
    w = params.weights
    g: dict[str, np.ndarray] = {}

    # head
    enc_shape, c1, c_act, c2 = caches["head"][0]
    dh, g["head.linear2.weight"], g["head.linear2.bias"] = L.linear_bwd(dz, c2, w["head.linear2.weight"])
    dh = L.leaky_bwd(dh, c_act)
    dpooled, g["head.linear1.weight"], g["head.linear1.bias"] = L.linear_bwd(dh, c1, w["head.linear1.weight"])
    dx = np.zeros(enc_shape)
    if cfg.encoder.use_class_token:
        dx[:, 0, :] = dpooled
    else:
        dx += dpooled[:, None, :] / enc_shape[1]

    # encoder, last layer first
    enc = cfg.encoder
    _, act_bwd = L.ACTIVATIONS[enc.activation]
    for i in reversed(range(enc.n_layers)):
        p = f"enc.{i}"
        c_attn, m1, c_n1, c_l1, c_act, m2, c_l2, m3, c_n2 = caches["enc"][i]
        ds, g[f"{p}.norm2.weight"], g[f"{p}.norm2.bias"] = L.layernorm_bwd(dx, c_n2)
        df = ds if m3 is None else ds * m3
        df, g[f"{p}.linear2.weight"], g[f"{p}.linear2.bias"] = L.linear_bwd(df, c_l2, w[f"{p}.linear2.weight"])
        if m2 is not None:
            df = df * m2
        df = act_bwd(df, c_act)
        dx1, g[f"{p}.linear1.weight"], g[f"{p}.linear1.bias"] = L.linear_bwd(df, c_l1, w[f"{p}.linear1.weight"])
        dx1 = dx1 + ds
        ds1, g[f"{p}.norm1.weight"], g[f"{p}.norm1.bias"] = L.layernorm_bwd(dx1, c_n1)
        da = ds1 if m1 is None else ds1 * m1
        dxa, g[f"{p}.attn.in_proj_weight"], g[f"{p}.attn.in_proj_bias"], \
            g[f"{p}.attn.out_proj.weight"], g[f"{p}.attn.out_proj.bias"] = L.attention_bwd(da, c_attn)
        dx = ds1 + dxa
    if enc.use_positional_embedding:
        g["enc.pos_embedding"] = dx.sum(axis=0)
    if enc.use_class_token:
        g["enc.cls_token"] = dx[:, :1, :].sum(axis=0)
        dx = dx[:, 1:, :]

    # tokenizer
    tok = cfg.tokenizer
    dx = dx.transpose(0, 2, 1)
    for b in reversed(range(tok.n_blocks)):
        p = f"tok.{b}"
        c_conv1, c_bn1, c_elu1, c_pool, mask, c_conv2, c_bn2, c_elu2 = caches["tok"][b]
        dh = dx.copy()  # residual path
        dr = L.elu_bwd(dx, c_elu2)
        dr, g[f"{p}.bn2.weight"], g[f"{p}.bn2.bias"] = L.batchnorm_bwd(dr, c_bn2)
        dr, g[f"{p}.conv2.weight"], g[f"{p}.conv2.bias"] = L.dwconv_bwd(dr, c_conv2)
        dh += dr
        if mask is not None:
            dh = dh * mask
        dh = L.avgpool_bwd(dh, c_pool)
        dh = L.elu_bwd(dh, c_elu1)
        dh, g[f"{p}.bn1.weight"], g[f"{p}.bn1.bias"] = L.batchnorm_bwd(dh, c_bn1)
        dx, g[f"{p}.conv1.weight"], g[f"{p}.conv1.bias"] = L.dwconv_bwd(dh, c_conv1)

    return {k: g[k] for k in w}


def update_running_stats(params: ModelParams, stats: dict, momentum: float = 0.1) -> None:
    for name, (mean, var_unbiased) in stats.items():
        rm, rv = f"{name}.running_mean", f"{name}.running_var"
        params.buffers[rm] = (1 - momentum) * params.buffers[rm] + momentum * mean
        params.buffers[rv] = (1 - momentum) * params.buffers[rv] + momentum * var_unbiased


# ---------------------------------------------------------------------------
# checkpoint file
#
# little-endian layout:
#   b"TEEG" | u16 version | u32 json_len | config JSON (utf-8)
#   u32 n_entries, then per entry:
#   u8 kind (0 weight, 1 buffer) | u16 name_len | name | u8 ndim | u32 dims[ndim]
#   | float64 data (C order), so a reloaded model scores bit-identically

_CKPT_MAGIC = b"TEEG"
_CKPT_VERSION = 1


def save_checkpoint(params: ModelParams, path, extra: dict | None = None) -> None:
    meta = json.dumps({"model": params.config.to_dict(), "extra": extra or {}}, sort_keys=True).encode()
    parts = [_CKPT_MAGIC, struct.pack("<HI", _CKPT_VERSION, len(meta)), meta]
    entries = [(0, k, v) for k, v in params.weights.items()] + [(1, k, v) for k, v in params.buffers.items()]
    parts.append(struct.pack("<I", len(entries)))
    for kind, name, arr in entries:
        nb = name.encode()
        parts.append(struct.pack("<BH", kind, len(nb)) + nb)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    buf = Path(path).read_bytes()
    if buf[:4] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a TransformEEG checkpoint")
    version, n = struct.unpack_from("<HI", buf, 4)
    if version != _CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 10
    meta = json.loads(buf[pos:pos + n])
    pos += n
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    weights, buffers = {}, {}
    for _ in range(count):
        kind, nlen = struct.unpack_from("<BH", buf, pos)
        pos += 3
        name = buf[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
        pos += 8 * size
        (weights if kind == 0 else buffers)[name] = arr
    return ModelParams(ModelConfig.from_dict(meta["model"]), weights, buffers), meta["extra"]
