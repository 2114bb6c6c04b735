"""Dual-stream cross-attention network over dual-resolution token bags.

The low-resolution stream embeds its tokens with a 1-D convolution along
the (canonically ordered) token sequence; the high-resolution stream embeds
each lam x lam square and pools it down to one token, either by
cross-attention with the aligned low-resolution token as query or by a
plain mean. Both streams pass through a Transformer encoder, get fused,
and a global attention pooling plus a small MLP head produce per-bin
hazards.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import bag_grid_coords, canonical_order
from .survival import HazardPrediction


class OddEmbedDim(ValueError):
    pass


class ParamsShapeMismatch(ValueError):
    pass


PARAMS_MAGIC = b"DSP1"
PARAMS_VERSION = 1


@dataclass
class DscaConfig:
    """Architecture hyperparameters; defaults follow the reference setup."""

    d: int = 1024
    d_e: int = 384
    lam: int = 4
    conv_k: int = 5
    conv_s: int = 1
    n_heads: int = 6
    ffn_mult: int = 4
    n_t: int = 4
    fusion: str = "concat"          # concat | add
    high_embed: str = "mlp"         # mlp | conv2d
    pool: str = "cross_attention"   # cross_attention | mean
    use_pe: bool = True
    activation: str = "relu"
    streams: str = "dual"           # low | high | dual

    def validate(self):
        if self.d < 1 or self.d_e < 1 or self.lam < 1 or self.n_t < 1:
            raise ValueError("d, d_e, lam, n_t must all be >= 1")
        if self.d_e % 2 != 0:
            raise OddEmbedDim(f"d_e must be even for the positional split, got {self.d_e}")
        if self.d_e % self.n_heads != 0:
            raise ValueError(f"d_e={self.d_e} not divisible by n_heads={self.n_heads}")
        if self.conv_k < 1 or self.conv_s < 1 or self.ffn_mult < 1:
            raise ValueError("conv_k, conv_s, ffn_mult must be >= 1")
        if self.fusion not in ("concat", "add"):
            raise ValueError(f"fusion must be concat|add, got {self.fusion!r}")
        if self.high_embed not in ("mlp", "conv2d"):
            raise ValueError(f"high_embed must be mlp|conv2d, got {self.high_embed!r}")
        if self.pool not in ("cross_attention", "mean"):
            raise ValueError(f"pool must be cross_attention|mean, got {self.pool!r}")
        if self.streams not in ("low", "high", "dual"):
            raise ValueError(f"streams must be low|high|dual, got {self.streams!r}")
        if self.activation != "relu":
            raise ValueError(f"only relu is supported, got {self.activation!r}")
        return self

    @property
    def d_o(self):
        if self.streams == "dual" and self.fusion == "concat":
            return 2 * self.d_e
        return self.d_e

    @property
    def head_hidden(self):
        return max(1, self.d_o // 4)

    @property
    def d_head(self):
        return self.d_e // self.n_heads


def _encoder_specs(prefix, cfg):
    de, dff = cfg.d_e, cfg.ffn_mult * cfg.d_e
    return [
        (f"{prefix}.msa.wq", (de, de), ("kaiming", de)),
        (f"{prefix}.msa.bq", (de,), ("zeros",)),
        (f"{prefix}.msa.wk", (de, de), ("kaiming", de)),
        (f"{prefix}.msa.bk", (de,), ("zeros",)),
        (f"{prefix}.msa.wv", (de, de), ("kaiming", de)),
        (f"{prefix}.msa.bv", (de,), ("zeros",)),
        (f"{prefix}.msa.wo", (de, de), ("kaiming", de)),
        (f"{prefix}.msa.bo", (de,), ("zeros",)),
        (f"{prefix}.ffn.w1", (de, dff), ("kaiming", de)),
        (f"{prefix}.ffn.b1", (dff,), ("zeros",)),
        (f"{prefix}.ffn.w2", (dff, de), ("kaiming", dff)),
        (f"{prefix}.ffn.b2", (de,), ("zeros",)),
        (f"{prefix}.ln1.g", (de,), ("ones",)),
        (f"{prefix}.ln1.b", (de,), ("zeros",)),
        (f"{prefix}.ln2.g", (de,), ("ones",)),
        (f"{prefix}.ln2.b", (de,), ("zeros",)),
    ]


def _param_specs(cfg):
    """(name, shape, init) for every learnable tensor of the configured variant."""
    cfg.validate()
    d, de = cfg.d, cfg.d_e
    specs = []
    if cfg.streams in ("low", "dual"):
        specs += [
            ("conv1d.w", (de, d, cfg.conv_k), ("kaiming", d * cfg.conv_k)),
            ("conv1d.b", (de,), ("zeros",)),
        ]
    if cfg.streams in ("high", "dual"):
        if cfg.high_embed == "mlp":
            specs += [
                ("high_embed.w", (d, de), ("kaiming", d)),
                ("high_embed.b", (de,), ("zeros",)),
            ]
        else:
            specs += [
                ("high_embed.w", (de, d, 3, 3), ("kaiming", d * 9)),
                ("high_embed.b", (de,), ("zeros",)),
            ]
        if cfg.pool == "cross_attention":
            specs += [
                ("pool.w_l", (d, de), ("kaiming", d)),
                ("pool.w_q", (de, de), ("kaiming", de)),
                ("pool.w_k", (de, de), ("kaiming", de)),
                ("pool.w_v", (de, de), ("kaiming", de)),
            ]
    if cfg.streams in ("low", "dual"):
        specs += _encoder_specs("enc_low", cfg)
    if cfg.streams in ("high", "dual"):
        specs += _encoder_specs("enc_high", cfg)
    d_o = cfg.d_o
    specs += [
        ("gap.v", (d_o, de), ("kaiming", d_o)),
        ("gap.w", (de,), ("kaiming", de)),
        ("head.w1", (d_o, cfg.head_hidden), ("kaiming", d_o)),
        ("head.b1", (cfg.head_hidden,), ("zeros",)),
        ("head.w2", (cfg.head_hidden, cfg.n_t), ("kaiming", cfg.head_hidden)),
        ("head.b2", (cfg.n_t,), ("zeros",)),
    ]
    return specs


def count_parameters(cfg):
    """Exact number of learnable scalars for the configured variant."""
    return sum(int(np.prod(shape)) for _, shape, _ in _param_specs(cfg))


class DscaParams:
    """All learnable weights, as an ordered name -> Tensor mapping."""

    def __init__(self, cfg, tensors):
        self.cfg = cfg
        self.tensors = tensors

    @classmethod
    def init(cls, cfg, seed, dtype=np.float32):
        """Seeded init: uniform fan-in scaling for weights, zeros for biases,
        (1, 0) for the layer-norm affines."""
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape, init in _param_specs(cfg):
            if init[0] == "kaiming":
                bound = np.sqrt(6.0 / init[1])
                arr = rng.uniform(-bound, bound, size=shape)
            elif init[0] == "ones":
                arr = np.ones(shape)
            else:
                arr = np.zeros(shape)
            tensors[name] = Tensor(arr.astype(dtype), requires_grad=True)
        return cls(cfg, tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def items(self):
        return self.tensors.items()

    def names(self):
        return list(self.tensors.keys())

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).data.dtype

    def n_parameters(self):
        return sum(t.data.size for t in self.tensors.values())

    def zero_grads(self):
        for t in self.tensors.values():
            t.grad = None

    def copy_data(self):
        return {name: t.data.copy() for name, t in self.tensors.items()}

    def load_data(self, snapshot):
        for name, t in self.tensors.items():
            t.data = snapshot[name].copy()

    def save(self, path):
        """Flat f32 arrays with an embedded shape manifest (DSP format)."""
        chunks = [PARAMS_MAGIC, struct.pack("<II", PARAMS_VERSION, len(self.tensors))]
        for name, t in self.tensors.items():
            enc = name.encode("utf-8")
            chunks.append(struct.pack("<H", len(enc)))
            chunks.append(enc)
            chunks.append(struct.pack("<I", t.data.ndim))
            chunks.append(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
            chunks.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
        import os
        tmp = path + ".tmp"
        with open(tmp, "wb") as fh:
            fh.write(b"".join(chunks))
        os.replace(tmp, path)

    @classmethod
    def load(cls, path, cfg, dtype=np.float32):
        with open(path, "rb") as fh:
            blob = fh.read()
        if blob[:4] != PARAMS_MAGIC:
            raise ParamsShapeMismatch(f"{path}: not a DSP parameters file")
        version, count = struct.unpack_from("<II", blob, 4)
        if version != PARAMS_VERSION:
            raise ParamsShapeMismatch(f"{path}: unsupported version {version}")
        off = 12
        stored = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<I", blob, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(shape)
            off += 4 * n
            stored[name] = arr
        expected = {name: shape for name, shape, _ in _param_specs(cfg)}
        if set(stored) != set(expected):
            raise ParamsShapeMismatch(
                f"{path}: tensor set {sorted(stored)} does not match config {sorted(expected)}")
        tensors = {}
        for name, shape, _ in _param_specs(cfg):
            if stored[name].shape != shape:
                raise ParamsShapeMismatch(
                    f"{path}: {name} has shape {stored[name].shape}, config wants {shape}")
            tensors[name] = Tensor(stored[name].astype(dtype), requires_grad=True)
        return cls(cfg, tensors)


def sparse_pe(uv, d_e):
    """Sinusoidal embedding of discretized (u, v) grid coordinates.

    The first d_e/2 channels encode u, the rest encode v, each half with
    interleaved sin/cos at geometric frequencies (base 10000).
    """
    if d_e % 2 != 0:
        raise OddEmbedDim(f"d_e must be even, got {d_e}")
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    half = d_e // 2
    pe = np.zeros((uv.shape[0], d_e))
    for axis in (0, 1):
        coords = uv[:, axis]
        for c in range(half):
            freq = 10000.0 ** (-2.0 * (c // 2) / half)
            angle = coords * freq
            pe[:, axis * half + c] = np.sin(angle) if c % 2 == 0 else np.cos(angle)
    return pe


def embed_low(x_l, params, cfg):
    """1-D token convolution; length-preserving for stride 1."""
    pad = (cfg.conv_k - 1) // 2
    return ad.conv1d_seq(x_l, params["conv1d.w"], params["conv1d.b"],
                         stride=cfg.conv_s, pad=pad)


def embed_high(x_h, params, cfg):
    """Square-wise token embedding: resize to (m, lam, lam, d), embed, activate."""
    lam2 = cfg.lam * cfg.lam
    m = x_h.shape[0] // lam2
    x = x_h.reshape(m, cfg.lam, cfg.lam, cfg.d)
    if cfg.high_embed == "mlp":
        out = ad.affine(x, params["high_embed.w"], params["high_embed.b"])
    else:
        out = ad.conv2d_square(x, params["high_embed.w"], params["high_embed.b"], pad=1)
    return out.relu()


def mean_square_pool(o_h):
    """Arithmetic mean over each lam x lam square."""
    m, lam = o_h.shape[0], o_h.shape[1]
    return o_h.reshape(m, lam * lam, o_h.shape[3]).mean(axis=1)


def cross_attention_pool(o_h, x_l, params, cfg, want_scores=False):
    """Pool each square with multi-head attention queried by its low token.

    Queries come from the raw low-resolution tokens projected by w_l then
    w_q; keys and values from the embedded square tokens. Returns
    (pooled (m, d_e), scores (m, n_heads, lam^2) or None).
    """
    m = o_h.shape[0]
    lam2 = cfg.lam * cfg.lam
    h, dh = cfg.n_heads, cfg.d_head
    z_h = o_h.reshape(m * lam2, cfg.d_e)
    q = ad.matmul(ad.matmul(x_l, params["pool.w_l"]), params["pool.w_q"])
    q = q.reshape(m, h, 1, dh)
    k = ad.matmul(z_h, params["pool.w_k"]).reshape(m, lam2, h, dh).transpose(0, 2, 1, 3)
    v = ad.matmul(z_h, params["pool.w_v"]).reshape(m, lam2, h, dh).transpose(0, 2, 1, 3)
    scores = ad.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
    attn = scores.softmax(axis=-1)                      # (m, h, 1, lam2)
    pooled = ad.matmul(attn, v).reshape(m, cfg.d_e)     # heads concatenated
    score_arr = attn.data.reshape(m, h, lam2).copy() if want_scores else None
    return pooled, score_arr


def transformer_encode(e, params, cfg, prefix):
    """One vanilla encoder: LN(MSA(x) + x) then LN(FFN(z) + z)."""
    m = e.shape[0]
    h, dh = cfg.n_heads, cfg.d_head

    def heads(t):
        return t.reshape(m, h, dh).transpose(1, 0, 2)

    q = heads(ad.affine(e, params[f"{prefix}.msa.wq"], params[f"{prefix}.msa.bq"]))
    k = heads(ad.affine(e, params[f"{prefix}.msa.wk"], params[f"{prefix}.msa.bk"]))
    v = heads(ad.affine(e, params[f"{prefix}.msa.wv"], params[f"{prefix}.msa.bv"]))
    scores = ad.matmul(q, k.transpose(0, 2, 1)) * (1.0 / np.sqrt(dh))
    attn = scores.softmax(axis=-1)
    mixed = ad.matmul(attn, v).transpose(1, 0, 2).reshape(m, cfg.d_e)
    mixed = ad.affine(mixed, params[f"{prefix}.msa.wo"], params[f"{prefix}.msa.bo"])
    z = ad.layer_norm(mixed + e, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    ff = ad.affine(z, params[f"{prefix}.ffn.w1"], params[f"{prefix}.ffn.b1"]).relu()
    ff = ad.affine(ff, params[f"{prefix}.ffn.w2"], params[f"{prefix}.ffn.b2"])
    return ad.layer_norm(ff + z, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])


def fuse(v_l, v_h, cfg):
    """Stream fusion: channel concatenation (low first) or elementwise sum."""
    if v_l.shape != v_h.shape:
        raise ad.ShapeMismatch(f"fuse: {v_l.shape} vs {v_h.shape}")
    if cfg.fusion == "concat":
        return ad.concat([v_l, v_h], axis=1)
    return v_l + v_h


def global_attention_pool(f, params, want_scores=False):
    """Attention-weighted convex combination of all token rows."""
    m = f.shape[0]
    d_a = params["gap.v"].shape[1]
    t = ad.matmul(f, params["gap.v"]).tanh()
    s = ad.matmul(t, params["gap.w"].reshape(d_a, 1))
    a = s.softmax(axis=0)                                # (m, 1)
    pooled = ad.matmul(a.reshape(1, m), f)               # (1, d_o)
    score_arr = a.data.reshape(m).copy() if want_scores else None
    return pooled, score_arr


def predict_hazards(h, params, cfg):
    """Two-layer MLP then sigmoid; returns n_t hazards in (0, 1)."""
    if h.ndim == 1:
        h = h.reshape(1, h.shape[0])
    hid = ad.affine(h, params["head.w1"], params["head.b1"]).relu()
    out = ad.affine(hid, params["head.w2"], params["head.b2"]).sigmoid()
    return out.reshape(cfg.n_t)


@dataclass
class ForwardResult:
    hazards: "Tensor"
    cross_attention: np.ndarray | None   # (m, n_heads, lam^2)
    gap_attention: np.ndarray | None     # (n_tokens,)
    token_uv: np.ndarray | None          # discretized coords per fused token

    def prediction(self):
        return HazardPrediction.from_hazards(self.hazards.data)


def _group_mean(t, groups):
    # average token rows [a, b) for each group; used to align the high
    # stream with a strided low stream
    rows = [t[a:b].mean(axis=0).reshape(1, t.shape[1]) for a, b in groups]
    return ad.concat(rows, axis=0) if len(rows) > 1 else rows[0]


def forward(bag, params, cfg, collect_attention=False):
    """Full network pass over one bag; records on the active tape if any.

    The bag is put in canonical token order first. Gradients flow to the
    parameters only; token inputs are constants.
    """
    cfg.validate()
    if bag.d != cfg.d or bag.lam != cfg.lam:
        raise ad.ShapeMismatch(
            f"bag (d={bag.d}, lam={bag.lam}) incompatible with config "
            f"(d={cfg.d}, lam={cfg.lam})")
    bag = canonical_order(bag)
    dtype = params.dtype
    m = bag.m

    uv = bag_grid_coords(bag)
    pe_all = sparse_pe(uv, cfg.d_e).astype(dtype) if cfg.use_pe else None

    e_l = e_h = None
    cross_scores = None
    if cfg.streams in ("low", "dual"):
        x_l = Tensor(bag.low_tokens.astype(dtype))
        e_l = embed_low(x_l, params, cfg)
    if cfg.streams in ("high", "dual"):
        x_h = Tensor(bag.high_tokens.astype(dtype))
        o_h = embed_high(x_h, params, cfg)
        if cfg.pool == "cross_attention":
            x_l_q = Tensor(bag.low_tokens.astype(dtype))
            e_h, cross_scores = cross_attention_pool(
                o_h, x_l_q, params, cfg, want_scores=collect_attention)
        else:
            e_h = mean_square_pool(o_h)

    # stride > 1 shortens the low stream; sample PE at the window centers
    # and mean-align the high stream onto the same length
    n_tok = e_l.shape[0] if e_l is not None else m
    idx = np.minimum(np.arange(n_tok) * cfg.conv_s, m - 1) if e_l is not None \
        else np.arange(m)
    if e_h is not None and n_tok != m:
        groups = [(t * cfg.conv_s, min((t + 1) * cfg.conv_s, m)) for t in range(n_tok)]
        e_h = _group_mean(e_h, groups)

    pe = Tensor(pe_all[idx]) if pe_all is not None else None
    v_l = v_h = None
    if e_l is not None:
        v_l = transformer_encode(e_l + pe if pe is not None else e_l,
                                 params, cfg, "enc_low")
    if e_h is not None:
        v_h = transformer_encode(e_h + pe if pe is not None else e_h,
                                 params, cfg, "enc_high")

    if cfg.streams == "dual":
        fused = fuse(v_l, v_h, cfg)
    else:
        fused = v_l if v_l is not None else v_h

    pooled, gap_scores = global_attention_pool(fused, params,
                                               want_scores=collect_attention)
    hazards = predict_hazards(pooled, params, cfg)
    return ForwardResult(
        hazards=hazards,
        cross_attention=cross_scores,
        gap_attention=gap_scores,
        token_uv=uv[idx] if collect_attention else None,
    )


def predict(bag, params, cfg):
    """Inference convenience: hazards, survival curve and risk as plain numbers."""
    return forward(bag, params, cfg).prediction()
