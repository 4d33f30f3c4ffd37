"""
Speech/image embedding model.

The image side is a single affine map followed by L2 normalization. The
speech side is a valid 1-D convolution over MFCC frames, a stack of
unidirectional GRU layers, and one attention pooling head after each of the
configured layers. Head contexts are merged by a combiner (element-wise
product by default) and L2 normalized. Images and utterances are compared by
cosine distance and trained with a bidirectional hinge ranking loss.
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .numcore import DTYPE, DimensionError, Parameter, ParamSet

CHECKPOINT_MAGIC = b"VGSC"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    image_dim: int = 64
    embed_dim: int = 512
    mfcc_dim: int = 13
    conv_kernel: int = 6
    conv_stride: int = 2
    conv_channels: int = 64
    conv_activation: str = "identity"
    gru_layers: int = 5
    gru_hidden: int | None = None
    attention_dim: int | None = None
    attention_after_layers: list = field(default_factory=lambda: [1, 5])
    combiner: str = "product"
    margin: float = 0.2
    frame_hop_ms: float = 10.0

    def __post_init__(self):
        if self.gru_hidden is None:
            self.gru_hidden = self.embed_dim
        if self.attention_dim is None:
            self.attention_dim = self.gru_hidden
        self.attention_after_layers = sorted(int(i) for i in self.attention_after_layers)
        self.validate()

    def validate(self) -> None:
        for name in ("image_dim", "embed_dim", "mfcc_dim", "conv_kernel", "conv_stride",
                     "conv_channels", "gru_layers", "gru_hidden", "attention_dim"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"ModelConfig.{name} must be >= 1, got {getattr(self, name)}")
        if self.margin < 0:
            raise ValueError(f"ModelConfig.margin must be >= 0, got {self.margin}")
        if self.frame_hop_ms <= 0:
            raise ValueError(f"ModelConfig.frame_hop_ms must be > 0, got {self.frame_hop_ms}")
        layers = self.attention_after_layers
        if not layers or any(i < 1 or i > self.gru_layers for i in layers) or len(set(layers)) != len(layers):
            raise ValueError(
                f"ModelConfig.attention_after_layers must be distinct indices in 1..{self.gru_layers}, got {layers}")
        if self.gru_layers not in layers:
            raise ValueError("ModelConfig.attention_after_layers must include the top layer")
        if self.gru_hidden != self.embed_dim:
            raise ValueError("ModelConfig.gru_hidden must equal embed_dim (no output projection)")
        if self.conv_activation not in ("identity", "relu"):
            raise ValueError(f"ModelConfig.conv_activation must be identity or relu, got {self.conv_activation!r}")
        if self.combiner not in COMBINERS:
            raise ValueError(f"ModelConfig.combiner must be one of {sorted(COMBINERS)}, got {self.combiner!r}")

    @property
    def top_layer(self) -> int:
        return self.gru_layers

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = cls.__dataclass_fields__
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**d)

    def encoder_len(self, n_frames: int) -> int:
        return nc.conv_out_len(n_frames, self.conv_kernel, self.conv_stride)


# ---------------------------------------------------------------------------
# Combiners: merge per-head context vectors (list of (B, H)) into one (B, H)
# ---------------------------------------------------------------------------

def _product_forward(ctxs):
    out = ctxs[0].copy()
    for c in ctxs[1:]:
        out = out * c
    return out


def _product_backward(dout, ctxs):
    grads = []
    for k in range(len(ctxs)):
        g = dout.copy()
        for j, c in enumerate(ctxs):
            if j != k:
                g = g * c
        grads.append(g)
    return grads


def _sum_forward(ctxs):
    out = ctxs[0].copy()
    for c in ctxs[1:]:
        out = out + c
    return out


def _sum_backward(dout, ctxs):
    return [dout.copy() for _ in ctxs]


COMBINERS = {
    "product": (_product_forward, _product_backward),
    "sum": (_sum_forward, _sum_backward),
}


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def init_params(config: ModelConfig, seed: int) -> ParamSet:
    """Scaled-uniform weights, zero biases; streams derived from ``seed`` per parameter."""
    H, da, C = config.gru_hidden, config.attention_dim, config.conv_channels
    k, m = config.conv_kernel, config.mfcc_dim

    def glorot(name, shape, fan_in, fan_out):
        return Parameter(name, nc.glorot_uniform(nc.make_rng(seed, "init", name), shape, fan_in, fan_out))

    def zeros(name, shape):
        return Parameter(name, np.zeros(shape, dtype=DTYPE))

    ps = ParamSet()
    ps.add(glorot("image.W", (config.image_dim, config.embed_dim), config.image_dim, config.embed_dim))
    ps.add(zeros("image.b", (config.embed_dim,)))
    ps.add(glorot("conv.K", (k, m, C), k * m, C))
    ps.add(zeros("conv.b", (C,)))
    d_in = C
    for layer in range(1, config.gru_layers + 1):
        ps.add(glorot(f"gru{layer}.W", (d_in, 3 * H), d_in, H))
        ps.add(glorot(f"gru{layer}.U", (H, 3 * H), H, H))
        ps.add(zeros(f"gru{layer}.b", (3 * H,)))
        d_in = H
    for layer in config.attention_after_layers:
        ps.add(glorot(f"att{layer}.W", (H, da), H, da))
        ps.add(glorot(f"att{layer}.w", (da,), da, 1))
    return ps


def check_params(params: ParamSet, config: ModelConfig) -> None:
    expected = init_params_shapes(config)
    names = set(params.names())
    if names != set(expected):
        raise DimensionError(f"parameter names {sorted(names ^ set(expected))} do not match config")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise DimensionError(f"{name}: shape {params[name].shape}, config expects {shape}")


def init_params_shapes(config: ModelConfig) -> dict[str, tuple]:
    H, da, C = config.gru_hidden, config.attention_dim, config.conv_channels
    shapes = {"image.W": (config.image_dim, config.embed_dim), "image.b": (config.embed_dim,),
              "conv.K": (config.conv_kernel, config.mfcc_dim, C), "conv.b": (C,)}
    d_in = C
    for layer in range(1, config.gru_layers + 1):
        shapes[f"gru{layer}.W"] = (d_in, 3 * H)
        shapes[f"gru{layer}.U"] = (H, 3 * H)
        shapes[f"gru{layer}.b"] = (3 * H,)
        d_in = H
    for layer in config.attention_after_layers:
        shapes[f"att{layer}.W"] = (H, da)
        shapes[f"att{layer}.w"] = (da,)
    return shapes


# ---------------------------------------------------------------------------
# Encoded outputs
# ---------------------------------------------------------------------------

@dataclass
class EncodedImage:
    vector: np.ndarray


@dataclass
class EncodedUtterance:
    vector: np.ndarray
    attention: dict[int, np.ndarray]
    encoder_len: int


# ---------------------------------------------------------------------------
# Image encoder
# ---------------------------------------------------------------------------

def images_forward(params: ParamSet, X: np.ndarray):
    e, aff_cache = nc.affine_forward(X, params.value("image.W"), params.value("image.b"))
    v, norm_cache = nc.l2_normalize_forward(e)
    return v, (aff_cache, norm_cache)


def images_backward(dv: np.ndarray, cache) -> dict[str, np.ndarray]:
    aff_cache, norm_cache = cache
    de = nc.l2_normalize_backward(dv, norm_cache)
    _, dW, db = nc.affine_backward(de, aff_cache)
    return {"image.W": dW, "image.b": db}


def encode_image(feat, params: ParamSet, config: ModelConfig) -> EncodedImage:
    feat = np.asarray(feat, dtype=DTYPE)
    if feat.shape != (config.image_dim,):
        raise DimensionError(f"image feature has shape {feat.shape}, expected ({config.image_dim},)")
    v, _ = images_forward(params, feat[None])
    return EncodedImage(v[0])


def encode_images(X, params: ParamSet) -> np.ndarray:
    """Batch of image features (N, image_dim) -> unit embeddings (N, embed_dim)."""
    return images_forward(params, np.asarray(X, dtype=DTYPE))[0]


# ---------------------------------------------------------------------------
# Attention pooling
# ---------------------------------------------------------------------------

def attention_forward(h: np.ndarray, mask: np.ndarray, W: np.ndarray, w: np.ndarray):
    """
    h: (B, T, H); mask: (B, T) bool. Scores s_t = w . tanh(W^T h_t).

    Returns weights (B, T), context (B, H), cache.
    """
    Ut = np.tanh(h @ W)
    s = Ut @ w
    a = nc.softmax(s, mask)
    ctx = np.einsum("bt,bth->bh", a, h)
    return a, ctx, (h, W, w, Ut, a)


def attention_backward(dctx: np.ndarray, cache):
    h, W, w, Ut, a = cache
    dh = a[:, :, None] * dctx[:, None, :]
    g = np.einsum("bth,bh->bt", h, dctx)
    ds = nc.softmax_backward(g, a)
    dw = np.einsum("btd,bt->d", Ut, ds)
    dpre = ds[:, :, None] * w * (1.0 - Ut * Ut)
    dW = h.reshape(-1, h.shape[-1]).T @ dpre.reshape(-1, dpre.shape[-1])
    dh += dpre @ W.T
    return dh, dW, dw


def attention_head(h, W, w) -> tuple[np.ndarray, np.ndarray]:
    """Single sequence h (T, H) -> (weights (T,), context (H,))."""
    h = np.asarray(h, dtype=DTYPE)
    W = W.value if isinstance(W, Parameter) else np.asarray(W, dtype=DTYPE)
    w = w.value if isinstance(w, Parameter) else np.asarray(w, dtype=DTYPE)
    if h.ndim != 2 or h.shape[0] < 1:
        raise DimensionError(f"attention_head expects (T>=1, H), got {h.shape}")
    if W.shape[0] != h.shape[1] or w.shape != (W.shape[1],):
        raise DimensionError(f"attention_head: h {h.shape} incompatible with W {W.shape}, w {w.shape}")
    a, ctx, _ = attention_forward(h[None], np.ones((1, h.shape[0]), dtype=bool), W, w)
    return a[0], ctx[0]


# ---------------------------------------------------------------------------
# Speech encoder
# ---------------------------------------------------------------------------

def pad_batch(feats: list[np.ndarray], mfcc_dim: int) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([f.shape[0] for f in feats], dtype=np.int64)
    X = np.zeros((len(feats), int(lengths.max()), mfcc_dim), dtype=DTYPE)
    for i, f in enumerate(feats):
        if f.ndim != 2 or f.shape[1] != mfcc_dim:
            raise DimensionError(f"utterance {i} has shape {f.shape}, expected (T, {mfcc_dim})")
        X[i, :f.shape[0]] = f
    return X, lengths


def utterances_forward(params: ParamSet, config: ModelConfig, feats: list[np.ndarray]):
    """
    Encode a list of (T_i, mfcc_dim) arrays.

    Returns (vectors (B, H), attention {layer: (B, T')}, encoder lengths (B,), cache).
    Attention rows are zero beyond each utterance's encoder length.
    """
    k, stride = config.conv_kernel, config.conv_stride
    for i, f in enumerate(feats):
        if f.shape[0] < k:
            raise nc.InputTooShortError(f.shape[0], k, what=f"utterance {i}")
    X, lengths = pad_batch(feats, config.mfcc_dim)
    enc_lens = (lengths - k) // stride + 1
    c, conv_cache = nc.conv1d_forward(X, params.value("conv.K"), params.value("conv.b"), stride)
    relu_mask = None
    if config.conv_activation == "relu":
        relu_mask = c > 0
        c = c * relu_mask
    mask = np.arange(c.shape[1])[None, :] < enc_lens[:, None]
    x = c
    gru_caches, att = [], {}
    att_caches, ctxs = {}, []
    for layer in range(1, config.gru_layers + 1):
        x, cache = nc.gru_layer_forward(x, params.value(f"gru{layer}.W"), params.value(f"gru{layer}.U"),
                                        params.value(f"gru{layer}.b"))
        gru_caches.append(cache)
        if layer in config.attention_after_layers:
            a, ctx, acache = attention_forward(x, mask, params.value(f"att{layer}.W"),
                                               params.value(f"att{layer}.w"))
            att[layer] = a
            att_caches[layer] = acache
            ctxs.append(ctx)
    comb_fwd, _ = COMBINERS[config.combiner]
    combined = comb_fwd(ctxs)
    v, norm_cache = nc.l2_normalize_forward(combined)
    cache = (conv_cache, relu_mask, gru_caches, att_caches, ctxs, norm_cache)
    return v, att, enc_lens, cache


def utterances_backward(dv: np.ndarray, params: ParamSet, config: ModelConfig, cache) -> dict[str, np.ndarray]:
    conv_cache, relu_mask, gru_caches, att_caches, ctxs, norm_cache = cache
    grads: dict[str, np.ndarray] = {}
    dcomb = nc.l2_normalize_backward(dv, norm_cache)
    _, comb_bwd = COMBINERS[config.combiner]
    dctxs = dict(zip(config.attention_after_layers, comb_bwd(dcomb, ctxs)))
    dx = None
    for layer in range(config.gru_layers, 0, -1):
        dh = np.zeros(gru_caches[layer - 1][3].shape, dtype=DTYPE) if dx is None else dx
        if layer in dctxs:
            dha, dW, dw = attention_backward(dctxs[layer], att_caches[layer])
            dh = dh + dha
            grads[f"att{layer}.W"] = dW
            grads[f"att{layer}.w"] = dw
        dx, dW, dU, db, _ = nc.gru_layer_backward(dh, gru_caches[layer - 1])
        grads[f"gru{layer}.W"] = dW
        grads[f"gru{layer}.U"] = dU
        grads[f"gru{layer}.b"] = db
    if relu_mask is not None:
        dx = dx * relu_mask
    _, dK, dbc = nc.conv1d_backward(dx, conv_cache)
    grads["conv.K"] = dK
    grads["conv.b"] = dbc
    return grads


def encode_utterance(mfcc, params: ParamSet, config: ModelConfig) -> EncodedUtterance:
    mfcc = np.asarray(mfcc, dtype=DTYPE)
    v, att, enc_lens, _ = utterances_forward(params, config, [mfcc])
    T = int(enc_lens[0])
    return EncodedUtterance(v[0], {layer: a[0, :T].copy() for layer, a in att.items()}, T)


def encode_utterances(feats: list[np.ndarray], params: ParamSet, config: ModelConfig,
                      batch_size: int = 64, threads: int = 1) -> list[EncodedUtterance]:
    """Encode many utterances in padded chunks; chunks run on ``threads`` workers."""
    chunks = [feats[i:i + batch_size] for i in range(0, len(feats), batch_size)]

    def run(chunk):
        v, att, enc_lens, _ = utterances_forward(params, config, chunk)
        return [EncodedUtterance(v[j], {layer: a[j, :int(enc_lens[j])].copy() for layer, a in att.items()},
                                 int(enc_lens[j])) for j in range(len(chunk))]

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    return [u for part in parts for u in part]


# ---------------------------------------------------------------------------
# Distance and loss
# ---------------------------------------------------------------------------

def _vec(x) -> np.ndarray:
    return x.vector if isinstance(x, (EncodedUtterance, EncodedImage)) else np.asarray(x, dtype=DTYPE)


def distance(u, i) -> float:
    """Cosine distance 1 - <u, i> between unit vectors; lies in [0, 2]."""
    return float(1.0 - np.dot(_vec(u), _vec(i)))


def distance_matrix(U: np.ndarray, I: np.ndarray) -> np.ndarray:
    return 1.0 - U @ I.T


def contrast_mask(n: int, image_ids=None) -> np.ndarray:
    """True where member m may serve as a contrast for pair k (m != k, and different image if ids given)."""
    mask = ~np.eye(n, dtype=bool)
    if image_ids is not None:
        ids = np.asarray(image_ids)
        mask &= ids[:, None] != ids[None, :]
    return mask


def hinge_loss_from_distances(D: np.ndarray, margin: float, mask: np.ndarray | None = None):
    """
    Bidirectional ranking loss on a square distance matrix D[u, i] whose
    diagonal holds matched pairs.

        sum_k [ sum_m max(0, margin + D[k,k] - D[m,k]) + sum_m max(0, margin + D[k,k] - D[k,m]) ]

    Returns (loss, dD).
    """
    n = D.shape[0]
    if n < 1 or D.shape != (n, n):
        raise ValueError(f"loss needs a non-empty square distance matrix, got {D.shape}")
    if mask is None:
        mask = contrast_mask(n)
    diag = np.diag(D)
    # cost_u[m, k]: utterance m contrasted against image k
    cost_u = (margin + diag[None, :]) - D
    # cost_i[k, m]: image m contrasted against utterance k
    cost_i = (margin + diag[:, None]) - D
    act_u = (cost_u > 0) & mask.T
    act_i = (cost_i > 0) & mask
    loss = float(np.sum(cost_u[act_u]) + np.sum(cost_i[act_i]))
    dD = -(act_u.astype(DTYPE) + act_i.astype(DTYPE))
    dD[np.diag_indices(n)] += act_u.sum(axis=0) + act_i.sum(axis=1)
    return loss, dD


def batch_loss(U: list, I: list, margin: float, image_ids=None) -> float:
    """
    Ranking loss over aligned (utterance, image) pairs; every other batch
    member is a contrast. When ``image_ids`` is given, members showing the
    same image as the pair are not used as contrasts.
    """
    if len(U) == 0 or len(U) != len(I):
        raise ValueError(f"batch_loss needs equal, non-zero numbers of utterances and images, got {len(U)} and {len(I)}")
    Uv = np.stack([_vec(u) for u in U])
    Iv = np.stack([_vec(i) for i in I])
    loss, _ = hinge_loss_from_distances(distance_matrix(Uv, Iv), margin, contrast_mask(len(U), image_ids))
    return loss


def loss_and_grads(params: ParamSet, config: ModelConfig, feats: list[np.ndarray], images: np.ndarray,
                   image_ids=None, threads: int = 1) -> tuple[float, dict[str, np.ndarray]]:
    """
    Forward and backward pass over one batch of pairs.

    With ``threads > 1`` the speech encoder runs on contiguous shards of the
    batch in parallel and shard gradients are summed in shard order.
    """
    n = len(feats)
    Iv, img_cache = images_forward(params, np.asarray(images, dtype=DTYPE))
    if threads > 1 and n > 1:
        bounds = np.linspace(0, n, min(threads, n) + 1).astype(int)
        shards = [(bounds[j], bounds[j + 1]) for j in range(len(bounds) - 1)]
        with ThreadPoolExecutor(max_workers=threads) as ex:
            outs = list(ex.map(lambda s: utterances_forward(params, config, feats[s[0]:s[1]]), shards))
        Uv = np.concatenate([o[0] for o in outs])
    else:
        shards = None
        Uv, _, _, utt_cache = utterances_forward(params, config, feats)
    loss, dD = hinge_loss_from_distances(distance_matrix(Uv, Iv), config.margin, contrast_mask(n, image_ids))
    dU = -dD @ Iv
    dI = -dD.T @ Uv
    grads = images_backward(dI, img_cache)
    if shards is None:
        ugrads = utterances_backward(dU, params, config, utt_cache)
    else:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(lambda so: utterances_backward(dU[so[0][0]:so[0][1]], params, config, so[1][3]),
                                zip(shards, outs)))
        ugrads = nc.merge_grads(parts)
    grads.update(ugrads)
    return loss, grads


# ---------------------------------------------------------------------------
# Checkpoint format
#
#   "VGSC" | u32 version | u32 n_entries |
#   n_entries x (u32 name_len | name utf-8 | u32 rank | rank x u64 dims | f64 LE payload) |
#   u32 json_len | ModelConfig JSON (utf-8, sorted keys)
# ---------------------------------------------------------------------------

def _config_json(config: ModelConfig) -> bytes:
    return json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")


def checkpoint_bytes(config: ModelConfig, tensors: dict[str, np.ndarray]) -> bytes:
    out = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        out.append(struct.pack("<I", len(nb)))
        out.append(nb)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    cj = _config_json(config)
    out.append(struct.pack("<I", len(cj)))
    out.append(cj)
    return b"".join(out)


def parse_checkpoint(buf: bytes) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic {buf[:4]!r}")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise ValueError(f"truncated checkpoint: need {pos + n} bytes, have {len(buf)}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(8 * size), dtype="<f8").reshape(dims).astype(DTYPE)
        if name in tensors:
            raise ValueError(f"duplicate tensor {name!r} in checkpoint")
        tensors[name] = arr
    (jlen,) = struct.unpack("<I", take(4))
    config = ModelConfig.from_dict(json.loads(take(jlen).decode("utf-8")))
    if pos != len(buf):
        raise ValueError(f"{len(buf) - pos} trailing bytes in checkpoint")
    return config, tensors


def save_checkpoint(path, params: ParamSet, config: ModelConfig, extra: dict[str, np.ndarray] | None = None) -> None:
    tensors = {p.name: p.value for p in params}
    for k, v in (extra or {}).items():
        if k in tensors:
            raise KeyError(f"extra tensor {k!r} clashes with a parameter")
        tensors[k] = v
    Path(path).write_bytes(checkpoint_bytes(config, tensors))


def load_checkpoint(path) -> tuple[ParamSet, ModelConfig, dict[str, np.ndarray]]:
    """Returns (params, config, extra tensors not belonging to the model)."""
    config, tensors = parse_checkpoint(Path(path).read_bytes())
    shapes = init_params_shapes(config)
    params = ParamSet()
    for name in shapes:
        if name not in tensors:
            raise ValueError(f"checkpoint {path} lacks parameter {name}")
        params.add(Parameter(name, tensors.pop(name)))
    check_params(params, config)
    return params, config, tensors
