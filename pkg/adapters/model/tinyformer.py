"""Miniature pre-norm encoder-decoder transformer with hand-written gradients.

Everything is float64 numpy over padded integer batches. Linear maps store
weights as (out, in) and apply ``x @ W.T``; the second FF projection
``{enc,dec}.{l}.ff.w2`` is bias-free so its output is exactly W₂·key.

Tensor names:
    src_emb, tgt_emb                         embeddings (vocab, d_model)
    enc.{l}.ln1.{g,b}, enc.{l}.ln2.{g,b}     layer norms
    enc.{l}.attn.{wq,wk,wv,wo}               self-attention
    enc.{l}.ff.{w1,b1,w2}                    feed-forward (w2 is d_model × d_ff)
    enc.ln.{g,b}                             final encoder norm
    dec.{l}.ln{1,2,3}.{g,b}, dec.{l}.self.*, dec.{l}.cross.*, dec.{l}.ff.*
    dec.ln.{g,b}, out.w, out.b               final norm and vocabulary projection
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np

from domain.editor_core import accumulate_keys
from domain.errors import (
    DimensionError,
    InputError,
    NonFiniteError,
    RangeError,
    StaleCacheError,
    TrainingDivergenceError,
    VocabularyError,
)
from domain.models import KeyStatistics, ProbeRecord, Stack, TransformerConfig

logger = logging.getLogger(__name__)

PAD_ID, BOS_ID, EOS_ID = 0, 1, 2
LN_EPS = 1e-5
NEG_INF = -1e9
KEY_CHUNK = 256


def tensor_shapes(config: TransformerConfig) -> dict[str, tuple[int, ...]]:
    d, f = config.d_model, config.d_ff
    shapes: dict[str, tuple[int, ...]] = {
        "src_emb": (config.vocab_src, d),
        "tgt_emb": (config.vocab_tgt, d),
    }

    def ff(prefix: str):
        shapes[prefix + "ff.w1"] = (f, d)
        shapes[prefix + "ff.b1"] = (f,)
        shapes[prefix + "ff.w2"] = (d, f)

    def norm(name: str):
        shapes[name + ".g"] = (d,)
        shapes[name + ".b"] = (d,)

    def attn(prefix: str):
        for w in ("wq", "wk", "wv", "wo"):
            shapes[f"{prefix}.{w}"] = (d, d)

    for l in range(config.n_enc_layers):
        pre = f"enc.{l}."
        norm(pre + "ln1")
        attn(pre + "attn")
        norm(pre + "ln2")
        ff(pre)
    norm("enc.ln")
    for l in range(config.n_dec_layers):
        pre = f"dec.{l}."
        norm(pre + "ln1")
        attn(pre + "self")
        norm(pre + "ln2")
        attn(pre + "cross")
        norm(pre + "ln3")
        ff(pre)
    norm("dec.ln")
    shapes["out.w"] = (config.vocab_tgt, d)
    shapes["out.b"] = (config.vocab_tgt,)
    return shapes


def ff_weight_name(layer_index: int, stack: Stack = Stack.ENCODER) -> str:
    return f"{stack.value}.{layer_index}.ff.w2"


def _freeze(arr) -> np.ndarray:
    if isinstance(arr, np.ndarray) and arr.dtype == np.float64 and not arr.flags.writeable:
        return arr
    out = np.array(arr, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class ModelParams:
    config: TransformerConfig
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        shapes = tensor_shapes(self.config)
        if set(shapes) != set(self.tensors):
            missing = sorted(set(shapes) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(shapes))
            raise DimensionError(f"tensor set mismatch: missing {missing}, unexpected {extra}")
        frozen = {}
        for name, shape in shapes.items():
            arr = _freeze(self.tensors[name])
            if arr.shape != shape:
                raise DimensionError(f"{name}: expected {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise NonFiniteError(f"{name} contains NaN or Inf")
            frozen[name] = arr
        object.__setattr__(self, "tensors", frozen)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    @cached_property
    def digest(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        for name in sorted(self.tensors):
            h.update(name.encode())
            h.update(self.tensors[name].tobytes())
        return h.hexdigest()


def init_model(config: TransformerConfig) -> ModelParams:
    rng = np.random.default_rng(config.seed)
    tensors = {}
    for name, shape in tensor_shapes(config).items():
        if len(shape) == 2:
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            tensors[name] = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(".g"):
            tensors[name] = np.ones(shape)
        else:
            tensors[name] = np.zeros(shape)
    return ModelParams(config, tensors)


def positional_encoding(max_len: int, d_model: int) -> np.ndarray:
    pe = np.zeros((max_len, d_model))
    position = np.arange(max_len)[:, np.newaxis]
    div_term = np.exp(np.arange(0, d_model, 2) * -(np.log(10000.0) / d_model))
    pe[:, 0::2] = np.sin(position * div_term)
    pe[:, 1::2] = np.cos(position * div_term[: d_model // 2])
    return pe


# ------------------------------------------------------------------ batching


@dataclass(frozen=True)
class Batch:
    src: np.ndarray  # (B, S) ids, source + EOS, PAD-filled
    src_mask: np.ndarray  # (B, S) True on real tokens
    tgt_in: Optional[np.ndarray] = None  # (B, T) BOS + target
    tgt_out: Optional[np.ndarray] = None  # (B, T) target + EOS
    tgt_mask: Optional[np.ndarray] = None


def _pad(rows: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(r) for r in rows)
    ids = np.full((len(rows), width), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(rows), width), dtype=bool)
    for i, r in enumerate(rows):
        ids[i, : len(r)] = r
        mask[i, : len(r)] = True
    return ids, mask


def make_batch(
    config: TransformerConfig,
    sources: Sequence[Sequence[int]],
    targets: Optional[Sequence[Sequence[int]]] = None,
) -> Batch:
    if not sources:
        raise InputError("empty batch")
    for src in sources:
        _check_ids(src, config.vocab_src, "source")
        if len(src) + 1 > config.max_len:
            raise InputError(f"source of length {len(src)} exceeds max_len {config.max_len}")
    src, src_mask = _pad([list(s) + [EOS_ID] for s in sources])
    if targets is None:
        return Batch(src, src_mask)
    if len(targets) != len(sources):
        raise InputError("sources and targets differ in count")
    for tgt in targets:
        _check_ids(tgt, config.vocab_tgt, "target")
        if len(tgt) + 1 > config.max_len:
            raise InputError(f"target of length {len(tgt)} exceeds max_len {config.max_len}")
    tgt_in, tgt_mask = _pad([[BOS_ID] + list(t) for t in targets])
    tgt_out, _ = _pad([list(t) + [EOS_ID] for t in targets])
    return Batch(src, src_mask, tgt_in, tgt_out, tgt_mask)


def _check_ids(ids: Sequence[int], vocab: int, side: str):
    for i in ids:
        if not 0 <= i < vocab:
            raise VocabularyError(f"{side} token id {i} outside vocabulary of {vocab}")


# -------------------------------------------------------------- primitives


def _weight_grad(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dy.reshape(-1, dy.shape[-1]).T @ x.reshape(-1, x.shape[-1])


def _layer_norm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    var = x.var(-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * rstd
    return xhat * g + b, (xhat, rstd, g)


def _layer_norm_backward(dy, cache):
    xhat, rstd, g = cache
    axes = tuple(range(dy.ndim - 1))
    dg = np.sum(dy * xhat, axis=axes)
    db = np.sum(dy, axis=axes)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, dg, db


def _split_heads(x, n_heads):
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dk)


def _attention(q_in, kv_in, w, allowed, n_heads):
    """Multi-head scaled dot-product attention; ``allowed`` is (B, Tq, Tk)."""
    wq, wk, wv, wo = w
    q = _split_heads(q_in @ wq.T, n_heads)
    k = _split_heads(kv_in @ wk.T, n_heads)
    v = _split_heads(kv_in @ wv.T, n_heads)
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = (q @ k.transpose(0, 1, 3, 2)) * scale
    scores = np.where(allowed[:, None], scores, NEG_INF)
    scores = scores - scores.max(-1, keepdims=True)
    a = np.exp(scores)
    a /= a.sum(-1, keepdims=True)
    ctx = _merge_heads(a @ v)
    return ctx @ wo.T, (q_in, kv_in, q, k, v, a, ctx, scale)


def _attention_backward(dout, cache, w, n_heads):
    wq, wk, wv, wo = w
    q_in, kv_in, q, k, v, a, ctx, scale = cache
    dwo = _weight_grad(dout, ctx)
    dctx = _split_heads(dout @ wo, n_heads)
    da = dctx @ v.transpose(0, 1, 3, 2)
    dv = a.transpose(0, 1, 3, 2) @ dctx
    ds = a * (da - (da * a).sum(-1, keepdims=True)) * scale
    dq = _merge_heads(ds @ k)
    dk = _merge_heads(ds.transpose(0, 1, 3, 2) @ q)
    dv = _merge_heads(dv)
    grads = (_weight_grad(dq, q_in), _weight_grad(dk, kv_in), _weight_grad(dv, kv_in), dwo)
    return dq @ wq, dk @ wk + dv @ wv, grads


def _feed_forward(x, w1, b1, w2):
    z = x @ w1.T + b1
    key = np.maximum(z, 0.0)
    value = key @ w2.T
    return value, (x, z, key)


def _feed_forward_backward(dvalue, cache, w1, w2):
    x, z, key = cache
    dw2 = _weight_grad(dvalue, key)
    dz = (dvalue @ w2) * (z > 0)
    dw1 = _weight_grad(dz, x)
    db1 = dz.reshape(-1, dz.shape[-1]).sum(0)
    return dz @ w1, dw1, db1, dw2


def _attn_weights(params: ModelParams, prefix: str):
    return tuple(params[f"{prefix}.{w}"] for w in ("wq", "wk", "wv", "wo"))


# ------------------------------------------------------------------ forward


@dataclass
class EncoderState:
    memory: np.ndarray
    src_mask: np.ndarray
    embedded: np.ndarray
    layers: list = field(default_factory=list)
    ln_cache: tuple = ()
    streams: list = field(default_factory=list)  # per layer, the residual entering FF


def _encode(params: ModelParams, src: np.ndarray, src_mask: np.ndarray) -> EncoderState:
    cfg = params.config
    s = src.shape[1]
    x = params["src_emb"][src] + positional_encoding(cfg.max_len, cfg.d_model)[:s]
    embedded = x
    allowed = np.broadcast_to(src_mask[:, None, :], (src.shape[0], s, s))
    layers, streams = [], []
    for l in range(cfg.n_enc_layers):
        pre = f"enc.{l}."
        h1, c1 = _layer_norm(x, params[pre + "ln1.g"], params[pre + "ln1.b"])
        a, ca = _attention(h1, h1, _attn_weights(params, pre + "attn"), allowed, cfg.n_heads)
        x = x + a
        streams.append(x)
        h2, c2 = _layer_norm(x, params[pre + "ln2.g"], params[pre + "ln2.b"])
        value, cf = _feed_forward(h2, params[pre + "ff.w1"], params[pre + "ff.b1"], params[pre + "ff.w2"])
        x = x + value
        layers.append((c1, ca, c2, cf, value))
    memory, ln_cache = _layer_norm(x, params["enc.ln.g"], params["enc.ln.b"])
    return EncoderState(memory, src_mask, embedded, layers, ln_cache, streams)


@dataclass
class DecoderState:
    logits: np.ndarray
    hidden: np.ndarray
    layers: list = field(default_factory=list)
    ln_cache: tuple = ()
    streams: list = field(default_factory=list)  # per layer, the residual entering FF


def _decode(params: ModelParams, enc: EncoderState, tgt_in: np.ndarray, tgt_mask: np.ndarray) -> DecoderState:
    cfg = params.config
    b, t = tgt_in.shape
    s = enc.memory.shape[1]
    y = params["tgt_emb"][tgt_in] + positional_encoding(cfg.max_len, cfg.d_model)[:t]
    causal = np.tril(np.ones((t, t), dtype=bool))
    self_allowed = causal[None] & tgt_mask[:, None, :]
    cross_allowed = np.broadcast_to(enc.src_mask[:, None, :], (b, t, s))
    layers, streams = [], []
    for l in range(cfg.n_dec_layers):
        pre = f"dec.{l}."
        h1, c1 = _layer_norm(y, params[pre + "ln1.g"], params[pre + "ln1.b"])
        a1, ca1 = _attention(h1, h1, _attn_weights(params, pre + "self"), self_allowed, cfg.n_heads)
        y = y + a1
        h2, c2 = _layer_norm(y, params[pre + "ln2.g"], params[pre + "ln2.b"])
        a2, ca2 = _attention(h2, enc.memory, _attn_weights(params, pre + "cross"), cross_allowed, cfg.n_heads)
        y = y + a2
        streams.append(y)
        h3, c3 = _layer_norm(y, params[pre + "ln3.g"], params[pre + "ln3.b"])
        value, cf = _feed_forward(h3, params[pre + "ff.w1"], params[pre + "ff.b1"], params[pre + "ff.w2"])
        y = y + value
        layers.append((c1, ca1, c2, ca2, c3, cf, value))
    hidden, ln_cache = _layer_norm(y, params["dec.ln.g"], params["dec.ln.b"])
    logits = hidden @ params["out.w"].T + params["out.b"]
    return DecoderState(logits, hidden, layers, ln_cache, streams)


@dataclass
class ForwardCache:
    digest: str
    batch: Batch
    encoder: EncoderState
    decoder: DecoderState
    dlogits: np.ndarray


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(-1, keepdims=True))


def forward_loss(params: ModelParams, batch: Batch) -> tuple[float, ForwardCache]:
    """Mean teacher-forced token NLL over every real target position."""
    if batch.tgt_in is None:
        raise InputError("forward_loss needs targets")
    enc = _encode(params, batch.src, batch.src_mask)
    dec = _decode(params, enc, batch.tgt_in, batch.tgt_mask)
    logp = _log_softmax(dec.logits)
    valid = batch.tgt_mask.astype(np.float64)
    n_tokens = valid.sum()
    picked = np.take_along_axis(logp, batch.tgt_out[..., None], axis=-1)[..., 0]
    loss = float(-(picked * valid).sum() / n_tokens)

    dlogits = np.exp(logp)
    np.put_along_axis(
        dlogits,
        batch.tgt_out[..., None],
        np.take_along_axis(dlogits, batch.tgt_out[..., None], axis=-1) - 1.0,
        axis=-1,
    )
    dlogits *= (valid / n_tokens)[..., None]
    return loss, ForwardCache(params.digest, batch, enc, dec, dlogits)


# ----------------------------------------------------------------- backward


def backward(params: ModelParams, cache: ForwardCache) -> dict[str, np.ndarray]:
    if cache.digest != params.digest:
        raise StaleCacheError("parameters changed since the forward pass")
    cfg = params.config
    grads = {name: np.zeros_like(arr) for name, arr in params.tensors.items()}
    batch, enc, dec = cache.batch, cache.encoder, cache.decoder

    grads["out.w"] = _weight_grad(cache.dlogits, dec.hidden)
    grads["out.b"] = cache.dlogits.reshape(-1, cfg.vocab_tgt).sum(0)
    dy, grads["dec.ln.g"], grads["dec.ln.b"] = _layer_norm_backward(cache.dlogits @ params["out.w"], dec.ln_cache)

    dmemory = np.zeros_like(enc.memory)
    for l in reversed(range(cfg.n_dec_layers)):
        pre = f"dec.{l}."
        c1, ca1, c2, ca2, c3, cf, _ = dec.layers[l]
        dh3, grads[pre + "ff.w1"], grads[pre + "ff.b1"], grads[pre + "ff.w2"] = _feed_forward_backward(
            dy, cf, params[pre + "ff.w1"], params[pre + "ff.w2"]
        )
        dx, grads[pre + "ln3.g"], grads[pre + "ln3.b"] = _layer_norm_backward(dh3, c3)
        dy = dy + dx

        dq, dkv, gw = _attention_backward(dy, ca2, _attn_weights(params, pre + "cross"), cfg.n_heads)
        for w, gwi in zip(("wq", "wk", "wv", "wo"), gw):
            grads[f"{pre}cross.{w}"] = gwi
        dmemory += dkv
        dx, grads[pre + "ln2.g"], grads[pre + "ln2.b"] = _layer_norm_backward(dq, c2)
        dy = dy + dx

        dq, dkv, gw = _attention_backward(dy, ca1, _attn_weights(params, pre + "self"), cfg.n_heads)
        for w, gwi in zip(("wq", "wk", "wv", "wo"), gw):
            grads[f"{pre}self.{w}"] = gwi
        dx, grads[pre + "ln1.g"], grads[pre + "ln1.b"] = _layer_norm_backward(dq + dkv, c1)
        dy = dy + dx
    np.add.at(grads["tgt_emb"], batch.tgt_in, dy)

    dx, grads["enc.ln.g"], grads["enc.ln.b"] = _layer_norm_backward(dmemory, enc.ln_cache)
    for l in reversed(range(cfg.n_enc_layers)):
        pre = f"enc.{l}."
        c1, ca, c2, cf, _ = enc.layers[l]
        dh2, grads[pre + "ff.w1"], grads[pre + "ff.b1"], grads[pre + "ff.w2"] = _feed_forward_backward(
            dx, cf, params[pre + "ff.w1"], params[pre + "ff.w2"]
        )
        d, grads[pre + "ln2.g"], grads[pre + "ln2.b"] = _layer_norm_backward(dh2, c2)
        dx = dx + d

        dq, dkv, gw = _attention_backward(dx, ca, _attn_weights(params, pre + "attn"), cfg.n_heads)
        for w, gwi in zip(("wq", "wk", "wv", "wo"), gw):
            grads[f"{pre}attn.{w}"] = gwi
        d, grads[pre + "ln1.g"], grads[pre + "ln1.b"] = _layer_norm_backward(dq + dkv, c1)
        dx = dx + d
    np.add.at(grads["src_emb"], batch.src, dx)
    return grads


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def sgd_step(params: ModelParams, grads: dict[str, np.ndarray], lr: float, clip_norm: float = 1.0) -> ModelParams:
    if not lr > 0:
        raise RangeError(f"learning rate must be positive, got {lr}")
    norm = global_norm(grads)
    if not np.isfinite(norm):
        raise TrainingDivergenceError("non-finite gradient")
    scale = clip_norm / norm if clip_norm and norm > clip_norm else 1.0
    tensors = {name: arr - (lr * scale) * grads[name] for name, arr in params.tensors.items()}
    return ModelParams(params.config, tensors)


def token_accuracy(params: ModelParams, batch: Batch) -> tuple[int, int]:
    """(correct, total) argmax predictions under teacher forcing."""
    enc = _encode(params, batch.src, batch.src_mask)
    dec = _decode(params, enc, batch.tgt_in, batch.tgt_mask)
    pred = dec.logits.argmax(-1)
    correct = int(((pred == batch.tgt_out) & batch.tgt_mask).sum())
    return correct, int(batch.tgt_mask.sum())


# ----------------------------------------------------------------- decoding


def greedy_decode_batch(
    params: ModelParams, sources: Sequence[Sequence[int]], max_steps: int
) -> list[tuple[list[int], bool]]:
    """Argmax decoding; ties go to the lowest id (first maximum)."""
    cfg = params.config
    if max_steps > cfg.max_len:
        raise RangeError(f"max_steps {max_steps} exceeds max_len {cfg.max_len}")
    if max_steps <= 0:
        return [([], True) for _ in sources]
    batch = make_batch(cfg, sources)
    enc = _encode(params, batch.src, batch.src_mask)
    n = len(sources)
    ys = np.full((n, 1), BOS_ID, dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    for _ in range(max_steps):
        dec = _decode(params, enc, ys, np.ones_like(ys, dtype=bool))
        nxt = dec.logits[:, -1].argmax(-1)
        nxt = np.where(done, PAD_ID, nxt)
        ys = np.concatenate([ys, nxt[:, None]], axis=1)
        done |= nxt == EOS_ID
        if done.all():
            break
    out = []
    for row in ys[:, 1:]:
        ids = row.tolist()
        if EOS_ID in ids:
            out.append((ids[: ids.index(EOS_ID)], False))
        else:
            out.append((ids, True))
    return out


def greedy_decode(params: ModelParams, source: Sequence[int], max_steps: int) -> tuple[list[int], bool]:
    return greedy_decode_batch(params, [source], max_steps)[0]


# ------------------------------------------------------------------- probes


def probe_ff(params: ModelParams, source: Sequence[int], layer_index: int, token_position: int) -> ProbeRecord:
    cfg = params.config
    if not 0 <= layer_index < cfg.n_enc_layers:
        raise RangeError(f"encoder layer {layer_index} out of range")
    if not 0 <= token_position < len(source):
        raise RangeError(f"token position {token_position} out of range for length {len(source)}")
    batch = make_batch(cfg, [source])
    enc = _encode(params, batch.src, batch.src_mask)
    _, _, _, (_, _, key), value = enc.layers[layer_index]
    residual = enc.streams[layer_index][0, token_position] - positional_encoding(cfg.max_len, cfg.d_model)[token_position]
    return ProbeRecord(
        layer_index, token_position, key[0, token_position].copy(), value[0, token_position].copy(), residual
    )


def probe_decoder_ff(
    params: ModelParams, source: Sequence[int], target_prefix: Sequence[int], layer_index: int
) -> ProbeRecord:
    """Decoder FF key/value at the step that predicts the token after ``target_prefix``."""
    cfg = params.config
    if not 0 <= layer_index < cfg.n_dec_layers:
        raise RangeError(f"decoder layer {layer_index} out of range")
    batch = make_batch(cfg, [source], [list(target_prefix)])
    enc = _encode(params, batch.src, batch.src_mask)
    dec = _decode(params, enc, batch.tgt_in, batch.tgt_mask)
    _, _, _, _, _, (_, _, key), value = dec.layers[layer_index]
    pos = len(target_prefix)
    residual = dec.streams[layer_index][0, pos] - positional_encoding(cfg.max_len, cfg.d_model)[pos]
    return ProbeRecord(layer_index, pos, key[0, pos].copy(), value[0, pos].copy(), residual)


def sample_key_positions(lengths: Sequence[int], budget: int, seed: int) -> np.ndarray:
    """``budget`` (sentence, position) rows drawn uniformly over all token positions."""
    if budget < 1:
        raise RangeError("key budget must be at least 1")
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.size == 0 or lengths.sum() == 0:
        raise InputError("key corpus is empty")
    ends = np.cumsum(lengths)
    flat = np.random.default_rng(seed).integers(0, ends[-1], size=budget)
    sentence = np.searchsorted(ends, flat, side="right")
    position = flat - (ends[sentence] - lengths[sentence])
    return np.stack([sentence, position], axis=1)


def _layer_count(config: TransformerConfig, stack: Stack) -> int:
    return config.n_enc_layers if stack is Stack.ENCODER else config.n_dec_layers


def keys_at(
    params: ModelParams,
    sources: Sequence[Sequence[int]],
    layer_index: int,
    positions: np.ndarray,
    stack: Stack = Stack.ENCODER,
    targets: Optional[Sequence[Sequence[int]]] = None,
) -> np.ndarray:
    """FF keys at (sentence, position) rows; decoder positions index BOS + target."""
    cfg = params.config
    if not 0 <= layer_index < _layer_count(cfg, stack):
        raise RangeError(f"{stack.value} layer {layer_index} out of range")
    if stack is Stack.DECODER and targets is None:
        raise InputError("decoder keys need targets")
    keys = np.empty((len(positions), cfg.d_ff))
    unique = np.unique(positions[:, 0])
    for start in range(0, len(unique), KEY_CHUNK):
        chunk = unique[start : start + KEY_CHUNK]
        if stack is Stack.ENCODER:
            batch = make_batch(cfg, [sources[i] for i in chunk])
            enc = _encode(params, batch.src, batch.src_mask)
            _, _, _, (_, _, layer_keys), _ = enc.layers[layer_index]
        else:
            batch = make_batch(cfg, [sources[i] for i in chunk], [targets[i] for i in chunk])
            enc = _encode(params, batch.src, batch.src_mask)
            dec = _decode(params, enc, batch.tgt_in, batch.tgt_mask)
            _, _, _, _, _, (_, _, layer_keys), _ = dec.layers[layer_index]
        row_of = {int(s): r for r, s in enumerate(chunk)}
        sel = np.isin(positions[:, 0], chunk)
        rows = np.array([row_of[int(s)] for s in positions[sel, 0]], dtype=np.int64)
        keys[sel] = layer_keys[rows, positions[sel, 1]]
    return keys


def collect_keys(
    params: ModelParams,
    sources: Sequence[Sequence[int]],
    layer_index: int,
    budget: int,
    seed: int,
    ridge: Optional[float] = None,
    stack: Stack = Stack.ENCODER,
    targets: Optional[Sequence[Sequence[int]]] = None,
) -> KeyStatistics:
    if stack is Stack.ENCODER:
        lengths = [len(s) for s in sources]
    else:
        if targets is None:
            raise InputError("decoder keys need targets")
        lengths = [len(t) + 1 for t in targets]
    positions = sample_key_positions(lengths, budget, seed)
    keys = keys_at(params, sources, layer_index, positions, stack, targets)
    logger.debug("collected %d keys at %s layer %d from %d sentences", budget, stack.value, layer_index, len(sources))
    return accumulate_keys(KeyStatistics.empty(params.config.d_ff, ridge), keys)


def swap_ff_weight(
    params: ModelParams, layer_index: int, new_weights: np.ndarray, stack: Stack = Stack.ENCODER
) -> ModelParams:
    cfg = params.config
    n_layers = cfg.n_enc_layers if stack is Stack.ENCODER else cfg.n_dec_layers
    if not 0 <= layer_index < n_layers:
        raise RangeError(f"{stack.value} layer {layer_index} out of range")
    new_weights = np.asarray(new_weights, dtype=np.float64)
    if new_weights.shape != (cfg.d_model, cfg.d_ff):
        raise DimensionError(f"expected ({cfg.d_model}, {cfg.d_ff}), got {new_weights.shape}")
    tensors = dict(params.tensors)
    tensors[ff_weight_name(layer_index, stack)] = new_weights
    return ModelParams(cfg, tensors)
