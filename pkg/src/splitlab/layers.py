"""Attention, position-wise FFN and the Transformer / Macaron layer kinds.

Shapes follow the row-vector convention: a sequence is an ``n x d_model``
array (or ``batch x n x d_model``), projections are ``x @ W``.

Layer kinds
-----------
``transformer``          x~ = x + MHA(x);  out = x~ + FFN(x~)
``macaron``              x~ = x + ½ FFN_down(x);  x^ = x~ + MHA(x~);  out = x^ + ½ FFN_up(x^)
``macaron-decoder``      ½ FFN_down, causal MHA, encoder-decoder MHA, ½ FFN_up
``transformer-decoder``  causal MHA, encoder-decoder MHA, FFN
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Optional

import numpy as np

from .tensor import ContractError, DimensionError, Tensor, as_tensor, concat, glorot_init

KINDS = ("transformer", "macaron", "macaron-decoder", "transformer-decoder")
ACTIVATIONS = ("relu", "linear", "tanh")
HALF = 0.5


@dataclass
class AttentionParams:
    query: list[Tensor]
    key: list[Tensor]
    value: list[Tensor]
    output: Tensor

    @property
    def heads(self) -> int:
        return len(self.query)

    @property
    def d_model(self) -> int:
        return self.output.shape[1]

    def named(self, prefix: str) -> list[tuple[str, Tensor]]:
        out = []
        for k in range(self.heads):
            out += [(f"{prefix}.query.{k}", self.query[k]),
                    (f"{prefix}.key.{k}", self.key[k]),
                    (f"{prefix}.value.{k}", self.value[k])]
        out.append((f"{prefix}.output", self.output))
        return out


@dataclass
class FFNParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    activation: str = "relu"

    @property
    def d_ff(self) -> int:
        return self.w1.shape[1]

    def named(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [(f"{prefix}.w1", self.w1), (f"{prefix}.b1", self.b1),
                (f"{prefix}.w2", self.w2), (f"{prefix}.b2", self.b2)]


@dataclass
class NormParams:
    gain: Tensor
    bias: Tensor

    def named(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [(f"{prefix}.gain", self.gain), (f"{prefix}.bias", self.bias)]


@dataclass
class LayerParams:
    kind: str
    attention: AttentionParams
    ffn: Optional[FFNParams] = None
    ffn_down: Optional[FFNParams] = None
    ffn_up: Optional[FFNParams] = None
    cross_attention: Optional[AttentionParams] = None
    # one entry per sublayer, in application order; empty means no layer norm
    norms: list[NormParams] = field(default_factory=list)

    @property
    def d_model(self) -> int:
        return self.attention.d_model

    @property
    def heads(self) -> int:
        return self.attention.heads

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = self.attention.named("attention")
        if self.cross_attention is not None:
            out += self.cross_attention.named("cross_attention")
        for name in ("ffn", "ffn_down", "ffn_up"):
            sub = getattr(self, name)
            if sub is not None:
                out += sub.named(name)
        for k, nrm in enumerate(self.norms):
            out += nrm.named(f"norm{k}")
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]


@dataclass(frozen=True)
class AttentionWeights:
    """Per-head softmax weights (row i: distribution of position i) and raw scores."""
    weights: list[np.ndarray]
    scores: list[np.ndarray]


# ---------------------------------------------------------------- initialisation


def _check_heads(d_model: int, heads: int) -> int:
    if heads < 1 or d_model % heads:
        raise DimensionError(f"heads={heads} must divide d_model={d_model}")
    return d_model // heads


def init_attention(d_model: int, heads: int, rng: np.random.Generator) -> AttentionParams:
    dk = _check_heads(d_model, heads)
    q, k, v = [], [], []
    for _ in range(heads):
        q.append(Tensor(glorot_init(d_model, dk, rng), requires_grad=True))
        k.append(Tensor(glorot_init(d_model, dk, rng), requires_grad=True))
        v.append(Tensor(glorot_init(d_model, dk, rng), requires_grad=True))
    out = Tensor(glorot_init(heads * dk, d_model, rng), requires_grad=True)
    return AttentionParams(q, k, v, out)


def init_ffn(d_model: int, d_ff: int, rng: np.random.Generator, activation: str = "relu",
             bias_scale: float = 0.0) -> FFNParams:
    if d_ff < 1:
        raise ContractError("d_ff must be at least 1")
    if activation not in ACTIVATIONS:
        raise ContractError(f"unknown activation {activation!r}")
    w1 = glorot_init(d_model, d_ff, rng)
    w2 = glorot_init(d_ff, d_model, rng)
    b1 = rng.uniform(-bias_scale, bias_scale, (1, d_ff)) if bias_scale else np.zeros((1, d_ff))
    b2 = rng.uniform(-bias_scale, bias_scale, (1, d_model)) if bias_scale else np.zeros((1, d_model))
    return FFNParams(*(Tensor(a, requires_grad=True) for a in (w1, b1, w2, b2)), activation=activation)


def _init_norm(d_model: int) -> NormParams:
    return NormParams(Tensor(np.ones((1, d_model)), requires_grad=True),
                      Tensor(np.zeros((1, d_model)), requires_grad=True))


def default_d_ff(kind: str, d_model: int) -> int:
    """Inner FFN width: 4 d_model for one FFN, 2 d_model for each of two."""
    return 2 * d_model if kind.startswith("macaron") else 4 * d_model


def init_layer(kind: str, d_model: int, heads: int, rng: np.random.Generator, d_ff: Optional[int] = None,
               activation: str = "relu", layer_norm: bool = False, bias_scale: float = 0.0) -> LayerParams:
    if kind not in KINDS:
        raise ContractError(f"unknown layer kind {kind!r}; expected one of {KINDS}")
    d_ff = default_d_ff(kind, d_model) if d_ff is None else d_ff
    attention = init_attention(d_model, heads, rng)
    params = LayerParams(kind, attention)
    if kind.endswith("decoder"):
        params.cross_attention = init_attention(d_model, heads, rng)
    if kind.startswith("macaron"):
        params.ffn_down = init_ffn(d_model, d_ff, rng, activation, bias_scale)
        params.ffn_up = init_ffn(d_model, d_ff, rng, activation, bias_scale)
    else:
        params.ffn = init_ffn(d_model, d_ff, rng, activation, bias_scale)
    if layer_norm:
        params.norms = [_init_norm(d_model) for _ in range(_sublayer_count(kind))]
    return params


def _sublayer_count(kind: str) -> int:
    return {"transformer": 2, "macaron": 3, "macaron-decoder": 4, "transformer-decoder": 3}[kind]


def zero_like(params: LayerParams) -> LayerParams:
    """Copy of ``params`` with every weight and bias set to zero (norms kept)."""
    clone = clone_params(params)
    for name, p in clone.named_parameters():
        if not name.startswith("norm"):
            p.data = np.zeros_like(p.data)
    return clone


def clone_params(params: LayerParams) -> LayerParams:
    named = params.named_parameters()
    return _rebuild(params.kind, [(n, p.data.copy()) for n, p in named], _activation(params))


def _activation(params: LayerParams) -> str:
    sub = params.ffn or params.ffn_down
    return sub.activation


# ---------------------------------------------------------------- forward passes


def causal_mask(n: int) -> np.ndarray:
    """Boolean ``n x n`` mask, True where position i may attend to j (j <= i)."""
    return np.tril(np.ones((n, n), dtype=bool))


def _additive(mask: Optional[np.ndarray], n_q: int, n_k: int) -> Optional[np.ndarray]:
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    if mask.shape[-2:] != (n_q, n_k):
        raise DimensionError(f"mask shape {mask.shape} does not match scores ({n_q}, {n_k})")
    return np.where(mask, 0.0, -np.inf)


def scaled_dot_attention(q, k, v, mask: Optional[np.ndarray] = None,
                         d_model: Optional[int] = None) -> tuple[Tensor, AttentionWeights]:
    """softmax(q kᵀ / sqrt(d_model)) v.

    ``d_model`` defaults to the width of ``q``. Masked-out entries get a score
    of -inf before the softmax.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention shapes q{q.shape} k{k.shape} v{v.shape} do not conform")
    d_model = q.shape[-1] if d_model is None else d_model
    scores = (q @ k.T) * (1.0 / np.sqrt(d_model))
    add = _additive(mask, q.shape[-2], k.shape[-2])
    if add is not None:
        scores = scores + add
    weights = scores.softmax()
    return weights @ v, AttentionWeights([weights.data], [scores.data])


def _key_order(src: np.ndarray) -> tuple:
    """Index tuple sorting the rows of ``src`` (per leading batch index) lexicographically."""
    perm = np.lexsort(np.moveaxis(src, -1, 0)[::-1], axis=-1)
    lead = np.indices(src.shape[:-1], sparse=True)[:-1]
    return (*lead, perm)


def multi_head_attention(x, params: AttentionParams, kv=None, mask: Optional[np.ndarray] = None,
                         return_weights: bool = False):
    """Concat(head_1..head_H) W^O; self-attention unless ``kv`` is given. No residual."""
    x = as_tensor(x)
    src = x if kv is None else as_tensor(kv)
    d_model = params.d_model
    if x.shape[-1] != d_model or src.shape[-1] != d_model:
        raise DimensionError(f"inputs {x.shape}, {src.shape} do not match d_model={d_model}")
    inverse = None
    if mask is None:
        # Keys in content order: reductions over keys then do not depend on how
        # the rows were ordered, so permuting rows permutes the output exactly.
        order = _key_order(src.data)
        src = src[order]
        inverse = np.argsort(order[-1], axis=-1)[..., None, :]
    heads, ws, ss = [], [], []
    for wq, wk, wv in zip(params.query, params.key, params.value):
        out, aw = scaled_dot_attention(x @ wq, src @ wk, src @ wv, mask, d_model=d_model)
        heads.append(out)
        if inverse is not None:
            aw = AttentionWeights([np.take_along_axis(a, np.broadcast_to(inverse, a.shape), -1) for a in aw.weights],
                                  [np.take_along_axis(a, np.broadcast_to(inverse, a.shape), -1) for a in aw.scores])
        ws += aw.weights
        ss += aw.scores
    joined = heads[0] if len(heads) == 1 else concat(heads, axis=-1)
    result = joined @ params.output
    if return_weights:
        return result, AttentionWeights(ws, ss)
    return result


def _activate(h: Tensor, activation: str) -> Tensor:
    if activation == "relu":
        return h.relu()
    if activation == "tanh":
        return h.tanh()
    return h


def ffn_forward(x, params: FFNParams) -> Tensor:
    """σ(x W1 + b1) W2 + b2, row by row."""
    x = as_tensor(x)
    if x.shape[-1] != params.w1.shape[0]:
        raise DimensionError(f"input width {x.shape[-1]} does not match W1 {params.w1.shape}")
    h = _activate(x @ params.w1 + params.b1, params.activation)
    return h @ params.w2 + params.b2


def layer_norm(x: Tensor, params: NormParams, eps: float = 1e-5) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / (var + eps).sqrt() * params.gain + params.bias


def _normed(x: Tensor, params: LayerParams, k: int) -> Tensor:
    return layer_norm(x, params.norms[k]) if params.norms else x


def _require(params: LayerParams, kind: str) -> None:
    if params.kind != kind:
        raise ContractError(f"expected {kind!r} layer parameters, got {params.kind!r}")


# Sublayers, exposed so the ODE view can reuse the exact same computations.

def attention_sublayer(x, params: LayerParams, k: int, mask=None) -> Tensor:
    x = as_tensor(x)
    return multi_head_attention(_normed(x, params, k), params.attention, mask=mask)


def cross_sublayer(x, params: LayerParams, k: int, memory) -> Tensor:
    x = as_tensor(x)
    return multi_head_attention(_normed(x, params, k), params.cross_attention, kv=memory)


def ffn_sublayer(x, params: LayerParams, which: str, k: int) -> Tensor:
    x = as_tensor(x)
    return ffn_forward(_normed(x, params, k), getattr(params, which))


def transformer_layer_forward(x, params: LayerParams, mask: Optional[np.ndarray] = None) -> Tensor:
    _require(params, "transformer")
    x = as_tensor(x)
    h = x + attention_sublayer(x, params, 0, mask)
    return h + ffn_sublayer(h, params, "ffn", 1)


def macaron_layer_forward(x, params: LayerParams, mask: Optional[np.ndarray] = None) -> Tensor:
    _require(params, "macaron")
    x = as_tensor(x)
    h = x + HALF * ffn_sublayer(x, params, "ffn_down", 0)
    h = h + attention_sublayer(h, params, 1, mask)
    return h + HALF * ffn_sublayer(h, params, "ffn_up", 2)


def macaron_decoder_layer_forward(x, params: LayerParams, encoder_output,
                                  self_mask: Optional[np.ndarray] = None) -> Tensor:
    """FFN (half step), causal self-attention, encoder-decoder attention, FFN (half step).

    ``self_mask`` defaults to the causal mask for the sequence length.
    """
    _require(params, "macaron-decoder")
    if encoder_output is None:
        raise ContractError("decoder layer needs the encoder output")
    x = as_tensor(x)
    mask = causal_mask(x.shape[-2]) if self_mask is None else self_mask
    h = x + HALF * ffn_sublayer(x, params, "ffn_down", 0)
    h = h + attention_sublayer(h, params, 1, mask)
    h = h + cross_sublayer(h, params, 2, encoder_output)
    return h + HALF * ffn_sublayer(h, params, "ffn_up", 3)


def transformer_decoder_layer_forward(x, params: LayerParams, encoder_output,
                                      self_mask: Optional[np.ndarray] = None) -> Tensor:
    _require(params, "transformer-decoder")
    if encoder_output is None:
        raise ContractError("decoder layer needs the encoder output")
    x = as_tensor(x)
    mask = causal_mask(x.shape[-2]) if self_mask is None else self_mask
    h = x + attention_sublayer(x, params, 0, mask)
    h = h + cross_sublayer(h, params, 1, encoder_output)
    return h + ffn_sublayer(h, params, "ffn", 2)


def layer_forward(x, params: LayerParams, mask=None, encoder_output=None) -> Tensor:
    """Dispatch on ``params.kind``."""
    if params.kind == "transformer":
        return transformer_layer_forward(x, params, mask)
    if params.kind == "macaron":
        return macaron_layer_forward(x, params, mask)
    if params.kind == "macaron-decoder":
        return macaron_decoder_layer_forward(x, params, encoder_output, mask)
    return transformer_decoder_layer_forward(x, params, encoder_output, mask)


# ---------------------------------------------------------------- bookkeeping


@dataclass(frozen=True)
class ParamCount:
    total: int
    weights: int
    biases: int
    by_sublayer: dict


def param_count(params: LayerParams) -> ParamCount:
    """Exact scalar-parameter count; biases and norm parameters counted separately."""
    by_sub: dict[str, int] = {}
    weights = biases = 0
    for name, p in params.named_parameters():
        sub = name.split(".")[0]
        by_sub[sub] = by_sub.get(sub, 0) + p.data.size
        if name.endswith((".b1", ".b2")) or sub.startswith("norm"):
            biases += p.data.size
        else:
            weights += p.data.size
    return ParamCount(weights + biases, weights, biases, by_sub)


def sinusoidal_positions(n: int, d_model: int) -> np.ndarray:
    if d_model % 2:
        raise ContractError(f"d_model must be even, got {d_model}")
    pos = np.arange(n, dtype=np.float64)[:, None]
    freq = np.power(10000.0, -np.arange(0, d_model, 2, dtype=np.float64) / d_model)
    table = np.empty((n, d_model))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq)
    return table


# ---------------------------------------------------------------- serialization

_MAGIC = b"SPLP"


def save_params(params: LayerParams, fh: BinaryIO) -> None:
    """Write ``magic | u64 manifest length | JSON manifest | float64 LE data``.

    Each manifest entry gives (name, rows, cols, offset), the offset counted in
    bytes from the start of the data section.
    """
    entries, offset, blobs = [], 0, []
    for name, p in params.named_parameters():
        a = np.atleast_2d(p.data)
        entries.append({"name": name, "rows": a.shape[0], "cols": a.shape[1], "offset": offset})
        blob = a.astype("<f8").tobytes(order="C")
        blobs.append(blob)
        offset += len(blob)
    manifest = {"kind": params.kind, "activation": _activation(params), "matrices": entries}
    raw = json.dumps(manifest, sort_keys=True).encode()
    fh.write(_MAGIC)
    fh.write(struct.pack("<Q", len(raw)))
    fh.write(raw)
    for blob in blobs:
        fh.write(blob)


def load_params(fh: BinaryIO) -> LayerParams:
    if fh.read(4) != _MAGIC:
        raise ContractError("not a layer parameter file")
    (size,) = struct.unpack("<Q", fh.read(8))
    manifest = json.loads(fh.read(size))
    data = fh.read()
    named = []
    for e in manifest["matrices"]:
        count = e["rows"] * e["cols"]
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=e["offset"])
        named.append((e["name"], arr.reshape(e["rows"], e["cols"]).astype(np.float64)))
    return _rebuild(manifest["kind"], named, manifest["activation"])


def _rebuild(kind: str, named: list[tuple[str, np.ndarray]], activation: str) -> LayerParams:
    table = {n: Tensor(a, requires_grad=True) for n, a in named}

    def attn(prefix):
        heads = sum(1 for n in table if n.startswith(f"{prefix}.query."))
        if not heads:
            return None
        return AttentionParams([table[f"{prefix}.query.{k}"] for k in range(heads)],
                               [table[f"{prefix}.key.{k}"] for k in range(heads)],
                               [table[f"{prefix}.value.{k}"] for k in range(heads)],
                               table[f"{prefix}.output"])

    def ffn(prefix):
        if f"{prefix}.w1" not in table:
            return None
        return FFNParams(table[f"{prefix}.w1"], table[f"{prefix}.b1"], table[f"{prefix}.w2"],
                         table[f"{prefix}.b2"], activation)

    norms = []
    while f"norm{len(norms)}.gain" in table:
        k = len(norms)
        norms.append(NormParams(table[f"norm{k}.gain"], table[f"norm{k}.bias"]))
    return LayerParams(kind, attn("attention"), ffn("ffn"), ffn("ffn_down"), ffn("ffn_up"),
                       attn("cross_attention"), norms)
