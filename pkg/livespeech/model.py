"""
GPT-style decoder over delayed code grids.

Input at each step is the sum of the Q code embeddings of one shifted column.
The sequence fed to the transformer is

    [text embeddings | speaker vectors | BOS | x_1 ... x_{T'-1}]

and the output at BOS + (t - 1) predicts shifted column t. After the first M
layers the hidden states are projected into G lanes (one transition matrix
per lane); the remaining N = L - M layers run on every lane with the same
weights, and codebook q reads its logits from lane group_of[q].
"""

import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import numerics as nx
from .codec import FeatureSequence
from .exceptions import ConfigError, ShapeError, StateError, ValidationError
from .numerics import Node
from .patterns import ShiftedGrid
from .utils import derive_rng

logger = logging.getLogger("livespeech.model")

INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    """Decoder hyperparameters. group_of maps codebook q (0-based) to its lane."""
    n_layers: int = 4
    n_shared: int = 2
    n_groups: int = 1
    n_codebooks: int = 8
    codebook_size: int = 64
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 512
    text_vocab: int = 26
    cond_len: int = 8
    feature_dim: int = 16
    max_positions: int = 512
    group_of: Tuple[int, ...] = ()
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("n_layers", "n_groups", "n_codebooks", "d_model", "n_heads", "d_ff",
                     "text_vocab", "cond_len", "feature_dim", "max_positions"):
            if getattr(self, name) < 1:
                raise ConfigError(f"ModelConfig: {name} must be positive, got {getattr(self, name)}")
        if self.codebook_size < 2:
            raise ConfigError(f"ModelConfig: codebook_size must be >= 2, got {self.codebook_size}")
        if not 0 <= self.n_shared <= self.n_layers:
            raise ConfigError(f"ModelConfig: n_shared must lie in [0, {self.n_layers}], got {self.n_shared}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"ModelConfig: d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"ModelConfig: dtype must be float32 or float64, got {self.dtype}")
        group_of = tuple(int(g) for g in self.group_of)
        if not group_of:
            if self.n_codebooks % self.n_groups != 0:
                raise ConfigError(
                    f"ModelConfig: {self.n_groups} groups do not divide {self.n_codebooks} codebooks; "
                    f"pass group_of explicitly"
                )
            per_group = self.n_codebooks // self.n_groups
            group_of = tuple(q // per_group for q in range(self.n_codebooks))
        if len(group_of) != self.n_codebooks:
            raise ConfigError(f"ModelConfig: group_of has {len(group_of)} entries, expected {self.n_codebooks}")
        if any(not 0 <= g < self.n_groups for g in group_of):
            raise ConfigError(f"ModelConfig: group_of entries must lie in [0, {self.n_groups - 1}]")
        object.__setattr__(self, "group_of", group_of)

    @property
    def n_group_layers(self) -> int:
        return self.n_layers - self.n_shared

    @property
    def pad_code(self) -> int:
        return self.codebook_size

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype(self.dtype)

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["group_of"] = list(self.group_of)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "ModelConfig":
        data = dict(data)
        data["group_of"] = tuple(data.get("group_of", ()))
        return cls(**data)

    @classmethod
    def full_scale(cls, grouped: bool = True) -> "ModelConfig":
        """12 x 1536 decoder, 16 codebooks of 1024, optionally 8 lanes of two codebooks."""
        return cls(n_layers=12, n_shared=6, n_groups=8 if grouped else 1, n_codebooks=16,
                   codebook_size=1024, d_model=1536, n_heads=16, d_ff=6144, cond_len=64,
                   max_positions=2048)


class Parameters:
    """Named tensor store bound to a ModelConfig."""

    def __init__(self, config: ModelConfig, tensors: "OrderedDict[str, Node]"):
        self.config = config
        self._tensors = tensors

    def __getitem__(self, name: str) -> Node:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self) -> List[str]:
        return list(self._tensors)

    def count(self) -> int:
        return int(np.sum([t.value.size for t in self._tensors.values()]))

    def zero_grad(self):
        for node in self._tensors.values():
            node.zero_grad()

    def arrays(self) -> Dict[str, np.ndarray]:
        return OrderedDict((name, node.value) for name, node in self._tensors.items())

    def copy(self) -> "Parameters":
        return Parameters(self.config, OrderedDict(
            (name, Node(node.value.copy(), requires_grad=True)) for name, node in self._tensors.items()
        ))

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: Dict[str, np.ndarray]) -> "Parameters":
        expected = parameter_shapes(config)
        if list(arrays) != list(expected):
            missing = sorted(set(expected) - set(arrays))
            extra = sorted(set(arrays) - set(expected))
            raise ShapeError(f"Parameters: tensor names disagree with config (missing {missing}, extra {extra})")
        for name, shape in expected.items():
            if tuple(arrays[name].shape) != shape:
                raise ShapeError(f"Parameters: {name} has shape {arrays[name].shape}, config expects {shape}")
        return cls(config, OrderedDict(
            (name, Node(np.array(arrays[name]), requires_grad=True)) for name in expected
        ))


def parameter_shapes(config: ModelConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    """Name -> shape for every tensor of the decoder, in storage order."""
    d, ff = config.d_model, config.d_ff
    shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()
    shapes["text_embedding"] = (config.text_vocab, d)
    shapes["code_embedding"] = (config.n_codebooks, config.codebook_size + 1, d)
    shapes["bos"] = (d,)
    shapes["position_embedding"] = (config.max_positions, d)
    shapes["speaker.query"] = (config.cond_len, d)
    shapes["speaker.in_proj.weight"] = (config.feature_dim, d)
    shapes["speaker.in_proj.bias"] = (d,)
    shapes["speaker.key.weight"] = (d, d)
    shapes["speaker.value.weight"] = (d, d)
    shapes["speaker.out.weight"] = (d, d)
    shapes["speaker.out.bias"] = (d,)
    for layer in range(config.n_layers):
        prefix = f"layers.{layer}"
        shapes[f"{prefix}.ln1.gain"] = (d,)
        shapes[f"{prefix}.ln1.bias"] = (d,)
        shapes[f"{prefix}.attn.qkv.weight"] = (d, 3 * d)
        shapes[f"{prefix}.attn.qkv.bias"] = (3 * d,)
        shapes[f"{prefix}.attn.out.weight"] = (d, d)
        shapes[f"{prefix}.attn.out.bias"] = (d,)
        shapes[f"{prefix}.ln2.gain"] = (d,)
        shapes[f"{prefix}.ln2.bias"] = (d,)
        shapes[f"{prefix}.ffn.in.weight"] = (d, ff)
        shapes[f"{prefix}.ffn.in.bias"] = (ff,)
        shapes[f"{prefix}.ffn.out.weight"] = (ff, d)
        shapes[f"{prefix}.ffn.out.bias"] = (d,)
    shapes["final_ln.gain"] = (d,)
    shapes["final_ln.bias"] = (d,)
    shapes["group_proj"] = (config.n_groups, d, d)
    shapes["code_proj"] = (config.n_codebooks, d, config.codebook_size)
    return shapes


def param_count(config: ModelConfig) -> int:
    """Closed-form parameter count; equals init_params(config, seed).count()."""
    d, ff, q, k = config.d_model, config.d_ff, config.n_codebooks, config.codebook_size
    embeddings = config.text_vocab * d + q * (k + 1) * d + d + config.max_positions * d
    speaker = config.cond_len * d + config.feature_dim * d + d + 3 * d * d + d
    per_layer = (3 * d * d + 3 * d) + (d * d + d) + (2 * d * ff + ff + d) + 4 * d
    transitions = config.n_groups * d * d
    heads = q * d * k
    return embeddings + speaker + config.n_layers * per_layer + 2 * d + transitions + heads


def init_params(config: ModelConfig, seed: int) -> Parameters:
    """
    Deterministic initialization.

    Weights and embeddings ~ N(0, 0.02^2), biases zero, layer-norm gains one,
    PAD embedding rows zero, and every transition projection the identity so
    a fresh grouped model computes exactly what the plain decoder computes.
    """
    rng = derive_rng(seed, 0)
    dtype = config.np_dtype
    tensors: "OrderedDict[str, Node]" = OrderedDict()
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".bias") or name.endswith("final_ln.bias"):
            value = np.zeros(shape)
        elif name.endswith(".gain"):
            value = np.ones(shape)
        elif name == "group_proj":
            value = np.broadcast_to(np.eye(config.d_model), shape).copy()
        else:
            value = rng.normal(0.0, INIT_STD, size=shape)
        if name == "code_embedding":
            value[:, config.pad_code, :] = 0.0
        tensors[name] = Node(value.astype(dtype), requires_grad=True)
    return Parameters(config, tensors)


# ---------------------------------------------------------------------------
# Conditioning
# ---------------------------------------------------------------------------

@dataclass
class ConditionPrefix:
    """Text embeddings followed by cond_len speaker vectors, shape (P, d)."""
    vectors: Node
    text_len: int
    cond_len: int

    @property
    def length(self) -> int:
        return self.text_len + self.cond_len


def encode_condition(text: Sequence[int], enrollment: FeatureSequence, params: Parameters) -> ConditionPrefix:
    """
    Build the decoder prefix from symbol ids and enrollment features.

    The speaker encoder pools any number of enrollment frames into cond_len
    vectors with learned-query attention.
    """
    config = params.config
    ids = np.asarray(text, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise ValidationError("encode_condition: text must be a non-empty symbol sequence")
    if ids.min() < 0 or ids.max() >= config.text_vocab:
        raise ValidationError(f"encode_condition: text symbols must lie in [0, {config.text_vocab - 1}]")
    if enrollment.dim != config.feature_dim:
        raise ShapeError(
            f"encode_condition: enrollment dimension {enrollment.dim} does not match "
            f"feature_dim {config.feature_dim}"
        )
    text_vectors = nx.embedding_lookup(params["text_embedding"], ids)

    feats = nx.as_node(enrollment.frames.astype(config.np_dtype))
    hidden = nx.gelu(nx.matmul(feats, params["speaker.in_proj.weight"]) + params["speaker.in_proj.bias"])
    keys = nx.matmul(hidden, params["speaker.key.weight"])
    values = nx.matmul(hidden, params["speaker.value.weight"])
    pooled = nx.causal_self_attention(params["speaker.query"], keys, values, config.n_heads,
                                      visible_prefix=enrollment.n_frames)
    speaker = nx.matmul(pooled, params["speaker.out.weight"]) + params["speaker.out.bias"]
    return ConditionPrefix(nx.concat([text_vectors, speaker], axis=0), int(ids.size), config.cond_len)


# ---------------------------------------------------------------------------
# Embedding and transformer blocks
# ---------------------------------------------------------------------------

def _check_codes(codes: np.ndarray, config: ModelConfig, op: str) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    if codes.shape[0] != config.n_codebooks:
        raise ShapeError(f"{op}: expected {config.n_codebooks} codebooks, got shape {codes.shape}")
    if codes.size and (codes.min() < 0 or codes.max() > config.pad_code):
        raise ValidationError(f"{op}: codes must lie in [0, {config.pad_code}] (PAD = {config.pad_code})")
    return codes


def embed_columns(codes: np.ndarray, params: Parameters) -> Node:
    """Sum of code embeddings for every column of a (Q, n) code block -> (n, d)."""
    config = params.config
    codes = _check_codes(codes, config, "embed_columns")
    rows = config.codebook_size + 1
    table = nx.reshape(params["code_embedding"], (config.n_codebooks * rows, config.d_model))
    flat_ids = codes + (np.arange(config.n_codebooks) * rows)[:, None]
    return nx.sum(nx.embedding_lookup(table, flat_ids), axis=0)


def embed_step(codes_t: np.ndarray, params: Parameters) -> Node:
    """x_t = sum_q Emb_q(c_t^(q)) for one column of Q codes (PAD allowed)."""
    codes_t = np.asarray(codes_t, dtype=np.int64).reshape(-1)
    return nx.reshape(embed_columns(codes_t[:, None], params), (params.config.d_model,))


@dataclass
class _LayerCache:
    keys: np.ndarray
    values: np.ndarray


def _block(x: Node, params: Parameters, layer: int, prefix_len: int, offset: int = 0,
           cache: Optional[_LayerCache] = None) -> Tuple[Node, _LayerCache]:
    """Pre-norm transformer block; x is (..., S, d). Returns output and the full K/V."""
    config = params.config
    d = config.d_model
    p = f"layers.{layer}"
    h = nx.layer_norm(x, params[f"{p}.ln1.gain"], params[f"{p}.ln1.bias"])
    qkv = nx.matmul(h, params[f"{p}.attn.qkv.weight"]) + params[f"{p}.attn.qkv.bias"]
    lead = qkv.shape[:-1]
    parts = nx.reshape(qkv, (*lead, 3, d))
    q = nx.reshape(nx.take(parts, np.array([0]), axis=-2), (*lead, d))
    k = nx.reshape(nx.take(parts, np.array([1]), axis=-2), (*lead, d))
    v = nx.reshape(nx.take(parts, np.array([2]), axis=-2), (*lead, d))
    if cache is not None:
        k = nx.concat([nx.as_node(cache.keys), k], axis=-2)
        v = nx.concat([nx.as_node(cache.values), v], axis=-2)
    attn = nx.causal_self_attention(q, k, v, config.n_heads, visible_prefix=prefix_len, offset=offset)
    x = x + nx.matmul(attn, params[f"{p}.attn.out.weight"]) + params[f"{p}.attn.out.bias"]
    h = nx.layer_norm(x, params[f"{p}.ln2.gain"], params[f"{p}.ln2.bias"])
    h = nx.gelu(nx.matmul(h, params[f"{p}.ffn.in.weight"]) + params[f"{p}.ffn.in.bias"])
    x = x + nx.matmul(h, params[f"{p}.ffn.out.weight"]) + params[f"{p}.ffn.out.bias"]
    return x, _LayerCache(k.value, v.value)


def _to_lanes(x: Node, params: Parameters) -> Node:
    """(S, d) -> (G, S, d) through the per-lane transition projections."""
    s, d = x.shape
    return nx.matmul(nx.reshape(x, (1, s, d)), params["group_proj"])


def _heads(lanes: Node, params: Parameters) -> Node:
    """(G, S, d) lane outputs -> (Q, S, K) logits, codebook q reading lane group_of[q]."""
    config = params.config
    h = nx.layer_norm(lanes, params["final_ln.gain"], params["final_ln.bias"])
    routed = nx.take(h, np.array(config.group_of), axis=0)
    return nx.matmul(routed, params["code_proj"])


def _check_config(params: Parameters, n_codebooks: int, codebook_size: int, op: str):
    config = params.config
    if n_codebooks != config.n_codebooks or codebook_size != config.codebook_size:
        raise ShapeError(
            f"{op}: grid is {n_codebooks} codebooks x {codebook_size} codes, model expects "
            f"{config.n_codebooks} x {config.codebook_size}"
        )


def forward_full(prefix: ConditionPrefix, shifted: ShiftedGrid, params: Parameters,
                 grouped: bool = True) -> Node:
    """
    Reference-conditioned logits for every shifted column, shape (Q, T', K).

    grouped=False runs the plain L-layer stack with no transition projection
    and routes every codebook to the single output; it is the reference the
    lane path reduces to when G = 1 and the transition is the identity.
    """
    config = params.config
    _check_config(params, shifted.n_codebooks, shifted.codebook_size, "forward_full")
    n_steps = shifted.n_steps
    total = prefix.length + n_steps
    if total > config.max_positions:
        raise ShapeError(f"forward_full: sequence of {total} positions exceeds max_positions {config.max_positions}")

    inputs = [prefix.vectors, nx.reshape(params["bos"], (1, config.d_model))]
    if n_steps > 1:
        inputs.append(embed_columns(shifted.codes[:, :-1], params))
    x = nx.concat(inputs, axis=0)
    x = x + nx.take(params["position_embedding"], np.arange(total), axis=0)

    for layer in range(config.n_shared):
        x, _ = _block(x, params, layer, prefix.length)
    if grouped:
        x = _to_lanes(x, params)
    else:
        x = nx.reshape(x, (1, total, config.d_model))
    for layer in range(config.n_shared, config.n_layers):
        x, _ = _block(x, params, layer, prefix.length)

    codes_region = nx.take(x, np.arange(prefix.length, total), axis=-2)
    if grouped:
        return _heads(codes_region, params)
    h = nx.layer_norm(codes_region, params["final_ln.gain"], params["final_ln.bias"])
    return nx.matmul(h, params["code_proj"])


# ---------------------------------------------------------------------------
# Incremental decoding
# ---------------------------------------------------------------------------

@dataclass
class DecoderState:
    """
    Key/value caches for one decoding stream.

    shared[l] holds (S, d) arrays for the first M layers, lanes[l] holds
    (G, S, d) arrays for the group layers. S = prefix_len + 1 + steps: the
    prefix, BOS and every column consumed so far.
    """
    config: ModelConfig
    prefix_len: int
    steps: int
    shared: List[_LayerCache] = field(repr=False)
    lanes: List[_LayerCache] = field(repr=False)
    stale: bool = False

    @property
    def length(self) -> int:
        return self.prefix_len + 1 + self.steps

    def fork(self) -> "DecoderState":
        """Independent copy that can be advanced separately."""
        if self.stale:
            raise StateError("DecoderState.fork: state has already been advanced")
        return DecoderState(self.config, self.prefix_len, self.steps,
                            [_LayerCache(c.keys.copy(), c.values.copy()) for c in self.shared],
                            [_LayerCache(c.keys.copy(), c.values.copy()) for c in self.lanes])


def init_state(prefix: ConditionPrefix, params: Parameters) -> Tuple[np.ndarray, DecoderState]:
    """Run the prefix and BOS through the decoder; returns logits for column 1 and the state."""
    config = params.config
    total = prefix.length + 1
    if total > config.max_positions:
        raise ShapeError(f"init_state: prefix of {total} positions exceeds max_positions {config.max_positions}")
    with nx.no_grad():
        x = nx.concat([nx.stop_gradient(prefix.vectors), nx.reshape(params["bos"], (1, config.d_model))], axis=0)
        x = x + nx.take(params["position_embedding"], np.arange(total), axis=0)
        shared, lanes = [], []
        for layer in range(config.n_shared):
            x, cache = _block(x, params, layer, prefix.length)
            shared.append(cache)
        x = _to_lanes(x, params)
        for layer in range(config.n_shared, config.n_layers):
            x, cache = _block(x, params, layer, prefix.length)
            lanes.append(cache)
        logits = _heads(nx.take(x, np.array([total - 1]), axis=-2), params)
    state = DecoderState(config, prefix.length, 0, shared, lanes)
    return logits.value[:, 0, :], state


def forward_step(state: DecoderState, codes_t: np.ndarray, params: Parameters) -> Tuple[np.ndarray, DecoderState]:
    """
    Consume one shifted column and return logits (Q, K) for the next column.

    The input state is marked stale; continue with the returned state.
    """
    config = params.config
    if state.stale:
        raise StateError("forward_step: state has already been advanced; use the returned state")
    if state.config != config:
        raise StateError("forward_step: state was created for a different model config")
    position = state.length
    if position >= config.max_positions:
        raise ShapeError(f"forward_step: position {position} exceeds max_positions {config.max_positions}")
    codes_t = _check_codes(np.asarray(codes_t).reshape(-1), config, "forward_step")

    with nx.no_grad():
        x = nx.reshape(embed_step(codes_t, params), (1, config.d_model))
        x = x + nx.take(params["position_embedding"], np.array([position]), axis=0)
        shared, lanes = [], []
        for layer in range(config.n_shared):
            x, cache = _block(x, params, layer, state.prefix_len, offset=position, cache=state.shared[layer])
            shared.append(cache)
        x = _to_lanes(x, params)
        for i, layer in enumerate(range(config.n_shared, config.n_layers)):
            x, cache = _block(x, params, layer, state.prefix_len, offset=position, cache=state.lanes[i])
            lanes.append(cache)
        logits = _heads(x, params)
    state.stale = True
    return logits.value[:, 0, :], DecoderState(config, state.prefix_len, state.steps + 1, shared, lanes)


def count_by_prefix(params: Parameters) -> Dict[str, int]:
    """Parameter totals grouped by the first name component (for logging)."""
    totals: Dict[str, int] = OrderedDict()
    for name, node in params.items():
        key = name.split(".")[0]
        totals[key] = totals.get(key, 0) + int(node.value.size)
    return totals


def describe(config: ModelConfig) -> str:
    return (f"L={config.n_layers} M={config.n_shared} N={config.n_group_layers} G={config.n_groups} "
            f"Q={config.n_codebooks} K={config.codebook_size} d={config.d_model} "
            f"params={param_count(config):,} ({param_count(config) * 4 / math.pow(2, 20):.1f} MB f32)")
