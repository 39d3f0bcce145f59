"""Encoders mapping clip windows and captions into a shared unit sphere.

The clip side projects each of the 2m+1 window slots to d dims, adds a
learned per-offset position vector, runs one or more multi-head
self-attention blocks with residual connections, and reads out the centre
slot through a two-layer ReLU MLP plus residual. The text side embeds each
caption with per-token linear + ReLU, coordinatewise max over tokens, and
an output linear layer. An optional text-context transformer applies the
same attention mechanism (separate weights) over a window of neighbouring
sentence vectors. All final embeddings are L2-normalised.

Batched entry points take N windows at once and share one graph; the
single-window functions are thin wrappers over them.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import ContextWindow
from .errors import ConfigError, DataFormatError, ShapeError

AGGREGATIONS = ("mid", "out_avg", "out_max", "feat_avg", "feat_max")
CONTEXT_MODES = ("clip", "text", "both", "none")

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    m: int = 1                      # context radius (window covers 2m+1 clips)
    d: int = 512                    # shared embedding dim
    d_v: int = 512                  # clip feature dim
    d_w: int = 300                  # word feature dim
    heads: int = 2
    n_layers: int = 1
    d_inner: int = 2048             # hidden width of the readout MLP
    d_text_hidden: int = 2048       # hidden width of the text trunk
    dropout: float = 0.3
    aggregation: str = "mid"
    context_mode: str = "clip"
    use_input_projection: bool = True
    use_output_projection: bool = False   # per-layer d x d map after head concat
    use_layer_norm: bool = False          # plain (non-affine) layer norm after residual

    def validate(self) -> None:
        if self.m < 0:
            raise ConfigError(f"m must be >= 0, got {self.m}")
        if self.d < 1 or self.d_v < 1 or self.d_w < 1:
            raise ConfigError("dims must be positive")
        if self.heads < 1 or self.d % self.heads != 0:
            raise ConfigError(f"d={self.d} must divide evenly into heads={self.heads}")
        if self.n_layers < 1:
            raise ConfigError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.d_inner < 1 or self.d_text_hidden < 1:
            raise ConfigError("d_inner and d_text_hidden must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"aggregation {self.aggregation!r} not in {AGGREGATIONS}")
        if self.context_mode not in CONTEXT_MODES:
            raise ConfigError(f"context_mode {self.context_mode!r} not in {CONTEXT_MODES}")
        if not self.use_input_projection and self.d_v != self.d:
            raise ConfigError(
                f"without an input projection d_v must equal d ({self.d_v} != {self.d})"
            )

    @property
    def clip_radius(self) -> int:
        """Radius of the clip-side window actually encoded."""
        return self.m if self.context_mode in ("clip", "both") else 0

    @property
    def text_radius(self) -> int | None:
        """Radius of the text-context window; None means plain captions."""
        return self.m if self.context_mode in ("text", "both") else None


@dataclass
class AttentionTrace:
    """Eval-time attention rows for the centre query, one (N, heads, T) array per layer."""

    layers: list[np.ndarray] = field(default_factory=list)
    prenorm: np.ndarray | None = None


class ModelParams:
    """Named parameter store. Registration order is fixed and drives both
    the rng draw order at init and the checkpoint layout."""

    def __init__(self, config: ModelConfig, seed: int, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        self.tensors: dict[str, T.Tensor] = {}
        rng = np.random.default_rng(seed)
        d, dh = config.d, config.d // config.heads

        def xavier(name, fan_in, fan_out):
            lim = float(np.sqrt(6.0 / (fan_in + fan_out)))
            self._add(name, rng.uniform(-lim, lim, size=(fan_in, fan_out)))

        def zeros(name, *shape):
            self._add(name, np.zeros(shape))

        def positions(name, radius):
            self._add(name, rng.normal(0.0, np.sqrt(1e-3), size=(2 * radius + 1, d)))

        def attention_stack(prefix):
            for layer in range(config.n_layers):
                for head in range(config.heads):
                    for role in ("q", "k", "w"):
                        xavier(f"{prefix}.L{layer}.h{head}.{role}", d, dh)
                if config.use_output_projection:
                    xavier(f"{prefix}.L{layer}.out", d, d)
            xavier(f"{prefix}.g.w1", d, config.d_inner)
            zeros(f"{prefix}.g.b1", config.d_inner)
            xavier(f"{prefix}.g.w2", config.d_inner, d)
            zeros(f"{prefix}.g.b2", d)

        if config.use_input_projection:
            xavier("clip.P", config.d_v, d)
        positions("clip.phi", config.clip_radius)
        attention_stack("clip")

        xavier("text.w1", config.d_w, config.d_text_hidden)
        zeros("text.b1", config.d_text_hidden)
        xavier("text.w2", config.d_text_hidden, d)
        zeros("text.b2", d)

        if config.text_radius is not None:
            positions("tctx.phi", config.text_radius)
            attention_stack("tctx")

    def _add(self, name: str, value: np.ndarray) -> None:
        self.tensors[name] = T.tensor(value.astype(self.dtype), requires_grad=True)

    def __getitem__(self, name: str) -> T.Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def named_tensors(self) -> list[tuple[str, T.Tensor]]:
        return list(self.tensors.items())

    def copy_values(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.tensors.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        if set(values) != set(self.tensors):
            raise DataFormatError("parameter name sets differ")
        for k, t in self.tensors.items():
            v = np.asarray(values[k], dtype=self.dtype)
            if v.shape != t.data.shape:
                raise DataFormatError(f"tensor {k}: shape {v.shape} != {t.data.shape}")
            t.data = v.copy()
            t.grad = None


# ---------------------------------------------------------------------------
# encoders


def _readout_mlp(x: T.Tensor, params: ModelParams, prefix: str) -> T.Tensor:
    h = T.relu(T.add(T.matmul(x, params[f"{prefix}.g.w1"]), params[f"{prefix}.g.b1"]))
    return T.add(T.matmul(h, params[f"{prefix}.g.w2"]), params[f"{prefix}.g.b2"])


def _attention_block(
    hp: T.Tensor,
    params: ModelParams,
    prefix: str,
    layer: int,
    config: ModelConfig,
    centre: int,
    trace: AttentionTrace | None,
) -> T.Tensor:
    inv_sqrt_d = 1.0 / float(np.sqrt(config.d))
    heads = []
    rows = []
    for head in range(config.heads):
        base = f"{prefix}.L{layer}.h{head}"
        q = T.matmul(hp, params[f"{base}.q"])
        k = T.matmul(hp, params[f"{base}.k"])
        w = T.matmul(hp, params[f"{base}.w"])
        attn = T.softmax_rows(T.scale(T.matmul(q, T.transpose(k)), inv_sqrt_d))
        if trace is not None:
            rows.append(attn.data[:, centre, :].copy())
        heads.append(T.matmul(attn, w))
    if trace is not None:
        trace.layers.append(np.stack(rows, axis=1))  # (N, heads, T)
    a = T.concat_last(heads)
    if config.use_output_projection:
        a = T.matmul(a, params[f"{prefix}.L{layer}.out"])
    out = T.add(a, hp)
    if config.use_layer_norm:
        out = T.layer_norm_rows(out)
    return out


def _context_transformer(
    h: T.Tensor,
    params: ModelParams,
    prefix: str,
    config: ModelConfig,
    centre: int,
    aggregation: str,
    trace: AttentionTrace | None,
) -> T.Tensor:
    """Attention stack + readout. Input (N, T, d), output (N, d), pre-norm."""
    hp = h
    for layer in range(config.n_layers):
        hp = _attention_block(hp, params, prefix, layer, config, centre, trace)
    n, t, d = hp.shape
    if aggregation == "mid":
        a_c = T.reshape(T.slice_axis(hp, 1, centre, centre + 1), (n, d))
        return T.add(_readout_mlp(a_c, params, prefix), a_c)
    per_slot = T.add(_readout_mlp(hp, params, prefix), hp)
    if aggregation == "out_avg":
        return T.scale(T.sum_axis(per_slot, 1), 1.0 / t)
    if aggregation == "out_max":
        return T.max_axis(per_slot, 1)
    raise ConfigError(f"unknown transformer aggregation {aggregation!r}")


def encode_clip_windows(
    feats: np.ndarray,
    params: ModelParams,
    config: ModelConfig,
    train: bool = False,
    rng: np.random.Generator | None = None,
    collect_trace: bool = False,
) -> tuple[T.Tensor, AttentionTrace | None]:
    """Embed N clip windows given as an (N, 2m+1, d_v) feature array."""
    feats = np.asarray(feats, dtype=params.dtype)
    t_slots = 2 * config.clip_radius + 1
    if feats.ndim != 3 or feats.shape[1] != t_slots or feats.shape[2] != config.d_v:
        raise ShapeError(
            f"window batch shape {feats.shape} incompatible with "
            f"(N, {t_slots}, {config.d_v})"
        )
    if train and config.dropout > 0 and rng is None:
        raise ConfigError("training forward needs an rng for dropout")

    centre = config.clip_radius
    aggregation = config.aggregation
    if aggregation in ("feat_avg", "feat_max"):
        # Collapse the window at the raw-feature level, then run the
        # single-token path with the centre position vector.
        if aggregation == "feat_avg":
            feats = feats.mean(axis=1, keepdims=True)
        else:
            feats = feats.max(axis=1, keepdims=True)
        phi = T.slice_axis(params["clip.phi"], 0, centre, centre + 1)
        centre = 0
        aggregation = "mid"
    else:
        phi = params["clip.phi"]

    trace = AttentionTrace() if collect_trace else None
    x = T.tensor(feats)
    if train:
        x = T.dropout(x, config.dropout, rng, train=True)
    h = T.matmul(x, params["clip.P"]) if config.use_input_projection else x
    hp = T.add(h, phi)
    if train:
        hp = T.dropout(hp, config.dropout, rng, train=True)
    out = _context_transformer(hp, params, "clip", config, centre, aggregation, trace)
    if trace is not None:
        trace.prenorm = out.data.copy()
    return T.l2_normalize(out), trace


def embed_clip_context(
    window: ContextWindow,
    params: ModelParams,
    config: ModelConfig,
    train: bool = False,
    rng: np.random.Generator | None = None,
    collect_trace: bool = False,
):
    """Embed one context window to a unit vector of dim d."""
    if window.m != config.clip_radius:
        raise ConfigError(
            f"window radius {window.m} does not match configured radius {config.clip_radius}"
        )
    out, trace = encode_clip_windows(
        window.features[None, :, :], params, config, train, rng, collect_trace
    )
    vec = T.reshape(out, (config.d,))
    return (vec, trace) if collect_trace else vec


def embed_single_feature(feature: np.ndarray, params: ModelParams, config: ModelConfig) -> T.Tensor:
    """Single-token path: embed one raw clip feature with no context."""
    feature = np.asarray(feature)
    if feature.shape != (config.d_v,):
        raise ShapeError(f"feature shape {feature.shape} != ({config.d_v},)")
    if config.clip_radius != 0:
        raise ConfigError("single-feature path requires an effective radius of 0")
    out, _ = encode_clip_windows(feature[None, None, :], params, config)
    return T.reshape(out, (config.d,))


def _pad_tokens(mats: list[np.ndarray], d_w: int, dtype) -> np.ndarray:
    """Stack variable-length token matrices, repeating the last token.

    Max pooling is idempotent under duplicated tokens, so this padding is
    exact, not an approximation.
    """
    if not mats:
        raise ShapeError("cannot embed an empty caption batch")
    checked = []
    for i, m in enumerate(mats):
        m = np.asarray(m, dtype=dtype)
        if m.ndim != 2 or m.shape[1] != d_w or m.shape[0] < 1:
            raise ShapeError(f"caption {i}: token matrix {m.shape} incompatible with d_w={d_w}")
        checked.append(m)
    longest = max(m.shape[0] for m in checked)
    out = np.empty((len(checked), longest, d_w), dtype=dtype)
    for i, m in enumerate(checked):
        out[i, : m.shape[0]] = m
        out[i, m.shape[0]:] = m[-1]
    return out


def _text_trunk(x: np.ndarray, params: ModelParams) -> T.Tensor:
    h = T.relu(T.add(T.matmul(T.tensor(x), params["text.w1"]), params["text.b1"]))
    pooled = T.max_axis(h, 1)
    return T.add(T.matmul(pooled, params["text.w2"]), params["text.b2"])


def encode_texts(
    token_mats: list[np.ndarray], params: ModelParams, config: ModelConfig, normalize: bool = True
) -> T.Tensor:
    """Embed B captions (lists of token features) to (B, d)."""
    x = _pad_tokens(token_mats, config.d_w, params.dtype)
    out = _text_trunk(x, params)
    return T.l2_normalize(out) if normalize else out


def embed_text(tokens: np.ndarray, params: ModelParams, config: ModelConfig) -> T.Tensor:
    """Embed one caption to a unit vector of dim d."""
    return T.reshape(encode_texts([tokens], params, config), (config.d,))


def encode_text_windows(
    window_tokens: list[list[np.ndarray]],
    params: ModelParams,
    config: ModelConfig,
    collect_trace: bool = False,
) -> tuple[T.Tensor, AttentionTrace | None]:
    """Embed N sentence-context windows (each a list of 2m+1 captions)."""
    radius = config.text_radius
    if radius is None:
        raise ConfigError(f"context_mode {config.context_mode!r} has no text context")
    t_slots = 2 * radius + 1
    flat: list[np.ndarray] = []
    for i, window in enumerate(window_tokens):
        if len(window) != t_slots:
            raise ShapeError(f"text window {i}: {len(window)} slots, expected {t_slots}")
        flat.extend(window)
    n = len(window_tokens)
    sent = encode_texts(flat, params, config, normalize=False)
    h = T.reshape(sent, (n, t_slots, config.d))
    hp = T.add(h, params["tctx.phi"])
    trace = AttentionTrace() if collect_trace else None
    out = _context_transformer(hp, params, "tctx", config, radius, "mid", trace)
    if trace is not None:
        trace.prenorm = out.data.copy()
    return T.l2_normalize(out), trace


def embed_text_context(
    window: list[np.ndarray], params: ModelParams, config: ModelConfig
) -> T.Tensor:
    """Embed one sentence-context window to a unit vector of dim d."""
    out, _ = encode_text_windows([window], params, config)
    return T.reshape(out, (config.d,))


def similarity(a, b) -> float:
    """Dot product of two embeddings (cosine, given unit inputs)."""
    av = a.data if isinstance(a, T.Tensor) else np.asarray(a)
    bv = b.data if isinstance(b, T.Tensor) else np.asarray(b)
    if av.shape != bv.shape or av.ndim != 1:
        raise ShapeError(f"similarity expects matching vectors, got {av.shape} and {bv.shape}")
    return float(av @ bv)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: ModelParams, out_dir: str) -> None:
    """Write params.json (layout + checksums) and params.bin (raw values)."""
    os.makedirs(out_dir, exist_ok=True)
    entries: dict[str, dict] = {}
    offset = 0
    chunks: list[bytes] = []
    for name, t in params.named_tensors():
        raw = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        entries[name] = {
            "shape": list(t.data.shape),
            "dtype": "float32",
            "byte_offset": offset,
            "sha256": hashlib.sha256(raw).hexdigest(),
        }
        chunks.append(raw)
        offset += len(raw)
    with open(os.path.join(out_dir, "params.bin"), "wb") as fh:
        fh.write(b"".join(chunks))
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": asdict(params.config),
        "tensors": entries,
    }
    with open(os.path.join(out_dir, "params.json"), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_checkpoint(ckpt_dir: str) -> tuple[ModelConfig, ModelParams]:
    """Load a checkpoint directory, validating layout, shapes and checksums."""
    json_path = os.path.join(ckpt_dir, "params.json")
    bin_path = os.path.join(ckpt_dir, "params.bin")
    try:
        with open(json_path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{json_path}: invalid JSON ({e})") from e
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise DataFormatError(f"{json_path}: unsupported format_version")
    try:
        config = ModelConfig(**doc["model_config"])
    except TypeError as e:
        raise DataFormatError(f"{json_path}: bad model_config ({e})") from e
    config.validate()
    if not os.path.exists(bin_path):
        raise DataFormatError(f"{bin_path}: missing blob")
    with open(bin_path, "rb") as fh:
        blob = fh.read()

    params = ModelParams(config, seed=0)
    entries = doc["tensors"]
    if set(entries) != set(params.tensors):
        missing = set(params.tensors) - set(entries)
        extra = set(entries) - set(params.tensors)
        raise DataFormatError(
            f"{json_path}: tensor names do not match config (missing {sorted(missing)}, "
            f"unexpected {sorted(extra)})"
        )
    for name, t in params.named_tensors():
        meta = entries[name]
        shape = tuple(meta["shape"])
        if shape != t.data.shape:
            raise DataFormatError(f"tensor {name}: shape {shape} != expected {t.data.shape}")
        if meta.get("dtype") != "float32":
            raise DataFormatError(f"tensor {name}: dtype {meta.get('dtype')} unsupported")
        count = int(np.prod(shape)) if shape else 1
        start = int(meta["byte_offset"])
        end = start + 4 * count
        if start < 0 or end > len(blob):
            raise DataFormatError(f"tensor {name}: byte range [{start}, {end}) outside blob")
        raw = blob[start:end]
        if hashlib.sha256(raw).hexdigest() != meta["sha256"]:
            raise DataFormatError(f"tensor {name}: sha256 mismatch")
        t.data = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    return config, params
