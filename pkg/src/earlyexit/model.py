"""Deterministic tiny decoder-only transformer with per-layer hidden capture.

Pre-norm blocks (RMSNorm, multi-head causal attention with rotary q/k,
SwiGLU FFN), byte-level vocabulary, and a KV cache that is fully extended at
every layer on every step. Weights are a pure function of the config seed,
so any two builds from the same config are bitwise identical — that
determinism is what the whole test suite stands on.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import _binio
from .tensor_math import DEFAULT_EPS, rmsnorm, silu, softmax

_MASK64 = (1 << 64) - 1
_WEIGHTS_MAGIC = b"TIDW"
_WEIGHTS_VERSION = 1


def splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step: returns (output, next_state)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31), state


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 12
    hidden_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 256
    vocab_size: int = 256
    max_seq_len: int = 512
    seed: int = 0

    def __post_init__(self):
        if self.num_layers < 2:
            raise ValueError("num_layers must be >= 2 (need a checkpoint before the final layer)")
        if self.hidden_dim <= 0 or self.num_heads <= 0:
            raise ValueError("hidden_dim and num_heads must be positive")
        if self.hidden_dim % self.num_heads != 0:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if (self.hidden_dim // self.num_heads) % 2 != 0:
            raise ValueError("head_dim must be even for rotary embedding")
        if self.ffn_dim <= 0 or self.vocab_size <= 0 or self.max_seq_len <= 0:
            raise ValueError("ffn_dim, vocab_size and max_seq_len must be positive")
        if not (0 <= self.seed <= _MASK64):
            raise ValueError("seed must fit in 64 bits")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads


def desk_config(seed: int = 0) -> ModelConfig:
    """The default desk-scale config: 12 layers, width 64, byte vocab."""
    return ModelConfig(seed=seed)


_CONFIG_FIELDS = ("num_layers", "hidden_dim", "num_heads", "ffn_dim", "vocab_size", "max_seq_len", "seed")


def config_text(config: ModelConfig) -> str:
    return "".join(f"{name}={getattr(config, name)}\n" for name in _CONFIG_FIELDS)


def save_model_config(config: ModelConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(config_text(config))


def load_model_config(path) -> ModelConfig:
    values = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in _CONFIG_FIELDS:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = int(value.strip())
    missing = [name for name in _CONFIG_FIELDS if name not in values]
    if missing:
        raise ValueError(f"{path}: missing config keys: {', '.join(missing)}")
    return ModelConfig(**values)


def config_digest(config: ModelConfig) -> int:
    """64-bit digest of the canonical config text, stored in checkpoints."""
    h = hashlib.sha256(config_text(config).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "big")


@dataclass
class LayerWeights:
    attn_norm: np.ndarray  # [d]
    wq: np.ndarray  # [d,d]
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ffn_norm: np.ndarray  # [d]
    w_gate: np.ndarray  # [ffn,d]
    w_up: np.ndarray  # [ffn,d]
    w_down: np.ndarray  # [d,ffn]


@dataclass
class ReferenceModel:
    config: ModelConfig
    embedding: np.ndarray  # [vocab,d]
    layers: list[LayerWeights]
    final_norm: np.ndarray  # [d]
    lm_head: np.ndarray  # [vocab,d]
    rope_cos: np.ndarray = field(repr=False, default=None)  # [max_seq, head_dim/2]
    rope_sin: np.ndarray = field(repr=False, default=None)

    def weight_tensors(self) -> list[tuple[str, np.ndarray]]:
        """All parameter tensors in their fixed serialization order."""
        out = [("embedding", self.embedding)]
        for i, lw in enumerate(self.layers):
            for name in ("attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w_gate", "w_up", "w_down"):
                out.append((f"layers.{i}.{name}", getattr(lw, name)))
        out.append(("final_norm", self.final_norm))
        out.append(("lm_head", self.lm_head))
        return out


class _SeedStream:
    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next(self) -> int:
        value, self._state = splitmix64(self._state)
        return value


def _normal_fill(stream: _SeedStream, shape: tuple[int, ...], std: float) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(stream.next()))
    return (rng.standard_normal(shape, dtype=np.float32) * np.float32(std))


def _rope_tables(config: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    half = config.head_dim // 2
    inv_freq = 1.0 / (10000.0 ** (np.arange(half, dtype=np.float64) / half))
    angles = np.arange(config.max_seq_len, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(angles).astype(np.float32), np.sin(angles).astype(np.float32)


def build_model(config: ModelConfig) -> ReferenceModel:
    """Construct a model whose weights are fully determined by config.seed."""
    d, ffn, vocab = config.hidden_dim, config.ffn_dim, config.vocab_size
    std = 0.02 / np.sqrt(config.num_layers)
    stream = _SeedStream(config.seed)

    embedding = _normal_fill(stream, (vocab, d), std)
    layers = []
    for _ in range(config.num_layers):
        layers.append(
            LayerWeights(
                attn_norm=np.ones(d, dtype=np.float32),
                wq=_normal_fill(stream, (d, d), std),
                wk=_normal_fill(stream, (d, d), std),
                wv=_normal_fill(stream, (d, d), std),
                wo=_normal_fill(stream, (d, d), std),
                ffn_norm=np.ones(d, dtype=np.float32),
                w_gate=_normal_fill(stream, (ffn, d), std),
                w_up=_normal_fill(stream, (ffn, d), std),
                w_down=_normal_fill(stream, (d, ffn), std),
            )
        )
    final_norm = np.ones(d, dtype=np.float32)
    lm_head = _normal_fill(stream, (vocab, d), std)
    rope_cos, rope_sin = _rope_tables(config)
    return ReferenceModel(config, embedding, layers, final_norm, lm_head, rope_cos, rope_sin)


@dataclass
class KVCache:
    """Per-layer rotated keys and values for one generation session.

    Single-writer: one session owns one cache. After any forward step the
    length equals the total tokens processed, at every layer.
    """

    keys: np.ndarray  # [L, heads, max_seq, head_dim]
    values: np.ndarray
    length: int = 0

    @classmethod
    def create(cls, config: ModelConfig) -> "KVCache":
        shape = (config.num_layers, config.num_heads, config.max_seq_len, config.head_dim)
        return cls(np.zeros(shape, dtype=np.float32), np.zeros(shape, dtype=np.float32))


@dataclass
class ForwardOutput:
    logits: np.ndarray  # [seq, vocab]
    hidden_states: list[np.ndarray]  # L+1 entries of [seq, d] when captured, else []


def _apply_rope(t: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    half = t.shape[-1] // 2
    t1, t2 = t[..., :half], t[..., half:]
    return np.concatenate((t1 * cos - t2 * sin, t2 * cos + t1 * sin), axis=-1)


def _attention(model: ReferenceModel, lw: LayerWeights, x: np.ndarray, pos_offset: int,
               cache: KVCache | None, layer_idx: int) -> np.ndarray:
    b, s, d = x.shape
    heads, hd = model.config.num_heads, model.config.head_dim

    q = (x @ lw.wq.T).reshape(b, s, heads, hd).transpose(0, 2, 1, 3)
    k = (x @ lw.wk.T).reshape(b, s, heads, hd).transpose(0, 2, 1, 3)
    v = (x @ lw.wv.T).reshape(b, s, heads, hd).transpose(0, 2, 1, 3)

    cos = model.rope_cos[pos_offset : pos_offset + s]
    sin = model.rope_sin[pos_offset : pos_offset + s]
    q = _apply_rope(q, cos, sin)
    k = _apply_rope(k, cos, sin)

    # Contiguous copies keep the cached and cacheless paths bitwise equal:
    # strided views would steer BLAS onto different kernels.
    if cache is not None:
        cache.keys[layer_idx, :, pos_offset : pos_offset + s] = k[0]
        cache.values[layer_idx, :, pos_offset : pos_offset + s] = v[0]
        k_all = np.ascontiguousarray(cache.keys[layer_idx, :, : pos_offset + s])[None]
        v_all = np.ascontiguousarray(cache.values[layer_idx, :, : pos_offset + s])[None]
    else:
        k_all = np.ascontiguousarray(k)
        v_all = np.ascontiguousarray(v)

    total = pos_offset + s
    scores = (q @ k_all.transpose(0, 1, 3, 2)) / np.float32(np.sqrt(hd))
    allowed = np.arange(total)[None, :] <= (np.arange(s) + pos_offset)[:, None]
    scores = np.where(allowed, scores, np.float32(-np.inf))
    att = softmax(scores, axis=-1)
    y = (att @ v_all).transpose(0, 2, 1, 3).reshape(b, s, d)
    return y @ lw.wo.T


def _ffn(lw: LayerWeights, x: np.ndarray) -> np.ndarray:
    xn = rmsnorm(x, lw.ffn_norm, DEFAULT_EPS)
    return (silu(xn @ lw.w_gate.T) * (xn @ lw.w_up.T)) @ lw.w_down.T


def _run_blocks(model: ReferenceModel, tokens_2d: np.ndarray, cache: KVCache | None,
                capture_hidden: bool) -> tuple[np.ndarray, list[np.ndarray]]:
    pos_offset = cache.length if cache is not None else 0
    h = model.embedding[tokens_2d]
    hiddens: list[np.ndarray] = [h] if capture_hidden else []
    for layer_idx, lw in enumerate(model.layers):
        h = h + _attention(model, lw, rmsnorm(h, lw.attn_norm, DEFAULT_EPS), pos_offset, cache, layer_idx)
        h = h + _ffn(lw, h)
        if capture_hidden:
            hiddens.append(h)
    if cache is not None:
        cache.length += tokens_2d.shape[1]
    return h, hiddens


def tokenize_text(text: str) -> np.ndarray:
    """Byte-level tokenization: one token id per UTF-8 byte."""
    data = text.encode("utf-8")
    if not data:
        raise ValueError("cannot tokenize empty text")
    return np.frombuffer(data, dtype=np.uint8).astype(np.int64)


def detokenize_tokens(tokens) -> str:
    """Inverse of tokenize_text; invalid UTF-8 from sampling is replaced."""
    data = bytes(np.asarray(tokens, dtype=np.int64).astype(np.uint8))
    return data.decode("utf-8", errors="replace")


def _validate_tokens(config: ModelConfig, tokens: np.ndarray, cached: int) -> None:
    if tokens.size == 0:
        raise ValueError("token sequence must be nonempty")
    if tokens.min() < 0 or tokens.max() >= config.vocab_size:
        raise ValueError(f"token id outside vocabulary [0, {config.vocab_size})")
    total = cached + tokens.shape[-1]
    if total > config.max_seq_len:
        raise ValueError(f"sequence of {total} tokens exceeds max_seq_len {config.max_seq_len}")


def forward(model: ReferenceModel, tokens, cache: KVCache | None = None,
            capture_hidden: bool = False) -> ForwardOutput:
    """Causal forward over `tokens`, extending `cache` at every layer.

    hidden_states[0] is the raw embedding output; hidden_states[k+1] is the
    output of layer k. Capture is observation-only: logits are identical
    either way.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1:
        raise ValueError(f"expected a 1-D token sequence, got shape {tokens.shape}")
    _validate_tokens(model.config, tokens, cache.length if cache is not None else 0)
    h, hiddens = _run_blocks(model, tokens[None, :], cache, capture_hidden)
    logits = lm_head_from_hidden(model, h[0])
    return ForwardOutput(logits=logits, hidden_states=[hh[0] for hh in hiddens])


def forward_batch(model: ReferenceModel, tokens_2d, capture_hidden: bool = False
                  ) -> tuple[np.ndarray, list[np.ndarray]]:
    """Cacheless forward over a [batch, seq] block of equal-length sequences.

    Vectorized path used by calibration; returns (logits [b,s,vocab],
    hidden list of [b,s,d]). Row b is bitwise identical to forward(row b).
    """
    tokens_2d = np.asarray(tokens_2d, dtype=np.int64)
    if tokens_2d.ndim != 2:
        raise ValueError(f"expected [batch, seq] tokens, got shape {tokens_2d.shape}")
    _validate_tokens(model.config, tokens_2d, 0)
    h, hiddens = _run_blocks(model, tokens_2d, None, capture_hidden)
    return lm_head_from_hidden(model, h), hiddens


def lm_head_from_hidden(model: ReferenceModel, h: np.ndarray) -> np.ndarray:
    """Final-norm then LM-head projection of any layer's hidden state.

    This is the early-exit logit path; feeding it hidden_states[-1]
    reproduces the baseline logits.
    """
    h = np.asarray(h, dtype=np.float32)
    if h.shape[-1] != model.config.hidden_dim:
        raise ValueError(f"hidden width {h.shape[-1]} != model width {model.config.hidden_dim}")
    return rmsnorm(h, model.final_norm, DEFAULT_EPS) @ model.lm_head.T


def save_model_weights(model: ReferenceModel, path) -> None:
    """Dump config and all weights to the CRC-trailed binary container."""
    cfg = model.config
    w = _binio.Writer(_WEIGHTS_MAGIC)
    w.u32(_WEIGHTS_VERSION)
    for name in ("num_layers", "hidden_dim", "num_heads", "ffn_dim", "vocab_size", "max_seq_len"):
        w.u32(getattr(cfg, name))
    w.u64(cfg.seed)
    for _, tensor in model.weight_tensors():
        w.array_f32(tensor)
    with open(path, "wb") as f:
        f.write(w.finish())


def load_model_weights(path) -> ReferenceModel:
    with open(path, "rb") as f:
        data = f.read()
    r = _binio.Reader(data)
    r.expect_magic(_WEIGHTS_MAGIC)
    version = r.u32()
    if version != _WEIGHTS_VERSION:
        raise _binio.VersionError(f"weights version {version}, expected {_WEIGHTS_VERSION}")
    fields = {name: r.u32() for name in ("num_layers", "hidden_dim", "num_heads", "ffn_dim", "vocab_size", "max_seq_len")}
    seed = r.u64()
    config = ModelConfig(seed=seed, **fields)

    skeleton = build_model(config)
    n_params = sum(t.size for _, t in skeleton.weight_tensors())
    header = 4 + 4 + 6 * 4 + 8
    r.check_size(header + 4 * n_params + 4)
    r.verify_crc()
    for _, tensor in skeleton.weight_tensors():
        tensor[...] = r.array_f32(tensor.size).reshape(tensor.shape)
    return skeleton
