"""Offline router calibration.

Three steps over a text corpus: collect per-token hidden states at every
checkpoint layer plus the final layer, label each token by whether its
checkpoint state has already converged to the final state (cosine
similarity above a threshold), then train one small router per checkpoint
to predict that label. The result is a RouterBank persisted in a
CRC-checked binary container.

Training is hand-rolled: stable binary cross-entropy with analytic
gradients through sigmoid -> up-projection -> SiLU -> down-projection,
stepped by Adam. The normalized input is a constant feature; no gradient
flows into the norm and the norm carries no parameters.
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import _binio
from .model import ReferenceModel, config_digest, forward_batch, tokenize_text
from .router_ops import Router
from .tensor_math import DEFAULT_EPS, batched_cosine_similarity, rmsnorm

BANK_MAGIC = b"TIDE"
BANK_VERSION = 1

# Stats flag bits persisted per router.
FLAG_SINGLE_CLASS = 0x1

# Upper bound on tokens per batched forward during collection; keeps the
# transient all-layers capture buffer small.
_MAX_GROUP_TOKENS = 16384


class TrainingDivergedError(RuntimeError):
    """Loss went non-finite during router training."""


@dataclass(frozen=True)
class CalibrationConfig:
    """Knobs for the calibration pipeline.

    bottleneck=None scales with the model: min(128, hidden_dim // 2), so the
    hidden layer stays a genuine bottleneck at small widths.
    """

    checkpoint_interval: int = 4
    convergence_threshold: float = 0.98
    bottleneck: Optional[int] = None
    learning_rate: float = 1e-3
    epochs: int = 100
    batch_size: int = 1024
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.checkpoint_interval < 1:
            raise ValueError("checkpoint_interval must be >= 1")
        if not 0.0 < self.convergence_threshold < 1.0:
            raise ValueError("convergence_threshold must lie in (0, 1)")
        if self.bottleneck is not None and self.bottleneck < 1:
            raise ValueError("bottleneck must be >= 1")
        if self.learning_rate <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("learning_rate, epochs, batch_size must be positive")
        if not (0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0):
            raise ValueError("adam betas must lie in [0, 1)")
        if self.adam_eps <= 0:
            raise ValueError("adam_eps must be positive")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 bits")

    def resolve_bottleneck(self, hidden_dim: int) -> int:
        if self.bottleneck is not None:
            return self.bottleneck
        return min(128, max(1, hidden_dim // 2))


def checkpoint_layers(num_layers: int, interval: int, include_final: bool = True) -> tuple:
    """Layer indices hosting routers: {c-1, 2c-1, ...} below the bound.

    include_final keeps the checkpoint at layer L-1 (whose exit path differs
    from the default output only in skipping nothing; its labels are all
    positive by construction). Dropping it trims the set to [0, L-1).
    """
    if num_layers < 2 or interval < 1:
        raise ValueError("need num_layers >= 2 and interval >= 1")
    bound = num_layers if include_final else num_layers - 1
    return tuple(k for k in range(interval - 1, bound, interval))


# ---------------------------------------------------------------------------
# Step 1: hidden-state collection
# ---------------------------------------------------------------------------


@dataclass
class CollectedStates:
    checkpoint_states: dict  # layer -> [n_tokens, d] float32
    final_states: np.ndarray  # [n_tokens, d] float32
    token_count: int
    corpus_digest: str


def corpus_digest(documents: Sequence[str]) -> str:
    h = hashlib.sha256()
    for doc in documents:
        h.update(doc.encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()


def load_corpus(path) -> list:
    """Load documents: a directory of text files, or one line-delimited file."""
    import os

    if os.path.isdir(path):
        docs = []
        for name in sorted(os.listdir(path)):
            full = os.path.join(path, name)
            if os.path.isfile(full):
                with open(full, "r", encoding="utf-8") as fh:
                    text = fh.read().strip()
                if text:
                    docs.append(text)
        return docs
    with open(path, "r", encoding="utf-8") as fh:
        return [line.strip() for line in fh if line.strip()]


def collect_hidden_states(model: ReferenceModel, corpus: Sequence[str],
                          config: CalibrationConfig, include_final: bool = True,
                          ) -> CollectedStates:
    """Run the model over the corpus and keep checkpoint + final hidden rows.

    Documents longer than max_seq_len are split into independent chunks.
    Chunks of equal length are batched through one cacheless forward; rows
    land back at their original corpus positions, so aggregation order never
    depends on batching.
    """
    if len(corpus) == 0:
        raise ValueError("corpus is empty")
    cfg = model.config
    layers = checkpoint_layers(cfg.num_layers, config.checkpoint_interval, include_final)

    chunks = []  # (global token offset, token array)
    offset = 0
    for doc in corpus:
        tokens = tokenize_text(doc)
        for start in range(0, len(tokens), cfg.max_seq_len):
            piece = tokens[start:start + cfg.max_seq_len]
            chunks.append((offset, piece))
            offset += len(piece)
    total = offset

    states = {k: np.empty((total, cfg.hidden_dim), dtype=np.float32) for k in layers}
    final = np.empty((total, cfg.hidden_dim), dtype=np.float32)

    by_length: dict = {}
    for chunk in chunks:
        by_length.setdefault(len(chunk[1]), []).append(chunk)

    for length, group in sorted(by_length.items()):
        rows_per_batch = max(1, _MAX_GROUP_TOKENS // length)
        for i in range(0, len(group), rows_per_batch):
            sub = group[i:i + rows_per_batch]
            batch = np.stack([tokens for _, tokens in sub])
            _, hiddens = forward_batch(model, batch, capture_hidden=True)
            for row, (off, tokens) in enumerate(sub):
                n = len(tokens)
                for k in layers:
                    states[k][off:off + n] = hiddens[k + 1][row]
                final[off:off + n] = hiddens[cfg.num_layers][row]

    return CollectedStates(checkpoint_states=states, final_states=final,
                           token_count=total, corpus_digest=corpus_digest(corpus))


# ---------------------------------------------------------------------------
# Step 2: convergence labels
# ---------------------------------------------------------------------------


@dataclass
class CalibrationDataset:
    features: dict  # layer -> [n, d] float32 hidden rows
    labels: dict  # layer -> [n] float32 in {0, 1}
    similarities: dict  # layer -> [n] float32
    token_count: int
    corpus_digest: str
    zero_norm_count: int


def compute_labels(states: CollectedStates, tau: float) -> CalibrationDataset:
    """Label each token 1 iff cos(h_k, h_final) > tau, strictly.

    Zero-norm rows (either side) get similarity 0 and label 0, and are
    counted in zero_norm_count for diagnostics.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    labels, sims = {}, {}
    zero_total = 0
    for k, h in states.checkpoint_states.items():
        s, zero = batched_cosine_similarity(h, states.final_states)
        sims[k] = s
        labels[k] = (s > np.float32(tau)).astype(np.float32)
        zero_total += int(zero.sum())
    return CalibrationDataset(features=states.checkpoint_states, labels=labels,
                              similarities=sims, token_count=states.token_count,
                              corpus_digest=states.corpus_digest,
                              zero_norm_count=zero_total)


# ---------------------------------------------------------------------------
# Step 3: router training
# ---------------------------------------------------------------------------


def _sigmoid_like(x: np.ndarray) -> np.ndarray:
    # Stable logistic that keeps the caller's dtype (float64 for the
    # finite-difference harness, float32 in training).
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def bce_loss_and_grads(w_down: np.ndarray, w_up: np.ndarray,
                       z: np.ndarray, y: np.ndarray):
    """Mean BCE of the router on pre-normalized rows z, plus both gradients.

    Works in whatever float dtype the arguments share. Returns
    (loss, d_w_down, d_w_up) where gradients are of the mean loss.
    """
    n = z.shape[0]
    # Runaway weights must surface as a non-finite loss (the trainer's
    # divergence check), not as a floating-point warning mid-kernel.
    with np.errstate(over="ignore", invalid="ignore"):
        u = z @ w_down.T  # [n, b]
        su = _sigmoid_like(u)
        a = u * su  # SiLU
        t = (a @ w_up.T)[:, 0]  # [n] logits
        loss = float(np.mean(np.maximum(t, 0) - t * y
                             + np.log1p(np.exp(-np.abs(t)))))

        g_t = (_sigmoid_like(t) - y) / n  # [n]
        d_w_up = g_t[None, :] @ a  # [1, b]
        g_a = g_t[:, None] * w_up  # [n, b]
        g_u = g_a * (su * (1.0 + u * (1.0 - su)))  # SiLU derivative
        d_w_down = g_u.T @ z  # [b, d]
    return loss, d_w_down, d_w_up


@dataclass
class RouterStats:
    examples: int
    positives: int
    final_loss: float
    accuracy: float
    flags: int

    @property
    def single_class(self) -> bool:
        return bool(self.flags & FLAG_SINGLE_CLASS)


class _Adam:
    def __init__(self, shape, lr, beta1, beta2, eps):
        self.m = np.zeros(shape, dtype=np.float32)
        self.v = np.zeros(shape, dtype=np.float32)
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.t = 0

    def step(self, w: np.ndarray, g: np.ndarray) -> None:
        self.t += 1
        self.m = self.b1 * self.m + (1.0 - self.b1) * g
        self.v = self.b2 * self.v + (1.0 - self.b2) * (g * g)
        m_hat = self.m / (1.0 - self.b1 ** self.t)
        v_hat = self.v / (1.0 - self.b2 ** self.t)
        w -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def train_router(features: np.ndarray, labels: np.ndarray, layer: int,
                 config: CalibrationConfig):
    """Train one router on its checkpoint's (hidden row, label) pairs.

    Returns (Router, RouterStats). Single-class datasets train normally and
    are flagged in the stats. The per-layer seed is config.seed XOR layer, so
    routers are independent of training order and thread count.
    """
    features = np.ascontiguousarray(features, dtype=np.float32)
    labels = np.ascontiguousarray(labels, dtype=np.float32)
    n, d = features.shape
    if n == 0:
        raise ValueError("cannot train a router on an empty dataset")
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match {n} rows")

    b = config.resolve_bottleneck(d)
    rng = np.random.Generator(np.random.PCG64(config.seed ^ layer))
    w_down = rng.standard_normal((b, d), dtype=np.float32) * np.float32(0.02)
    w_up = rng.standard_normal((1, b), dtype=np.float32) * np.float32(0.02)

    z = rmsnorm(features)  # constant input feature, computed once
    opt_down = _Adam(w_down.shape, config.learning_rate, config.adam_beta1,
                     config.adam_beta2, config.adam_eps)
    opt_up = _Adam(w_up.shape, config.learning_rate, config.adam_beta1,
                   config.adam_beta2, config.adam_eps)

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, g_down, g_up = bce_loss_and_grads(w_down, w_up, z[idx], labels[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at layer {layer}, epoch {epoch}, "
                    f"batch offset {start} (lr={config.learning_rate}, "
                    f"batch_size={config.batch_size})")
            opt_down.step(w_down, g_down)
            opt_up.step(w_up, g_up)

    final_loss, _, _ = bce_loss_and_grads(w_down, w_up, z, labels)
    logits = (z @ w_down.T)
    logits = (logits * _sigmoid_like(logits)) @ w_up.T
    predictions = (logits[:, 0] > 0.0).astype(np.float32)
    accuracy = float(np.mean(predictions == labels))

    positives = int(labels.sum())
    flags = FLAG_SINGLE_CLASS if positives in (0, n) else 0
    stats = RouterStats(examples=n, positives=positives, final_loss=final_loss,
                        accuracy=accuracy, flags=flags)
    return Router(layer=layer, w_down=w_down, w_up=w_up), stats


# ---------------------------------------------------------------------------
# RouterBank and its container format
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class RouterBank:
    hidden_dim: int
    bottleneck: int
    interval: int
    tau: float
    eps: float
    num_layers: int
    model_digest: int
    routers: dict  # layer -> Router, keyed ascending
    stats: dict  # layer -> RouterStats

    def __post_init__(self):
        layers = self.checkpoints
        expected_with = checkpoint_layers(self.num_layers, self.interval, True)
        expected_without = checkpoint_layers(self.num_layers, self.interval, False)
        if layers not in (expected_with, expected_without):
            raise ValueError(
                f"checkpoint layers {layers} do not follow the interval-{self.interval} "
                f"pattern for {self.num_layers} layers")
        for k, router in self.routers.items():
            if router.w_down.shape != (self.bottleneck, self.hidden_dim):
                raise ValueError(f"router {k} weight shape {router.w_down.shape} "
                                 f"violates bank metadata")

    @property
    def checkpoints(self) -> tuple:
        return tuple(sorted(self.routers))

    @property
    def router_param_count(self) -> int:
        return self.hidden_dim * self.bottleneck + self.bottleneck


def calibrate(model: ReferenceModel, corpus: Sequence[str],
              config: Optional[CalibrationConfig] = None, threads: int = 1,
              include_final: bool = True) -> RouterBank:
    """Full pipeline: collect, label, train one router per checkpoint."""
    config = config if config is not None else CalibrationConfig()
    states = collect_hidden_states(model, corpus, config, include_final)
    dataset = compute_labels(states, config.convergence_threshold)

    layers = sorted(dataset.features)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(
                lambda k: train_router(dataset.features[k], dataset.labels[k], k, config),
                layers))
    else:
        results = [train_router(dataset.features[k], dataset.labels[k], k, config)
                   for k in layers]

    routers = {router.layer: router for router, _ in results}
    stats = {router.layer: st for router, st in results}
    return RouterBank(
        hidden_dim=model.config.hidden_dim,
        bottleneck=config.resolve_bottleneck(model.config.hidden_dim),
        interval=config.checkpoint_interval,
        tau=config.convergence_threshold,
        eps=DEFAULT_EPS,
        num_layers=model.config.num_layers,
        model_digest=config_digest(model.config),
        routers=routers,
        stats=stats,
    )


def bank_file_size(hidden_dim: int, bottleneck: int, n_checkpoints: int) -> int:
    """Exact on-disk size in bytes; documented alongside the format."""
    header = 4 + 4 + 4 + 4 + 4 + 4 + 4 + 4 + 4 + 8  # magic..n_checkpoints, digest
    per_router = 6 * 4 + 4 * (bottleneck * hidden_dim + bottleneck)
    return header + n_checkpoints * per_router + 4  # CRC trailer


def save_bank(bank: RouterBank, path) -> None:
    w = _binio.Writer(BANK_MAGIC)
    w.u32(BANK_VERSION)
    w.u32(bank.hidden_dim)
    w.u32(bank.bottleneck)
    w.u32(bank.interval)
    w.f32(bank.tau)
    w.f32(bank.eps)
    w.u32(bank.num_layers)
    w.u32(len(bank.routers))
    w.u64(bank.model_digest)
    for k in bank.checkpoints:
        router, st = bank.routers[k], bank.stats[k]
        w.u32(k)
        w.u32(st.examples)
        w.u32(st.positives)
        w.u32(st.flags)
        w.f32(st.final_loss)
        w.f32(st.accuracy)
        w.array_f32(router.w_down)
        w.array_f32(router.w_up)
    data = w.finish()
    with open(path, "wb") as fh:
        fh.write(data)


def load_bank(path) -> RouterBank:
    with open(path, "rb") as fh:
        data = fh.read()
    r = _binio.Reader(data)
    r.expect_magic(BANK_MAGIC)
    version = r.u32()
    if version != BANK_VERSION:
        raise _binio.VersionError(f"unsupported bank version {version}")
    d = r.u32()
    b = r.u32()
    interval = r.u32()
    tau = r.f32()
    eps = r.f32()
    num_layers = r.u32()
    n_checkpoints = r.u32()
    digest = r.u64()
    if d < 1 or b < 1 or interval < 1 or num_layers < 2:
        raise _binio.DimensionError(
            f"implausible bank metadata: d={d}, b={b}, c={interval}, L={num_layers}")
    if n_checkpoints < 1 or n_checkpoints > num_layers:
        raise _binio.DimensionError(
            f"bank declares {n_checkpoints} checkpoints for {num_layers} layers")
    r.check_size(bank_file_size(d, b, n_checkpoints))
    r.verify_crc()

    routers, stats = {}, {}
    previous = -1
    for _ in range(n_checkpoints):
        layer = r.u32()
        if layer <= previous or layer >= num_layers:
            raise _binio.DimensionError(
                f"checkpoint layer {layer} out of order or beyond layer count {num_layers}")
        previous = layer
        examples = r.u32()
        positives = r.u32()
        flags = r.u32()
        final_loss = r.f32()
        accuracy = r.f32()
        w_down = r.array_f32(b * d).reshape(b, d)
        w_up = r.array_f32(b).reshape(1, b)
        routers[layer] = Router(layer=layer, w_down=w_down, w_up=w_up)
        stats[layer] = RouterStats(examples=examples, positives=positives,
                                   final_loss=final_loss, accuracy=accuracy,
                                   flags=flags)
    return RouterBank(hidden_dim=d, bottleneck=b, interval=interval, tau=tau,
                      eps=eps, num_layers=num_layers, model_digest=digest,
                      routers=routers, stats=stats)
