"""Online inference with post-hoc early exit.

Every forward step runs all layers, so the KV cache is always complete;
exits only change which layer's hidden state feeds the output head. For
each row the selected layer is the earliest checkpoint at or above k_min
whose router score strictly exceeds the threshold; otherwise the final
layer is used. The threshold 1.0 therefore disables exits outright, since a
sigmoid score never strictly exceeds it.

Two accounting modes mirror how results are usually reported: "per-token"
lets every row exit independently (prefill-style distributions), while
"batch-unanimous" exits a whole batch at the first checkpoint all rows
agree on (the conservative decode rule; identical at batch size 1).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .calibration import RouterBank
from .model import KVCache, ReferenceModel, forward, lm_head_from_hidden
from .router_ops import batch_compact, exit_projection, fused_layernorm_route
from .tensor_math import DEFAULT_EPS, rmsnorm, softmax

PER_TOKEN = "per-token"
BATCH_UNANIMOUS = "batch-unanimous"
MODES = (PER_TOKEN, BATCH_UNANIMOUS)

# Histogram key for rows that ran to the last layer.
FINAL_KEY = "final"

NO_EXIT = -1


@dataclass(frozen=True)
class RuntimeConfig:
    exit_threshold: float = 1.0
    k_min: int = 0
    mode: str = PER_TOKEN
    max_new_tokens: int = 64
    temperature: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.exit_threshold <= 1.0:
            raise ValueError("exit_threshold must lie in (0, 1]")
        if self.k_min < 0:
            raise ValueError("k_min must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        if self.temperature < 0.0:
            raise ValueError("temperature must be >= 0")


@dataclass
class PhaseStats:
    """Exit accounting for one phase (prefill or decode)."""

    tokens_total: int
    exit_layers: list  # per token: checkpoint layer index, or NO_EXIT
    histogram: dict  # layer index or FINAL_KEY -> count
    exit_rate: float

    @classmethod
    def from_exit_layers(cls, exit_layers: Sequence[int]) -> "PhaseStats":
        layers = [int(k) for k in exit_layers]
        histogram: dict = {}
        for k in layers:
            key = FINAL_KEY if k == NO_EXIT else k
            histogram[key] = histogram.get(key, 0) + 1
        exited = sum(1 for k in layers if k != NO_EXIT)
        total = len(layers)
        return cls(tokens_total=total, exit_layers=layers, histogram=histogram,
                   exit_rate=(exited / total) if total else 0.0)

    def to_dict(self) -> dict:
        histogram = {str(key): self.histogram[key]
                     for key in sorted(self.histogram, key=_histogram_order)}
        return {
            "tokens_total": self.tokens_total,
            "exit_rate": self.exit_rate,
            "histogram": histogram,
            "exit_layers": [None if k == NO_EXIT else k for k in self.exit_layers],
        }


def _histogram_order(key):
    return (1, 0) if key == FINAL_KEY else (0, key)


@dataclass
class ExitReport:
    theta: float
    k_min: int
    mode: str
    temperature: float
    prefill: PhaseStats
    decode: Optional[PhaseStats]  # None for prefill-only runs
    unique_output_tokens: Optional[int]  # decode runs only
    logits_recomputed_per_token: bool = True  # per-token exits recompute logits

    def to_dict(self) -> dict:
        out = {
            "theta": self.theta,
            "k_min": self.k_min,
            "mode": self.mode,
            "temperature": self.temperature,
            "logits_recomputed_per_token": self.logits_recomputed_per_token,
            "prefill": self.prefill.to_dict(),
        }
        out["decode"] = self.decode.to_dict() if self.decode is not None else None
        out["unique_output_tokens"] = self.unique_output_tokens
        return out


def _check_bank(model: ReferenceModel, hidden_states, bank: RouterBank) -> None:
    if len(hidden_states) != bank.num_layers + 1:
        raise ValueError(
            f"got {len(hidden_states)} hidden states, bank expects "
            f"{bank.num_layers + 1} (embedding + one per layer)")
    if hidden_states[0].shape[-1] != bank.hidden_dim:
        raise ValueError(
            f"hidden width {hidden_states[0].shape[-1]} != bank width {bank.hidden_dim}")
    if model.config.num_layers != bank.num_layers:
        raise ValueError(
            f"model has {model.config.num_layers} layers, bank was calibrated for "
            f"{bank.num_layers}")


def posthoc_select(model: ReferenceModel, hidden_states, bank: Optional[RouterBank],
                   config: RuntimeConfig):
    """Select output logits per the post-hoc exit rule.

    hidden_states is the complete capture: index 0 the embedding output,
    index k+1 the output of layer k. Returns (logits [n, vocab],
    exit_layers [n] of int) where NO_EXIT marks rows that used the final
    layer. With bank=None this is exactly the baseline output path.
    """
    final_hidden = np.asarray(hidden_states[-1], dtype=np.float32)
    n = final_hidden.shape[0]
    exit_layers = np.full(n, NO_EXIT, dtype=np.int64)
    if bank is None:
        return lm_head_from_hidden(model, final_hidden), exit_layers
    _check_bank(model, hidden_states, bank)
    theta = np.float32(config.exit_threshold)

    if config.mode == BATCH_UNANIMOUS:
        for k in bank.checkpoints:
            if k < config.k_min:
                continue
            h_k = np.asarray(hidden_states[k + 1], dtype=np.float32)
            scores = fused_layernorm_route(h_k, bank.routers[k], eps=bank.eps)
            if np.all(scores > theta):
                exit_layers[:] = k
                return lm_head_from_hidden(model, h_k), exit_layers
        return lm_head_from_hidden(model, final_hidden), exit_layers

    # Per-token: peel off exiting rows at each checkpoint, final-norm them
    # in place at their original positions, and keep routing the rest.
    normed = np.empty_like(final_hidden)
    remaining = np.arange(n, dtype=np.int64)
    for k in bank.checkpoints:
        if k < config.k_min or remaining.size == 0:
            continue
        h_k = np.asarray(hidden_states[k + 1], dtype=np.float32)[remaining]
        scores = fused_layernorm_route(h_k, bank.routers[k], eps=bank.eps)
        mask = scores > theta
        if not mask.any():
            continue
        parts = batch_compact(h_k, mask)
        exited_at = remaining[parts.exiting_indices]
        exit_projection(parts.exiting, model.final_norm, DEFAULT_EPS, exited_at, normed)
        exit_layers[exited_at] = k
        remaining = remaining[parts.continuing_indices]
    if remaining.size:
        normed[remaining] = rmsnorm(final_hidden[remaining], model.final_norm, DEFAULT_EPS)
    return normed @ model.lm_head.T, exit_layers


def _sample(logits: np.ndarray, temperature: float, rng) -> int:
    if temperature == 0.0:
        return int(np.argmax(logits))
    probs = softmax(logits / np.float32(temperature)).astype(np.float64)
    return int(rng.choice(probs.shape[0], p=probs / probs.sum()))


def generate(model: ReferenceModel, bank: Optional[RouterBank], prompt_tokens,
             config: RuntimeConfig, seed: int = 0):
    """Prefill the prompt, then decode max_new_tokens greedily (or sampled).

    Every step runs all layers and fully extends the KV cache; the router
    bank only chooses which layer's hidden state produces each step's
    logits. The first output token comes from the prefill's last position;
    each later token costs one single-token decode forward.

    Returns (generated tokens [max_new_tokens], ExitReport).
    """
    prompt = np.asarray(prompt_tokens, dtype=np.int64)
    if prompt.ndim != 1 or prompt.size == 0:
        raise ValueError("prompt must be a nonempty 1-D token sequence")
    total = prompt.size + config.max_new_tokens - 1
    if total > model.config.max_seq_len:
        raise ValueError(
            f"prompt ({prompt.size}) + decode steps ({config.max_new_tokens - 1}) "
            f"exceeds max_seq_len {model.config.max_seq_len}")
    rng = np.random.Generator(np.random.PCG64(seed))

    cache = KVCache.create(model.config)
    out = forward(model, prompt, cache, capture_hidden=True)
    logits, prefill_exits = posthoc_select(model, out.hidden_states, bank, config)

    generated = [_sample(logits[-1], config.temperature, rng)]
    decode_exits = []
    for _ in range(config.max_new_tokens - 1):
        step = forward(model, np.asarray([generated[-1]], dtype=np.int64), cache,
                       capture_hidden=True)
        logits, exits = posthoc_select(model, step.hidden_states, bank, config)
        decode_exits.append(int(exits[0]))
        generated.append(_sample(logits[-1], config.temperature, rng))

    report = ExitReport(
        theta=config.exit_threshold,
        k_min=config.k_min,
        mode=config.mode,
        temperature=config.temperature,
        prefill=PhaseStats.from_exit_layers(prefill_exits),
        decode=PhaseStats.from_exit_layers(decode_exits),
        unique_output_tokens=len(set(generated)),
    )
    return np.asarray(generated, dtype=np.int64), report


@dataclass
class SweepRow:
    theta: float
    exit_rate: float
    histogram: dict
    tokens_total: int
    exit_layers: list  # concatenated over prompts, prompt order

    def to_dict(self) -> dict:
        stats = PhaseStats(tokens_total=self.tokens_total, exit_layers=self.exit_layers,
                           histogram=self.histogram, exit_rate=self.exit_rate)
        out = stats.to_dict()
        out["theta"] = self.theta
        return {"theta": out.pop("theta"), **out}


def sweep_thresholds(model: ReferenceModel, bank: RouterBank, prompts,
                     thetas: Sequence[float], k_min: int = 0,
                     mode: str = PER_TOKEN) -> list:
    """Prefill exit accounting over prompts for each threshold.

    Prompts are token sequences. The forward pass is threshold-independent,
    so hidden states are computed once per prompt and the selection pass
    reruns per theta. Rows come back ordered by theta descending.
    """
    if len(prompts) == 0 or len(thetas) == 0:
        raise ValueError("need at least one prompt and one threshold")
    captures = []
    for prompt in prompts:
        out = forward(model, np.asarray(prompt, dtype=np.int64), None,
                      capture_hidden=True)
        captures.append(out.hidden_states)

    rows = []
    for theta in sorted(set(float(t) for t in thetas), reverse=True):
        config = RuntimeConfig(exit_threshold=theta, k_min=k_min, mode=mode)
        exits = []
        for hidden_states in captures:
            _, exit_layers = posthoc_select(model, hidden_states, bank, config)
            exits.extend(int(k) for k in exit_layers)
        stats = PhaseStats.from_exit_layers(exits)
        rows.append(SweepRow(theta=theta, exit_rate=stats.exit_rate,
                             histogram=stats.histogram,
                             tokens_total=stats.tokens_total,
                             exit_layers=stats.exit_layers))
    return rows
