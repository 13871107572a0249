"""Bundled test and demo assets.

Ships a small pseudo-English corpus, five reference model manifests, and a
"rigged" router bank whose scores are forced to the extremes: hot
checkpoints fire for any well-scaled nonzero row, cold checkpoints never
fire. Rigged banks make exit behavior deterministic in tests without
training anything.
"""

from __future__ import annotations

from importlib import resources

import numpy as np

from ..calibration import RouterBank, RouterStats, checkpoint_layers
from ..model import ModelConfig, config_digest
from ..router_ops import Router
from ..tensor_math import DEFAULT_EPS

MANIFEST_NAMES = ("llama", "gpt2", "gpt_neox", "opt", "falcon")


def _root():
    return resources.files(__package__)


def corpus_path() -> str:
    return str(_root() / "corpus.txt")


def manifest_path(name: str) -> str:
    if name not in MANIFEST_NAMES:
        raise ValueError(f"unknown manifest {name!r}, have {MANIFEST_NAMES}")
    return str(_root() / "manifests" / f"{name}.manifest")


def rigged_bank_path() -> str:
    return str(_root() / "rigged.bank")


def _rigged_router(layer: int, hidden_dim: int, hot: bool, scale: float) -> Router:
    # Rows come in +/- pairs per input coordinate, so after SiLU each pair
    # sums to |u|*tanh(|u|/2) >= 0; summed over all d coordinates of an
    # RMS-normalized row this is ~ scale*sqrt(d), saturating the sigmoid.
    b = 2 * hidden_dim
    w_down = np.zeros((b, hidden_dim), dtype=np.float32)
    for i in range(hidden_dim):
        w_down[2 * i, i] = scale
        w_down[2 * i + 1, i] = -scale
    sign = 1.0 if hot else -1.0
    w_up = np.full((1, b), sign, dtype=np.float32)
    return Router(layer=layer, w_down=w_down, w_up=w_up)


def make_rigged_bank(config: ModelConfig, hot_layers=(), interval: int = 4,
                     include_final: bool = True, scale: float = 64.0,
                     tau: float = 0.98) -> RouterBank:
    """Bank whose routers score ~1.0 at hot_layers and ~0.0 elsewhere.

    Guaranteed for rows whose RMS is large against the norm eps; zero rows
    score exactly 0.5 everywhere.
    """
    hot = set(int(k) for k in hot_layers)
    layers = checkpoint_layers(config.num_layers, interval, include_final)
    unknown = hot - set(layers)
    if unknown:
        raise ValueError(f"hot layers {sorted(unknown)} are not checkpoints {layers}")
    routers = {k: _rigged_router(k, config.hidden_dim, k in hot, scale) for k in layers}
    stats = {k: RouterStats(examples=0, positives=0, final_loss=0.0,
                            accuracy=1.0, flags=0) for k in layers}
    return RouterBank(
        hidden_dim=config.hidden_dim,
        bottleneck=2 * config.hidden_dim,
        interval=interval,
        tau=tau,
        eps=DEFAULT_EPS,
        num_layers=config.num_layers,
        model_digest=config_digest(config),
        routers=routers,
        stats=stats,
    )
