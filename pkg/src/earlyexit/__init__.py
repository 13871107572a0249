"""Early-exit inference runtime.

Calibrates per-checkpoint convergence routers over a corpus, then serves
post-hoc early exits at inference time: every forward still runs all layers
(keeping the KV cache complete), and routers pick the earliest layer whose
hidden state already matches the final one closely enough to read logits
from.
"""

from .adapter import (AdapterMap, ManifestError, ModelManifest, ProbeError,
                      load_manifest, parse_manifest, probe, register_adapter,
                      unregister_adapter)
from .calibration import (CalibrationConfig, CalibrationDataset, RouterBank,
                          RouterStats, TrainingDivergedError, calibrate,
                          checkpoint_layers, collect_hidden_states,
                          compute_labels, load_bank, load_corpus, save_bank,
                          train_router)
from .model import (KVCache, ModelConfig, ReferenceModel, build_model,
                    desk_config, detokenize_tokens, forward, forward_batch,
                    lm_head_from_hidden, load_model_config, save_model_config,
                    tokenize_text)
from .router_ops import (CompactionResult, Router, batch_compact, exit_projection,
                         exit_scatter, fused_layernorm_route, route_scores)
from .runtime import (ExitReport, PhaseStats, RuntimeConfig, SweepRow, generate,
                      posthoc_select, sweep_thresholds)

__version__ = "0.1.0"

__all__ = [
    "AdapterMap", "ManifestError", "ModelManifest", "ProbeError",
    "load_manifest", "parse_manifest", "probe", "register_adapter",
    "unregister_adapter",
    "CalibrationConfig", "CalibrationDataset", "RouterBank", "RouterStats",
    "TrainingDivergedError", "calibrate", "checkpoint_layers",
    "collect_hidden_states", "compute_labels", "load_bank", "load_corpus",
    "save_bank", "train_router",
    "KVCache", "ModelConfig", "ReferenceModel", "build_model", "desk_config",
    "detokenize_tokens", "forward", "forward_batch", "lm_head_from_hidden",
    "load_model_config", "save_model_config", "tokenize_text",
    "CompactionResult", "Router", "batch_compact", "exit_projection",
    "exit_scatter", "fused_layernorm_route", "route_scores",
    "ExitReport", "PhaseStats", "RuntimeConfig", "SweepRow", "generate",
    "posthoc_select", "sweep_thresholds",
    "__version__",
]
