"""Command-line front end.

Subcommands: calibrate (train a router bank over a corpus), generate
(prompted decoding with post-hoc exits), sweep (prefill exit rates across
thresholds), probe (resolve a model manifest), inspect (dump bank
metadata).

Exit codes: 0 success, 1 operational failure (missing/corrupt files,
diverged training), 2 usage or validation errors. Reports are JSON with a
fixed key order; the timestamp is isolated in the single created_at line so
reproducibility checks can skip exactly one line.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from datetime import datetime, timezone

from ._binio import BinaryFormatError
from .adapter import ManifestError, ProbeError, load_manifest, probe
from .calibration import (CalibrationConfig, TrainingDivergedError, calibrate,
                          load_bank, load_corpus, save_bank)
from .model import (build_model, config_digest, detokenize_tokens,
                    load_model_config, tokenize_text)
from .runtime import (MODES, PER_TOKEN, RuntimeConfig, generate,
                      sweep_thresholds)

SEED_ENV_VAR = "EARLYEXIT_SEED"


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV_VAR)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ValueError(f"{SEED_ENV_VAR} must be an integer, got {raw!r}")


def _timestamp() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write_report(path, run: dict, payload: dict) -> None:
    document = {"created_at": _timestamp(), "run": run}
    document.update(payload)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(document, fh, indent=2)
        fh.write("\n")


def _load_model(path):
    model_config = load_model_config(path)
    return build_model(model_config)


def _read_prompt(value: str) -> str:
    if os.path.isfile(value):
        with open(value, "r", encoding="utf-8") as fh:
            return fh.read().rstrip("\n")
    return value


def _load_bank_checked(path, model):
    bank = load_bank(path)
    if bank.model_digest != config_digest(model.config):
        print("warning: bank was calibrated for a different model configuration",
              file=sys.stderr)
    return bank


def cmd_calibrate(args) -> int:
    model = _load_model(args.model_config)
    corpus = load_corpus(args.corpus)
    config = CalibrationConfig(
        checkpoint_interval=args.interval,
        convergence_threshold=args.tau,
        bottleneck=args.bottleneck,
        learning_rate=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
    )
    bank = calibrate(model, corpus, config, threads=args.threads,
                     include_final=not args.exclude_final_checkpoint)
    save_bank(bank, args.out)
    print(f"bank written to {args.out}")
    print(f"d={bank.hidden_dim} b={bank.bottleneck} c={bank.interval} "
          f"tau={bank.tau:g} L={bank.num_layers}")
    for k in bank.checkpoints:
        st = bank.stats[k]
        note = " single-class" if st.single_class else ""
        print(f"layer {k:3d}: examples={st.examples} positives={st.positives} "
              f"final_loss={st.final_loss:.6f} accuracy={st.accuracy:.4f}{note}")
    return 0


def cmd_generate(args) -> int:
    model = _load_model(args.model_config)
    bank = _load_bank_checked(args.routers, model) if args.routers else None
    config = RuntimeConfig(
        exit_threshold=args.theta,
        k_min=args.k_min,
        mode=args.mode,
        max_new_tokens=args.max_tokens,
        temperature=args.temperature,
    )
    prompt_text = _read_prompt(args.prompt)
    prompt = tokenize_text(prompt_text)
    tokens, report = generate(model, bank, prompt, config, seed=args.seed)
    output_text = detokenize_tokens(tokens)

    print(f"theta={config.exit_threshold:g} mode={config.mode} "
          f"prefill_exit_rate={report.prefill.exit_rate:.4f} "
          f"decode_exit_rate={report.decode.exit_rate:.4f} "
          f"unique_output_tokens={report.unique_output_tokens}")
    print(output_text)

    if args.report:
        run = {
            "subcommand": "generate",
            "model_config": args.model_config,
            "routers": args.routers,
            "theta": args.theta,
            "k_min": args.k_min,
            "mode": args.mode,
            "max_tokens": args.max_tokens,
            "temperature": args.temperature,
            "seed": args.seed,
            "prompt": prompt_text,
        }
        payload = {
            "output_tokens": [int(t) for t in tokens],
            "output_text": output_text,
            "report": report.to_dict(),
        }
        _write_report(args.report, run, payload)
    return 0


def cmd_sweep(args) -> int:
    model = _load_model(args.model_config)
    bank = _load_bank_checked(args.routers, model)
    try:
        thetas = [float(part) for part in args.thetas.split(",") if part]
    except ValueError:
        raise ValueError(f"--thetas must be comma-separated floats, got {args.thetas!r}")
    if not thetas:
        raise ValueError("--thetas is empty")
    with open(args.prompts, "r", encoding="utf-8") as fh:
        prompt_texts = [line.strip() for line in fh if line.strip()]
    if not prompt_texts:
        raise ValueError(f"no prompts in {args.prompts}")
    prompts = [tokenize_text(text) for text in prompt_texts]

    rows = sweep_thresholds(model, bank, prompts, thetas,
                            k_min=args.k_min, mode=args.mode)
    for row in rows:
        histogram = " ".join(f"L{key}:{count}" if key != "final" else f"final:{count}"
                             for key, count in sorted(row.histogram.items(),
                                                      key=lambda kv: (kv[0] == "final", kv[0] if kv[0] != "final" else 0)))
        print(f"theta={row.theta:<6g} exit_rate={row.exit_rate:.4f} "
              f"tokens={row.tokens_total} {histogram}")

    if args.report:
        run = {
            "subcommand": "sweep",
            "model_config": args.model_config,
            "routers": args.routers,
            "prompts": args.prompts,
            "thetas": thetas,
            "k_min": args.k_min,
            "mode": args.mode,
            "seed": args.seed,
        }
        payload = {"rows": [row.to_dict() for row in rows]}
        _write_report(args.report, run, payload)
    return 0


def cmd_probe(args) -> int:
    manifest = load_manifest(args.manifest)
    adapter_map = probe(manifest)
    for line in adapter_map.as_lines():
        print(line)
    return 0


def cmd_inspect(args) -> int:
    bank = load_bank(args.routers)
    print(f"d={bank.hidden_dim} b={bank.bottleneck} c={bank.interval} "
          f"tau={bank.tau:g} eps={bank.eps:g} L={bank.num_layers}")
    print(f"model_digest={bank.model_digest:#018x}")
    print(f"checkpoints={list(bank.checkpoints)}")
    print(f"params_per_router={bank.router_param_count}")
    for k in bank.checkpoints:
        st = bank.stats[k]
        note = " single-class" if st.single_class else ""
        print(f"layer {k:3d}: examples={st.examples} positives={st.positives} "
              f"final_loss={st.final_loss:.6f} accuracy={st.accuracy:.4f}{note}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="earlyexit",
        description="Early-exit runtime: calibrate convergence routers, "
                    "generate with post-hoc exits, and inspect the artifacts.")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    seed_default = _default_seed()

    p = sub.add_parser("calibrate", help="train a router bank over a text corpus")
    p.add_argument("--model-config", required=True, help="model config file (key=value)")
    p.add_argument("--corpus", required=True,
                   help="newline-delimited text file or directory of text files")
    p.add_argument("--interval", type=int, default=4, help="checkpoint interval c")
    p.add_argument("--tau", type=float, default=0.98, help="convergence threshold")
    p.add_argument("--bottleneck", type=int, default=None,
                   help="router bottleneck width (default: min(128, d/2))")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=1024)
    p.add_argument("--seed", type=int, default=seed_default)
    p.add_argument("--threads", type=int, default=1,
                   help="parallel router training threads")
    p.add_argument("--exclude-final-checkpoint", action="store_true",
                   help="do not place a router at layer L-1")
    p.add_argument("--out", required=True, help="bank file to write")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("generate", help="decode from a prompt with post-hoc exits")
    p.add_argument("--model-config", required=True)
    p.add_argument("--routers", default=None,
                   help="bank file; omit for the baseline model")
    p.add_argument("--prompt", required=True, help="prompt text, or a file containing it")
    p.add_argument("--theta", type=float, default=1.0, help="exit threshold")
    p.add_argument("--k-min", type=int, default=0, help="lowest layer allowed to exit")
    p.add_argument("--mode", choices=MODES, default=PER_TOKEN)
    p.add_argument("--max-tokens", type=int, default=256)
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=seed_default)
    p.add_argument("--report", default=None, help="JSON report path")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("sweep", help="prefill exit rates across thresholds")
    p.add_argument("--model-config", required=True)
    p.add_argument("--routers", required=True)
    p.add_argument("--prompts", required=True, help="newline-delimited prompts file")
    p.add_argument("--thetas", required=True, help="comma-separated, e.g. 1.0,0.85,0.5")
    p.add_argument("--k-min", type=int, default=0)
    p.add_argument("--mode", choices=MODES, default=PER_TOKEN)
    p.add_argument("--seed", type=int, default=seed_default)
    p.add_argument("--report", default=None, help="JSON report path")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("probe", help="resolve a model-structure manifest")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("inspect", help="print bank metadata and per-router stats")
    p.add_argument("--routers", required=True)
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None) -> int:
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        return args.func(args)
    except (ValueError, ManifestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, BinaryFormatError, ProbeError, TrainingDivergedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
