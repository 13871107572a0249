import dataclasses
import json
from pathlib import Path

import pytest

from earlyexit.calibration import load_bank, save_bank
from earlyexit.cli import SEED_ENV_VAR, main
from earlyexit.fixtures import make_rigged_bank, manifest_path
from earlyexit.model import desk_config, save_model_config


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Shared on-disk inputs: model config, small corpus, prompts file."""
    root = tmp_path_factory.mktemp("cli")
    config_path = root / "model.cfg"
    save_model_config(desk_config(), config_path)
    corpus_path = root / "corpus.txt"
    corpus_path.write_text("\n".join(
        f"document number {i} talks about the harbor" for i in range(20)) + "\n")
    prompts_path = root / "prompts.txt"
    prompts_path.write_text("the first prompt\nanother stretch of text\nthird\n")
    return {"config": str(config_path), "corpus": str(corpus_path),
            "prompts": str(prompts_path), "root": root}


@pytest.fixture(scope="module")
def rigged_bank_path(tmp_path_factory, workdir):
    path = tmp_path_factory.mktemp("banks") / "rigged.bank"
    save_bank(make_rigged_bank(desk_config(), hot_layers=(7,)), path)
    return str(path)


def run_cli(args):
    return main(list(args))


class TestCalibrateCommand:
    def test_trains_and_writes_bank(self, workdir, tmp_path, capsys):
        out = tmp_path / "routers.bank"
        code = run_cli(["calibrate", "--model-config", workdir["config"],
                        "--corpus", workdir["corpus"], "--epochs", "3",
                        "--out", str(out)])
        assert code == 0
        captured = capsys.readouterr()
        assert f"bank written to {out}" in captured.out
        assert "layer   3:" in captured.out
        bank = load_bank(out)
        assert bank.checkpoints == (3, 7, 11)

    def test_bad_tau_is_usage_error(self, workdir, tmp_path, capsys):
        code = run_cli(["calibrate", "--model-config", workdir["config"],
                        "--corpus", workdir["corpus"], "--tau", "1.5",
                        "--out", str(tmp_path / "x.bank")])
        assert code == 2
        assert "convergence_threshold" in capsys.readouterr().err

    def test_missing_required_flag(self, workdir):
        with pytest.raises(SystemExit) as excinfo:
            run_cli(["calibrate", "--model-config", workdir["config"]])
        assert excinfo.value.code == 2

    def test_missing_corpus_file(self, workdir, tmp_path, capsys):
        code = run_cli(["calibrate", "--model-config", workdir["config"],
                        "--corpus", str(tmp_path / "nope"), "--epochs", "1",
                        "--out", str(tmp_path / "x.bank")])
        assert code in (1, 2)
        assert "error:" in capsys.readouterr().err


class TestGenerateCommand:
    def test_baseline_and_off_switch_agree(self, workdir, rigged_bank_path, capsys):
        base = ["generate", "--model-config", workdir["config"],
                "--prompt", "tide tables", "--max-tokens", "16"]
        assert run_cli(base) == 0
        baseline_out = capsys.readouterr().out

        assert run_cli(base + ["--routers", rigged_bank_path,
                               "--theta", "1.0"]) == 0
        routed_out = capsys.readouterr().out

        # Identical continuation; only the summary line may differ in flags.
        assert baseline_out.splitlines()[1:] == routed_out.splitlines()[1:]
        assert "prefill_exit_rate=0.0000" in routed_out

    def test_hot_bank_reports_exits(self, workdir, rigged_bank_path, capsys):
        code = run_cli(["generate", "--model-config", workdir["config"],
                        "--routers", rigged_bank_path, "--prompt", "exits",
                        "--theta", "0.5", "--max-tokens", "8"])
        assert code == 0
        out = capsys.readouterr().out
        assert "decode_exit_rate=1.0000" in out
        assert "prefill_exit_rate=1.0000" in out

    def test_report_reproducible_modulo_timestamp(self, workdir, rigged_bank_path,
                                                  tmp_path, capsys):
        reports = []
        for name in ("a.json", "b.json"):
            path = tmp_path / name
            code = run_cli(["generate", "--model-config", workdir["config"],
                            "--routers", rigged_bank_path, "--prompt", "repeat",
                            "--theta", "0.5", "--max-tokens", "6",
                            "--seed", "3", "--report", str(path)])
            assert code == 0
            reports.append(path.read_text().splitlines())
        capsys.readouterr()

        a, b = reports
        assert len(a) == len(b)
        diff = [i for i, (x, y) in enumerate(zip(a, b)) if x != y]
        assert all("created_at" in a[i] for i in diff)
        assert len(diff) <= 1

        doc = json.loads("\n".join(a))
        assert doc["run"]["subcommand"] == "generate"
        assert doc["report"]["decode"]["histogram"] == {"7": 5}
        assert len(doc["output_tokens"]) == 6

    def test_prompt_from_file(self, workdir, tmp_path, capsys):
        prompt_file = tmp_path / "prompt.txt"
        prompt_file.write_text("read me from disk\n")
        code = run_cli(["generate", "--model-config", workdir["config"],
                        "--prompt", str(prompt_file), "--max-tokens", "4",
                        "--report", str(tmp_path / "r.json")])
        assert code == 0
        capsys.readouterr()
        doc = json.loads((tmp_path / "r.json").read_text())
        assert doc["run"]["prompt"] == "read me from disk"

    def test_digest_mismatch_warns(self, workdir, tmp_path, capsys):
        other = dataclasses.replace(desk_config(), seed=desk_config().seed + 1)
        bank_path = tmp_path / "other.bank"
        save_bank(make_rigged_bank(other, hot_layers=(7,)), bank_path)
        code = run_cli(["generate", "--model-config", workdir["config"],
                        "--routers", str(bank_path), "--prompt", "warn",
                        "--max-tokens", "4"])
        assert code == 0
        assert "different model configuration" in capsys.readouterr().err

    def test_bad_theta_is_usage_error(self, workdir, rigged_bank_path, capsys):
        code = run_cli(["generate", "--model-config", workdir["config"],
                        "--routers", rigged_bank_path, "--prompt", "x",
                        "--theta", "0.0"])
        assert code == 2
        assert "exit_threshold" in capsys.readouterr().err


class TestSweepCommand:
    def test_table_and_report(self, workdir, rigged_bank_path, tmp_path, capsys):
        report = tmp_path / "sweep.json"
        code = run_cli(["sweep", "--model-config", workdir["config"],
                        "--routers", rigged_bank_path,
                        "--prompts", workdir["prompts"],
                        "--thetas", "1.0,0.5", "--report", str(report)])
        assert code == 0
        out_lines = capsys.readouterr().out.splitlines()
        assert out_lines[0].startswith("theta=1")
        assert "exit_rate=0.0000" in out_lines[0]
        assert out_lines[1].startswith("theta=0.5")
        assert "exit_rate=1.0000" in out_lines[1]
        assert "L7:" in out_lines[1]

        doc = json.loads(report.read_text())
        assert [row["theta"] for row in doc["rows"]] == [1.0, 0.5]
        total = sum(doc["rows"][0]["histogram"].values())
        assert total == doc["rows"][0]["tokens_total"]

    def test_malformed_thetas(self, workdir, rigged_bank_path, capsys):
        code = run_cli(["sweep", "--model-config", workdir["config"],
                        "--routers", rigged_bank_path,
                        "--prompts", workdir["prompts"],
                        "--thetas", "1.0,banana"])
        assert code == 2
        assert "--thetas" in capsys.readouterr().err

    def test_empty_prompts_file(self, workdir, rigged_bank_path, tmp_path, capsys):
        empty = tmp_path / "empty.txt"
        empty.write_text("\n")
        code = run_cli(["sweep", "--model-config", workdir["config"],
                        "--routers", rigged_bank_path, "--prompts", str(empty),
                        "--thetas", "0.5"])
        assert code == 2
        assert "no prompts" in capsys.readouterr().err


class TestProbeCommand:
    def test_reference_manifest(self, capsys):
        code = run_cli(["probe", "--manifest", str(manifest_path("llama"))])
        assert code == 0
        out = capsys.readouterr().out
        assert "layers=model.layers" in out
        assert "layers.method=named-path" in out
        assert "layer_count=4" in out

    def test_unresolvable_manifest(self, tmp_path, capsys):
        bad = tmp_path / "bad.manifest"
        bad.write_text("config hidden_size=64\nroot: module\n")
        code = run_cli(["probe", "--manifest", str(bad)])
        assert code == 1
        assert "error:" in capsys.readouterr().err

    def test_syntax_error_is_usage_error(self, tmp_path, capsys):
        bad = tmp_path / "tabs.manifest"
        bad.write_text("root: module\n\tchild: module\n")
        code = run_cli(["probe", "--manifest", str(bad)])
        assert code == 2


class TestInspectCommand:
    def test_prints_metadata(self, rigged_bank_path, capsys):
        code = run_cli(["inspect", "--routers", rigged_bank_path])
        assert code == 0
        out = capsys.readouterr().out
        assert "d=64 b=128 c=4" in out
        assert "checkpoints=[3, 7, 11]" in out
        assert "params_per_router=" in out

    def test_truncated_bank_is_operational_error(self, rigged_bank_path,
                                                 tmp_path, capsys):
        data = Path(rigged_bank_path).read_bytes()
        broken = tmp_path / "broken.bank"
        broken.write_bytes(data[:-40])
        code = run_cli(["inspect", "--routers", str(broken)])
        assert code == 1
        assert "error:" in capsys.readouterr().err


class TestSeedEnvironment:
    def test_env_seed_matches_explicit_flag(self, workdir, monkeypatch, capsys):
        args = ["generate", "--model-config", workdir["config"],
                "--prompt", "seeded sampling", "--temperature", "1.0",
                "--max-tokens", "12"]
        monkeypatch.setenv(SEED_ENV_VAR, "41")
        assert run_cli(args) == 0
        env_out = capsys.readouterr().out

        monkeypatch.delenv(SEED_ENV_VAR)
        assert run_cli(args + ["--seed", "41"]) == 0
        flag_out = capsys.readouterr().out
        assert env_out == flag_out

    def test_junk_env_seed_is_usage_error(self, workdir, monkeypatch, capsys):
        monkeypatch.setenv(SEED_ENV_VAR, "potato")
        code = run_cli(["generate", "--model-config", workdir["config"],
                        "--prompt", "x", "--max-tokens", "2"])
        assert code == 2
        assert SEED_ENV_VAR in capsys.readouterr().err
