"""Command-line interface: subcommands, exit codes, config resolution."""

import json
import subprocess
import sys

import numpy as np
import pytest

from vqgrid import Workspace, read_vqim, write_vqim
from vqgrid.cli import main

CLI_CFG = {
    "seed": 5,
    "grid": {"shape": [12, 12, 12], "sh_degree": 0},
    "views": {"train": 3, "test": 2, "width": 24, "height": 24,
              "focal": 16.0, "radius": 3.0},
    "train": {"iterations": 80, "rays_per_batch": 1024},
    "vq": {"K": 8, "init_iters": 20, "batch_voxels": 2048, "expire_J": 2},
    "finetune": {"iterations": 30, "rays_per_batch": 1024},
}


@pytest.fixture(scope="module")
def cfg_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli_cfg") / "config.json"
    path.write_text(json.dumps(CLI_CFG))
    return path


@pytest.fixture(scope="module")
def chain(tmp_path_factory, cfg_path):
    """Artifact directory after gen-scene, train, and compress."""
    out = tmp_path_factory.mktemp("cli_run")
    for cmd in ("gen-scene", "train", "compress"):
        assert main([cmd, "--config", str(cfg_path), "--out", str(out)]) == 0
    return out


class TestUsageErrors:
    def test_no_arguments(self):
        with pytest.raises(SystemExit) as err:
            main([])
        assert err.value.code == 1

    def test_unknown_subcommand(self):
        with pytest.raises(SystemExit) as err:
            main(["explode"])
        assert err.value.code == 1

    def test_bad_split_choice(self):
        with pytest.raises(SystemExit) as err:
            main(["render", "--split", "validation"])
        assert err.value.code == 1

    def test_help_exits_zero(self, capsys):
        with pytest.raises(SystemExit) as err:
            main(["--help"])
        assert err.value.code == 0
        assert "gen-scene" in capsys.readouterr().out


class TestFullChain:
    def test_gen_scene_reports_view_counts(self, cfg_path, tmp_path, capsys):
        assert main(["gen-scene", "--config", str(cfg_path),
                     "--out", str(tmp_path)]) == 0
        assert "3 train and 2 test views" in capsys.readouterr().out

    def test_train_prints_psnr(self, chain, capsys):
        # config.json was saved by gen-scene, so no --config is needed
        assert main(["train", "--out", str(chain)]) == 0
        out = capsys.readouterr().out
        assert out.startswith("train PSNR ") and out.rstrip().endswith(" dB")

    def test_compress_prints_stage_table(self, chain, cfg_path, capsys):
        assert main(["compress", "--config", str(cfg_path),
                     "--out", str(chain)]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        stages = [line.split(":")[0] for line in lines]
        assert stages == ["raw", "pruned", "vq", "finetuned", "container"]
        assert all("bytes" in line and "dB" in line for line in lines)

    def test_decompress(self, chain, capsys):
        assert main(["decompress", "--out", str(chain)]) == 0
        assert "decoded 12x12x12 grid" in capsys.readouterr().out
        assert Workspace(chain).decoded.exists()

    def test_render_writes_images(self, chain, capsys):
        assert main(["render", "--out", str(chain), "--split", "test",
                     "--format", "ppm"]) == 0
        assert "wrote 2 ppm images" in capsys.readouterr().out
        renders = sorted(Workspace(chain).renders_dir("test").glob("*.ppm"))
        assert len(renders) == 2

    def test_eval_prints_psnr(self, chain, capsys):
        assert main(["eval", "--out", str(chain)]) == 0
        out = capsys.readouterr().out
        assert out.startswith("PSNR ") and out.rstrip().endswith(" dB")
        assert Workspace(chain).eval_report.exists()

    def test_report_writes_both_sweeps(self, chain, capsys):
        assert main(["report", "--out", str(chain),
                     "--finetune-iters", "0"]) == 0
        ws = Workspace(chain)
        assert ws.sweep_codebook.exists() and ws.sweep_quantiles.exists()
        assert len(ws.sweep_quantiles.read_text().splitlines()) > 2


class TestConfigResolution:
    def test_seed_flag_is_persisted_by_gen_scene(self, cfg_path, tmp_path):
        assert main(["gen-scene", "--config", str(cfg_path), "--seed", "99",
                     "--out", str(tmp_path)]) == 0
        saved = json.loads(Workspace(tmp_path).config.read_text())
        assert saved["seed"] == 99

    def test_explicit_config_beats_saved_copy(self, cfg_path, tmp_path):
        main(["gen-scene", "--config", str(cfg_path), "--out", str(tmp_path)])
        other = tmp_path / "other.json"
        other.write_text(json.dumps({**CLI_CFG, "seed": 123}))
        assert main(["gen-scene", "--config", str(other),
                     "--out", str(tmp_path)]) == 0
        saved = json.loads(Workspace(tmp_path).config.read_text())
        assert saved["seed"] == 123

    def test_compress_overrides(self, chain, cfg_path, tmp_path, capsys):
        # quantile and codebook flags land in the container metadata
        import shutil

        from vqgrid import container_metadata

        out = tmp_path / "run"
        shutil.copytree(chain, out)
        assert main(["compress", "--config", str(cfg_path), "--out", str(out),
                     "--beta-p", "0.01", "--beta-k", "0.5",
                     "--codebook-size", "4", "--finetune-iters", "0"]) == 0
        capsys.readouterr()
        meta = container_metadata(Workspace(out).container.read_bytes())
        assert meta["K"] == 4
        assert meta["beta_p"] == pytest.approx(0.01)
        assert meta["beta_k"] == pytest.approx(0.5)


class TestFailureExitCodes:
    def test_train_before_gen_scene(self, tmp_path, capsys):
        assert main(["train", "--out", str(tmp_path)]) == 2
        assert "vqgrid: error:" in capsys.readouterr().err

    def test_eval_before_compress(self, cfg_path, tmp_path, capsys):
        main(["gen-scene", "--config", str(cfg_path), "--out", str(tmp_path)])
        capsys.readouterr()
        assert main(["eval", "--out", str(tmp_path)]) == 2
        assert "vqgrid: error:" in capsys.readouterr().err

    def test_unknown_config_key(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"foo": 1}))
        assert main(["gen-scene", "--config", str(bad),
                     "--out", str(tmp_path)]) == 2
        assert "unknown config key" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path, capsys):
        assert main(["train", "--config", str(tmp_path / "nope.json"),
                     "--out", str(tmp_path)]) == 2
        assert "vqgrid: error:" in capsys.readouterr().err

    def test_numeric_failure_exits_three(self, cfg_path, tmp_path, capsys):
        main(["gen-scene", "--config", str(cfg_path), "--out", str(tmp_path)])
        view = Workspace(tmp_path).train_dir / "view_0000.vqim"
        img = read_vqim(view)
        img[:] = np.nan
        write_vqim(img, view)
        capsys.readouterr()
        assert main(["train", "--out", str(tmp_path)]) == 3
        err = capsys.readouterr().err
        assert "vqgrid: numeric failure:" in err and "diverged" in err


class TestInstalledScript:
    def test_console_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "vqgrid.cli", "--help"],
                              capture_output=True, text=True)
        assert proc.returncode == 0
        assert "compress" in proc.stdout
