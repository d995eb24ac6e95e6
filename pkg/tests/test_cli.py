import csv
import json
from types import SimpleNamespace

import numpy as np
import pytest

from streakfix import cli, container, networks, training
from streakfix.errors import ConfigError


def _run(*argv):
    return cli.main(list(argv))


@pytest.fixture(scope="module")
def cli_env(tmp_path_factory):
    """A generated dataset plus one quickly trained checkpoint."""
    root = tmp_path_factory.mktemp("cliflow")
    ds = root / "ds"
    rc = _run(
        "gen-data", "--out", str(ds), "--phantoms", "4", "--slices", "1",
        "--size", "32", "--sparse-views", "10", "--dense-views", "24",
        "--ellipses", "4", "--patch-size", "0", "--patches-per-slice", "0",
        "--seed", "3",
    )
    assert rc == 0
    run_dir = root / "run"
    rc = _run(
        "train", "--dataset", str(ds), "--out", str(run_dir), "--variant",
        "baseline-mse", "--fold", "0", "--epochs", "1", "--batch-size", "2",
        "--folds", "2", "--gen-widths", "4,8,8,8", "--disc-widths", "4,8",
        "--seed", "1", "--deterministic",
    )
    assert rc == 0
    ckpt = run_dir / "fold00" / "generator_epoch001.svcp"
    assert ckpt.is_file()
    return SimpleNamespace(root=root, ds=ds, ckpt=ckpt)


def _help_text(capsys, *argv):
    with pytest.raises(SystemExit) as excinfo:
        _run(*argv, "--help")
    assert excinfo.value.code == 0
    # Collapse argparse line wrapping so default values stay searchable.
    return " ".join(capsys.readouterr().out.split())


class TestHelp:
    def test_no_subcommand_prints_help(self, capsys):
        assert _run() == cli.EXIT_CONFIG
        assert "gen-data" in capsys.readouterr().out

    def test_gen_data_defaults_are_full_scale(self, capsys):
        text = _help_text(capsys, "gen-data")
        assert "(default: 67)" in text
        assert "(default: 200)" in text
        assert "(default: 256)" in text

    def test_train_defaults_are_full_scale(self, capsys):
        text = _help_text(capsys, "train")
        assert "(default: 0.0001)" in text
        assert "(default: 0.5)" in text
        assert "(default: 50)" in text
        assert "(default: 100.0)" in text
        assert "(default: 10.0)" in text
        assert "(default: 64,128,256,512)" in text


class TestResolution:
    def test_config_file_and_flag_precedence(self, tmp_path, monkeypatch):
        monkeypatch.delenv(cli.SEED_ENV_VAR, raising=False)
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"sparse_views": 9, "dense_views": 18, "seed": 5}))
        out = tmp_path / "ds"
        rc = _run(
            "gen-data", "--out", str(out), "--phantoms", "1", "--slices", "1",
            "--size", "32", "--ellipses", "2", "--patch-size", "0",
            "--patches-per-slice", "0", "--config", str(cfg), "--dense-views", "20",
        )
        assert rc == 0
        meta = container.Dataset.load(out).meta
        assert meta["sparse_views"] == 9  # config beats default
        assert meta["dense_views"] == 20  # flag beats config
        assert meta["seed"] == 5

    def test_env_seed_between_config_and_flags(self, tmp_path, monkeypatch):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"seed": 5}))
        monkeypatch.setenv(cli.SEED_ENV_VAR, "123")
        base = [
            "gen-data", "--phantoms", "1", "--slices", "1", "--size", "32",
            "--ellipses", "2", "--sparse-views", "4", "--dense-views", "9",
            "--patch-size", "0", "--patches-per-slice", "0", "--config", str(cfg),
        ]
        out_env = tmp_path / "env"
        assert _run(*base, "--out", str(out_env)) == 0
        assert container.Dataset.load(out_env).meta["seed"] == 123
        out_flag = tmp_path / "flag"
        assert _run(*base, "--out", str(out_flag), "--seed", "4") == 0
        assert container.Dataset.load(out_flag).meta["seed"] == 4

    def test_env_seed_must_be_integer(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv(cli.SEED_ENV_VAR, "lots")
        rc = _run("gen-data", "--out", str(tmp_path / "ds"))
        assert rc == cli.EXIT_CONFIG
        assert cli.SEED_ENV_VAR in capsys.readouterr().err

    def test_unknown_config_key_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"sparse_view": 9}))
        rc = _run("gen-data", "--out", str(tmp_path / "ds"), "--config", str(cfg))
        assert rc == cli.EXIT_CONFIG
        err = capsys.readouterr().err
        assert "sparse_view" in err and "known keys" in err

    def test_config_must_be_object(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text("[1, 2]")
        assert _run("gen-data", "--out", str(tmp_path / "ds"), "--config", str(cfg)) == 2

    def test_missing_config_file_is_io_error(self, tmp_path):
        rc = _run("gen-data", "--out", str(tmp_path / "ds"), "--config", str(tmp_path / "no.json"))
        assert rc == cli.EXIT_IO

    def test_coerce_types(self):
        opt_int = cli.Option("epochs", "int", 1, "")
        assert cli._coerce(opt_int, 3, "cfg") == 3
        with pytest.raises(ConfigError, match="integer"):
            cli._coerce(opt_int, True, "cfg")
        with pytest.raises(ConfigError, match="integer"):
            cli._coerce(opt_int, "3", "cfg")
        opt_w = cli.Option("gen_widths", "widths", (), "")
        assert cli._coerce(opt_w, [4, 8], "cfg") == (4, 8)
        assert cli._coerce(opt_w, "4,8", "cfg") == (4, 8)
        with pytest.raises(ConfigError):
            cli._coerce(opt_w, [4, "x"], "cfg")
        opt_s = cli.Option("checkpoints", "specs", {}, "")
        assert cli._coerce(opt_s, {"m": "p"}, "cfg") == {"m": "p"}
        with pytest.raises(ConfigError):
            cli._coerce(opt_s, ["m=p"], "cfg")

    def test_spec_flags(self):
        assert cli._specs_from_args(["a=1", "b=2"], "--checkpoints") == {"a": "1", "b": "2"}
        with pytest.raises(ConfigError, match="NAME=PATH"):
            cli._specs_from_args(["oops"], "--checkpoints")
        with pytest.raises(ConfigError, match="duplicate"):
            cli._specs_from_args(["a=1", "a=2"], "--checkpoints")


class TestGenData:
    def test_empty_dataset_is_valid(self, tmp_path):
        out = tmp_path / "empty"
        assert _run("gen-data", "--out", str(out), "--phantoms", "0") == 0
        assert len(container.Dataset.load(out)) == 0

    def test_rerun_is_byte_identical(self, tmp_path):
        flags = [
            "--phantoms", "2", "--slices", "1", "--size", "32", "--ellipses", "3",
            "--sparse-views", "6", "--dense-views", "14", "--patch-size", "16",
            "--patches-per-slice", "2", "--seed", "11",
        ]
        a, b = tmp_path / "a", tmp_path / "b"
        assert _run("gen-data", "--out", str(a), *flags) == 0
        assert _run("gen-data", "--out", str(b), *flags) == 0
        assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()
        name = container.Dataset.load(a).samples[0].sparse_path
        assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_invalid_views_leave_no_outputs(self, tmp_path, capsys):
        out = tmp_path / "ds"
        rc = _run("gen-data", "--out", str(out), "--sparse-views", "50", "--dense-views", "50")
        assert rc == cli.EXIT_CONFIG
        assert "sparse_views" in capsys.readouterr().err
        assert not out.exists()

    def test_patch_flags_must_agree(self, tmp_path):
        rc = _run("gen-data", "--out", str(tmp_path / "ds"), "--patch-size", "0")
        assert rc == cli.EXIT_CONFIG

    def test_patch_larger_than_slice(self, tmp_path):
        rc = _run("gen-data", "--out", str(tmp_path / "ds"), "--size", "64", "--patch-size", "128")
        assert rc == cli.EXIT_CONFIG

    def test_desk_profile_values(self, tmp_path):
        # Shrink the phantom count via flags; the rest comes from the profile.
        out = tmp_path / "desk"
        rc = _run(
            "gen-data", "--profile", "desk", "--out", str(out),
            "--phantoms", "1", "--slices", "1",
        )
        assert rc == 0
        ds = container.Dataset.load(out)
        assert ds.meta["size"] == 128
        assert ds.meta["sparse_views"] == 25
        assert ds.meta["dense_views"] == 200
        assert ds.meta["patch_size"] == 64
        assert ds.meta["patches_per_slice"] == 5
        assert ds.meta["seed"] == 7
        assert len(ds) == 5
        assert ds.samples[0].width == 64


class TestTrain:
    def test_missing_required_settings(self, capsys):
        rc = _run("train", "--dataset", "somewhere")
        assert rc == cli.EXIT_CONFIG
        err = capsys.readouterr().err
        assert "--out" in err and "--variant" in err

    def test_fold_out_of_range(self, cli_env):
        rc = _run(
            "train", "--dataset", str(cli_env.ds), "--out", "/tmp/unused",
            "--variant", "baseline-mse", "--folds", "2", "--fold", "7",
        )
        assert rc == cli.EXIT_CONFIG

    def test_missing_dataset_is_io_error(self, tmp_path):
        rc = _run(
            "train", "--dataset", str(tmp_path / "none"), "--out", str(tmp_path / "o"),
            "--variant", "baseline-mse",
        )
        assert rc == cli.EXIT_IO

    def test_non_finite_loss_exits_3(self, cli_env, tmp_path, monkeypatch, capsys):
        def poisoned(reference, candidate):
            import torch

            return torch.tensor(float("nan"))

        monkeypatch.setattr("streakfix.losses.mse_loss", poisoned)
        rc = _run(
            "train", "--dataset", str(cli_env.ds), "--out", str(tmp_path / "o"),
            "--variant", "baseline-mse", "--fold", "0", "--epochs", "1",
            "--batch-size", "2", "--folds", "2", "--gen-widths", "4,8,8,8",
            "--disc-widths", "4,8",
        )
        assert rc == cli.EXIT_NUMERICS
        err = capsys.readouterr().err
        assert "diagnostics" in err and "diagnostics.json" in err


class TestInfer:
    def test_output_count_and_roundtrip(self, cli_env, tmp_path):
        out = tmp_path / "corrected"
        rc = _run(
            "infer", "--checkpoint", str(cli_env.ckpt), "--dataset", str(cli_env.ds),
            "--out", str(out),
        )
        assert rc == 0
        images, meta = container.load_output_set(out)
        ds = container.Dataset.load(cli_env.ds)
        assert len(images) == len(ds)
        assert meta["checkpoint"] == str(cli_env.ckpt)
        for rec in ds.samples:
            img = images[(rec.phantom_id, rec.slice_id)]
            assert img.shape == (rec.height, rec.width)
            assert 0.0 < img.min() and img.max() < 1.0

    def test_matches_library_inference(self, cli_env, tmp_path):
        out = tmp_path / "corrected"
        assert _run(
            "infer", "--checkpoint", str(cli_env.ckpt), "--dataset", str(cli_env.ds),
            "--out", str(out),
        ) == 0
        images, _ = container.load_output_set(out)
        ds = container.Dataset.load(cli_env.ds)
        gen = training.load_generator(cli_env.ckpt)
        rec = ds.samples[0]
        expected = training.infer(gen, [ds.load_pair(rec)[0]])[0]
        assert np.array_equal(images[(rec.phantom_id, rec.slice_id)], expected)

    def test_wrong_arch_checkpoint_exits_2(self, cli_env, tmp_path):
        bad = tmp_path / "disc.svcp"
        networks.save_checkpoint(
            bad, networks.DiscriminatorA(widths=(4, 8)), meta={"arch": "discriminator-a"}
        )
        rc = _run(
            "infer", "--checkpoint", str(bad), "--dataset", str(cli_env.ds),
            "--out", str(tmp_path / "o"),
        )
        assert rc == cli.EXIT_CONFIG
        assert not (tmp_path / "o").exists()


class TestEval:
    def _eval(self, cli_env, out, *extra):
        return _run(
            "eval", "--dataset", str(cli_env.ds), "--out", str(out),
            "--fold", "0", "--folds", "2", "--seed", "1", *extra,
        )

    def test_report_contents(self, cli_env, tmp_path, capsys):
        out = tmp_path / "report"
        rc = self._eval(
            cli_env, out, "--checkpoints", f"trained={cli_env.ckpt}",
        )
        assert rc == 0
        stdout = capsys.readouterr().out
        assert "input" in stdout
        table = (out / "metrics.txt").read_text()
        assert "trained" in table
        with open(out / "metrics.csv") as fh:
            rows = {r["model"]: r for r in csv.DictReader(fh)}
        assert set(rows) == {"input", "trained"}
        # CSV values agree with the text table at table precision.
        for line in table.splitlines()[2:]:
            if not line.strip():
                continue
            model, ssim_text = line.split()[:2]
            assert abs(float(rows[model]["ssim"]) - float(ssim_text)) < 5e-5
        roi = json.loads((out / "roi.json").read_text())
        assert set(roi["means"]) == {"input", "trained"}
        assert (out / "comparison.png").stat().st_size > 0
        assert (out / "roi_bars.png").stat().st_size > 0

    def test_missing_checkpoint_listed_absent(self, cli_env, tmp_path, capsys):
        out = tmp_path / "report"
        rc = self._eval(cli_env, out, "--checkpoints", "ghost=/nowhere/g.svcp")
        assert rc == 0
        stdout = capsys.readouterr().out
        assert "absent" in stdout and "ghost" in stdout
        with open(out / "metrics.csv") as fh:
            rows = {r["model"]: r for r in csv.DictReader(fh)}
        assert rows["ghost"]["ssim"] == ""

    def test_outputs_source(self, cli_env, tmp_path):
        corrected = tmp_path / "corrected"
        assert _run(
            "infer", "--checkpoint", str(cli_env.ckpt), "--dataset", str(cli_env.ds),
            "--out", str(corrected),
        ) == 0
        out = tmp_path / "report"
        rc = self._eval(
            cli_env, out,
            "--checkpoints", f"inline={cli_env.ckpt}",
            "--outputs", f"fromdisk={corrected}",
        )
        assert rc == 0
        with open(out / "metrics.csv") as fh:
            rows = {r["model"]: r for r in csv.DictReader(fh)}
        assert rows["inline"]["rmse"] == rows["fromdisk"]["rmse"]

    def test_reserved_identity_name(self, cli_env, tmp_path):
        rc = self._eval(cli_env, tmp_path / "r", "--checkpoints", f"input={cli_env.ckpt}")
        assert rc == cli.EXIT_CONFIG

    def test_duplicate_model_name(self, cli_env, tmp_path):
        rc = self._eval(
            cli_env, tmp_path / "r",
            "--checkpoints", "m=/a", "--outputs", "m=/b",
        )
        assert rc == cli.EXIT_CONFIG

    def test_roi_out_of_bounds_exits_2(self, cli_env, tmp_path, capsys):
        out = tmp_path / "r"
        rc = self._eval(cli_env, out, "--roi", "30,30,16,16")
        assert rc == cli.EXIT_CONFIG
        assert "valid top-left range" in capsys.readouterr().err
        assert not out.exists()

    def test_roi_parse_errors(self, cli_env, tmp_path):
        assert self._eval(cli_env, tmp_path / "r", "--roi", "1,2,3") == cli.EXIT_CONFIG
        assert self._eval(cli_env, tmp_path / "r", "--roi", "a,b,c,d") == cli.EXIT_CONFIG

    def test_fold_minus_one_uses_all_samples(self, cli_env, tmp_path):
        out = tmp_path / "r"
        rc = _run("eval", "--dataset", str(cli_env.ds), "--out", str(out), "--fold", "-1")
        assert rc == 0
        text = (out / "metrics.txt").read_text()
        assert "input" in text
