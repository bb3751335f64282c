import json

import numpy as np
import pytest

from viewforge.cli import CONFIG_FLAGS, build_parser, main, resolve_cache_dir, resolve_config
from viewforge.core import CONFIG_KEYS, ViewSpec, save_image, seeded_rng
from viewforge.metrics import METRIC_COLUMNS

from conftest import make_dataset

FAST_FLAGS = [
    "--backbone", "mock", "--nvs", "mock", "--image-size", "64",
    "--embed-opt-steps-input", "2", "--lora-steps-input", "2",
    "--embed-opt-steps-view", "2", "--lora-steps-view", "2",
    "--embed-lr", "0.05", "--lora-lr", "0.02", "--lora-rank", "2",
    "--sampler-steps", "2",
]


def write_input(tmp_path, name="photo.png", label="cli:input"):
    path = tmp_path / name
    save_image(seeded_rng(0, label).random((80, 80, 3)), path)
    return path


def run_generate(tmp_path, out="out", extra=()):
    img = write_input(tmp_path)
    argv = ["generate", str(img), "--caption", "a test pattern",
            "--elevation", "25", "--azimuth", "35",
            "--out", str(tmp_path / out)] + FAST_FLAGS + list(extra)
    return main(argv), tmp_path / out / "photo" / "30_30"


class TestParser:
    def test_help_exits_zero(self, capsys):
        with pytest.raises(SystemExit) as err:
            main(["--help"])
        assert err.value.code == 0
        assert "generate" in capsys.readouterr().out

    def test_unknown_flag_exits_two(self, capsys):
        with pytest.raises(SystemExit) as err:
            main(["generate", "x.png", "--no-such-flag"])
        assert err.value.code == 2

    def test_missing_subcommand_exits_two(self):
        with pytest.raises(SystemExit) as err:
            main([])
        assert err.value.code == 2

    def test_every_config_key_has_one_flag_per_subcommand(self):
        parser = build_parser()
        subparsers = parser._subparsers._group_actions[0]
        assert set(subparsers.choices) == {"generate", "batch", "evaluate", "cache"}
        for name, sp in subparsers.choices.items():
            opts = [o for a in sp._actions for o in a.option_strings]
            for key, flag in CONFIG_FLAGS.items():
                assert opts.count(flag) == 1, (name, flag)

    def test_flag_spelling_derives_from_keys(self):
        assert CONFIG_FLAGS["mi_weight"] == "--mi-weight"
        assert CONFIG_FLAGS["captioner.timeout_s"] == "--captioner-timeout-s"
        assert set(CONFIG_FLAGS) == set(CONFIG_KEYS)


class TestConfigResolution:
    def test_cli_beats_file_beats_default(self, tmp_path):
        cfg_file = tmp_path / "run.cfg"
        cfg_file.write_text("seed = 5\nmi_bins = 16\n", encoding="utf-8")
        parser = build_parser()
        args = parser.parse_args(["batch", "d", "--config", str(cfg_file), "--seed", "7"])
        cfg = resolve_config(args)
        assert cfg.seed == 7          # CLI wins
        assert cfg.mi_bins == 16      # file beats default
        assert cfg.cfg_scale == 7.5   # untouched default

    def test_views_flag_parses_pairs(self):
        args = build_parser().parse_args(["batch", "d", "--views", "30,30;-20,210"])
        cfg = resolve_config(args)
        assert cfg.views == (ViewSpec(30, 30), ViewSpec(-20, 210))

    def test_invalid_override_raises(self):
        args = build_parser().parse_args(["batch", "d", "--mi-bins", "1"])
        with pytest.raises(Exception):
            resolve_config(args)

    def test_cache_dir_resolution(self, tmp_path, monkeypatch):
        monkeypatch.delenv("VIEWFORGE_CACHE_DIR", raising=False)
        args = build_parser().parse_args(["cache", "info", "--out", str(tmp_path / "o")])
        assert resolve_cache_dir(args) == tmp_path / "o" / "cache"
        monkeypatch.setenv("VIEWFORGE_CACHE_DIR", str(tmp_path / "envcache"))
        assert resolve_cache_dir(args) == tmp_path / "envcache"
        args = build_parser().parse_args(
            ["cache", "info", "--cache-dir", str(tmp_path / "flag")])
        assert resolve_cache_dir(args) == tmp_path / "flag"


class TestGenerateCommand:
    def test_happy_path_writes_all_artifacts(self, tmp_path, capsys):
        code, run_dir = run_generate(tmp_path)
        assert code == 0
        for name in ("generated.png", "meta.json", "state.ckpt", "losses.csv"):
            assert (run_dir / name).is_file(), name
        meta = json.loads((run_dir / "meta.json").read_text())
        assert meta["requested_view"] == {"elevation_deg": 25.0, "azimuth_deg": 35.0}
        assert meta["view"] == {"elevation_deg": 30.0, "azimuth_deg": 30.0}
        assert meta["target_prompt"].startswith(
            "View from an elevated angle of +30 degrees")
        assert "wrote" in capsys.readouterr().out

    def test_repeat_run_reproduces_bytes(self, tmp_path):
        code1, dir1 = run_generate(tmp_path, out="out1")
        code2, dir2 = run_generate(tmp_path, out="out2")
        assert code1 == code2 == 0
        assert (dir1 / "generated.png").read_bytes() == (dir2 / "generated.png").read_bytes()

    def test_out_of_range_elevation_exits_two(self, tmp_path, capsys):
        img = write_input(tmp_path)
        code = main(["generate", str(img), "--caption", "c",
                     "--elevation", "120", "--azimuth", "0"] + FAST_FLAGS)
        assert code == 2
        assert "error" in capsys.readouterr().err

    def test_missing_image_exits_two(self, tmp_path, capsys):
        code = main(["generate", str(tmp_path / "ghost.png"), "--caption", "c",
                     "--elevation", "30", "--azimuth", "30"] + FAST_FLAGS)
        assert code == 2

    def test_missing_caption_exits_two(self, tmp_path):
        img = write_input(tmp_path)
        code = main(["generate", str(img), "--elevation", "30", "--azimuth", "30"]
                    + FAST_FLAGS)
        assert code == 2

    def test_unknown_backbone_exits_two(self, tmp_path):
        img = write_input(tmp_path)
        code = main(["generate", str(img), "--caption", "c", "--elevation", "30",
                     "--azimuth", "30", "--backbone", "sd99"])
        assert code == 2

    def test_unavailable_nvs_backend_exits_three(self, tmp_path):
        try:
            import diffusers  # noqa: F401
            pytest.skip("diffusers installed; the unavailable path is not reachable")
        except ImportError:
            pass
        img = write_input(tmp_path)
        code = main(["generate", str(img), "--caption", "c", "--elevation", "30",
                     "--azimuth", "30", "--backbone", "mock", "--nvs", "zero123pp"]
                    + FAST_FLAGS[4:])
        assert code == 3


class TestBatchCommand:
    def dataset(self, tmp_path, n=2):
        root = tmp_path / "data"
        make_dataset(root, n=n)
        return root

    def scene_rows(self, out_dir):
        lines = (out_dir / "report.csv").read_text().strip().splitlines()
        return [l for l in lines[1:] if l.startswith("scene,")]

    def test_default_runs_validation_split(self, tmp_path):
        root = self.dataset(tmp_path)
        out = tmp_path / "out"
        code = main(["batch", str(root), "--out", str(out),
                     "--views", "30,30;-20,210"] + FAST_FLAGS)
        assert code == 0
        rows = self.scene_rows(out)
        assert len(rows) == 2  # ceil(0.1 * 2) = 1 scene, 2 views
        assert len({r.split(",")[4] for r in rows}) == 1

    def test_all_flag_runs_every_scene(self, tmp_path, capsys):
        root = self.dataset(tmp_path)
        out = tmp_path / "out"
        code = main(["batch", str(root), "--all", "--out", str(out),
                     "--views", "30,30;-20,210"] + FAST_FLAGS)
        assert code == 0
        rows = self.scene_rows(out)
        assert len(rows) == 4
        assert {r.split(",")[4] for r in rows} == {"scenea", "sceneb"}
        assert "4 runs ok, 0 failed" in capsys.readouterr().out

    def test_empty_dataset_exits_two(self, tmp_path):
        root = tmp_path / "empty"
        root.mkdir()
        code = main(["batch", str(root), "--all", "--out", str(tmp_path / "out")]
                    + FAST_FLAGS)
        assert code == 2

    def test_manifest_override(self, tmp_path):
        root = self.dataset(tmp_path)
        manifest = tmp_path / "m.tsv"
        manifest.write_text(
            f"only\t{root / 'scenea' / 'input.png'}\ta manifest caption\n",
            encoding="utf-8")
        out = tmp_path / "out"
        code = main(["batch", str(root), "--manifest", str(manifest), "--all",
                     "--out", str(out), "--views", "30,30"] + FAST_FLAGS)
        assert code == 0
        rows = self.scene_rows(out)
        assert len(rows) == 1
        assert rows[0].split(",")[4] == "only"

    def test_workers_flag_matches_serial_report(self, tmp_path):
        root = self.dataset(tmp_path)
        out1, out4 = tmp_path / "o1", tmp_path / "o4"
        assert main(["batch", str(root), "--all", "--out", str(out1),
                     "--views", "30,30"] + FAST_FLAGS) == 0
        assert main(["batch", str(root), "--all", "--out", str(out4),
                     "--views", "30,30", "--workers", "4"] + FAST_FLAGS) == 0
        assert (out1 / "report.csv").read_text() == (out4 / "report.csv").read_text()


class TestEvaluateCommand:
    def self_eval_setup(self, tmp_path):
        root = tmp_path / "data"
        make_dataset(root, n=2)
        gens = tmp_path / "gens"
        for sid in ("scenea", "sceneb"):
            (gens / sid).mkdir(parents=True)
            (gens / sid / "generated.png").write_bytes(
                (root / sid / "input.png").read_bytes())
        return root, gens

    def test_self_evaluation_identities(self, tmp_path):
        root, gens = self.self_eval_setup(tmp_path)
        out = tmp_path / "out"
        code = main(["evaluate", "--inputs", str(root), "--generations", str(gens),
                     "--out", str(out)])
        assert code == 0
        lines = (out / "report.csv").read_text().strip().splitlines()
        assert lines[0] == "kind,dataset,view,method,scene_id," + ",".join(METRIC_COLUMNS)
        report = json.loads((out / "report.json").read_text())
        agg = report["aggregate"]
        assert agg["LPIPS"] == pytest.approx(0.0, abs=1e-9)
        assert agg["CLIP-I"] == pytest.approx(1.0, abs=1e-9)
        assert agg["CLIPD"] == pytest.approx(0.0, abs=1e-9)
        assert agg["View-CLIPD"] == pytest.approx(0.0, abs=1e-9)
        assert len(report["per_scene"]) == 2

    def test_batch_outputs_are_evaluable(self, tmp_path):
        root = tmp_path / "data"
        make_dataset(root, n=1)
        gen_out = tmp_path / "runs"
        assert main(["batch", str(root), "--all", "--out", str(gen_out),
                     "--views", "30,30"] + FAST_FLAGS) == 0
        out = tmp_path / "eval"
        code = main(["evaluate", "--inputs", str(root),
                     "--generations", str(gen_out), "--out", str(out)])
        assert code == 0
        doc = json.loads((out / "report.json").read_text())
        assert list(doc["per_scene"]) == ["scenea@30_30"]

    def test_unpaired_sets_exit_two(self, tmp_path, capsys):
        root, gens = self.self_eval_setup(tmp_path)
        import shutil
        shutil.rmtree(gens / "sceneb")
        code = main(["evaluate", "--inputs", str(root), "--generations", str(gens),
                     "--out", str(tmp_path / "out")])
        assert code == 2
        assert "sceneb" in capsys.readouterr().err

    def test_extra_generation_exits_two(self, tmp_path):
        root, gens = self.self_eval_setup(tmp_path)
        (gens / "phantom").mkdir()
        (gens / "phantom" / "generated.png").write_bytes(
            (gens / "scenea" / "generated.png").read_bytes())
        code = main(["evaluate", "--inputs", str(root), "--generations", str(gens),
                     "--out", str(tmp_path / "out")])
        assert code == 2

    def test_missing_generation_root_exits_two(self, tmp_path):
        root = tmp_path / "data"
        make_dataset(root, n=1)
        code = main(["evaluate", "--inputs", str(root),
                     "--generations", str(tmp_path / "nowhere"),
                     "--out", str(tmp_path / "out")])
        assert code == 2


class TestCacheCommand:
    def test_info_and_clear_round_trip(self, tmp_path, capsys):
        cache = tmp_path / "cache"
        code, _ = run_generate(tmp_path, extra=["--cache-dir", str(cache)])
        assert code == 0
        capsys.readouterr()
        assert main(["cache", "info", "--cache-dir", str(cache)]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["backends"]["mock"]["entries"] == 1
        assert doc["backends"]["mock"]["bytes"] > 0
        assert main(["cache", "clear", "--cache-dir", str(cache)]) == 0
        assert "removed" in capsys.readouterr().out
        assert main(["cache", "info", "--cache-dir", str(cache)]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["backends"] == {}

    def test_cached_guidance_is_reused_across_runs(self, tmp_path):
        cache = tmp_path / "cache"
        run_generate(tmp_path, out="o1", extra=["--cache-dir", str(cache)])
        pngs = list(cache.rglob("*.png"))
        assert len(pngs) == 1
        stamp = pngs[0].stat().st_mtime_ns
        run_generate(tmp_path, out="o2", extra=["--cache-dir", str(cache)])
        assert list(cache.rglob("*.png")) == pngs
        assert pngs[0].stat().st_mtime_ns == stamp
