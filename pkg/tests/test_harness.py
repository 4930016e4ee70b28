"""Run orchestration tests: config handling, the two trainers, metrics,
sweeps, export, and the command line."""

import glob
import json
import os

import numpy as np
import pytest

import dualmixer.cli as cli
import dualmixer.data as dd
import dualmixer.harness as hx
import dualmixer.model as dm


def shrink_synth(monkeypatch):
    monkeypatch.setattr(hx, "SYNTH_TRAIN_UNITS", 4)
    monkeypatch.setattr(hx, "SYNTH_TEST_UNITS", 3)
    monkeypatch.setattr(hx, "SYNTH_CYCLES", (24, 32))


def tiny_cfg(tmp_path, **over):
    base = dict(dataset="synth", seed=2, out_dir=str(tmp_path / "runs"),
                b=16, w=8, sl=2, epochs=2, n_layers=1, d=4, m=2)
    base.update(over)
    return hx.RunConfig(**base)


def random_windows(n, l=6, m_vars=3, seed=0):
    rng = np.random.default_rng(seed)
    return [dd.WindowSample(values=rng.uniform(0, 1, (l, m_vars)),
                            label=float(rng.uniform(0, 1)), unit_id=1 + i % 3,
                            anchor_index=i, true_rul_cycles=i)
            for i in range(n)]


class TestRunConfig:
    def test_defaults_match_reference_recipe(self):
        """The no-argument config is the published training recipe."""
        cfg = hx.RunConfig()
        assert (cfg.b, cfg.lr, cfg.w, cfg.sl) == (128, 1e-2, 30, 1)
        assert (cfg.epochs, cfg.n_layers, cfg.d) == (100, 6, 32)
        assert (cfg.m, cfg.beta, cfg.sigma1, cfg.sigma2) == (5, 0.4, 0.3, 0.15)
        assert (cfg.lam, cfg.tau) == (2.0, 0.1)
        cfg.validate()

    def test_hash_stable_and_sensitive(self):
        """The hash is a pure function of the field values."""
        a = hx.RunConfig(seed=3)
        assert a.config_hash() == hx.RunConfig(seed=3).config_hash()
        assert a.config_hash() != hx.RunConfig(seed=4).config_hash()

    def test_run_name_embeds_hash(self):
        cfg = hx.RunConfig()
        assert cfg.config_hash() in cfg.run_name()

    @pytest.mark.parametrize("field,value", [
        ("dataset", "fd009"), ("mode", "both"), ("variant", "oX"),
        ("epochs", 0), ("lr", 0.0), ("b", 5),
    ])
    def test_validate_rejects(self, field, value):
        """Each field is checked; b=5 breaks the anchor batch floor."""
        with pytest.raises(ValueError):
            hx.RunConfig(**{field: value}).validate()

    def test_from_dict_rejects_unknown_fields(self):
        with pytest.raises(ValueError, match="unknown config fields"):
            hx.config_from_dict({"w": 30, "nonsense": 1})

    def test_fsgri_config_carries_fields(self):
        fc = hx.RunConfig(m=3, b=40, tau=0.25).fsgri_config()
        assert (fc.m, fc.b, fc.tau) == (3, 40, 0.25)
        assert fc.anchor_batch == 10


class TestMetrics:
    def test_half_point_predictions(self):
        """Labels [1, 0] scored against flat 0.5 give RMSE .5 and MAPE 50."""
        rmse, mape = hx.compute_metrics(np.array([1.0, 0.0]), np.array([0.5, 0.5]))
        assert rmse == 0.5
        assert mape == 50.0

    def test_perfect_predictions(self):
        rmse, mape = hx.compute_metrics(np.array([0.2, 0.9]), np.array([0.2, 0.9]))
        assert rmse == 0.0
        assert mape == 0.0

    def test_mape_floor_excludes_small_labels(self):
        """Labels below the floor do not contribute to the relative error."""
        rmse, mape = hx.compute_metrics(np.array([0.005, 1.0]), np.array([0.0, 0.5]))
        assert mape == 50.0

    def test_all_labels_below_floor(self):
        rmse, mape = hx.compute_metrics(np.array([0.0, 0.005]), np.array([0.1, 0.1]))
        assert mape is None
        assert rmse > 0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            hx.compute_metrics(np.zeros(3), np.zeros(2))

    def test_predictions_are_clamped(self):
        """The shared prediction path clips to the label range."""
        samples = random_windows(12)
        params = dm.make_variant(dm.ModelConfig(l=6, m_vars=3, d=4, n_layers=1), "full")
        params.w_r *= 1e6
        raw = hx._forward_many(params, samples)
        clamped = hx.predict_samples(params, samples)
        assert np.any((raw < 0) | (raw > 1))
        assert np.all((clamped >= 0) & (clamped <= 1))

    def test_evaluate_rejects_empty(self):
        params = dm.make_variant(dm.ModelConfig(l=6, m_vars=3, d=4, n_layers=1), "full")
        with pytest.raises(ValueError):
            hx.evaluate(params, [])


class TestLoadDataset:
    def test_synth_split_shapes(self, monkeypatch, tmp_path):
        shrink_synth(monkeypatch)
        cfg = tiny_cfg(tmp_path)
        train, test = hx.load_dataset(cfg)
        assert len({s.unit_id for s in train}) == 4
        assert len(test) == 3
        values = np.vstack([s.values for s in train])
        assert values.min() >= 0.0 and values.max() <= 1.0

    def test_synth_deterministic_per_seed(self, monkeypatch, tmp_path):
        shrink_synth(monkeypatch)
        t1, _ = hx.load_dataset(tiny_cfg(tmp_path))
        t2, _ = hx.load_dataset(tiny_cfg(tmp_path))
        t3, _ = hx.load_dataset(tiny_cfg(tmp_path, seed=9))
        assert np.array_equal(t1[0].values, t2[0].values)
        assert not np.array_equal(t1[0].values, t3[0].values)

    def test_same_data_across_modes(self, monkeypatch, tmp_path):
        """Training mode must not change the dataset a seed produces."""
        shrink_synth(monkeypatch)
        std, _ = hx.load_dataset(tiny_cfg(tmp_path, mode="standard"))
        con, _ = hx.load_dataset(tiny_cfg(tmp_path, mode="fsgri"))
        assert len(std) == len(con)
        assert np.array_equal(std[0].values, con[0].values)

    def test_holdout_splits_units(self, monkeypatch, tmp_path):
        shrink_synth(monkeypatch)
        cfg = tiny_cfg(tmp_path, holdout=True)
        train, test = hx.load_dataset(cfg)
        train_units = {s.unit_id for s in train}
        test_units = {s.unit_id for s in test}
        assert test_units and not (train_units & test_units)
        assert len(train_units) == 3


class TestTrainStandard:
    def test_loss_decreases_on_memorizable_set(self):
        samples = random_windows(20)
        params = dm.make_variant(dm.ModelConfig(l=6, m_vars=3, d=8, n_layers=1), "full")
        cfg = hx.RunConfig(b=20, epochs=40, w=6, m=2)
        history = hx.train_standard(params, samples, cfg)
        assert history[-1]["loss"] < history[0]["loss"]

    def test_first_epochs_non_increasing(self, monkeypatch, tmp_path):
        """Each of the first five epoch means is at most the previous plus 1e-3."""
        shrink_synth(monkeypatch)
        cfg = tiny_cfg(tmp_path, epochs=5, lr=3e-3)
        train, _ = hx.load_dataset(cfg)
        params = dm.make_variant(
            dm.ModelConfig(l=8, m_vars=14, d=4, n_layers=1, seed=2), "full")
        losses = [h["loss"] for h in hx.train_standard(params, train, cfg)]
        assert all(b <= a + 1e-3 for a, b in zip(losses, losses[1:]))

    def test_overfits_fifty_windows(self):
        """Given enough width, 300 epochs memorize a 50-window set."""
        samples = random_windows(50, l=8)
        params = dm.make_variant(
            dm.ModelConfig(l=8, m_vars=3, d=16, n_layers=1, seed=0), "full")
        hx.train_standard(params, samples, hx.RunConfig(b=10, epochs=300, w=8, m=2))
        rmse, _ = hx.evaluate(params, samples)
        assert rmse < 0.02

    def test_epoch_losses_deterministic(self):
        """Two fresh trainings from the same seed agree bit for bit."""
        runs = []
        for _ in range(2):
            params = dm.make_variant(
                dm.ModelConfig(l=6, m_vars=3, d=4, n_layers=1, seed=5), "full")
            history = hx.train_standard(params, random_windows(18),
                                        hx.RunConfig(b=8, epochs=3, w=6, m=2, seed=5))
            runs.append([h["loss"] for h in history])
        assert runs[0] == runs[1]

    def test_rejects_empty(self):
        params = dm.make_variant(dm.ModelConfig(l=6, m_vars=3, d=4, n_layers=1), "full")
        with pytest.raises(ValueError):
            hx.train_standard(params, [], hx.RunConfig(m=2))


class TestTrainFsgri:
    def test_history_records_both_components(self, monkeypatch, tmp_path):
        shrink_synth(monkeypatch)
        cfg = tiny_cfg(tmp_path, mode="fsgri", b=12, epochs=2)
        train, _ = hx.load_dataset(cfg)
        params = dm.make_variant(dm.ModelConfig(l=8, m_vars=14, d=4, n_layers=1), "full")
        history = hx.train_fsgri(params, train, cfg)
        assert len(history) == 2
        for row in history:
            assert row["anchor_batch_size"] == 4
            assert row["contrastive"] > 0
            assert row["regression"] > 0
            assert np.isfinite(row["loss"])


class TestRunOne:
    def test_artifacts_and_report(self, monkeypatch, tmp_path):
        """One run leaves a report, resolved config, metrics, checkpoint."""
        shrink_synth(monkeypatch)
        cfg = tiny_cfg(tmp_path)
        report = hx.run_one(cfg)
        run_dir = os.path.join(cfg.out_dir, cfg.run_name())
        for name in ("report.json", "config.json", "metrics.csv", "model.ckpt"):
            assert os.path.isfile(os.path.join(run_dir, name))
        assert report.config_hash == cfg.config_hash()
        assert report.seed == 2
        assert len(report.epoch_losses) == 2
        assert report.param_count == dm.count_params(
            dm.make_variant(dm.ModelConfig(l=8, m_vars=14, d=4, n_layers=1), "full"))
        assert report.wall_clock_sec > 0
        assert isinstance(report.git_describe, str) and report.git_describe
        with open(os.path.join(run_dir, "config.json")) as f:
            assert f.read() == json.dumps(cfg.to_dict(), indent=2) + "\n"

    def test_resume_skips_training(self, monkeypatch, tmp_path):
        shrink_synth(monkeypatch)
        cfg = tiny_cfg(tmp_path)
        first = hx.run_one(cfg)
        report_path = os.path.join(cfg.out_dir, cfg.run_name(), "report.json")
        stamp = os.path.getmtime(report_path)
        second = hx.run_one(cfg)
        assert os.path.getmtime(report_path) == stamp
        assert second.epoch_losses == first.epoch_losses

    def test_rerun_reproduces_metrics_exactly(self, monkeypatch, tmp_path):
        shrink_synth(monkeypatch)
        a = hx.run_one(tiny_cfg(tmp_path, out_dir=str(tmp_path / "a")))
        b = hx.run_one(tiny_cfg(tmp_path, out_dir=str(tmp_path / "b")),
                       resume=False)
        assert a.epoch_losses == b.epoch_losses
        assert a.rmse == b.rmse
        assert a.mape == b.mape

    def test_fsgri_mode_reports_anchor_batch(self, monkeypatch, tmp_path):
        shrink_synth(monkeypatch)
        cfg = tiny_cfg(tmp_path, mode="fsgri", b=12, epochs=1)
        report = hx.run_one(cfg)
        assert report.anchor_batch_size == 4
        assert "contrastive" in report.epoch_detail[0]

    def test_checkpoint_scores_like_report(self, monkeypatch, tmp_path):
        """Reloading the saved model reproduces the reported metrics."""
        shrink_synth(monkeypatch)
        cfg = tiny_cfg(tmp_path)
        report = hx.run_one(cfg)
        params = dm.load_checkpoint(
            os.path.join(cfg.out_dir, cfg.run_name(), "model.ckpt"))
        _, test = hx.load_dataset(cfg)
        rmse, mape = hx.evaluate(params, test)
        assert rmse == report.rmse
        assert mape == report.mape


class TestAblation:
    def test_all_variants_one_seed(self, monkeypatch, tmp_path):
        shrink_synth(monkeypatch)
        cfg = tiny_cfg(tmp_path, epochs=1)
        reports = hx.run_ablation(cfg)
        assert len(reports) == 6
        counts = {v: r.param_count for v, r in zip(dm.VARIANTS, reports)}
        assert counts["full"] == max(counts.values())
        assert all(r.seed == 2 for r in reports)
        with open(os.path.join(cfg.out_dir, "ablation.csv")) as f:
            lines = f.read().strip().splitlines()
        assert lines[0] == "variant,rmse,mape,param_count"
        assert len(lines) == 7


class TestGridSearch:
    def test_matrix_and_files(self, monkeypatch, tmp_path):
        shrink_synth(monkeypatch)
        cfg = tiny_cfg(tmp_path, epochs=1, n_layers=2, d=4)
        matrix = hx.grid_search(cfg, [1, 2], [4, 6])
        assert matrix.shape == (2, 2)
        assert np.all(np.isfinite(matrix))
        with open(os.path.join(cfg.out_dir, "grid.csv")) as f:
            lines = f.read().strip().splitlines()
        assert lines[0] == "n_layers,d4,d6"
        assert len(lines) == 3
        with open(os.path.join(cfg.out_dir, "grid.json")) as f:
            meta = json.load(f)
        assert meta["default_cell"] == [1, 0]

    def test_resume_skips_finished_cells(self, monkeypatch, tmp_path):
        shrink_synth(monkeypatch)
        cfg = tiny_cfg(tmp_path, epochs=1)
        first = hx.grid_search(cfg, [1], [4, 6])
        stamps = sorted(os.path.getmtime(p) for p in
                        glob.glob(os.path.join(cfg.out_dir, "*", "report.json")))
        second = hx.grid_search(cfg, [1], [4, 6])
        again = sorted(os.path.getmtime(p) for p in
                       glob.glob(os.path.join(cfg.out_dir, "*", "report.json")))
        assert stamps == again
        assert np.array_equal(first, second)

    def test_empty_axis_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            hx.grid_search(tiny_cfg(tmp_path), [], [4])


class TestExportFeatures:
    def make_trained(self):
        params = dm.make_variant(dm.ModelConfig(l=6, m_vars=3, d=4, n_layers=1, seed=3),
                                 "full")
        return params, random_windows(10)

    def test_header_and_width(self, tmp_path):
        """Each row is ids, label, prediction, then l*d feature columns."""
        params, samples = self.make_trained()
        path = str(tmp_path / "features.csv")
        hx.export_features(params, samples, path)
        with open(path) as f:
            lines = f.read().strip().splitlines()
        header = lines[0].split(",")
        assert header[:4] == ["unit_id", "window_index", "rul_label", "rul_pred"]
        assert len(header) == 4 + 24
        assert len(lines) == 11

    def test_predictions_match_evaluate_path(self, tmp_path):
        """The exported prediction column is exactly what scoring uses."""
        params, samples = self.make_trained()
        path = str(tmp_path / "features.csv")
        hx.export_features(params, samples, path)
        with open(path) as f:
            rows = f.read().strip().splitlines()[1:]
        exported = np.array([float(r.split(",")[3]) for r in rows])
        assert np.array_equal(exported, hx.predict_samples(params, samples))

    def test_empty_sample_list_writes_header_only(self, tmp_path):
        params, _ = self.make_trained()
        path = str(tmp_path / "features.csv")
        hx.export_features(params, [], path)
        with open(path) as f:
            lines = f.read().strip().splitlines()
        assert len(lines) == 1


class TestCli:
    def run_train(self, tmp_path, *extra):
        args = ["train", "--dataset", "synth", "--seed", "2", "--epochs", "1",
                "--window", "8", "--stride", "2", "--d", "4", "--layers", "1",
                "--batch", "16", "--m", "2", "--out", str(tmp_path / "runs")]
        return cli.main(args + list(extra))

    def test_train_writes_report(self, monkeypatch, tmp_path, capsys):
        shrink_synth(monkeypatch)
        assert self.run_train(tmp_path) == 0
        reports = glob.glob(str(tmp_path / "runs" / "*" / "report.json"))
        assert len(reports) == 1
        assert "rmse:" in capsys.readouterr().out

    def test_config_file_with_flag_override(self, monkeypatch, tmp_path):
        """Flags beat the config file, which beats the defaults."""
        shrink_synth(monkeypatch)
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({
            "dataset": "synth", "seed": 2, "epochs": 1, "w": 8, "sl": 2,
            "d": 4, "n_layers": 1, "b": 16, "m": 2,
            "out_dir": str(tmp_path / "runs")}))
        assert cli.main(["train", "--config", str(cfg_path), "--d", "6"]) == 0
        report_path = glob.glob(str(tmp_path / "runs" / "*" / "report.json"))[0]
        with open(report_path) as f:
            report = json.load(f)
        assert report["config"]["d"] == 6
        assert report["config"]["b"] == 16

    def test_unknown_config_field_is_an_error(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"banana": 1}))
        assert cli.main(["train", "--config", str(cfg_path)]) == 2
        assert "unknown config fields" in capsys.readouterr().err

    def test_eval_and_export_from_checkpoint(self, monkeypatch, tmp_path, capsys):
        shrink_synth(monkeypatch)
        self.run_train(tmp_path)
        ckpt = glob.glob(str(tmp_path / "runs" / "*" / "model.ckpt"))[0]
        base = ["--dataset", "synth", "--seed", "2", "--window", "8",
                "--stride", "2", "--m", "2", "--checkpoint", ckpt,
                "--out", str(tmp_path / "out")]
        assert cli.main(["eval"] + base) == 0
        out = capsys.readouterr().out
        assert "rmse:" in out and "eval.json" in out
        assert cli.main(["export"] + base + ["--split", "test"]) == 0
        with open(tmp_path / "out" / "features.csv") as f:
            header = f.readline().strip().split(",")
        assert len(header) == 4 + 8 * 4

    def test_eval_rejects_window_mismatch(self, monkeypatch, tmp_path, capsys):
        shrink_synth(monkeypatch)
        self.run_train(tmp_path)
        ckpt = glob.glob(str(tmp_path / "runs" / "*" / "model.ckpt"))[0]
        code = cli.main(["eval", "--dataset", "synth", "--seed", "2",
                         "--window", "10", "--m", "2", "--checkpoint", ckpt])
        assert code == 2
        assert "window" in capsys.readouterr().err

    def test_synth_command_emits_parseable_files(self, tmp_path):
        out = tmp_path / "data"
        code = cli.main(["synth", "--out", str(out), "--units", "3",
                         "--test-units", "2", "--cycles", "20", "30",
                         "--seed", "7"])
        assert code == 0
        series = dd.parse_cmapss(str(out / "train_SY001.txt"))
        assert len(series) == 3
        assert series[0].sensors.shape[1] == 21
        ruls = dd.parse_rul(str(out / "RUL_SY001.txt"))
        assert len(ruls) == 2

    def test_bad_flag_value_exits_nonzero(self, capsys):
        with pytest.raises(SystemExit):
            cli.main(["train", "--dataset", "fd99"])

    def test_invalid_hyperparameter_reports_error(self, tmp_path, capsys):
        assert cli.main(["train", "--dataset", "synth", "--epochs", "0",
                         "--out", str(tmp_path)]) == 2
        assert "epochs" in capsys.readouterr().err
