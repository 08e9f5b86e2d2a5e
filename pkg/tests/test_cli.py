import csv
import json

import pytest
import yaml

from slimres.cli import RunConfig, main
from slimres.core import LayerSpec, SlimmableModelSpec
from slimres.errors import ConfigError


def write_test_spec(path, num_classes=5, lower=0.85, resolutions=(16, 12)):
    layers = (
        LayerSpec("convolution", 3, 16, kernel=3),
        LayerSpec("normalization", 16, 16),
        LayerSpec("activation", 16, 16),
        LayerSpec("convolution", 16, 160, kernel=3, stride=2),
        LayerSpec("normalization", 160, 160),
        LayerSpec("activation", 160, 160),
        LayerSpec("pooling", 160, 160),
        LayerSpec("fully-connected", 160, num_classes),
    )
    spec = SlimmableModelSpec(
        layers, lower, 8, num_classes, 3, resolutions, name="cli_test"
    )
    spec.save(path)
    return spec


def write_run_config(path, spec_path, data_root, out_dir, mode="mutualnet", seed=0):
    config = {
        "mode": mode,
        "spec": str(spec_path),
        "dataset": {"name": "folder-of-images", "root": str(data_root)},
        "schedule": {"epochs": 1, "batch_size": 8, "lr": 0.05},
        "seed": seed,
        "output_dir": str(out_dir),
        "calibration": {"budget": 48},
    }
    path.write_text(yaml.safe_dump(config))
    return path


@pytest.fixture
def pipeline_env(tmp_path, folder_dataset):
    root = folder_dataset(num_classes=5, per_class=20, size=16)
    spec_path = tmp_path / "spec.yaml"
    write_test_spec(spec_path)
    return tmp_path, spec_path, root


class TestRunConfig:
    def test_missing_key_reported(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text(yaml.safe_dump({"mode": "mutualnet"}))
        with pytest.raises(ConfigError, match="dataset"):
            RunConfig.from_file(path)

    def test_bad_mode_reported(self, tmp_path, pipeline_env):
        _, spec_path, root = pipeline_env
        path = tmp_path / "bad.yaml"
        write_run_config(path, spec_path, root, tmp_path / "out", mode="warp_drive")
        with pytest.raises(ConfigError, match="mode"):
            RunConfig.from_file(path)

    def test_unknown_schedule_key(self, tmp_path, pipeline_env):
        _, spec_path, root = pipeline_env
        raw = {
            "mode": "mutualnet",
            "spec": str(spec_path),
            "dataset": {"name": "folder-of-images", "root": str(root)},
            "schedule": {"epochs": 1, "turbo": True},
            "output_dir": str(tmp_path / "out"),
        }
        path = tmp_path / "cfg.yaml"
        path.write_text(yaml.safe_dump(raw))
        with pytest.raises(ConfigError, match="turbo"):
            RunConfig.from_file(path)

    def test_missing_spec_file(self, tmp_path, pipeline_env):
        _, _, root = pipeline_env
        path = tmp_path / "cfg.yaml"
        write_run_config(path, tmp_path / "ghost.yaml", root, tmp_path / "out")
        with pytest.raises(ConfigError, match="ghost"):
            RunConfig.from_file(path)


class TestTrainPipeline:
    def test_full_run_artifacts(self, pipeline_env):
        tmp_path, spec_path, root = pipeline_env
        out = tmp_path / "run_mutual"
        cfg = write_run_config(tmp_path / "cfg.yaml", spec_path, root, out)
        assert main(["train", "--config", str(cfg), "--quiet"]) == 0

        record = json.loads((out / "run_record.json").read_text())
        assert record["seed"] == 0
        assert record["epochs"][0]["loss_total"] > 0
        assert (out / "checkpoint.pt").exists()
        assert (out / "metrics.csv").exists()
        assert (out / "frontier.png").exists()

        with open(out / "table.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 4 * 2  # widths 0.85..1.0 x resolutions {16, 12}

    def test_refuses_overwrite_without_force(self, pipeline_env):
        tmp_path, spec_path, root = pipeline_env
        out = tmp_path / "run_again"
        cfg = write_run_config(tmp_path / "cfg2.yaml", spec_path, root, out)
        assert main(["train", "--config", str(cfg), "--quiet"]) == 0
        assert main(["train", "--config", str(cfg), "--quiet"]) == 2
        assert main(["train", "--config", str(cfg), "--quiet", "--force"]) == 0

    def test_config_error_exit_code(self, tmp_path):
        bad = tmp_path / "bad.yaml"
        bad.write_text(yaml.safe_dump({"mode": "mutualnet"}))
        assert main(["train", "--config", str(bad)]) == 2


class TestToolSubcommands:
    def test_flops_csv(self, pipeline_env):
        tmp_path, spec_path, _ = pipeline_env
        out = tmp_path / "grid.csv"
        rc = main(["flops", "--spec", str(spec_path), "--out", str(out)])
        assert rc == 0
        with open(out) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 4 * 2
        assert {"width", "resolution", "mflops"} <= set(rows[0])

    def test_plan_and_frontier(self, pipeline_env, capsys):
        tmp_path, spec_path, root = pipeline_env
        out = tmp_path / "run_plan"
        cfg = write_run_config(tmp_path / "cfg3.yaml", spec_path, root, out)
        assert main(["train", "--config", str(cfg), "--quiet"]) == 0
        table = out / "table.csv"

        rc = main(["plan", "--table", str(table), "--budget", "10"])
        assert rc == 0
        assert "best under" in capsys.readouterr().out

        front_csv = tmp_path / "front.csv"
        front_png = tmp_path / "front.png"
        rc = main(
            ["frontier", "--table", str(table), "--out", str(front_csv),
             "--plot", str(front_png)]
        )
        assert rc == 0
        assert front_csv.exists() and front_png.exists()

    def test_plan_infeasible_budget(self, pipeline_env):
        tmp_path, spec_path, root = pipeline_env
        out = tmp_path / "run_infeasible"
        cfg = write_run_config(tmp_path / "cfg4.yaml", spec_path, root, out)
        assert main(["train", "--config", str(cfg), "--quiet"]) == 0
        rc = main(["plan", "--table", str(out / "table.csv"), "--budget", "0.0001"])
        assert rc == 1

    def test_calibrate_and_table_from_checkpoint(self, pipeline_env):
        tmp_path, spec_path, root = pipeline_env
        out = tmp_path / "run_cal"
        cfg = write_run_config(tmp_path / "cfg5.yaml", spec_path, root, out)
        assert main(["train", "--config", str(cfg), "--quiet"]) == 0
        ckpt = str(out / "checkpoint.pt")
        rc = main(
            ["calibrate", "--checkpoint", ckpt, "--dataset", "folder-of-images",
             "--data-root", str(root), "--widths", "1.0", "--resolutions", "16",
             "--budget", "32"]
        )
        assert rc == 0
        table_out = tmp_path / "rebuilt.csv"
        rc = main(
            ["table", "--checkpoint", ckpt, "--dataset", "folder-of-images",
             "--data-root", str(root), "--budget", "32", "--out", str(table_out)]
        )
        assert rc == 0
        assert table_out.exists()


class TestCompare:
    def test_two_mode_comparison(self, pipeline_env):
        tmp_path, spec_path, root = pipeline_env
        runs = []
        for mode in ("mutualnet", "usnet_baseline"):
            out = tmp_path / f"run_{mode}"
            cfg = write_run_config(tmp_path / f"cfg_{mode}.yaml", spec_path, root, out, mode=mode)
            assert main(["train", "--config", str(cfg), "--quiet"]) == 0
            runs.append(str(out))
        cmp_dir = tmp_path / "cmp"
        rc = main(["compare", *runs, "--out", str(cmp_dir)])
        assert rc == 0
        assert (cmp_dir / "comparison.csv").exists()
        assert (cmp_dir / "comparison.png").exists()
        with open(cmp_dir / "dominance.csv") as fh:
            rows = list(csv.DictReader(fh))
        # pairwise fractions are antisymmetric up to ties
        a_vs_b = float(rows[0]["usnet_baseline"])
        b_vs_a = float(rows[1]["mutualnet"])
        assert abs((a_vs_b + b_vs_a) - 1.0) < 1e-9

    def test_self_comparison_is_half(self, pipeline_env):
        tmp_path, spec_path, root = pipeline_env
        out = tmp_path / "run_self"
        cfg = write_run_config(tmp_path / "cfg_self.yaml", spec_path, root, out)
        assert main(["train", "--config", str(cfg), "--quiet"]) == 0
        table = str(out / "table.csv")
        cmp_dir = tmp_path / "cmp_self"
        rc = main(["compare", table, table, "--labels", "a", "b", "--out", str(cmp_dir)])
        assert rc == 0
        with open(cmp_dir / "dominance.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert float(rows[0]["b"]) == 0.5
        assert float(rows[1]["a"]) == 0.5

    def test_needs_two_inputs(self, tmp_path):
        assert main(["compare", "one.csv", "--out", str(tmp_path / "x")]) == 2

    def test_dominance_recomputation_oracle(self, pipeline_env):
        # recompute the win fractions from the raw comparison CSV alone;
        # they must agree exactly with the emitted dominance matrix
        tmp_path, spec_path, root = pipeline_env
        runs = []
        for mode, seed in (("mutualnet", 0), ("usnet_baseline", 1)):
            out = tmp_path / f"run_dom_{mode}"
            cfg = write_run_config(
                tmp_path / f"cfg_dom_{mode}.yaml", spec_path, root, out, mode=mode, seed=seed
            )
            assert main(["train", "--config", str(cfg), "--quiet"]) == 0
            runs.append(str(out))
        cmp_dir = tmp_path / "cmp_dom"
        assert main(["compare", *runs, "--out", str(cmp_dir)]) == 0

        with open(cmp_dir / "comparison.csv") as fh:
            rows = list(csv.DictReader(fh))
        names = [k[: -len("_top1")] for k in rows[0] if k.endswith("_top1")]
        wins = {n: 0.0 for n in names}
        for rec in rows:
            a, b = (float(rec[f"{n}_top1"]) for n in names)
            if a > b:
                wins[names[0]] += 1
            elif b > a:
                wins[names[1]] += 1
            else:
                wins[names[0]] += 0.5
                wins[names[1]] += 0.5
        with open(cmp_dir / "dominance.csv") as fh:
            dom = {r["method"]: r for r in csv.DictReader(fh)}
        assert float(dom[names[0]][names[1]]) == wins[names[0]] / len(rows)
        assert float(dom[names[1]][names[0]]) == wins[names[1]] / len(rows)

    def test_three_way_antisymmetry(self, tmp_path):
        from slimres.cli import _dominance_fractions
        from test_planner import synthetic_table

        tables = {f"m{i}": synthetic_table(seed=i) for i in range(3)}
        _, _, matrix, labels = _dominance_fractions(tables)
        for i in range(3):
            for j in range(3):
                assert abs(matrix[i, j] + matrix[j, i] - 1.0) < 1e-12

    def test_disjoint_ranges_partial_output(self, tmp_path, capsys):
        from slimres.planner import QueryTable, TableRow

        cheap = QueryTable(rows=[TableRow(0.5, 8, 1.0, 0.5), TableRow(1.0, 8, 2.0, 0.6)])
        pricey = QueryTable(rows=[TableRow(0.5, 8, 10.0, 0.7), TableRow(1.0, 8, 20.0, 0.8)])
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        cheap.save_csv(a)
        pricey.save_csv(b)
        out = tmp_path / "cmp"
        rc = main(["compare", str(a), str(b), "--out", str(out)])
        assert rc == 0
        err = capsys.readouterr().err
        assert "disjoint" in err
        assert not (out / "comparison.csv").exists()
        assert (out / "frontier_a.csv").exists()
        assert (out / "frontier_b.csv").exists()


class TestRunDeterminism:
    def test_same_seed_same_curves(self, pipeline_env):
        tmp_path, spec_path, root = pipeline_env
        records = []
        for tag in ("a", "b"):
            out = tmp_path / f"run_det_{tag}"
            cfg = write_run_config(tmp_path / f"cfg_det_{tag}.yaml", spec_path, root, out, seed=5)
            assert main(["train", "--config", str(cfg), "--quiet"]) == 0
            records.append(json.loads((out / "run_record.json").read_text()))
        a, b = records
        assert [e["loss_total"] for e in a["epochs"]] == [e["loss_total"] for e in b["epochs"]]
        assert a["final_full_config_top1"] == b["final_full_config_top1"]
