import json
import numpy as np
import pytest

from dbmid.blur_synthesis import (BLUR_CLASSES, BlurClass, BlurSpec, DatasetConfig, apply_blur, make_phantom,
                                  sample_seed)
from dbmid.checkpoint import save_checkpoint, to_bytes
from dbmid.deblur_net import NetworkConfig, TrainConfig, build_network, infer
from dbmid.errors import ConfigurationError
from dbmid.harness import (SCHEMAS, benchmark_runtime, grid_means, held_out_set, load_experiment_file, read_csv,
                           rows_to_csv, run_classification_eval, run_defocus_sweep, run_experiment_file,
                           run_generalization_eval, run_mixed_grid, run_motion_sweep, shifted_config, write_csv)
from dbmid.metrics import ssim
from dbmid.plotting import plot_csv
from support import box_gaussian_fwhm, rigged_classifier

TINY = NetworkConfig(stages=2, layers_per_stage=1, channels_per_stage=[4, 8])


@pytest.fixture(scope="module")
def nets():
    return build_network(TINY, 1, "defocus"), build_network(TINY, 2, "motion")


def defocus_row(**kw):
    row = {"radius_px": 3.0, "z_um": 9.375, "method": "none", "ssim_mean": 0.5, "ssim_std": 0.1, "n": 4}
    row.update(kw)
    return row


class TestCsv:
    def test_header_and_line_endings(self):
        text = rows_to_csv("defocus_sweep", [defocus_row()])
        assert text == "radius_px,z_um,method,ssim_mean,ssim_std,n\n3,9.375,none,0.5,0.1,4\n"

    @pytest.mark.parametrize("bad", [dict(n=0), dict(ssim_std=-0.1), dict(ssim_std=float("nan"))])
    def test_invalid_values(self, bad):
        with pytest.raises(ConfigurationError):
            rows_to_csv("defocus_sweep", [defocus_row(**bad)])

    def test_wrong_columns(self):
        row = defocus_row()
        del row["z_um"]
        with pytest.raises(ConfigurationError):
            rows_to_csv("defocus_sweep", [row])
        with pytest.raises(ConfigurationError):
            rows_to_csv("nonsense", [])

    def test_round_trip(self, tmp_path):
        path = write_csv("runtime", [{"method": "dbmid", "height": 64, "width": 64, "median_s": 0.25,
                                      "iqr_s": 0.0, "reps": 1}], tmp_path / "r.csv")
        kind, rows = read_csv(path)
        assert kind == "runtime" and rows[0]["method"] == "dbmid" and float(rows[0]["median_s"]) == 0.25
        assert b"\r" not in path.read_bytes()

    def test_unknown_header(self, tmp_path):
        p = tmp_path / "x.csv"
        p.write_text("a,b\n1,2\n")
        with pytest.raises(ConfigurationError):
            read_csv(p)

    def test_every_schema_documented(self):
        assert SCHEMAS["mixed_grid"] == ("radius_px", "length_px", "surface", "ssim_mean", "n")
        assert SCHEMAS["classification"] == ("predicted", "actual", "count")
        assert SCHEMAS["motion_sweep"] == ("length_px", "direction", "method", "fwhm_mean", "fwhm_std", "n")


@pytest.fixture(scope="module")
def defocus_rows(nets):
    return run_defocus_sweep(nets[0], [5, 0, 2], n=3, size=64, seed=4)


class TestDefocusSweep:
    def test_zero_radius_identity(self, defocus_rows):
        first = defocus_rows[0]
        assert (first["radius_px"], first["method"], first["ssim_mean"], first["ssim_std"]) == (0.0, "none", 1.0, 0.0)

    def test_ordered_by_radius(self, defocus_rows):
        assert [r["radius_px"] for r in defocus_rows] == [0, 0, 2, 2, 5, 5]
        assert [r["method"] for r in defocus_rows[:2]] == ["none", "dl_defocus"]

    def test_z_map(self, defocus_rows):
        for r in defocus_rows:
            assert r["z_um"] == pytest.approx(r["radius_px"] / 0.32)
            assert r["n"] == 3

    def test_matches_direct_computation(self, nets, defocus_rows):
        vals_b, vals_d = [], []
        for i in range(3):
            s = sample_seed(4, i)
            sharp = make_phantom("cells", 64, s)
            blurred = apply_blur(sharp, BlurSpec("Defocus", 5, seed=s))
            vals_b.append(ssim(blurred, sharp))
            vals_d.append(ssim(infer(nets[0], blurred), sharp))
        assert defocus_rows[4]["ssim_mean"] == pytest.approx(np.mean(vals_b), abs=1e-12)
        assert defocus_rows[5]["ssim_std"] == pytest.approx(np.std(vals_d), abs=1e-12)

    def test_workers_do_not_change_output(self, nets, defocus_rows):
        again = run_defocus_sweep(nets[0], [0, 2, 5], n=3, size=64, seed=4, workers=3)
        assert rows_to_csv("defocus_sweep", again) == rows_to_csv("defocus_sweep", defocus_rows)

    def test_per_kind_protocol(self, nets):
        rows = run_defocus_sweep(nets[0], [3], n=2, size=64, phantom_kinds=["cells", "usaf"],
                                 per_kind_models={"cells": nets[0], "usaf": nets[0]})
        by = {r["method"]: r for r in rows}
        assert set(by) == {"none", "dl_defocus", "dl_defocus_per_kind"}
        assert by["dl_defocus_per_kind"]["ssim_mean"] == by["dl_defocus"]["ssim_mean"]

    def test_missing_models(self, nets):
        with pytest.raises(ConfigurationError):
            run_defocus_sweep(None, [3])
        with pytest.raises(ConfigurationError):
            run_defocus_sweep(nets[0], [3], n=1, size=64, phantom_kinds=["cells", "usaf"],
                              per_kind_models={"cells": nets[0]})


@pytest.fixture(scope="module")
def motion_rows(nets):
    return run_motion_sweep(nets[1], [1, 5, 10, 20], n_images=4, seed=2)


class TestMotionSweep:
    def pick(self, rows, length, direction, method):
        (row,) = [r for r in rows if (r["length_px"], r["direction"], r["method"]) == (length, direction, method)]
        return row

    @pytest.mark.parametrize("direction", ["horizontal", "vertical"])
    def test_length_one_is_in_focus(self, motion_rows, direction):
        a = self.pick(motion_rows, 1, direction, "none")["fwhm_mean"]
        b = self.pick(motion_rows, 1, direction, "in_focus")["fwhm_mean"]
        assert a == pytest.approx(b, rel=0.05)

    @pytest.mark.parametrize("direction", ["horizontal", "vertical"])
    def test_blurred_increasing(self, motion_rows, direction):
        vals = [self.pick(motion_rows, L, direction, "none")["fwhm_mean"] for L in (1, 5, 10, 20)]
        assert all(b > a for a, b in zip(vals, vals[1:]))

    @pytest.mark.parametrize("length", [5, 10, 20])
    def test_blurred_fwhm_matches_closed_form(self, motion_rows, length):
        # spot profile is a sampled Gaussian of sigma 1.5; the blur is a box of `length` taps
        measured = self.pick(motion_rows, length, "horizontal", "none")["fwhm_mean"]
        assert measured == pytest.approx(box_gaussian_fwhm(length), rel=0.03)

    def test_spot_count(self, nets):
        rows = run_motion_sweep(nets[1], [5], directions=["vertical"], seed=3)
        assert all(r["n"] >= 60 for r in rows)

    def test_blind_method(self, nets):
        from dbmid.classical_baseline import DeconvConfig
        rows = run_motion_sweep(nets[1], [5], directions=["horizontal"], n_images=1, size=128,
                                blind=DeconvConfig(iterations=2))
        assert [r["method"] for r in rows] == ["in_focus", "none", "dl_motion", "blind_deconv"]


@pytest.fixture(scope="module")
def grid_rows(nets):
    return run_mixed_grid(*nets, [0, 2, 4], [0, 5, 11], n=2, size=64, seed=1)


class TestMixedGrid:
    def cell(self, rows, r, L):
        return {row["surface"]: row["ssim_mean"] for row in rows if (row["radius_px"], row["length_px"]) == (r, L)}

    def test_shape(self, grid_rows):
        assert len(grid_rows) == 3 * 3 * 4
        assert all(r["n"] == 2 for r in grid_rows)

    def test_identity_corner(self, grid_rows):
        c = self.cell(grid_rows, 0, 0)
        assert c["blurred"] == 1.0 and c["dbmid"] == 1.0

    def test_single_class_cells_route_to_one_net(self, grid_rows):
        assert self.cell(grid_rows, 2, 0)["dbmid"] == self.cell(grid_rows, 2, 0)["dl_defocus"]
        assert self.cell(grid_rows, 0, 5)["dbmid"] == self.cell(grid_rows, 0, 5)["dl_motion"]

    def test_blurred_monotone(self, grid_rows):
        grid = np.array([[self.cell(grid_rows, r, L)["blurred"] for L in (0, 5, 11)] for r in (0, 2, 4)])
        assert (np.diff(grid, axis=0) < 0).all() and (np.diff(grid, axis=1) < 0).all()

    def test_classifier_routing(self, nets):
        rows = run_mixed_grid(*nets, [2], [5], n=2, size=64, classifier=rigged_classifier("InFocus"))
        c = {row["surface"]: row["ssim_mean"] for row in rows}
        assert c["dbmid"] == c["blurred"]

    def test_grid_means_skip_axes(self, grid_rows):
        means = grid_means(grid_rows)
        inner = [r["ssim_mean"] for r in grid_rows if r["surface"] == "blurred" and r["radius_px"] and r["length_px"]]
        assert means["blurred"] == pytest.approx(np.mean(inner))

    def test_needs_both_nets(self, nets):
        with pytest.raises(ConfigurationError):
            run_mixed_grid(nets[0], None, [1], [1])


class TestClassification:
    def test_single_class_dataset(self):
        images = [make_phantom("cells", 64, s) for s in range(3)]
        rows, conf = run_classification_eval(rigged_classifier("Motion"), images, ["Motion"] * 3)
        nonzero = [(r["predicted"], r["actual"], r["count"]) for r in rows if r["count"]]
        assert nonzero == [("Motion", "Motion", 3)] and conf.accuracy == 1.0
        rows, conf = run_classification_eval(rigged_classifier("Defocus"), images, ["Motion"] * 3)
        assert conf.accuracy == 0.0 and len(rows) == 16

    def test_held_out_disjoint_from_training(self):
        cfg = DatasetConfig(counts={c.value: 3 for c in BLUR_CLASSES}, size=64, master_seed=5)
        images, labels = held_out_set(cfg, 2)
        assert len(images) == 8 and labels[::2] == list(BLUR_CLASSES)
        train_seeds = {sample_seed(5, i) for i in range(12)}
        held = {sample_seed(5, 1_000_000 + i) for i in range(8)}
        assert not train_seeds & held


class TestRuntime:
    def test_warmup_and_iqr(self):
        calls = []
        rows = benchmark_runtime({"probe": lambda im: calls.append(im.shape)}, [96, 64], reps=1, warmup=2)
        assert len(calls) == 6 and calls[0] == (64, 64, 3)
        assert [r["height"] for r in rows] == [64, 96]
        assert all(r["iqr_s"] == 0.0 and r["reps"] == 1 for r in rows)

    def test_reps_validated(self):
        with pytest.raises(ConfigurationError):
            benchmark_runtime({}, [64], reps=0)


class TestGeneralization:
    def test_shifted_config(self):
        base = DatasetConfig(noise_sigma=0.002, contrast=1.0)
        sh = shifted_config(base, master_seed=9)
        assert sh.noise_sigma == pytest.approx(0.008) and sh.contrast == pytest.approx(0.7)
        assert sh.master_seed == 9 and base.noise_sigma == 0.002

    def test_zero_fraction_equals_base(self, nets):
        sh = shifted_config(DatasetConfig(size=64, noise_sigma=0.002))
        rows, tuned = run_generalization_eval(nets[0], sh, [3], fine_tune_fraction=0.0, n=2)
        by = {r["method"]: r for r in rows}
        assert by["dl_defocus_finetuned"]["ssim_mean"] == by["dl_defocus"]["ssim_mean"]
        assert to_bytes(tuned) == to_bytes(nets[0])

    def test_fine_tune_leaves_base_untouched(self, nets):
        before = to_bytes(nets[0])
        sh = shifted_config(DatasetConfig(size=64, noise_sigma=0.002))
        _, tuned = run_generalization_eval(nets[0], sh, [3], fine_tune_fraction=0.5, base_train_size=4, n=1,
                                           train=TrainConfig.desk(max_steps=2, batch_size=2))
        assert to_bytes(nets[0]) == before and to_bytes(tuned) != before


@pytest.fixture(scope="module")
def experiment_dir(tmp_path_factory, nets):
    root = tmp_path_factory.mktemp("exp")
    (root / "models").mkdir()
    save_checkpoint(nets[0], root / "models" / "d.ckpt")
    save_checkpoint(nets[1], root / "models" / "m.ckpt")
    save_checkpoint(rigged_classifier("Defocus"), root / "models" / "c.ckpt")
    spec = {
        "checkpoints": {"defocus": "models/d.ckpt", "motion": "models/m.ckpt", "classifier": "models/c.ckpt"},
        "seed": 3,
        "experiments": [
            {"kind": "defocus_sweep", "radii": [0, 3], "n": 2, "size": 64},
            {"kind": "motion_sweep", "lengths": [5], "n_images": 1, "size": 128},
            {"kind": "mixed_grid", "name": "grid", "radii": [0, 3], "lengths": [0, 5], "n": 1, "size": 64},
            {"kind": "classification", "n_per_class": 1, "dataset": {"size": 64}},
            {"kind": "generalization", "radii": [3], "n": 1, "fine_tune_fraction": 0, "dataset": {"size": 64}},
        ],
    }
    (root / "exp.json").write_text(json.dumps(spec))
    return root


class TestExperimentFile:
    def test_outputs(self, experiment_dir):
        out = experiment_dir / "out"
        summary = run_experiment_file(experiment_dir / "exp.json", out)
        for name in ("defocus_sweep", "motion_sweep", "grid", "classification", "generalization"):
            assert (out / f"{name}.csv").is_file() and (out / f"{name}.png").is_file()
        assert summary["classification"]["accuracy"] == 0.25
        assert json.loads((out / "summary.json").read_text())["grid"]["kind"] == "mixed_grid"

    def test_deterministic(self, experiment_dir):
        a, b = experiment_dir / "a", experiment_dir / "b"
        run_experiment_file(experiment_dir / "exp.json", a, figures=False)
        run_experiment_file(experiment_dir / "exp.json", b, workers=2, figures=False)
        for f in sorted(a.glob("*.csv")):
            assert f.read_bytes() == (b / f.name).read_bytes(), f.name

    def test_relative_checkpoints(self, experiment_dir):
        spec = load_experiment_file(experiment_dir / "exp.json")
        assert spec["checkpoints"]["motion"] == str((experiment_dir / "models" / "m.ckpt").resolve())

    @pytest.mark.parametrize("spec", [
        {"checkpoints": {}, "extra": 1},
        {"experiments": [{"kind": "defocus_sweep", "radius": [1]}]},
        {"experiments": [{"kind": "unknown"}]},
        {"experiments": [{"kind": "runtime"}, {"kind": "runtime"}]},
        {"checkpoints": {"deblur": "x.ckpt"}},
    ])
    def test_rejected(self, tmp_path, spec):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps(spec))
        with pytest.raises(ConfigurationError):
            load_experiment_file(p)

    def test_missing_checkpoint(self, tmp_path):
        p = tmp_path / "e.json"
        p.write_text(json.dumps({"checkpoints": {"defocus": "gone.ckpt"},
                                 "experiments": [{"kind": "defocus_sweep", "n": 1, "size": 64}]}))
        with pytest.raises(ConfigurationError):
            run_experiment_file(p, tmp_path / "out")
        p.write_text(json.dumps({"experiments": [{"kind": "defocus_sweep", "n": 1, "size": 64}]}))
        with pytest.raises(ConfigurationError, match="defocus"):
            run_experiment_file(p, tmp_path / "out")


class TestPlotting:
    def test_style_checked(self, tmp_path):
        path = write_csv("defocus_sweep", [defocus_row()], tmp_path / "d.csv")
        assert plot_csv(path, style="line").stat().st_size > 0
        with pytest.raises(ConfigurationError):
            plot_csv(path, style="heatmap")

    def test_empty(self, tmp_path):
        path = write_csv("runtime", [], tmp_path / "r.csv")
        with pytest.raises(ConfigurationError):
            plot_csv(path)
