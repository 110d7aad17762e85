import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from residuemap import io as rio
from residuemap.cli import main
from residuemap.timecore import FrameSchedule


def schedule(B):
    return FrameSchedule.from_durations([0.5] * B, decay=0.01)


@settings(max_examples=20)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=4, max_dims=4, min_side=1, max_side=4),
                  elements=st.floats(-1e6, 1e6, width=32)))
def test_volume_round_trip_is_byte_identical(tmp_path_factory, data):
    d = tmp_path_factory.mktemp("vol")
    vf = rio.VolumeFile(data, (1.0, 2.0, 3.0), schedule(data.shape[3]), value_units="counts",
                        meta={"note": "x"})
    hp, pp = rio.write_volume(d / "a", vf)
    back = rio.read_volume(d / "a.json")
    np.testing.assert_array_equal(back.data, data)
    np.testing.assert_allclose(back.schedule.ends, vf.schedule.ends)
    rio.write_volume(d / "b", back)
    assert (d / "b.f32").read_bytes() == pp.read_bytes()
    hb = json.loads((d / "b.json").read_text())
    ha = json.loads(hp.read_text())
    hb.pop("payload"), ha.pop("payload")
    assert ha == hb


def test_payload_layout_is_channel_major_x_fastest(tmp_path):
    data = np.arange(2 * 3 * 4 * 2, dtype=np.float32).reshape(2, 3, 4, 2)  # z, y, x, c
    rio.write_volume(tmp_path / "v", rio.VolumeFile(data, channels=["a", "b"]))
    raw = np.fromfile(tmp_path / "v.f32", dtype="<f4")
    assert raw[1] == data[0, 0, 1, 0]
    assert raw[4] == data[0, 1, 0, 0]
    assert raw[24] == data[0, 0, 0, 1]


def test_truncated_payload_names_expected_size(tmp_path):
    rio.write_volume(tmp_path / "v", rio.VolumeFile(np.ones((2, 2, 2, 3))))
    (tmp_path / "v.f32").write_bytes(b"\0" * 10)
    with pytest.raises(rio.VolumeFormatError, match="expected 96"):
        rio.read_volume(tmp_path / "v")


def test_seconds_header_is_converted(tmp_path):
    rio.write_volume(tmp_path / "v", rio.VolumeFile(np.ones((1, 1, 1, 2)), schedule=schedule(2)))
    h = json.loads((tmp_path / "v.json").read_text())
    h["frames"] = [[0, 30], [30, 60]]
    h["lambda"] = 0.01 / 60
    h["units"]["time"] = "s"
    (tmp_path / "v.json").write_text(json.dumps(h))
    s = rio.read_volume(tmp_path / "v").schedule
    np.testing.assert_allclose(s.ends, [0.5, 1.0])
    assert s.decay == pytest.approx(0.01)


def test_overwrite_protection(tmp_path):
    vf = rio.VolumeFile(np.ones((1, 1, 1, 1)))
    rio.write_volume(tmp_path / "v", vf)
    with pytest.raises(FileExistsError):
        rio.write_volume(tmp_path / "v", vf)
    rio.write_volume(tmp_path / "v", vf, force=True)


def test_curve_csvs_round_trip(tmp_path, fdg):
    rio.write_input_csv(tmp_path / "in.csv", fdg.input)
    back = rio.read_input_csv(tmp_path / "in.csv")
    np.testing.assert_array_equal(back.values, fdg.input.values)
    curves = np.random.default_rng(0).random((3, fdg.schedule.n_frames))
    rio.write_roi_csv(tmp_path / "r.csv", fdg.schedule, curves, ["a", "b", "c"])
    sch, Y, names = rio.read_roi_csv(tmp_path / "r.csv")
    np.testing.assert_array_equal(Y, curves)
    assert names == ["a", "b", "c"] and sch.n_frames == fdg.schedule.n_frames
    (tmp_path / "bad.csv").write_text("time,value\n0,1\n")
    with pytest.raises(ValueError):
        rio.read_input_csv(tmp_path / "bad.csv")


def test_rerun_line_adds_force():
    assert rio.rerun_line(["map", "v", "-o", "out dir"]) == "residuemap map v -o 'out dir' --force"


# --------------------------------------------------------------------------- CLI


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    sim, seg, bas, mp, roi = (d / n for n in ("sim", "seg", "basis", "map", "roi"))
    assert main(["simulate", "-o", sim, "--shape", "8", "4", "2", "--noise-cov", "0.003"]) == 0
    assert main(["segment", sim / "volume.json", "-o", seg, "--K", "2"]) == 0
    assert main(["build-basis", sim / "volume.json", "--labels", seg / "labels.json",
                 "--input", sim / "input.csv", "-o", bas]) == 0
    assert main(["map", sim / "volume.json", "--basis", bas / "basis.json", "--input", sim / "input.csv",
                 "-o", mp]) == 0
    assert main(["roi", mp / "coefficients.json", "--basis", bas / "basis.json",
                 "--mask", sim / "truth_labels.json", "--label", "1", "-o", roi]) == 0
    return d


def test_every_output_directory_has_a_manifest(pipeline):
    for sub in ("sim", "seg", "basis", "map", "roi"):
        man = json.loads((pipeline / sub / "manifest.json").read_text())
        assert man["tool"] == "residuemap" and man["rerun"].endswith("--force")
        for path, digest in man["outputs"].items():
            assert rio.file_sha256(pipeline / sub / path) == digest


def test_pipeline_outputs_are_consistent(pipeline):
    lab = rio.read_volume(pipeline / "seg" / "labels.json")
    truth = rio.read_volume(pipeline / "sim" / "truth_labels.json")
    a, b = lab.data[..., 0], truth.data[..., 0]
    assert len({(x, y) for x, y in zip(a.ravel(), b.ravel())}) == 2
    basis = json.loads((pipeline / "basis" / "basis.json").read_text())
    assert basis["names"][-1] == "patlak"
    par = rio.read_volume(pipeline / "map" / "parametric.json")
    assert par.channels[:5] == ["K_B", "V_B", "K_D", "V_D", "K_i"]
    est = json.loads((pipeline / "roi" / "residue.json").read_text())
    tr = json.loads((pipeline / "sim" / "truth.json").read_text())
    assert est["summary"]["K_i"] == pytest.approx(tr["blocks"][1]["summary"]["K_i"], rel=0.03)


def test_map_is_deterministic(pipeline, tmp_path):
    args = [pipeline / "sim" / "volume.json", "--basis", pipeline / "basis" / "basis.json",
            "--input", pipeline / "sim" / "input.csv", "-o", tmp_path]
    assert main(["map", *args]) == 0
    for name in ("coefficients.f32", "parametric.f32", "diagnostics.f32"):
        assert (tmp_path / name).read_bytes() == (pipeline / "map" / name).read_bytes()


def test_refuses_to_overwrite_and_force_reruns(pipeline, capsys):
    args = ["segment", pipeline / "sim" / "volume.json", "-o", pipeline / "seg", "--K", "2"]
    assert main(args) == 1
    assert "--force" in capsys.readouterr().err
    assert main(args + ["--force"]) == 0


def test_corrupt_payload_exits_nonzero(pipeline, tmp_path, capsys):
    for ext in (".json", ".f32"):
        (tmp_path / f"v{ext}").write_bytes((pipeline / "sim" / f"volume{ext}").read_bytes())
    with open(tmp_path / "v.f32", "ab") as fh:
        fh.write(b"\0\0\0\0")
    assert main(["segment", tmp_path / "v.json", "-o", tmp_path / "out"]) == 1
    err = capsys.readouterr().err
    assert f"expected {8 * 4 * 2 * 31 * 4}" in err


def test_roi_box_and_missing_region(pipeline, tmp_path):
    coef = pipeline / "map" / "coefficients.json"
    basis = pipeline / "basis" / "basis.json"
    assert main(["roi", coef, "--basis", basis, "--box", "0", "4", "0", "4", "0", "2",
                 "-o", tmp_path / "a"]) == 0
    assert main(["roi", coef, "--basis", basis, "-o", tmp_path / "b"]) == 1


def test_compare_on_simulated_rois(pipeline, tmp_path):
    sim = tmp_path / "rois"
    assert main(["simulate", "--rois", "mixture", "--n-rois", "4", "-o", sim]) == 0
    cfg = json.loads((sim / "config.json").read_text())
    assert main(["compare", sim / "rois.csv", "--basis", pipeline / "basis" / "basis.json",
                 "--input", sim / "input.csv", "--decay", str(cfg["decay"]), "--rates", "0.05", "1", "8",
                 "-o", tmp_path / "cmp"]) == 0
    rep = json.loads((tmp_path / "cmp" / "comparison.json").read_text())
    assert rep["n"] == 4 and 0 <= rep["wins_mixture"] <= 4


def test_study_command_small(tmp_path):
    conf = tmp_path / "study.json"
    conf.write_text(json.dumps({"preset": "fdg", "replicates": 2, "n_doses": 2}))
    assert main(["study", conf, "-o", tmp_path / "out"]) == 0
    reg = json.loads((tmp_path / "out" / "regression.json").read_text())
    assert "gamma_a" in reg["targets"]["residue"]
