import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from promptdepth import depthnet as dn
from promptdepth import evalkit as ek
from promptdepth import losses
from promptdepth import prompting as P
from promptdepth import synthscene as ss

from conftest import SMALL_K


def oracle_rows(samples, factor=1.0):
    b = dn.make_batch(samples)
    depth = np.stack([np.where(s.mask, s.depth, 1.0) for s in samples]).astype(np.float32)
    return ek.score_predictions(depth * np.float32(factor), depth, b.mask, b.rays)


@pytest.mark.parametrize("factor", [1.0, 3.0, 0.01])
def test_oracle_prediction_scores_perfectly(val32, factor):
    for r in oracle_rows(val32, factor):
        assert r["si_rmse"] < 1e-5 and abs(r["cos_sim"] - 1.0) < 1e-5
        assert np.isclose(r["scale"] * factor, 5.0 / np.mean(val32[r["sample"]].depth[val32[r["sample"]].mask]), rtol=1e-4)


def test_metrics_invariant_to_gt_normalization(val32):
    s = val32[0]
    b = dn.make_batch([s])
    pred = (b.gt * np.random.default_rng(0).uniform(0.9, 1.1, b.gt.shape)).astype(np.float32)
    a = ek.score_predictions(pred, np.where(s.mask, s.depth, 0)[None], b.mask, b.rays)[0]
    c = ek.score_predictions(pred, np.where(s.mask, s.depth * 7.0, 0)[None], b.mask, b.rays)[0]
    assert abs(a["si_rmse"] - c["si_rmse"]) < 1e-5 and abs(a["cos_sim"] - c["cos_sim"]) < 1e-5
    assert -1.0 <= a["cos_sim"] <= 1.0


def test_cos_is_one_minus_twice_the_loss(val32):
    s = val32[1]
    b = dn.make_batch([s])
    pred = np.where(s.mask, 5.0 + 0.3 * np.sin(np.arange(32))[None, :], 1.0)[None].astype(np.float32)
    rec = ek.score_predictions(pred, b.gt, b.mask, b.rays)[0]
    n_p, v_p = losses.normals_from_depth(pred[0], b.rays[0], s.mask)
    n_g, v_g = losses.normals_from_depth(np.where(s.mask, b.gt[0], 1).astype(np.float32), b.rays[0], s.mask)
    loss = float(losses.cos_sim_loss(n_p, n_g.data, v_p & v_g).data)
    assert np.isclose(rec["cos_sim"], 1 - 2 * loss, atol=1e-6)


def test_report_aggregates_are_means():
    recs = [{"sample": i, "si_rmse": v, "cos_sim": c, "scale": 1.0} for i, (v, c) in enumerate([(0.1, 0.9), (0.3, 0.5)])]
    rep = ek.EvalReport(recs)
    assert rep.aggregates == {"si_rmse": pytest.approx(0.2), "cos_sim": pytest.approx(0.7), "n_samples": 2}


def test_worker_count(monkeypatch):
    monkeypatch.setenv("PROMPTDEPTH_THREADS", "0")
    assert ek.worker_count() == 1
    monkeypatch.setenv("PROMPTDEPTH_THREADS", "3")
    assert ek.worker_count() == 3
    monkeypatch.setenv("PROMPTDEPTH_THREADS", "many")
    with pytest.raises(ValueError):
        ek.worker_count()


def test_parallel_and_serial_evaluation_agree(monkeypatch, train32):
    net = dn.init_depthnet(0)
    samples = train32 + train32[:4]  # 20 samples span two chunks
    monkeypatch.setenv("PROMPTDEPTH_THREADS", "0")
    serial = ek.evaluate_prompt(net, "random_noise", samples, seed=2)
    monkeypatch.setenv("PROMPTDEPTH_THREADS", "4")
    threaded = ek.evaluate_prompt(net, "random_noise", samples, seed=2)
    assert serial.records == threaded.records
    with pytest.raises(ValueError, match="empty"):
        ek.evaluate_prompt(net, "white", [])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("eval")
    ss.generate_dataset(6, "val", root / "val", {"intrinsics": SMALL_K.to_dict()})
    dn.save_weights(dn.init_depthnet(0), root / "net.pdwt")
    P.save_prompt(P.init_spectrum_one_over_f(0, 32, 32), root / "one_bg.pdpr")
    return root


def test_eval_config_validation(workspace):
    with pytest.raises(ValueError):
        ek.EvalConfig(split=str(workspace / "val"), net=str(workspace / "net.pdwt"), limit=0)
    cfg = ek.EvalConfig(split=str(workspace / "val"), net=str(workspace / "missing.pdwt"))
    with pytest.raises(FileNotFoundError, match="missing artifact"):
        cfg.check_artifacts()
    cfg = ek.EvalConfig(split=str(workspace / "val"), net=str(workspace / "net.pdwt"), prompt=str(workspace / "one_bg.pdpr"))
    assert cfg.method == "one_bg" and cfg.split_name == "val"


def test_evaluate_run_echoes_config(workspace):
    cfg = ek.EvalConfig(split=str(workspace / "val"), net=str(workspace / "net.pdwt"), limit=4)
    rep = ek.evaluate_run(cfg)
    assert [r["sample"] for r in rep.records] == [f"val_{i:05d}" for i in range(4)]
    assert rep.config == cfg.to_dict() and rep.to_dict()["aggregates"]["n_samples"] == 4


def test_matrix_rows_errors_and_round_trip(workspace, tmp_path):
    common = {"split": str(workspace / "val"), "net": str(workspace / "net.pdwt")}
    configs = [ek.EvalConfig(**common), ek.EvalConfig(**common),
               ek.EvalConfig(**common, prompt=str(workspace / "one_bg.pdpr")),
               ek.EvalConfig(**common, prompt=str(workspace / "nope.pdpr"))]
    rows = ek.run_matrix(configs)
    assert [r["status"] for r in rows] == ["ok", "ok", "ok", "error"]
    assert rows[0]["si_rmse"] == rows[1]["si_rmse"]
    assert rows[3]["si_rmse"] is None and rows[3]["cos_sim"] is None
    csv_path, json_path = ek.write_matrix(rows, tmp_path)
    assert csv_path.read_text().splitlines()[0] == "method,split,si_rmse,cos_sim,n_samples,status"
    back = ek.read_matrix_csv(csv_path)
    for row, rec in zip(rows, back):
        assert rec["si_rmse"] == row["si_rmse"] and rec["cos_sim"] == row["cos_sim"]
        assert (rec["method"], rec["split"], rec["n_samples"], rec["status"]) == (
            row["method"], row["split"], row["n_samples"], row["status"])
    mirror = json.loads(json_path.read_text())
    assert len(mirror) == 4 and "wall_clock" not in mirror[0]
    assert not Path(mirror[0]["config"]["split"]).is_absolute()
    assert (tmp_path / mirror[0]["config"]["split"]).resolve() == (workspace / "val").resolve()
    assert (tmp_path / mirror[2]["config"]["prompt"]).resolve() == (workspace / "one_bg.pdpr").resolve()
    assert mirror[0]["config"]["prompt"] == "white"
    with pytest.raises(ValueError):
        ek.run_matrix([])


def test_plane_normals_colour():
    n = np.tile([0.0, 0.0, -1.0], (4, 4, 1))
    rgb = ek.colorize_normals(n, np.ones((4, 4), bool))
    assert (rgb == np.array([128, 128, 0], np.uint8)).all()
    assert (ek.colorize_normals(n, np.zeros((4, 4), bool)) == 0).all()


def test_depth_colormap_orientation():
    d = np.array([[1.0, 2.0, 3.0, 9.0]])
    m = np.array([[True, True, True, False]])
    rgb = ek.colorize_depth(d, m).astype(int)
    assert rgb[0, 0].sum() > rgb[0, 1].sum() > rgb[0, 2].sum()  # near is bright
    assert (rgb[0, 3] == 0).all()
    assert tuple(rgb[0, 0]) == (252, 255, 164) and tuple(rgb[0, 2]) == (0, 0, 4)


def test_visual_report_files_are_deterministic(val32, tmp_path):
    s = val32[0]
    pred = P.infer_object_depth(dn.init_depthnet(0), "white", s.rgb, s.mask, s.intrinsics)
    a = ek.render_visual_report(s, pred, tmp_path / "a", "x")
    b = ek.render_visual_report(s, pred, tmp_path / "b", "x")
    assert [p.name for p in a] == ["x_depth.png", "x_normals.png", "x_composite.png"]
    assert all(p.read_bytes() == q.read_bytes() for p, q in zip(a, b))
    assert Image.open(a[0]).size == (32, 32)
