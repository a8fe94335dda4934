import csv
import struct

import numpy as np
import pytest
import yaml
from sklearn.base import clone

from rodenet import checkpoint
from rodenet.checkpoint import CheckpointError
from rodenet.cli import run_capture
from rodenet.config import ConfigError, load_config, parse_config
from rodenet.data import Dataset, make_synthetic, write_cifar_bytes
from rodenet.estimators import ODENetClassifier
from rodenet.network import build_model, forward

TINY = {"arch": "rodenet3", "N": 20, "model": {"widths": [4, 8, 8], "num_classes": 4, "image_size": 8},
        "training": {"epochs": 3, "batch_size": 16}, "data": {"size": 32}}


def tiny_model(**kw):
    return build_model("rodenet3", 20, widths=(4, 8, 8), num_classes=4, image_size=8, seed=1, **kw)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        m = tiny_model(solver_method="rk2")
        m.norm_mean, m.norm_std = np.array([0.1, 0.2, 0.3]), np.array([1.0, 2.0, 3.0])
        checkpoint.save(m, tmp_path / "m.rodn", extra={"epochs": 7})
        r, extra = checkpoint.load(tmp_path / "m.rodn")
        assert extra == {"epochs": 7} and r.solver_method == "rk2"
        x = np.random.default_rng(0).normal(size=(2, 3, 8, 8))
        # parameters are stored as float32
        m32 = tiny_model(solver_method="rk2")
        for k, v in m.named_parameters().items():
            m32.named_parameters()[k][...] = v.astype(np.float32)
        np.testing.assert_allclose(forward(r, x, normalized=False), forward(m, x, normalized=False), atol=1e-5)
        for k, v in r.named_parameters().items():
            assert np.array_equal(v, m32.named_parameters()[k])

    def test_header(self):
        buf = checkpoint.to_bytes(tiny_model())
        magic, version, _, n, _ = struct.unpack_from("<4sHBHI", buf)
        assert (magic, version, n) == (b"RODN", 1, 20)

    @pytest.mark.parametrize("mutate,match", [
        (lambda b: b"XXXX" + b[4:], "magic"),
        (lambda b: b[:4] + struct.pack("<H", 9) + b[6:], "version"),
        (lambda b: b[:-4], "truncated"),
        (lambda b: b + b"\0\0\0\0", "trailing"),
        (lambda b: b[:6] + bytes([99]) + b[7:], "architecture"),
        (lambda b: b[:5], "truncated"),
    ])
    def test_corruption(self, mutate, match):
        with pytest.raises(CheckpointError, match=match):
            checkpoint.from_bytes(mutate(checkpoint.to_bytes(tiny_model())))

    def test_wrong_architecture_tensors(self):
        buf = bytearray(checkpoint.to_bytes(tiny_model()))
        buf[6] = 0  # claim resnet: layer3_2 becomes plain and shapes change
        with pytest.raises(CheckpointError):
            checkpoint.from_bytes(bytes(buf))


class TestConfig:
    def test_parse(self):
        cfg = parse_config({**TINY, "solver": {"method": "rk4", "steps_mode": "explicit", "steps": {"layer3_2": 3}}})
        m = cfg.build_model()
        assert m.solver_config("layer3_2").steps == 3 and m.solver_config("layer3_2").method == "rk4"
        assert cfg.training.epochs == 3 and cfg.widths == (4, 8, 8)

    @pytest.mark.parametrize("raw", [
        {"arch": "vgg"}, {"N": 21}, {"bogus": 1}, {"solver": {"method": "rk9"}}, {"training": {"lr": 1}},
        {"training": {"lr0": -1}}, {"model": {"widths": [4, 8]}}, {"model": {"image_size": 6}},
        {"numeric": "int8"}, {"solver": {"steps": {"layer1": 0}}}, [1, 2]])
    def test_invalid(self, raw):
        with pytest.raises(ConfigError):
            parse_config(raw)

    def test_load_errors(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            load_config(tmp_path / "missing.yaml")
        bad = tmp_path / "bad.yaml"
        bad.write_text("arch: [\n")
        with pytest.raises(ConfigError, match="parse"):
            load_config(bad)


class TestEstimator:
    def test_fit_predict(self):
        ds = make_synthetic(48, 3, 8, seed=0, noise=0.3)
        labels = np.array(["cat", "dog", "emu"])[ds.labels]
        clf = ODENetClassifier(widths=(4, 8, 8), epochs=40, batch_size=16, random_state=0)
        clf.fit(ds.images, labels)
        assert list(clf.classes_) == ["cat", "dog", "emu"]
        assert clf.score(ds.images, labels) >= 0.9
        p = clf.predict_proba(ds.images[:5])
        np.testing.assert_allclose(p.sum(axis=1), 1.0)
        assert len(clf.history_) == 40

    def test_flat_input_and_params(self):
        ds = make_synthetic(16, 2, 8, seed=1)
        clf = ODENetClassifier(widths=(2, 4, 4), epochs=1, image_shape=(3, 8, 8))
        clf.fit(ds.images.reshape(16, -1), ds.labels)
        assert clf.predict(ds.images.reshape(16, -1)).shape == (16,)
        assert clone(clf).get_params()["image_shape"] == (3, 8, 8)
        with pytest.raises(ValueError):
            clf.predict(np.zeros((2, 10)))

    def test_q20_predictions(self):
        ds = make_synthetic(16, 2, 8, seed=1)
        clf = ODENetClassifier(widths=(2, 4, 4), epochs=2, batch_size=8, bn_mode="dynamic")
        pf = clf.fit(ds.images, ds.labels).predict_proba(ds.images)
        clf.set_params(numeric="q20")
        assert np.abs(clf.predict_proba(ds.images) - pf).max() < 1e-3

    def test_unfitted_and_bad_shape(self):
        from sklearn.exceptions import NotFittedError
        with pytest.raises(NotFittedError):
            ODENetClassifier().predict(np.zeros((1, 3, 8, 8)))
        with pytest.raises(ValueError):
            ODENetClassifier(epochs=1).fit(np.zeros((4, 12)), [0, 1, 0, 1])


class TestCLI:
    def test_params(self):
        code, out = run_capture(["params", "--arch", "rodenet3", "--n", "20"])
        assert code == 0 and "625.10" in out and "-43.29% vs ResNet-20" in out

    def test_params_all_csv(self, tmp_path):
        code, _ = run_capture(["params", "--all", "--csv", str(tmp_path / "p.csv")])
        rows = list(csv.DictReader(open(tmp_path / "p.csv")))
        assert code == 0 and len(rows) == 7 * 4

    def test_describe(self):
        code, out = run_capture(["describe", "--arch", "resnet", "--n", "20"])
        assert code == 0 and "9" in out.splitlines()[-1]

    def test_simulate(self, tmp_path):
        code, out = run_capture(["simulate", "--csv", str(tmp_path / "s.csv")])
        assert code == 0
        rows = [r for r in csv.DictReader(open(tmp_path / "s.csv")) if r["arch"] == "rODENet-3" and r["N"] == "56"]
        assert float(rows[0]["speedup"]) == pytest.approx(2.66, abs=0.02)

    def test_simulate_single_plan_and_warning(self, tmp_path):
        plan = tmp_path / "plan.yaml"
        plan.write_text("arch: rodenet1\nN: 20\noffload_layers: [layer1]\n")
        code, out = run_capture(["simulate", "--plan", str(plan), "--parallelism", "32"])
        assert code == 0 and "warning:" in out and out.count("\n") >= 3

    def test_calibrate(self, tmp_path):
        pts = tmp_path / "p.csv"
        pts.write_text("n,cycles\n1,23780000\n4,6070000\n8,3120000\n16,1640000\n32,900000\n")
        code, out = run_capture(["calibrate", "--points", str(pts)])
        assert code == 0 and "23615635" in out

    def test_train_and_infer(self, tmp_path):
        (tmp_path / "run.yaml").write_text(yaml.safe_dump(TINY))
        ck = tmp_path / "m.rodn"
        code, out = run_capture(["train", "--config", str(tmp_path / "run.yaml"), "--data", "synthetic",
                                 "--out", str(ck), "--log", str(tmp_path / "log.csv")])
        assert code == 0 and ck.exists()
        ds = make_synthetic(5, 4, 8, seed=9)
        np.save(tmp_path / "x.npy", ds.images)
        code, out = run_capture(["infer", "--checkpoint", str(ck), "--image", str(tmp_path / "x.npy"),
                                 "--numeric", "q20"])
        assert code == 0 and "saturated" in out and len(out.splitlines()) == 7
        cifar = tmp_path / "x.bin"
        cifar.write_bytes(write_cifar_bytes(Dataset(np.zeros((2, 3, 32, 32)), np.zeros(2, dtype=int), 100)))
        assert run_capture(["infer", "--checkpoint", str(ck), "--image", str(cifar)])[0] == 3

    def test_deterministic(self):
        assert run_capture(["simulate"]) == run_capture(["simulate"])
        assert run_capture(["params", "--all"]) == run_capture(["params", "--all"])

    @pytest.mark.parametrize("argv,code", [
        ([], 2), (["frobnicate"], 2), (["params", "--bogus"], 2), (["describe", "--arch", "resnet"], 2),
        (["describe", "--arch", "resnet", "--n", "21"], 3), (["describe", "--arch", "vgg", "--n", "20"], 3),
        (["infer", "--checkpoint", "/nonexistent", "--image", "x.npy"], 3),
        (["simulate", "--plan", "/nonexistent.yaml"], 3), (["calibrate", "--points", "/nonexistent.csv"], 3)])
    def test_exit_codes(self, argv, code, capsys):
        assert run_capture(argv)[0] == code
        err = capsys.readouterr().err
        assert "Traceback" not in err and err.strip().count("\n") <= 1 or code == 2

    def test_threads_env(self, monkeypatch):
        monkeypatch.setenv("RODENET_THREADS", "1")
        assert run_capture(["describe", "--arch", "odenet", "--n", "20"])[0] == 0
        monkeypatch.setenv("RODENET_THREADS", "many")
        assert run_capture(["describe", "--arch", "odenet", "--n", "20"])[0] == 2
