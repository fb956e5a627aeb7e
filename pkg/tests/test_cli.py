import csv
import json
import shutil
import warnings

import numpy as np
import pytest

from conftest import FIXTURES
from hdrdim import config as C
from hdrdim.cli import ERROR_COLUMNS, REPORT_COLUMNS, SWEEP_COLUMNS, main
from hdrdim.display import Backlight, load_backlight, prepare_target, save_backlight, simulate_full
from hdrdim.hdrio import HdrImage, read_image, write_image

CORPUS = sorted((FIXTURES / "corpus").iterdir())
GOLDEN = FIXTURES / "golden"
RUN_INI = str(GOLDEN / "run.ini")


@pytest.fixture(autouse=True)
def _quiet():
    with warnings.catch_warnings():
        # the fixture images are too small for five MS-SSIM scales
        warnings.simplefilter("ignore", UserWarning)
        yield


def run(*argv):
    return main([str(a) for a in argv])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def header(path):
    with open(path, newline="") as fh:
        return tuple(next(csv.reader(fh)))


class TestGolden:
    def test_compare_matches_golden(self, tmp_path):
        assert run("compare", *CORPUS, "--config", RUN_INI, "-o", tmp_path) == 0
        assert header(tmp_path / "compare.csv") == REPORT_COLUMNS
        got, want = read_csv(tmp_path / "compare.csv"), read_csv(GOLDEN / "compare.csv")
        assert len(got) == len(want) == 15
        for g, w in zip(got, want):
            assert g["image"].endswith(w["image"]) and g["algo"] == w["algo"] and g["p_a"] == w["p_a"]
            for col in ("psr", "pu_psnr", "pu_ms_ssim", "clipping_fraction"):
                np.testing.assert_allclose(float(g[col]), float(w[col]), rtol=1e-9, err_msg=col)

    def test_json_mirror(self, tmp_path):
        assert run("compare", *CORPUS, "--config", RUN_INI, "--algos", "max,avg", "--format", "json",
                   "-o", tmp_path / "j") == 0
        assert run("compare", *CORPUS, "--config", RUN_INI, "--algos", "max,avg", "-o", tmp_path / "c") == 0
        payload = json.loads((tmp_path / "j" / "compare.json").read_text())
        assert tuple(payload["columns"]) == REPORT_COLUMNS and payload["errors"] == []
        rows = read_csv(tmp_path / "c" / "compare.csv")
        assert len(rows) == len(payload["rows"]) == 6
        for r, j in zip(rows, payload["rows"]):
            assert r["image"] == j["image"] and j["p_a"] is None
            assert float(r["pu_psnr"]) == j["pu_psnr"]

    def test_parallel_keeps_order(self, tmp_path):
        args = ("compare", *CORPUS, "--config", RUN_INI, "--algos", "max,lp")
        assert run(*args, "-o", tmp_path / "a") == 0
        assert run(*args, "-j", 2, "-o", tmp_path / "b") == 0
        assert (tmp_path / "a" / "compare.csv").read_bytes() == (tmp_path / "b" / "compare.csv").read_bytes()


class TestDim:
    def test_constant_image_gives_equal_values(self, tmp_path):
        p = tmp_path / "flat.pfm"
        write_image(HdrImage(np.full((24, 32, 3), 0.7), 1.0, False), p)
        assert run("dim", p, "--algo", "max", "--leds", "3x4", "-o", tmp_path) == 0
        v = json.loads((tmp_path / "flat.max.backlight.json").read_text())["values"]
        assert len(v) == 12 and len(set(v)) == 1

    def test_opt_report_schema(self, tmp_path):
        assert run("dim", CORPUS[0], "--algo", "opt", "--pa", 0.5, "--config", RUN_INI, "-o", tmp_path) == 0
        rows = read_csv(tmp_path / "report.csv")
        assert header(tmp_path / "report.csv") == REPORT_COLUMNS
        assert len(rows) == 1 and float(rows[0]["p_a"]) == 0.5
        assert 0 <= float(rows[0]["psr"]) <= 100 and float(rows[0]["pu_psnr"]) > 0
        trace = read_csv(tmp_path / f"{CORPUS[0].stem}.opt.trace.csv")
        assert len(trace) > 0

    def test_csv_backlight_extension(self, tmp_path):
        assert run("dim", CORPUS[0], "--config", RUN_INI, "--backlight-ext", ".csv", "-o", tmp_path) == 0
        assert (tmp_path / f"{CORPUS[0].stem}.max.backlight.csv").is_file()

    def test_corrupt_file_is_partial_failure(self, tmp_path):
        data = tmp_path / "in"
        data.mkdir()
        for p in CORPUS[:2]:
            shutil.copy(p, data)
        (data / "broken.hdr").write_bytes(b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n-Y 10 +X 10\n\x02\x02")
        assert run("dim", data, "--config", RUN_INI, "-o", tmp_path / "out") == 1
        rows = read_csv(tmp_path / "out" / "report.csv")
        errors = read_csv(tmp_path / "out" / "errors.csv")
        assert len(rows) == 2 and len(errors) == 1
        assert header(tmp_path / "out" / "errors.csv") == ERROR_COLUMNS
        assert errors[0]["image"].endswith("broken.hdr") and errors[0]["error"]

    def test_missing_file_is_partial_failure(self, tmp_path):
        assert run("dim", CORPUS[0], tmp_path / "absent.hdr", "--config", RUN_INI, "-o", tmp_path) == 1
        assert len(read_csv(tmp_path / "report.csv")) == 1


class TestSimulate:
    def _library(self, image, backlight_path, rc):
        img = read_image(image)
        cfg = rc.display.build(img.height, img.width)
        target = prepare_target(img, cfg)
        return cfg, target, simulate_full(target, load_backlight(backlight_path, cfg.layout), cfg)

    def test_bit_identical_to_library(self, tmp_path):
        image = CORPUS[1]
        assert run("dim", image, "--algo", "lp", "--config", RUN_INI, "-o", tmp_path) == 0
        bl = tmp_path / f"{image.stem}.lp.backlight.json"
        assert run("simulate", image, "--backlight", bl, "--config", RUN_INI, "-o", tmp_path / "s") == 0
        _, _, sim = self._library(image, bl, C.load(RUN_INI, env={}))
        write_image(sim.displayed, tmp_path / "lib.pfm")
        assert (tmp_path / "s" / f"{image.stem}.displayed.pfm").read_bytes() == (tmp_path / "lib.pfm").read_bytes()
        diag = json.loads((tmp_path / "s" / f"{image.stem}.simulate.json").read_text())
        assert diag["clipping_fraction"] == sim.clipping_fraction
        d = read_image(tmp_path / "s" / f"{image.stem}.diffusion.pfm").data[:, :, 0]
        # PFM stores float32
        np.testing.assert_array_equal(d, sim.diffusion.astype(np.float32))

    def test_zero_backlight_is_black(self, tmp_path):
        image = CORPUS[0]
        rc = C.load(RUN_INI, env={})
        img = read_image(image)
        lay = rc.display.build(img.height, img.width).layout
        save_backlight(Backlight(lay, np.zeros(lay.n_leds)), tmp_path / "zero.json")
        assert run("simulate", image, "--backlight", tmp_path / "zero.json", "--config", RUN_INI,
                   "--ext", "hdr", "-o", tmp_path) == 0
        assert not read_image(tmp_path / f"{image.stem}.displayed.hdr").data.any()

    def test_layout_mismatch_is_config_error(self, tmp_path):
        image = CORPUS[0]
        assert run("dim", image, "--config", RUN_INI, "-o", tmp_path) == 0
        bl = tmp_path / f"{image.stem}.max.backlight.json"
        assert run("simulate", image, "--backlight", bl, "--config", RUN_INI, "--leds", "2x2", "-o", tmp_path) == 2


class TestSweep:
    def test_opt_psr_non_decreasing(self, tmp_path):
        assert run("sweep", *CORPUS, "--config", RUN_INI, "--set", "optim.max_iters=150",
                   "--pa-list", "0,0.25,0.5,0.75,1", "-o", tmp_path) == 0
        table = read_csv(tmp_path / "sweep.csv")
        assert header(tmp_path / "sweep.csv") == SWEEP_COLUMNS
        assert [float(r["p_a"]) for r in table] == [0, 0.25, 0.5, 0.75, 1]
        psr = np.array([float(r["median_psr"]) for r in table])
        assert np.all(np.diff(psr) >= -0.5)
        assert len(read_csv(tmp_path / "sweep_rows.csv")) == 15

    def test_single_image_single_pa_is_that_image(self, tmp_path):
        assert run("sweep", CORPUS[2], "--config", RUN_INI, "--pa-list", "0.3", "-o", tmp_path) == 0
        (row,), (t,) = read_csv(tmp_path / "sweep_rows.csv"), read_csv(tmp_path / "sweep.csv")
        assert t["n_images"] == "1"
        for col in ("psr", "pu_psnr", "pu_ms_ssim"):
            assert float(t["median_" + col]) == float(row[col])

    def test_classical_is_single_flagged_row(self, tmp_path):
        assert run("sweep", *CORPUS, "--config", RUN_INI, "--algo", "avg", "-o", tmp_path) == 0
        (t,) = read_csv(tmp_path / "sweep.csv")
        assert t["pa_ignored"] == "1" and t["p_a"] == "" and t["n_images"] == "3"

    def test_bad_pa_list(self, tmp_path):
        assert run("sweep", CORPUS[0], "--pa-list", "", "-o", tmp_path) == 2
        assert run("sweep", CORPUS[0], "--pa-list", "0.1,x", "-o", tmp_path) == 2


SMALL_NET = ("--leds", "2x2", "--set", "net.stages=2", "--set", "net.widths=4,6")


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("train")
    rng = np.random.default_rng(7)
    for k in range(3):
        write_image(HdrImage(rng.uniform(0, 1, (32, 32, 3)) ** 4, 1.0, False), d / f"img{k}.pfm")
    return d


class TestTrainEval:
    def test_train_deterministic(self, dataset, tmp_path):
        for out in ("a", "b"):
            assert run("train", dataset, *SMALL_NET, "--iterations", 10, "--seed", 3, "-o", tmp_path / out) == 0
        a, b = (tmp_path / "a" / "history.csv").read_bytes(), (tmp_path / "b" / "history.csv").read_bytes()
        assert a == b and len(a.splitlines()) == 11

    def test_eval_two_rows_per_image(self, dataset, tmp_path):
        assert run("train", dataset, *SMALL_NET, "--iterations", 2, "-o", tmp_path) == 0
        assert run("eval", *sorted(dataset.iterdir()), "--checkpoint", tmp_path / "model.npz",
                   *SMALL_NET, "-o", tmp_path) == 0
        rows = read_csv(tmp_path / "eval.csv")
        assert header(tmp_path / "eval.csv") == REPORT_COLUMNS
        assert len(rows) == 6 and [r["p_a"] for r in rows[:2]] == ["0.1", "0.9"]
        assert {r["algo"] for r in rows} == {"dbld"}

    def test_eval_wrong_stage_count(self, dataset, tmp_path, capsys):
        assert run("train", dataset, *SMALL_NET, "--iterations", 1, "-o", tmp_path) == 0
        code = run("eval", *sorted(dataset.iterdir()), "--checkpoint", tmp_path / "model.npz",
                   "--leds", "2x2", "-o", tmp_path)
        assert code == 2
        assert "shape mismatch" in capsys.readouterr().err


class TestConfigErrors:
    def test_exit_code_two(self, tmp_path):
        assert run("dim", CORPUS[0], "--set", "display.leak_floor=3", "-o", tmp_path) == 2
        assert run("dim", CORPUS[0], "--leds", "twelve", "-o", tmp_path) == 2
        assert run("dim", CORPUS[0], "--config", tmp_path / "absent.ini", "-o", tmp_path) == 2
        assert run("compare", CORPUS[0], "--algos", "max,median", "-o", tmp_path) == 2
        assert run("dim", CORPUS[0], "-j", 0, "-o", tmp_path) == 2

    def test_env_config(self, tmp_path, monkeypatch):
        monkeypatch.setenv(C.ENV_VAR, RUN_INI)
        assert run("dim", CORPUS[0], "-o", tmp_path) == 0
        bl = json.loads((tmp_path / f"{CORPUS[0].stem}.max.backlight.json").read_text())
        assert len(bl["values"]) == 12
