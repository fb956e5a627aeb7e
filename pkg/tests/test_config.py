import numpy as np
import pytest

from hdrdim import config as C
from hdrdim.hdrio import HdrImage, write_image


def _ini(tmp_path, text, name="run.ini"):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestPrecedence:
    def test_defaults(self):
        rc = C.load(env={})
        assert rc == C.RunConfig()
        assert (rc.display.led_rows, rc.display.led_cols) == (12, 22)
        assert rc.report_format == "csv"

    def test_file_over_defaults_and_flags_over_file(self, tmp_path):
        p = _ini(tmp_path, "[display]\nled_rows = 4\npeak_nits = 1000\n[loss]\np_a = 0.3\n")
        rc = C.load(p, env={})
        assert rc.display.led_rows == 4 and rc.display.peak_nits == 1000.0 and rc.loss.p_a == 0.3
        assert rc.display.led_cols == 22
        rc = C.load(p, {"display.led_rows": "6", "loss.p_a": "0.9"}, env={})
        assert rc.display.led_rows == 6 and rc.loss.p_a == 0.9 and rc.display.peak_nits == 1000.0

    def test_env_var_supplies_default_file(self, tmp_path):
        p = _ini(tmp_path, "[output]\nformat = json\n")
        assert C.load(env={C.ENV_VAR: str(p)}).report_format == "json"
        other = _ini(tmp_path, "[output]\nformat = csv\n", "other.ini")
        assert C.load(other, env={C.ENV_VAR: str(p)}).report_format == "csv"

    def test_relative_psf_resolved_against_file(self, tmp_path):
        sub = tmp_path / "cfg"
        sub.mkdir()
        write_image(HdrImage(np.ones((5, 5, 1)), 1.0, True), sub / "k.pfm")
        rc = C.load(_ini(sub, "[display]\npsf = k.pfm\n"), env={})
        assert rc.display.psf == str(sub.resolve() / "k.pfm")


class TestValues:
    def test_tuple_and_bool_parsing(self):
        rc = C.apply(C.RunConfig(), {"net.stages": "2", "net.widths": "8, 12",
                                     "display.psf_normalize": "no", "display.max_drive_nits": "none"})
        assert rc.net.widths == (8, 12) and rc.display.psf_normalize is False
        assert rc.display.max_drive_nits is None

    def test_dump_roundtrip(self, tmp_path):
        rc = C.apply(C.RunConfig(), {"display.led_rows": "5", "loss.p_a": "0.125", "optim.lr": "0.0123",
                                     "net.stages": "2", "net.widths": "4, 6", "train.iterations": "7",
                                     "output.format": "json", "dimmer.kind": "lp"})
        p = _ini(tmp_path, C.dump(rc))
        assert C.load(p, env={}) == rc

    def test_build_display_shapes(self):
        cfg = C.DisplaySettings(led_rows=3, led_cols=4).build(48, 64)
        assert cfg.layout.shape == (48, 64) and cfg.layout.n_leds == 12
        assert cfg.psf.kernel.shape[0] % 2 == 1


class TestErrors:
    @pytest.mark.parametrize("settings", [
        {"display.led_rows": "0"},
        {"display.led_rows": "three"},
        {"display.leak_floor": "1.5"},
        {"display.boundary": "mirror"},
        {"display.psf": "/no/such/file.pfm"},
        {"display.colour": "red"},
        {"nosuch.key": "1"},
        {"flat": "1"},
        {"loss.p_a": "2"},
        {"output.format": "xml"},
        {"metrics.pu_curve": "/no/such/curve.csv"},
        {"net.widths": "8"},
    ])
    def test_rejected(self, settings):
        with pytest.raises(C.ConfigError):
            C.apply(C.RunConfig(), settings)

    def test_missing_and_malformed_file(self, tmp_path):
        with pytest.raises(C.ConfigError):
            C.load(tmp_path / "absent.ini", env={})
        with pytest.raises(C.ConfigError):
            C.load(_ini(tmp_path, "no section header\n"), env={})

    def test_too_many_leds_for_panel(self):
        with pytest.raises(C.ConfigError):
            C.DisplaySettings(led_rows=100, led_cols=100).build(20, 20)
