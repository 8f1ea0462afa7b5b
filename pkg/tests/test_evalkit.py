import csv
import json

import numpy as np
import pytest
import torch
from numpy.testing import assert_allclose

from r2n2.bspline import BaselineConfig
from r2n2.datakit import generate_case
from r2n2.evalkit import (CaseResult, EvalCase, EvalReport, EvaluationError, as_eval_case, compare_methods,
                          config_digest, tre)
from r2n2.field_geometry import DisplacementField, make_grid
from r2n2.network import R2N2, NetConfig


def const_field(res, dx, dy):
    g = make_grid(res, res)
    return DisplacementField(g, torch.full(g.shape, float(dx)), torch.full(g.shape, float(dy)))


class TestTRE:
    def test_zero(self):
        pts = np.random.default_rng(0).uniform(-0.8, 0.8, (10, 2))
        assert tre(pts, pts, const_field(16, 0, 0)) == (0.0, 0.0)

    def test_shift(self):
        pts = np.random.default_rng(1).uniform(-0.8, 0.8, (10, 2))
        d = np.array([0.03, -0.04])
        mean, worst = tre(pts, pts + d, const_field(16, 0, 0))
        assert mean == pytest.approx(0.05) and worst == pytest.approx(0.05)

    def test_field_cancels_shift(self):
        pts = np.random.default_rng(2).uniform(-0.8, 0.8, (10, 2))
        mean, worst = tre(pts, pts + [0.1, 0.2], const_field(16, 0.1, 0.2))
        assert mean < 1e-6 and worst < 1e-6

    def test_rms_at_least_mean(self):
        pts = np.zeros((2, 2))
        moved = np.array([[0.1, 0.0], [0.3, 0.0]])
        mean, _ = tre(pts, moved, const_field(8, 0, 0))
        rms, _ = tre(pts, moved, const_field(8, 0, 0), rms=True)
        assert mean == pytest.approx(0.2) and rms == pytest.approx(np.sqrt(0.05))

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            tre(np.zeros((0, 2)), np.zeros((0, 2)), const_field(8, 0, 0))
        with pytest.raises(ValueError):
            tre(np.zeros((3, 2)), np.zeros((2, 2)), const_field(8, 0, 0))


def make_report(n=3):
    cases = [CaseResult(f"c{i}", 20, 0.03, 0.05, 0.01 * i, 0.02, 0.005, 0.01, 0.1 + i, 2.0, 31.5)
             for i in range(n)]
    return EvalReport(cases, 175, 722, 25, 64, digests={"net": "abc"}, pixel_spacing_mm=1.5)


class TestReport:
    def test_summary(self):
        s = make_report().summary()
        assert s["tre_before_px"] == pytest.approx(0.03 * 31.5)
        assert s["param_ratio"] == pytest.approx(175 / 722)
        assert s["median_seconds_r2n2"] == pytest.approx(1.1)
        assert s["speedup"] == pytest.approx(2.0 / 1.1)
        assert s["tre_bspline_mm"] == pytest.approx(0.005 * 31.5 * 1.5)

    def test_roundtrip(self, tmp_path):
        r = make_report()
        r.save(tmp_path / "r.json")
        assert EvalReport.load(tmp_path / "r.json") == r
        assert json.loads((tmp_path / "r.json").read_text())["summary"]["cases"] == 3

    def test_csv(self, tmp_path):
        make_report().write_csv(tmp_path / "c.csv")
        rows = list(csv.DictReader(open(tmp_path / "c.csv")))
        assert len(rows) == 3
        assert float(rows[1]["tre_r2n2_px"]) == pytest.approx(0.01 * 31.5)

    def test_digest_stable(self):
        assert config_digest({"a": 1, "b": 2}) == config_digest({"b": 2, "a": 1})
        assert config_digest({"a": 1}) != config_digest({"a": 2})


@pytest.fixture(scope="module")
def tiny_net():
    torch.manual_seed(0)
    return R2N2(NetConfig.toy(32, 16))


BASE32 = BaselineConfig.scaled(32, iterations_per_level=30)


class TestCompare:
    def test_aligned_cases(self, tiny_net, tmp_path):
        cases = [generate_case(32, 0.0, seed=s) for s in range(2)]
        with torch.no_grad():
            for p in tiny_net.head.fc_out.parameters():
                p.zero_()
        rep = compare_methods(cases, tiny_net, BASE32, steps=3, timing_repeats=1, out_dir=tmp_path)
        for c in rep.cases:
            assert c.tre_before == 0.0
            assert c.tre_r2n2 <= c.tre_before + 1e-6 and c.tre_bspline <= 1e-3
        assert rep.params_sequence == 21
        assert rep.param_ratio == pytest.approx(21 / rep.params_bspline)
        for name in ("report.json", "cases.csv", "tre.png", "displacement_steps.png", "fields.png"):
            assert (tmp_path / name).stat().st_size > 0

    def test_baseline_improves_deformed_cases(self, tiny_net):
        cases = [generate_case(32, 0.08, seed=s) for s in (3, 4)]
        rep = compare_methods(cases, tiny_net, BASE32, steps=2, timing_repeats=1)
        assert rep.mean("tre_bspline") < rep.mean("tre_before")
        assert all(c.seconds_r2n2 > 0 and c.seconds_bspline > 0 for c in rep.cases)

    def test_resolution_mismatch(self, tiny_net):
        with pytest.raises(EvaluationError, match="expects 32x32"):
            compare_methods([generate_case(48, 0.05, seed=0)], tiny_net, BASE32)

    def test_baseline_mismatch(self, tiny_net):
        with pytest.raises(EvaluationError):
            compare_methods([generate_case(32, 0.05, seed=0)], tiny_net, BaselineConfig.scaled(64))

    def test_empty(self, tiny_net):
        with pytest.raises(EvaluationError):
            compare_methods([], tiny_net, BASE32)


def test_as_eval_case_names_by_seed():
    c = generate_case(16, 0.05, seed=12)
    e = as_eval_case(c)
    assert isinstance(e, EvalCase) and e.name == "seed12"
    assert as_eval_case(e) is e
    assert_allclose(e.landmarks_fixed, c.landmarks_fixed)
