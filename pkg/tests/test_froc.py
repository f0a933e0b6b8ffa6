from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sgda.ct import Annotation
from sgda.errors import DataError, ParseError
from sgda.froc import (OPERATING_POINTS, Candidate, emit_curve, format_curve, froc, match,
                       parse_curve, read_candidates, write_candidates)
from tests.oracles import brute_force_froc, random_froc_instance

ANNS = [Annotation("A", (10, 10, 10), 10), Annotation("A", (30, 30, 30), 8),
        Annotation("B", (20, 20, 20), 6)]
CANDS = [Candidate("A", (11, 10, 10), .9), Candidate("A", (50, 50, 50), .8),
         Candidate("A", (30, 30, 33), .7), Candidate("B", (20, 20, 24), .6),
         Candidate("B", (5, 5, 5), .5)]


def build(instance):
    cands, anns, n = instance
    return ([Candidate(s, c, p) for s, c, p in cands], [Annotation(s, c, d) for s, c, d in anns], n)


class TestMatch:
    def test_center_is_hit(self):
        r = match([Candidate("A", (10, 10, 10), .5)], ANNS, 0.0)
        assert r.hits == {("A", 0)} and r.fp_count == 0

    def test_boundary_inclusive_and_exterior(self):
        on = match([Candidate("A", (15, 10, 10), .5)], ANNS, 0.0)
        off = match([Candidate("A", (15 + 1e-9, 10, 10), .5)], ANNS, 0.0)
        assert on.hits == {("A", 0)} and off.fp_count == 1 and not off.hits

    def test_duplicates_absorbed(self):
        r = match([Candidate("A", (10, 10, 10), .5), Candidate("A", (12, 10, 10), .4)], ANNS, 0.0)
        assert len(r.hits) == 1 and r.fp_count == 0 and r.detail["A"]["absorbed"] == 2

    def test_threshold_filters(self):
        r = match(CANDS, ANNS, 0.7)
        assert r.hits == {("A", 0), ("A", 1)} and r.fp_count == 1

    def test_unknown_series(self):
        r = match([Candidate("Z", (0, 0, 0), .5)], ANNS, 0.0)
        assert r.unknown_series == ["Z"] and r.fp_count == 1
        with pytest.raises(DataError, match="Z"):
            match([Candidate("Z", (0, 0, 0), .5)], ANNS, 0.0, strict=True)

    def test_nodule_free_scan_is_known_when_listed(self):
        r = match([Candidate("C", (0, 0, 0), .5)], ANNS, 0.0, series=["A", "B", "C"], strict=True)
        assert r.fp_count == 1 and not r.unknown_series

    @pytest.mark.parametrize("p", [-0.1, 1.5, float("nan")])
    def test_probability_range(self, p):
        with pytest.raises(DataError):
            Candidate("A", (0, 0, 0), p)


class TestFroc:
    def test_fixture(self):
        r = froc(CANDS, ANNS, 2)
        third = 1 / 3
        assert r.sensitivities == pytest.approx((third, third) + (2 * third,) * 5, abs=1e-12)
        assert abs(r.average - 4 / 7) < 1e-9
        assert float(Fraction(4, 7)) == pytest.approx(0.57143, abs=5e-6)

    def test_perfect(self):
        cands = [Candidate(a.series_id, a.center, 0.9) for a in ANNS]
        r = froc(cands, ANNS, 2)
        assert r.sensitivities == (1.0,) * 7 and r.average == 1.0

    def test_empty(self):
        r = froc([], ANNS, 2)
        assert r.sensitivities == (0.0,) * 7 and r.average == 0.0 and r.curve == []

    def test_no_nodules(self):
        with pytest.raises(DataError):
            froc(CANDS, [], 2)

    def test_scan_count(self):
        with pytest.raises(DataError):
            froc(CANDS, ANNS, 0)

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            inst = random_froc_instance(rng)
            sens, avg, curve = brute_force_froc(*inst)
            r = froc(*build(inst))
            assert list(r.sensitivities) == sens and r.average == avg
            assert r.curve == curve

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), k=st.floats(0.01, 0.99))
    def test_ranking_only(self, seed, k):
        cands, anns, n = build(random_froc_instance(np.random.default_rng(seed)))
        scaled = [Candidate(c.series_id, c.center, c.probability * k) for c in cands]
        a, b = froc(cands, anns, n), froc(scaled, anns, n)
        assert a.sensitivities == b.sensitivities and a.average == b.average

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_monotone_and_bounded(self, seed):
        cands, anns, n = build(random_froc_instance(np.random.default_rng(seed)))
        r = froc(cands, anns, n)
        fps = [f for _, f, _ in r.curve]
        sens = [s for _, _, s in r.curve]
        assert fps == sorted(fps) and sens == sorted(sens)
        assert 0.0 <= r.average <= 1.0
        assert r.average == float(np.mean(r.sensitivities))
        prev = None
        for t in sorted({c.probability for c in cands}, reverse=True):
            m = match(cands, anns, t)
            if prev:
                assert len(m.hits) >= len(prev.hits) and m.fp_count >= prev.fp_count
            prev = m


class TestFiles:
    def test_curve_round_trip(self, tmp_path):
        r = froc(CANDS, ANNS, 2)
        emit_curve(r, tmp_path / "c.csv")
        assert parse_curve(tmp_path / "c.csv") == r

    def test_empty_curve_has_seven_zero_rows(self, tmp_path):
        emit_curve(froc([], ANNS, 1), tmp_path / "e.csv")
        lines = (tmp_path / "e.csv").read_text().splitlines()
        block = lines[lines.index("operating_point,sensitivity") + 1:]
        assert [l.split(",")[1] for l in block[:7]] == ["0.0"] * 7
        assert parse_curve(tmp_path / "e.csv").sensitivities == (0.0,) * 7

    def test_deterministic_bytes(self, tmp_path):
        emit_curve(froc(CANDS, ANNS, 2), tmp_path / "a.csv")
        emit_curve(froc(list(reversed(CANDS)), ANNS, 2), tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_operating_points_listed(self):
        text = format_curve(froc(CANDS, ANNS, 2))
        assert all(f"\n{t!r}," in text for t in map(float, OPERATING_POINTS))

    def test_candidates_round_trip(self, tmp_path):
        write_candidates(tmp_path / "k.csv", CANDS)
        assert read_candidates(tmp_path / "k.csv") == [
            Candidate(c.series_id, tuple(map(float, c.center)), c.probability) for c in CANDS]

    @pytest.mark.parametrize("body", ["a,b\n", "seriesuid,coordX,coordY,coordZ,probability\nA,1,2,3\n",
                                      "seriesuid,coordX,coordY,coordZ,probability\nA,1,2,x,0.5\n",
                                      "seriesuid,coordX,coordY,coordZ,probability\nA,1,2,3,2\n"])
    def test_bad_candidates(self, tmp_path, body):
        (tmp_path / "k.csv").write_text(body)
        with pytest.raises(ParseError):
            read_candidates(tmp_path / "k.csv")
