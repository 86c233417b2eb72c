"""Run-length encoding, exact speeds, and speed adaptation."""

from __future__ import annotations

import logging
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import dubkit as dk
from dubkit.units import as_speed

import oracles as orc


def useq(units, vocab=10):
    return dk.UnitSequence(tuple(units), vocab)


unit_lists = st.lists(st.integers(min_value=0, max_value=9), min_size=1, max_size=40)
speeds = st.fractions(min_value=Fraction(1, 20), max_value=Fraction(1, 1))


class TestRunLengthForm:
    def test_single_run(self):
        rl = dk.to_runs(useq([3, 3, 3]))
        assert rl.runs == ((3, 3),)
        assert rl.total_length() == 3

    def test_alternating(self):
        rl = dk.to_runs(useq([1, 2, 1]))
        assert rl.runs == ((1, 1), (2, 1), (1, 1))

    def test_empty_rejected(self):
        with pytest.raises(dk.ValidationError):
            dk.to_runs(useq([]))
        with pytest.raises(dk.ValidationError):
            dk.from_runs(dk.RunLengthForm((), 4))

    def test_adjacent_repeat_rejected(self):
        with pytest.raises(dk.ValidationError):
            dk.RunLengthForm(((1, 2), (1, 3)), 4)

    def test_nonpositive_count_rejected(self):
        with pytest.raises(dk.ValidationError):
            dk.RunLengthForm(((1, 0),), 4)

    @given(unit_lists)
    def test_round_trip(self, units):
        seq = useq(units)
        assert dk.from_runs(dk.to_runs(seq)) == seq

    @given(unit_lists)
    def test_matches_groupby(self, units):
        assert dk.to_runs(useq(units)).runs == tuple(orc.rle(units))

    @given(unit_lists)
    def test_dedup_is_run_symbols(self, units):
        seq = useq(units)
        assert dk.dedup(seq).units == tuple(u for u, _ in dk.to_runs(seq).runs)


class TestUnitSequence:
    def test_out_of_vocab_rejected(self):
        with pytest.raises(dk.ValidationError):
            dk.UnitSequence((4,), 4)
        with pytest.raises(dk.ValidationError):
            dk.UnitSequence((-1,), 4)

    def test_bad_vocab_rejected(self):
        with pytest.raises(dk.ValidationError):
            dk.UnitSequence((), 0)


class TestUnitSpeed:
    def test_no_repeats(self):
        assert dk.unit_speed(useq([1, 2, 3])) == 1

    def test_single_symbol(self):
        assert dk.unit_speed(useq([4, 4, 4, 4])) == Fraction(1, 4)

    def test_exact_type(self):
        assert isinstance(dk.unit_speed(useq([1, 1, 2])), Fraction)
        assert dk.unit_speed(useq([1, 1, 2])) == Fraction(2, 3)


class TestAdaptSpeed:
    def test_identity_when_speeds_match(self):
        seq = useq([4, 4, 5, 5])
        assert dk.adapt_speed(seq, Fraction(1, 2)) == seq

    def test_doubles_runs(self):
        assert dk.adapt_speed(useq([7, 8]), Fraction(1, 2)).units == (7, 7, 8, 8)

    def test_collapses_runs(self):
        assert dk.adapt_speed(useq([3, 3, 3, 9]), Fraction(1, 1)).units == (3, 9)

    def test_rejects_bad_speed(self):
        with pytest.raises(dk.ValidationError):
            dk.adapt_speed(useq([1, 2]), Fraction(0))
        with pytest.raises(dk.ValidationError):
            dk.adapt_speed(useq([1, 2]), Fraction(3, 2))

    def test_accepts_float_speed_exactly(self):
        # float inputs coerce through Fraction, so 0.5 is exactly one half
        assert dk.adapt_speed(useq([7, 8]), 0.5).units == (7, 7, 8, 8)

    @given(unit_lists, speeds)
    @settings(max_examples=200)
    def test_skeleton_preserved(self, units, r):
        seq = useq(units)
        assert dk.dedup(dk.adapt_speed(seq, r)) == dk.dedup(seq)

    @given(unit_lists, speeds)
    @settings(max_examples=200)
    def test_deviation_never_grows(self, units, r):
        seq = useq(units)
        out = dk.adapt_speed(seq, r)
        assert abs(dk.unit_speed(out) - r) <= abs(dk.unit_speed(seq) - r)

    @given(unit_lists)
    def test_idempotent_at_own_speed(self, units):
        seq = useq(units)
        assert dk.adapt_speed(seq, dk.unit_speed(seq)) == seq

    @given(unit_lists, speeds)
    @settings(max_examples=100)
    def test_second_pass_keeps_deviation(self, units, r):
        # re-adapting may reshuffle counts at the same total, but the
        # deviation from the requested speed cannot get worse
        once = dk.adapt_speed(useq(units), r)
        twice = dk.adapt_speed(once, r)
        assert len(twice) == len(once)
        assert abs(dk.unit_speed(twice) - r) <= abs(dk.unit_speed(once) - r)

    def test_matches_reference_on_sample(self):
        # the exhaustive sweep lives in the acceptance suite; this is a
        # quick cross-section against the independent reference
        cases = [
            ((1, 1, 2, 3, 3, 3), Fraction(2, 7)),
            ((5, 5, 5, 5, 5), Fraction(1, 3)),
            ((0, 1, 0, 1), Fraction(1, 1)),
            ((2, 2, 2, 2, 2, 2, 2, 2, 1), Fraction(3, 10)),
            ((4, 4, 4, 3, 3, 4), Fraction(1, 2)),
        ]
        for units, r in cases:
            got = dk.adapt_speed(useq(units), r).units
            assert got == orc.brute_adapt(units, r), (units, r)

    def test_extreme_ratio_logs_warning(self, caplog):
        target = useq([1] * 9)  # speed 1/9 vs requested 1.0: ratio 9
        with caplog.at_level(logging.WARNING, logger="dubkit.units"):
            out = dk.adapt_speed(target, Fraction(1, 1))
        assert out.units == (1,)
        assert any("exceeds 4" in rec.message for rec in caplog.records)

    def test_moderate_ratio_is_silent(self, caplog):
        with caplog.at_level(logging.WARNING, logger="dubkit.units"):
            dk.adapt_speed(useq([1, 1, 2, 2]), Fraction(1, 4))
        assert not caplog.records


class TestAsSpeed:
    def test_exact_decimal_parse(self):
        assert as_speed(0.5) == Fraction(1, 2)
        assert as_speed("1/3") == Fraction(1, 3)

    def test_range_enforced(self):
        with pytest.raises(dk.ValidationError):
            as_speed(-1)
        with pytest.raises(dk.ValidationError):
            as_speed("abc")


class TestUnitJsonl:
    def test_round_trip(self, tmp_path):
        records = [
            dk.UnitRecord("a", useq([1, 2, 2]), duration_ms=120),
            dk.UnitRecord("b", useq([4])),
        ]
        path = tmp_path / "units.jsonl"
        dk.write_unit_jsonl(path, records)
        back = dk.read_unit_jsonl(path)
        assert back == records

    def test_malformed_line_reports_lineno(self, tmp_path):
        path = tmp_path / "units.jsonl"
        path.write_text('{"id": "a", "units": [1], "vocab_size": 4}\nnot json\n')
        with pytest.raises(dk.DataError, match=":2:"):
            dk.read_unit_jsonl(path)

    def test_missing_field_reports_lineno(self, tmp_path):
        path = tmp_path / "units.jsonl"
        path.write_text('{"id": "a", "units": [1]}\n')
        with pytest.raises(dk.DataError, match=":1:"):
            dk.read_unit_jsonl(path)
