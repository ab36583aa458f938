"""Exact-arithmetic trust scoring.

Expected values for the two reference histories were worked by hand:
25 rejections in 1000 verdicts is 2.5% rejected, complement 97.5, top
grade; 300/1000 is 30%, complement 70, grade B1.  The repeat penalty
squares the percentage: 2.5 squared is 6.25, and anything at or above
10 squared saturates the 100 cap.
"""

from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from tset.trust import (
    Disposition,
    Grade,
    TrustRecord,
    ZeroTransactions,
    format_pct,
    grade,
    merchant_standing,
    record_outcome,
    render_table,
    trust_factor,
    trust_value,
)


def test_reference_history_25_of_1000():
    rec = TrustRecord(total=1000, rejected=25)
    tv = trust_value(rec)
    assert tv == Fraction(5, 2)
    tf = trust_factor(tv)
    assert tf == Fraction(195, 2)
    assert format_pct(tv) == "2.50"
    assert format_pct(tf) == "97.50"
    assert grade(tf) is Grade.A1


def test_reference_history_300_of_1000():
    rec = TrustRecord(total=1000, rejected=300)
    tv = trust_value(rec)
    assert tv == 30
    tf = trust_factor(tv)
    assert tf == 70
    assert grade(tf) is Grade.B1


def test_zero_transactions_raises():
    with pytest.raises(ZeroTransactions):
        trust_value(TrustRecord())


def test_record_outcome_counts_dispositions():
    rec = TrustRecord()
    record_outcome(rec, Disposition.REJECTED, "C0", "widget")
    record_outcome(rec, Disposition.ACCEPTED, "C0", "widget")
    assert (rec.total, rec.rejected) == (2, 1)
    assert rec.repeats == {("C0", "widget"): 1}
    assert not rec.repeat_offender


def test_repeat_offender_squares_trust_value():
    rec = TrustRecord(total=1000, rejected=25,
                      repeats={("C0", "widget"): 2})
    assert rec.repeat_offender
    assert trust_value(rec) == Fraction(25, 4)      # 2.5 squared
    assert format_pct(trust_value(rec)) == "6.25"


def test_squaring_caps_at_100_and_factor_floors_at_0():
    rec = TrustRecord(total=100, rejected=50,
                      repeats={("C0", "widget"): 3})
    assert trust_value(rec) == 100                  # 50^2 capped
    assert trust_factor(trust_value(rec)) == 0
    assert grade(0) is Grade.E2


def test_squaring_boundary_at_10_percent():
    # Exactly 10% squares to exactly 100: the cap binds with equality.
    rec = TrustRecord(total=10, rejected=1, repeats={("C0", "x"): 2})
    assert trust_value(rec) == 100
    below = TrustRecord(total=1000, rejected=99, repeats={("C0", "x"): 2})
    assert trust_value(below) == Fraction(9801, 100)  # 9.9^2, under the cap
    assert trust_factor(trust_value(below)) == Fraction(199, 100)


def test_repeat_on_different_products_is_not_a_repeat():
    rec = TrustRecord()
    record_outcome(rec, Disposition.REJECTED, "C0", "widget")
    record_outcome(rec, Disposition.REJECTED, "C0", "gadget")
    record_outcome(rec, Disposition.REJECTED, "C1", "widget")
    assert not rec.repeat_offender
    record_outcome(rec, Disposition.REJECTED, "C0", "widget")
    assert rec.repeat_offender


def test_counter_validation():
    with pytest.raises(ValueError):
        TrustRecord(total=1, rejected=2)
    with pytest.raises(ValueError):
        TrustRecord(total=-1)


def test_grade_bands():
    assert grade(100) is Grade.A1
    assert grade(Fraction(9999, 100)) is Grade.A1
    assert grade(90) is Grade.A1
    assert grade(Fraction(8999, 100)) is Grade.A2
    assert grade(80) is Grade.A2
    assert grade(Fraction(70)) is Grade.B1
    assert grade(Fraction(999, 100)) is Grade.E2
    assert grade(10) is Grade.E1
    assert grade(0) is Grade.E2
    with pytest.raises(ValueError):
        grade(-1)
    with pytest.raises(ValueError):
        grade(101)


def test_grades_order_by_trustworthiness():
    assert Grade.A1 > Grade.A2 > Grade.B1 > Grade.B2 > Grade.C1 \
        > Grade.C2 > Grade.D1 > Grade.D2 > Grade.E1 > Grade.E2


def test_format_pct_rounds_half_up():
    assert format_pct(Fraction(1, 3) * 100) == "33.33"
    assert format_pct(Fraction(2, 3) * 100) == "66.67"
    assert format_pct(Fraction(1, 800) * 100) == "0.13"   # 0.125 rounds up
    assert format_pct(Fraction(0)) == "0.00"
    assert format_pct(Fraction(100)) == "100.00"


def test_merchant_standing_snapshot():
    rec = TrustRecord(total=1000, rejected=25)
    assert merchant_standing(rec) == {
        "total": 1000, "rejected": 25, "trust_value": "2.50",
        "trust_factor": "97.50", "grade": "A1", "repeat_offender": False,
    }


def test_render_table_lists_unrated():
    text = render_table({"M1": TrustRecord(total=2, rejected=1),
                         "M0": TrustRecord()})
    lines = text.splitlines()
    assert lines[1].startswith("M0") and lines[1].endswith("unrated")
    assert lines[2].startswith("M1") and lines[2].endswith("C1")
    assert "50.00" in lines[2]


# -- properties ---------------------------------------------------------------

@given(total=st.integers(1, 10_000), rejected=st.integers(0, 10_000))
def test_value_and_factor_always_complement(total, rejected):
    rejected = min(rejected, total)
    rec = TrustRecord(total=total, rejected=rejected)
    tv = trust_value(rec)
    assert 0 <= tv <= 100
    assert tv + trust_factor(tv) == 100


@given(total=st.integers(1, 10_000), rejected=st.integers(0, 10_000),
       repeat=st.booleans())
def test_squared_value_stays_in_range(total, rejected, repeat):
    rejected = min(rejected, total)
    repeats = {("C0", "p"): 2} if repeat else {}
    rec = TrustRecord(total=total, rejected=rejected, repeats=repeats)
    tv = trust_value(rec)
    assert 0 <= tv <= 100
    grade(trust_factor(tv))     # never raises inside the range


@given(st.fractions(min_value=0, max_value=100))
def test_grade_total_and_monotone(tf):
    g = grade(tf)
    assert g is Grade(min(int(Fraction(tf) / 10), 9))
    step = Fraction(1, 7)
    if tf + step <= 100:
        assert grade(tf + step) >= g
