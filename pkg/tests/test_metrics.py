import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as scipy_stats

from capguard.metrics import (
    AttrReport,
    PixelConfusion,
    att_fpr,
    att_sensitivity,
    confusion_pixels,
    correlate_attributes,
    lesion_ratio,
    mean_iou,
    pearson,
    read_reports_csv,
    write_reports_csv,
)


# --- confusion_pixels --------------------------------------------------------

def test_confusion_identical_masks():
    m = np.ones((4, 4), dtype=bool)
    c = confusion_pixels(m, m)
    assert (c.tp, c.fp, c.tn, c.fn) == (16, 0, 0, 0)


def test_confusion_empty_region():
    lesion = np.zeros((4, 4), dtype=bool)
    lesion[:2] = True
    c = confusion_pixels(np.zeros((4, 4), dtype=bool), lesion)
    assert c.tp == 0 and c.fp == 0
    assert c.fn == 8 and c.tn == 8


def test_confusion_total_invariant():
    rng = np.random.default_rng(3)
    region = rng.random((6, 7)) > 0.5
    lesion = rng.random((6, 7)) > 0.3
    assert confusion_pixels(region, lesion).total == 42


def test_confusion_matches_per_pixel_loop():
    rng = np.random.default_rng(8)
    region = rng.random((8, 8)) > 0.5
    lesion = rng.random((8, 8)) > 0.5
    c = confusion_pixels(region, lesion)
    tp = fp = tn = fn = 0
    for i in range(8):
        for j in range(8):
            if region[i, j] and lesion[i, j]:
                tp += 1
            elif region[i, j]:
                fp += 1
            elif lesion[i, j]:
                fn += 1
            else:
                tn += 1
    assert (c.tp, c.fp, c.tn, c.fn) == (tp, fp, tn, fn)


def test_confusion_shape_mismatch():
    with pytest.raises(ValueError):
        confusion_pixels(np.zeros((2, 2), dtype=bool), np.zeros((3, 3), dtype=bool))


def test_confusion_complement_swaps_counts():
    rng = np.random.default_rng(15)
    region = rng.random((5, 5)) > 0.4
    lesion = rng.random((5, 5)) > 0.6
    c = confusion_pixels(region, lesion)
    cc = confusion_pixels(~region, lesion)
    assert (cc.tp, cc.fn) == (c.fn, c.tp)
    assert (cc.fp, cc.tn) == (c.tn, c.fp)


# --- ratio metrics -----------------------------------------------------------

def test_sensitivity_full_coverage():
    assert att_sensitivity(PixelConfusion(tp=5, fp=0, tn=11, fn=0)) == 1.0


def test_sensitivity_disjoint():
    assert att_sensitivity(PixelConfusion(tp=0, fp=4, tn=8, fn=4)) == 0.0


def test_sensitivity_three_quarters():
    assert att_sensitivity(PixelConfusion(tp=3, fp=0, tn=0, fn=1)) == 0.75


def test_sensitivity_undefined_without_lesion():
    assert att_sensitivity(PixelConfusion(tp=0, fp=3, tn=13, fn=0)) is None


def test_fpr_region_inside_lesion():
    assert att_fpr(PixelConfusion(tp=4, fp=0, tn=10, fn=2)) == 0.0


def test_fpr_everything_flagged_no_lesion():
    assert att_fpr(PixelConfusion(tp=0, fp=16, tn=0, fn=0)) == 1.0


def test_fpr_one_quarter():
    assert att_fpr(PixelConfusion(tp=0, fp=1, tn=3, fn=0)) == 0.25


def test_fpr_undefined_when_lesion_covers_all():
    assert att_fpr(PixelConfusion(tp=9, fp=0, tn=0, fn=7)) is None


def test_mean_iou_perfect():
    assert mean_iou(PixelConfusion(tp=6, fp=0, tn=10, fn=0)) == 1.0


def test_mean_iou_complement():
    assert mean_iou(PixelConfusion(tp=0, fp=9, tn=0, fn=7)) == 0.0


def test_mean_iou_worked_example():
    c = PixelConfusion(tp=2, fp=1, tn=4, fn=1)
    assert mean_iou(c) == pytest.approx(7 / 12)


def test_mean_iou_skips_empty_union():
    # no lesion anywhere and nothing flagged: lesion-class union empty
    assert mean_iou(PixelConfusion(tp=0, fp=0, tn=12, fn=0)) == 1.0
    # everything lesion and everything flagged: background union empty
    assert mean_iou(PixelConfusion(tp=12, fp=0, tn=0, fn=0)) == 1.0


def test_mean_iou_one_only_for_exact_match():
    rng = np.random.default_rng(44)
    for _ in range(25):
        region = rng.random((4, 4)) > 0.5
        lesion = rng.random((4, 4)) > 0.5
        if not lesion.any() or lesion.all():
            continue
        value = mean_iou(confusion_pixels(region, lesion))
        assert (value == 1.0) == np.array_equal(region, lesion)


def test_lesion_ratio():
    assert lesion_ratio(np.ones((4, 4), dtype=bool)) == 1.0
    assert lesion_ratio(np.zeros((4, 4), dtype=bool)) == 0.0
    half = np.zeros((4, 4), dtype=bool)
    half[:2] = True
    assert lesion_ratio(half) == 0.5


# --- pearson -----------------------------------------------------------------

def test_pearson_identity():
    assert pearson([1, 2, 3], [1, 2, 3]) == pytest.approx(1.0)


def test_pearson_negation():
    assert pearson([1, 2, 3], [-1, -2, -3]) == pytest.approx(-1.0)


def test_pearson_textbook_example():
    # value fixed by the product-moment formula
    assert pearson([1, 2, 3, 4], [1, 3, 2, 5]) == pytest.approx(
        0.8315218406202999, abs=1e-12
    )


def test_pearson_constant_is_undefined():
    assert pearson([1, 1, 1], [1, 2, 3]) is None
    assert pearson([1, 2, 3], [5, 5, 5]) is None


def test_pearson_matches_reference_implementation():
    rng = np.random.default_rng(10)
    for _ in range(20):
        xs = rng.normal(size=30)
        ys = rng.normal(size=30)
        assert pearson(xs, ys) == pytest.approx(
            scipy_stats.pearsonr(xs, ys).statistic, abs=1e-12
        )


@settings(max_examples=40, deadline=None)
@given(
    st.integers(0, 2**32 - 1),
    st.floats(0.01, 100),
    st.floats(-50, 50),
)
def test_pearson_affine_invariance(seed, scale, shift):
    rng = np.random.default_rng(seed)
    xs = rng.normal(size=12)
    ys = rng.normal(size=12)
    base = pearson(xs, ys)
    transformed = pearson(scale * xs + shift, ys)
    assert transformed == pytest.approx(base, abs=1e-9)


def test_pearson_rejects_short_input():
    with pytest.raises(ValueError):
        pearson([1.0], [2.0])


# --- correlate_attributes ----------------------------------------------------

def _report(i, attr, correct):
    return AttrReport(
        id=f"s{i:05d}",
        att_sensitivity=attr,
        att_fpr=0.1,
        mean_iou=0.5,
        lesion_ratio=0.25,
        predicted=1,
        truth=1 if correct else 0,
    )


def test_point_biserial_perfect_when_attr_equals_correctness():
    reports = [_report(i, 1.0 if i % 2 else 0.0, bool(i % 2)) for i in range(40)]
    table = correlate_attributes(reports, "att_sensitivity", bins=4)
    assert table.r_point_biserial == pytest.approx(1.0)


def test_independent_attribute_uncorrelated():
    rng = np.random.default_rng(1234)
    attrs = rng.random(10000)
    corrects = rng.random(10000) < 0.5
    reports = [_report(i, float(a), bool(c)) for i, (a, c) in enumerate(zip(attrs, corrects))]
    table = correlate_attributes(reports, "att_sensitivity", bins=10)
    assert abs(table.r_point_biserial) < 0.05


def test_planted_monotone_link_recovered_in_bins():
    rng = np.random.default_rng(77)
    n = 5000
    attrs = rng.random(n)
    corrects = rng.random(n) < attrs  # P(correct) = attribute
    reports = [_report(i, float(a), bool(c)) for i, (a, c) in enumerate(zip(attrs, corrects))]
    table = correlate_attributes(reports, "att_sensitivity", bins=10)
    assert table.r_accuracy > 0.9
    assert len(table.bin_attr_means) == 10
    assert list(table.bin_attr_means) == sorted(table.bin_attr_means)


def test_correlate_requires_enough_samples():
    reports = [_report(i, 0.5, True) for i in range(5)]
    with pytest.raises(ValueError):
        correlate_attributes(reports, "att_sensitivity", bins=10)


def test_correlate_requires_labels():
    rep = AttrReport(id="x", att_sensitivity=0.5, att_fpr=0.1, mean_iou=0.5,
                     lesion_ratio=0.2, predicted=0, truth=None)
    with pytest.raises(ValueError):
        correlate_attributes([rep] * 20, "att_sensitivity", bins=2)


def test_correlate_skips_undefined_attributes():
    reports = [_report(i, float(i) / 20, i % 2 == 0) for i in range(20)]
    reports += [_report(100 + i, None, True) for i in range(5)]
    table = correlate_attributes(reports, "att_sensitivity", bins=4)
    assert len(table.bin_attr_means) == 4  # the 5 undefined rows dropped


# --- CSV ---------------------------------------------------------------------

def test_csv_round_trip(tmp_path):
    reports = [
        AttrReport(id="b", att_sensitivity=0.825, att_fpr=0.0125, mean_iou=None,
                   lesion_ratio=0.5, predicted=2, truth=2),
        AttrReport(id="a", att_sensitivity=None, att_fpr=None, mean_iou=0.75,
                   lesion_ratio=0.0, predicted=0, truth=None),
    ]
    p = tmp_path / "reports.csv"
    write_reports_csv(reports, p)
    header = p.read_text().splitlines()[0]
    assert header == "id,att_sensitivity,att_fpr,mean_iou,lesion_ratio,predicted,truth,correct"
    back = read_reports_csv(p)
    # sorted by id on write
    assert [r.id for r in back] == ["a", "b"]
    assert back[1] == reports[0]
    assert back[0] == reports[1]


def test_csv_rows_sorted_and_deterministic(tmp_path):
    rng = np.random.default_rng(2)
    reports = [_report(i, float(rng.random()), bool(rng.random() < 0.5))
               for i in rng.permutation(30)]
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    write_reports_csv(reports, p1)
    write_reports_csv(list(reversed(reports)), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_csv_rejects_contradictory_correct_column(tmp_path):
    p = tmp_path / "r.csv"
    write_reports_csv([_report(0, 0.5, True)], p)
    text = p.read_text().replace(",1\n", ",0\n")
    p.write_text(text)
    with pytest.raises(ValueError, match="contradicts"):
        read_reports_csv(p)
