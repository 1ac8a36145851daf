import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dosediff.constraints import default_constraints
from dosediff.evaluation import (
    SITE_COLUMNS, body_mask, ci, dice, dice_isodose, dvh, dvh_metric, evaluate_case, hd95, hi, mae, surface,
    surface_hd95, write_report,
)
from dosediff.phantom import desk_spec, generate_phantom
from dosediff.volumes import Case, DoseVolume, Grid, StructureSet, normalize_dose


# ---------------------------------------------------------------- oracles

def oracle_dx(values, x):
    d = sorted(values, reverse=True)
    pos = x / 100 * (len(d) - 1)
    lo = int(math.floor(pos))
    hi_ = min(lo + 1, len(d) - 1)
    return d[lo] + (pos - lo) * (d[hi_] - d[lo])


def oracle_vx(values, x):
    return sum(1 for v in values if v >= x) / len(values)


def oracle_surface(mask):
    out = np.zeros_like(mask)
    for idx in zip(*np.nonzero(mask)):
        for ax in range(3):
            for step in (-1, 1):
                n = list(idx)
                n[ax] += step
                if not (0 <= n[ax] < mask.shape[ax]) or not mask[tuple(n)]:
                    out[idx] = True
    return out


def oracle_hd95(a, b, spacing):
    pa = np.argwhere(oracle_surface(a)) * np.asarray(spacing)
    pb = np.argwhere(oracle_surface(b)) * np.asarray(spacing)
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1))
    return max(np.percentile(d.min(1), 95), np.percentile(d.min(0), 95))


masks8 = arrays(bool, (8, 8, 8), elements=st.booleans()).filter(lambda m: m.any())


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), masks8, st.integers(5, 995))
def test_dx_vx_match_sort_oracle(seed, mask, tenths):
    dose = np.random.default_rng(seed).uniform(0, 70, (8, 8, 8))
    vals = dose[mask].tolist()
    x = tenths / 10
    assert dvh_metric(dose, mask, f"D{x}") == pytest.approx(oracle_dx(vals, x), abs=1e-6)
    assert dvh_metric(dose, mask, f"V{x * 0.7:.2f}") == oracle_vx(vals, round(x * 0.7, 2))


@settings(max_examples=30, deadline=None)
@given(masks8, masks8, st.sampled_from([(1.0, 1.0, 1.0), (3.0, 1.0, 2.0)]))
def test_hd95_matches_all_pairs_oracle_and_is_symmetric(a, b, spacing):
    np.testing.assert_array_equal(surface(a), oracle_surface(a))
    got = surface_hd95(a, b, spacing)
    assert got == pytest.approx(oracle_hd95(a, b, spacing), abs=1e-9)
    assert got == surface_hd95(b, a, spacing)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_dice_symmetric(seed):
    rng = np.random.default_rng(seed)
    p, r = rng.uniform(0, 70, (2, 8, 8, 8))
    assert dice_isodose(p, r, 60.0) == dice_isodose(r, p, 60.0)


# ---------------------------------------------------------------- examples

def test_mae():
    ref = np.random.default_rng(0).uniform(0, 1, (4, 4, 4))
    body = np.zeros((4, 4, 4), bool)
    body[1:3] = True
    assert mae(ref, ref, body) == 0
    pred = ref.copy()
    pred[body] += 0.1
    assert mae(pred, ref, body) == pytest.approx(0.1)
    with pytest.raises(ValueError):
        mae(ref, ref, np.zeros_like(body))


def test_dice_examples():
    a = np.zeros(8, bool)
    b = np.zeros(8, bool)
    a[:4], b[2:6] = True, True
    assert dice(a, b) == 0.5
    c = np.zeros(8, bool)
    c[4:] = True
    a2 = np.zeros(8, bool)
    a2[:4] = True
    assert dice(a2, c) == 0.0
    assert dice(np.zeros(3, bool), np.zeros(3, bool)) == 1.0
    f = np.random.default_rng(1).uniform(0, 70, (5, 5, 5))
    levels, mean = dice_isodose(f, f, 60.0)
    assert mean == 1.0 and set(levels) == {0.1, 0.3, 0.5, 0.7, 0.9}


def test_hd95_examples():
    f = np.random.default_rng(2).uniform(0, 70, (6, 6, 6))
    assert hd95(f, f, 60.0) == 0.0
    a = np.zeros((8, 8, 8), bool)
    b = np.zeros((8, 8, 8), bool)
    a[1, 1, 1], b[1, 1, 4] = True, True
    assert surface_hd95(a, b, (1.0, 1.0, 1.0)) == pytest.approx(3.0)
    assert math.isnan(surface_hd95(a, np.zeros_like(a), (1.0, 1.0, 1.0)))


def test_dvh_examples():
    mask = np.ones((4, 4, 4), bool)
    uni = np.full((4, 4, 4), 60.0)
    c = dvh(uni, mask)
    assert c.fractions[0] == 1.0 and c.fractions[-1] == 0.0
    assert all(c.volume_at(e) == 1.0 for e in (0.0, 30.0, 59.9, 60.0))
    assert c.volume_at(60.1) == 0.0
    half = np.where(np.arange(64).reshape(4, 4, 4) < 32, 20.0, 40.0)
    h = dvh(half, mask)
    assert h.volume_at(30.0) == 0.5
    assert np.all(np.diff(h.fractions) <= 0)
    assert dvh_metric(half, mask, "V20") == 1.0 and dvh_metric(half, mask, "V30") == 0.5
    for x in (2, 50, 95, 98):
        assert dvh_metric(uni, mask, f"D{x}") == 60.0
    assert dvh_metric(uni, mask, "Dmean") == dvh_metric(uni, mask, "Dmax") == 60.0
    with pytest.raises(ValueError):
        dvh(uni, np.zeros_like(mask))
    with pytest.raises(ValueError):
        dvh_metric(uni, mask, "Q5")


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(0, 7000))
def test_dvh_consistent_with_vx(seed, centi):
    x = centi / 100
    rng = np.random.default_rng(seed)
    dose = rng.uniform(0, 70, (8, 8, 8))
    mask = rng.random((8, 8, 8)) > 0.5
    curve = dvh(dose, mask, 0.1)
    direct = dvh_metric(dose, mask, f"V{x}")
    lo, hi_ = curve.volume_at(x + 0.1), curve.volume_at(max(x - 0.1, 0.0))
    assert lo <= direct <= hi_


def test_hi_ci_examples():
    ptv = np.zeros((6, 6, 6), bool)
    ptv[2:4, 2:4, 2:4] = True
    dose = np.where(ptv, 60.0, 0.0)
    assert hi(dose, ptv) == 0.0 and ci(dose, ptv, 60.0) == 1.0
    wide = np.zeros_like(ptv)
    wide[2:4, 2:4, 2:6] = True
    assert ci(np.where(wide, 60.0, 0.0), ptv, 60.0) == 0.5
    assert math.isnan(hi(np.zeros((6, 6, 6)), ptv))
    assert math.isnan(ci(np.zeros((6, 6, 6)), ptv, 60.0))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_hi_nonnegative(seed):
    rng = np.random.default_rng(seed)
    dose = rng.uniform(1, 70, (8, 8, 8))
    assert hi(dose, rng.random((8, 8, 8)) > 0.3) >= 0


# ---------------------------------------------------------------- case reports

def _scaled(case, factor):
    gy = case.dose.to_gy() * factor
    values, scale = normalize_dose(gy, case.structures.primary_ptv().mask)
    dose = DoseVolume(case.grid, values.astype(np.float32), scale)
    return Case(case.id, case.ct, case.structures, dose, case.technique, case.site, case.prescription, case.extra)


def test_self_comparison(lung_case):
    specs = default_constraints()
    rep = evaluate_case(lung_case, lung_case, specs)
    assert rep.mae == 0 and rep.dice == 1 and rep.hd95 == 0
    assert all(v == 0 for v in rep.deltas.values())
    assert rep.compliance.rate == rep.reference_compliance.rate
    assert list(rep.deltas) == [c[0] for c in SITE_COLUMNS["lung"]]


def test_head_neck_columns(hn_case):
    rep = evaluate_case(hn_case, hn_case, default_constraints())
    assert list(rep.deltas) == [c[0] for c in SITE_COLUMNS["head-neck"]]


def test_scaled_reference_dmean_delta(lung_case):
    rep = evaluate_case(_scaled(lung_case, 1.1), lung_case, default_constraints())
    name = lung_case.structures.primary_ptv().name
    p, r = rep.ptv[name]["Dmean"]
    assert p - r == pytest.approx(0.1 * r, rel=1e-5)
    assert all(v >= 0 for v in rep.deltas.values() if not math.isnan(v))


def test_structure_order_invariance(lung_case):
    specs = default_constraints()
    shuffled = StructureSet(list(reversed(list(lung_case.structures))))
    other = Case(lung_case.id, lung_case.ct, shuffled, lung_case.dose, lung_case.technique, lung_case.site,
                 lung_case.prescription, lung_case.extra)
    pred = _scaled(lung_case, 0.95)
    a = evaluate_case(pred, lung_case, specs).rows()
    pred_other = Case(pred.id, pred.ct, shuffled, pred.dose, pred.technique, pred.site, pred.prescription, pred.extra)
    b = dict(evaluate_case(pred_other, other, specs).rows())
    for k, v in a:
        assert (math.isnan(v) and math.isnan(b[k])) or v == b[k], k


def test_grid_mismatch_names_both_shapes(lung_case):
    small = generate_phantom(desk_spec("lung", 3, grid=Grid((16, 32, 32), (5.0, 5.0, 5.0))))
    with pytest.raises(ValueError) as err:
        evaluate_case(small, lung_case, default_constraints())
    assert "(16, 32, 32)" in str(err.value) and "(32, 32, 32)" in str(err.value)


def test_body_mask_threshold():
    assert body_mask(np.array([-2.0, -1.6, -1.5, 0.0])).tolist() == [False, False, True, True]


def test_write_report_and_dvh_csv(lung_case, tmp_path):
    rep = evaluate_case(lung_case, lung_case, default_constraints())
    path = write_report(rep, tmp_path, lung_case)
    rows = list(csv.reader(path.open(), delimiter="\t"))
    assert rows[0] == ["metric", "value"] and ["mae", "0"] in rows
    csvs = sorted(tmp_path.glob("*_dvh_*.csv"))
    assert len(csvs) == sum(1 for s in lung_case.structures if s.mask.any())
    head = next(csv.reader(csvs[0].open()))
    assert head == ["dose_gy", "volume_fraction"]
