import numpy as np
import pytest

from areaeffect.errors import DataError
from areaeffect.frames import (
    ImputedFrame,
    PopulationFrame,
    UnitRecord,
    complete_frame,
    partition_counts,
)

from conftest import random_frame


def small_units():
    # one area, 4 units: 2 sampled, 3 treated
    return [
        UnitRecord(area=1, a=1, s=1, w_ind=(0.5,), y=2.0),
        UnitRecord(area=1, a=1, s=0, w_ind=(1.5,)),
        UnitRecord(area=1, a=0, s=1, w_ind=(-0.5,), y=1.0),
        UnitRecord(area=1, a=1, s=0, w_ind=(0.1,)),
    ]


def test_partition_counts_hand_counted():
    frame = PopulationFrame.from_units(small_units())
    c = partition_counts(frame)
    assert c.N[0] == 4 and c.n[0] == 2
    assert c.N1[0] == 3 and c.N0[0] == 1
    assert c.n1[0] == 1 and c.n0[0] == 1
    assert c.f[0] == pytest.approx(0.5)


def test_partition_counts_empty_sample_area():
    units = small_units() + [
        UnitRecord(area=2, a=0, s=0, w_ind=(0.0,)),
        UnitRecord(area=2, a=1, s=0, w_ind=(1.0,)),
    ]
    frame = PopulationFrame.from_units(units)
    c = partition_counts(frame)
    assert c.n[1] == 0 and c.f[1] == 0.0


def test_validate_clean_frame_empty_report(rng):
    frame = random_frame(rng)
    assert frame.validate() == []


def test_validate_outcome_on_unsampled():
    units = small_units()
    units[1] = UnitRecord(area=1, a=1, s=0, w_ind=(1.5,), y=9.0)
    with pytest.raises(DataError, match="outcome-on-unsampled"):
        PopulationFrame.from_units(units)
    frame = PopulationFrame.from_units(units, check=False)
    kinds = [v.kind for v in frame.validate()]
    assert kinds == ["outcome-on-unsampled"]


def test_validate_missing_outcome_on_sampled():
    units = small_units()
    units[0] = UnitRecord(area=1, a=1, s=1, w_ind=(0.5,))
    frame = PopulationFrame.from_units(units, check=False)
    assert [v.kind for v in frame.validate()] == ["missing-outcome-on-sampled"]


def test_validate_degenerate_arm_two_areas():
    # area 2 has no control units at the population level
    units = small_units() + [
        UnitRecord(area=2, a=1, s=1, w_ind=(0.2,), y=1.0),
        UnitRecord(area=2, a=1, s=0, w_ind=(0.3,)),
    ]
    frame = PopulationFrame.from_units(units)  # soft violation: constructible
    report = [str(v) for v in frame.validate()]
    assert report == ["degenerate-arm(area=2, a=0)"]
    assert all(not v.hard for v in frame.validate())


def test_validate_inconsistent_contextual():
    units = [
        UnitRecord(area=1, a=1, s=1, w_ind=(0.0,), w_ctx=(3.0,), y=1.0),
        UnitRecord(area=1, a=0, s=1, w_ind=(1.0,), w_ctx=(4.0,), y=2.0),
    ]
    with pytest.raises(DataError, match="inconsistent-contextual"):
        PopulationFrame.from_units(units)


def test_units_grouped_by_area_with_label_map():
    units = [
        UnitRecord(area="B", a=1, s=1, w_ind=(1.0,), y=1.0),
        UnitRecord(area="A", a=0, s=1, w_ind=(2.0,), y=2.0),
        UnitRecord(area="B", a=0, s=1, w_ind=(3.0,), y=3.0),
        UnitRecord(area="A", a=1, s=1, w_ind=(4.0,), y=4.0),
    ]
    frame = PopulationFrame.from_units(units)
    assert frame.area_labels == ("A", "B")
    assert frame.area.tolist() == [0, 0, 1, 1]
    # ingestion order preserved within area
    assert frame.y.tolist() == [2.0, 4.0, 1.0, 3.0]


def test_counts_match_direct_recount_property(rng):
    for _ in range(20):
        frame = random_frame(rng, m=int(rng.integers(1, 5)))
        c = partition_counts(frame)
        for j, lab in enumerate(frame.area_labels):
            rows = frame.area == j
            assert c.N[j] == rows.sum()
            assert c.n[j] == (rows & (frame.s == 1)).sum()
            assert c.N1[j] == (rows & (frame.a == 1)).sum()
            assert c.n1[j] == (rows & (frame.a == 1) & (frame.s == 1)).sum()
        assert c.N_total == frame.n_units
        assert c.n_total == (frame.s == 1).sum()


def test_default_design_weights_are_stratum_ratios():
    frame = PopulationFrame.from_units(small_units())
    w = frame.design_weights()
    c = frame.counts
    sampled_treated = (frame.s == 1) & (frame.a == 1)
    sampled_control = (frame.s == 1) & (frame.a == 0)
    assert np.all(w[sampled_treated] == c.N1[0] / c.n1[0])
    assert np.all(w[sampled_control] == c.N0[0] / c.n0[0])
    assert np.isnan(w[frame.s == 0]).all()


def test_explicit_weights_preserved(rng):
    frame = random_frame(rng, with_weights=True)
    w = frame.design_weights()
    s = frame.s == 1
    assert np.array_equal(w[s], frame.weight[s])


def test_with_outcomes_replaces_only_sampled(rng):
    frame = random_frame(rng)
    s = frame.s == 1
    new_y = np.arange(s.sum(), dtype=float)
    frame2 = frame.with_outcomes(new_y)
    assert np.array_equal(frame2.y[s], new_y)
    assert np.isnan(frame2.y[~s]).all()
    assert frame2.w_ind is frame.w_ind  # structure shared
    assert not np.array_equal(frame2.y, frame.y)


def test_frames_immutable(rng):
    frame = random_frame(rng)
    with pytest.raises(AttributeError):
        frame.y = frame.y
    with pytest.raises(ValueError):
        frame.y[0] = 1.0


def test_imputed_frame_contract(rng):
    frame = random_frame(rng)
    preds = np.zeros(frame.n_units)
    imp = complete_frame(frame, preds)
    s = frame.s == 1
    assert np.array_equal(imp.y_hat[s], frame.y[s])
    assert np.all(imp.y_hat[~s] == 0.0)
    assert np.array_equal(imp.imputed, ~s)
    bad = frame.y.copy()
    bad[np.flatnonzero(s)[0]] += 1.0
    with pytest.raises(DataError):
        ImputedFrame(frame, np.where(s, bad, 0.0), ~s)
