from dataclasses import replace

import numpy as np
import pytest

from mvexplain.core import load_dataset
from mvexplain.synth import (
    SyntheticSpec,
    difficulty_sweep,
    generate,
    group_mean_intensity,
    load_masks,
    write_synthetic,
)


@pytest.fixture(scope="module")
def pair():
    spec = SyntheticSpec(n_samples=40, seed=3)
    return spec, *generate(spec)


def test_deterministic(pair):
    spec, ds, masks = pair
    ds2, masks2 = generate(spec)
    assert ds.digest() == ds2.digest()
    assert masks.keys() == masks2.keys()
    assert all(np.array_equal(masks[k], masks2[k]) for k in masks)


def test_exact_balance(pair):
    _, ds, _ = pair
    assert np.bincount(ds.labels).tolist() == [20, 20]


def test_mask_area_band(pair):
    spec, _, masks = pair
    lo, hi = spec.area_band
    fracs = [m.mean() for m in masks.values() if m.any()]
    assert fracs
    assert all(lo <= f <= hi for f in fracs)


def test_label_mask_consistency(pair):
    _, ds, masks = pair
    for s in ds:
        has_defect = any(masks[(s.sample_id, k)].any() for k in range(ds.schema.num_views))
        assert has_defect == (ds.schema.class_names[s.label] == "Defective")


def test_schema_conformance(pair):
    _, ds, _ = pair
    for s in ds:
        s.validate(ds.schema)


def test_sweep_fields():
    base = SyntheticSpec(n_samples=4)
    specs = difficulty_sweep(base, [0.0, 0.5, 1.0])
    assert [s.style_gap for s in specs] == [0.0, 0.5, 1.0]
    assert all(replace(s, style_gap=base.style_gap) == base for s in specs)
    with pytest.raises(ValueError):
        difficulty_sweep(base, [])


def test_zero_gap_styles_match():
    ds, _ = generate(SyntheticSpec(n_samples=30, style_gap=0.0, seed=1, class_balance=0.0))
    a, b = group_mean_intensity(ds)
    assert abs(a - b) < 0.02


def test_full_gap_styles_differ():
    ds, _ = generate(SyntheticSpec(n_samples=30, style_gap=1.0, seed=1))
    a, b = group_mean_intensity(ds)
    assert abs(a - b) > 0.1


@pytest.mark.parametrize("field,value", [("style_gap", 1.5), ("defect_intensity", 0.0), ("class_balance", -0.1)])
def test_validation_names_field(field, value):
    with pytest.raises(ValueError, match=field):
        SyntheticSpec(**{field: value})


def test_defect_view_prob_one_marks_every_view():
    ds, masks = generate(SyntheticSpec(n_samples=6, defect_view_prob=1.0, seed=0))
    for s in ds:
        if s.label == 1:
            assert all(masks[(s.sample_id, k)].any() for k in range(5))


def test_disk_round_trip(tmp_path, pair):
    spec, ds, masks = pair
    write_synthetic(ds, masks, tmp_path, spec)
    back = load_dataset(tmp_path, ds.schema)
    assert back.digest() == ds.digest()
    mback = load_masks(tmp_path, back)
    assert all(np.array_equal(mback[k], masks[k]) for k in masks)
    assert SyntheticSpec.from_dict(__import__("json").loads((tmp_path / "synthetic_spec.json").read_text())) == spec
