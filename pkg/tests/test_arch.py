import itertools

import numpy as np
import pytest
import torch

from mvexplain.arch import (
    build_model,
    forward,
    load_checkpoint,
    predict_proba,
    save_checkpoint,
    scope_views,
    softmax,
    view_pool,
)
from mvexplain.backbone import BackboneConfig, extract, weight_hash
from mvexplain.core import MultiViewSchema, default_schema

SMALL = BackboneConfig(feature_dim=16, channels=(4, 8, 16))


def schema32():
    return default_schema(32, 32)


def rand_views(rng, schema):
    return [rng.random(schema.image_shape).astype(np.float32) for _ in range(schema.num_views)]


# ------------------------------------------------------------- view pooling

def test_pool_singleton_identity():
    assert np.array_equal(view_pool([np.array([1.0, -2.0])]), [1.0, -2.0])


def test_pool_max_definition():
    assert np.array_equal(view_pool([np.array([1, 2]), np.array([3, 0])]), [3, 2])
    assert np.array_equal(view_pool([np.array([1, 2]), np.array([3, 0])], "mean"), [2, 1])


@pytest.mark.parametrize("mode", ["max", "mean"])
def test_pool_permutation_invariant(mode):
    rng = np.random.default_rng(0)
    vecs = [rng.normal(size=7) for _ in range(5)]
    ref = view_pool(vecs, mode)
    for perm in itertools.permutations(range(5)):
        assert np.allclose(view_pool([vecs[i] for i in perm], mode), ref, atol=1e-12)


def test_pool_errors():
    with pytest.raises(ValueError):
        view_pool([])
    with pytest.raises(ValueError):
        view_pool([np.zeros(2), np.zeros(3)])
    with pytest.raises(ValueError):
        view_pool([np.zeros(2)], "median")


# ---------------------------------------------------------------- structure

def test_csv_structure():
    m = build_model("CSV", default_schema(), SMALL)
    assert list(m.extractors) == ["all"]
    assert list(m.classifier_modules()) == ["classifier"]


def test_ssg_structure():
    m = build_model("SSG", default_schema(), SMALL)
    assert len(m.extractors) == 2
    assert m.classifier[0].in_features == 2 * 16


def test_psg_structure():
    m = build_model("PSG", default_schema(), SMALL)
    assert len(m.extractors) == 5
    assert len(m.group_classifiers) == 2
    assert m.combiner.in_features == 2 * 2


def test_cdv_structure():
    m = build_model("CDV", default_schema(), SMALL)
    assert len(m.extractors) == 5
    assert list(m.classifier_modules()) == ["classifier"]


def test_unknown_kind():
    with pytest.raises(ValueError):
        build_model("XYZ", default_schema(), SMALL)


def test_scope_views():
    s = default_schema()
    assert scope_views("CSV", s) == {"all": [0, 1, 2, 3, 4]}
    assert scope_views("SSG", s) == {"0": [0, 1], "1": [2, 3, 4]}
    assert scope_views("PSG", s) == {str(v): [v] for v in range(5)}


@pytest.mark.parametrize("kind", ["CSV", "SSG", "PSG", "CDV"])
def test_forward_shape_and_proba(kind):
    s = schema32()
    m = build_model(kind, s, SMALL, seed=1)
    rng = np.random.default_rng(0)
    for _ in range(5):
        views = rand_views(rng, s)
        logits = forward(m, views)
        assert logits.shape == (2,) and np.all(np.isfinite(logits))
        p = predict_proba(m, views)
        assert np.all(p >= 0) and abs(p.sum() - 1) < 1e-6
        assert p.argmax() == logits.argmax()
    with pytest.raises(ValueError):
        forward(m, rand_views(rng, s)[:4])


def test_softmax_closed_forms():
    assert np.allclose(softmax(np.zeros(2)), [0.5, 0.5])
    assert np.allclose(softmax(np.array([np.log(3), 0.0])), [0.75, 0.25])


def test_psg_group_outputs_are_distributions():
    s = schema32()
    m = build_model("PSG", s, SMALL, seed=2)
    rng = np.random.default_rng(0)
    x = torch.from_numpy(np.stack([np.stack(rand_views(rng, s)) for _ in range(8)])).movedim(-1, -3)
    with torch.no_grad():
        probs = m.group_probabilities(x)
    assert len(probs) == 2
    for p in probs:
        assert torch.all(p >= 0)
        assert torch.allclose(p.sum(-1), torch.ones(8, dtype=p.dtype), atol=1e-6)


def test_csv_identical_views_equals_single_view_pipeline():
    s = schema32()
    m = build_model("CSV", s, SMALL, seed=4)
    img = np.random.default_rng(3).random(s.image_shape).astype(np.float32)
    feat = extract(m.extractors["all"], img)
    with torch.no_grad():
        single = m.classifier(torch.from_numpy(feat)[None])[0].double().numpy()
    assert np.allclose(forward(m, [img] * 5), single, atol=1e-6)


def test_ssg_single_group_equals_csv():
    s1 = MultiViewSchema(5, ((0, 1, 2, 3, 4),), (32, 32, 1), ("Normal", "Defective"))
    csv = build_model("CSV", s1, SMALL, seed=0)
    ssg = build_model("SSG", s1, SMALL, seed=0)
    assert len(ssg.extractors) == 1
    ssg.extractors["0"].load_state_dict(csv.extractors["all"].state_dict())
    ssg.classifier.load_state_dict(csv.classifier.state_dict())
    rng = np.random.default_rng(0)
    for _ in range(5):
        v = rand_views(rng, s1)
        assert np.allclose(forward(ssg, v), forward(csv, v), atol=1e-6)


def test_init_is_seeded():
    a = build_model("PSG", schema32(), SMALL, seed=3)
    b = build_model("PSG", schema32(), SMALL, seed=3)
    assert all(weight_hash(a.extractors[k]) == weight_hash(b.extractors[k]) for k in a.extractors)
    hashes = {weight_hash(fe) for fe in a.extractors.values()}
    assert len(hashes) == 5


@pytest.mark.parametrize("kind", ["CSV", "SSG", "PSG", "CDV"])
@pytest.mark.parametrize("pool", ["max", "mean"])
def test_checkpoint_round_trip(tmp_path, kind, pool):
    s = schema32()
    m = build_model(kind, s, SMALL, pool_mode=pool, seed=7)
    save_checkpoint(m, tmp_path)
    back = load_checkpoint(tmp_path)
    assert back.kind == kind and back.pool_mode == pool and back.schema == s
    rng = np.random.default_rng(0)
    for _ in range(3):
        v = rand_views(rng, s)
        assert np.array_equal(forward(back, v), forward(m, v))


def test_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "nope")
