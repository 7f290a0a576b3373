import logging

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from wsdino.errors import ParameterError, ShapeError, StructureError
from wsdino.sampling import (
    CropSpec,
    PairSampler,
    WeakLabelIndex,
    build_index,
    collate,
    make_views,
    sample_pair,
    sampler_weights,
)
from wsdino.synthgen import ImageRecord


def rec(i, compound="c0", conc=1.0, moa="m0", batch="b0"):
    return ImageRecord(image_id=f"img{i}", compound=compound, concentration=conc,
                       treatment=f"{compound}@{conc:g}", moa=moa, batch=batch, channel="DNA")


def bbbc021_shaped_manifest(seed=0):
    """38 compounds, 103 treatments and 12 MOAs, matching the annotated BBBC021 subset counts."""
    rng = np.random.default_rng(seed)
    concs_per_compound = [3] * 27 + [2] * 11  # 81 + 22 = 103
    records, i = [], 0
    for c, n_conc in enumerate(concs_per_compound):
        moa = f"moa{c % 12}"
        for k in range(n_conc):
            for _ in range(int(rng.integers(2, 5))):
                records.append(rec(i, f"cmpd{c}", 0.1 * (k + 1), moa, f"week{(c + k) % 10}"))
                i += 1
    return records


def test_none_label_gives_singletons():
    index = build_index([rec(i) for i in range(5)], "none")
    assert len(index.groups) == 5
    assert all(len(g) == 1 for g in index.groups.values())


@pytest.mark.parametrize("kind, n_groups", [("treatment", 103), ("compound", 38), ("moa", 12)])
def test_bbbc021_shaped_group_counts(kind, n_groups):
    manifest = bbbc021_shaped_manifest()
    index = build_index(manifest, kind)
    assert len(index.groups) == n_groups
    assert sum(len(g) for g in index.groups.values()) == len(manifest)
    members = [m for g in index.groups.values() for m in g]
    assert len(members) == len(set(members))


def test_build_index_errors():
    with pytest.raises(ParameterError):
        build_index([rec(0)], "plate")
    with pytest.raises(StructureError):
        build_index([], "compound")


def test_weights_uniform_case():
    index = WeakLabelIndex("compound", {"a": ["1", "2"], "b": ["3", "4"]})
    assert set(sampler_weights(index).values()) == {0.25}


def test_weights_uneven_groups():
    index = WeakLabelIndex("compound", {"a": ["1"], "b": ["2", "3", "4"]})
    w = sampler_weights(index)
    assert w["1"] == 0.5
    assert w["2"] == w["3"] == w["4"] == pytest.approx(1 / 6)
    assert sum(w[i] for i in "234") == pytest.approx(0.5)


def test_empty_group_rejected():
    with pytest.raises(StructureError):
        sampler_weights(WeakLabelIndex("compound", {"a": ["1"], "b": []}))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 30), min_size=1, max_size=20))
def test_group_masses_equal(sizes):
    groups = {f"g{k}": [f"g{k}_{i}" for i in range(n)] for k, n in enumerate(sizes)}
    w = sampler_weights(WeakLabelIndex("compound", groups))
    masses = [sum(w[i] for i in members) for members in groups.values()]
    assert max(masses) - min(masses) < 1e-12
    assert sum(masses) == pytest.approx(1.0, abs=1e-12)


def test_pair_orderings_balanced():
    index = WeakLabelIndex("compound", {"a": ["x", "y"]})
    rng = np.random.default_rng(0)
    draws = [sample_pair(index, "a", rng) for _ in range(10000)]
    freq = sum(d == ("x", "y") for d in draws) / len(draws)
    assert abs(freq - 0.5) < 0.05
    assert all(i != j for i, j in draws)


def test_singleton_group_falls_back_with_warning(caplog):
    index = WeakLabelIndex("compound", {"lonely": ["x"]})
    with caplog.at_level(logging.WARNING, logger="wsdino.sampling"):
        assert sample_pair(index, "lonely", np.random.default_rng(0)) == ("x", "x")
    assert "single image" in caplog.text


def test_none_label_always_same_image():
    index = build_index([rec(i) for i in range(6)], "none")
    sampler = PairSampler(index, np.random.default_rng(1))
    assert all(i == j for i, j in sampler.draw(200))


def test_pair_constraint_with_sampler():
    manifest = bbbc021_shaped_manifest(1)
    index = build_index(manifest, "compound")
    compound = {r.image_id: r.compound for r in manifest}
    pairs = PairSampler(index, np.random.default_rng(2)).draw(1000)
    assert all(i != j and compound[i] == compound[j] for i, j in pairs)


def test_epoch_length():
    index = build_index([rec(i, compound=f"c{i % 3}") for i in range(12)], "compound")
    assert len(PairSampler(index, np.random.default_rng(0)).epoch()) == 12


def test_cropspec_invariants():
    CropSpec()
    with pytest.raises(ParameterError):
        CropSpec(global_scale=(0.2, 1.5))
    with pytest.raises(ParameterError):
        CropSpec(local_scale=(0.05, 0.15))


def test_viewset_sizes_full_crops():
    rng = np.random.default_rng(0)
    a = np.random.default_rng(1).normal(size=(512, 640))
    b = np.random.default_rng(2).normal(size=(512, 640))
    vs = make_views(a, b, CropSpec(), rng)
    assert len(vs.teacher_views) == 2 and len(vs.student_views) == 10
    assert all(v.shape == (224, 224) for v in vs.teacher_views)
    assert all(v.shape == (96, 96) for v in vs.student_views[2:])
    assert all(any(t is s for s in vs.student_views) for t in vs.teacher_views)


def test_degenerate_randomness_is_deterministic():
    spec = CropSpec(global_size=32, global_scale=(0.2, 0.2), local_size=16, local_scale=(0.05, 0.05),
                    flip_p=0.0, ratio=(1.0, 1.0))
    img = np.arange(80 * 80, dtype=np.float32).reshape(80, 80)
    v1 = make_views(img, img, spec, np.random.default_rng(5))
    v2 = make_views(img, img, spec, np.random.default_rng(5))
    for x, y in zip(v1.student_views, v2.student_views):
        torch.testing.assert_close(x, y, rtol=0, atol=0)


def test_global_and_local_from_different_images():
    spec = CropSpec(global_size=32, local_size=16, flip_p=0.0)
    vs = make_views(np.zeros((80, 80)), np.ones((80, 80)), spec, np.random.default_rng(0))
    assert all(float(v.abs().max()) == 0 for v in vs.teacher_views)
    assert all(torch.allclose(v, torch.ones_like(v)) for v in vs.student_views[2:])


def test_flip_always():
    spec = CropSpec(global_size=8, global_scale=(1.0, 1.0), local_size=8, local_scale=(0.05, 0.05),
                    flip_p=1.0, ratio=(1.0, 1.0), n_local=0)
    img = np.arange(64, dtype=np.float32).reshape(8, 8)
    vs = make_views(img, img, spec, np.random.default_rng(0))
    torch.testing.assert_close(vs.teacher_views[0], torch.from_numpy(img[::-1, ::-1].copy()))


def test_image_too_small():
    with pytest.raises(ShapeError):
        make_views(np.zeros((100, 100)), np.zeros((100, 100)), CropSpec(), np.random.default_rng(0))


def test_collate_shapes():
    spec = CropSpec(global_size=32, local_size=16)
    rng = np.random.default_rng(0)
    img = np.random.default_rng(1).normal(size=(80, 80))
    views = collate([make_views(img, img, spec, rng) for _ in range(3)])
    assert len(views) == 10
    assert views[0].shape == (3, 1, 32, 32) and views[-1].shape == (3, 1, 16, 16)
