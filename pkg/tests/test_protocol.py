import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from xmbench.dataset import CrossModalDataset, LabelTable, SynthSpec, generate_synthetic
from xmbench.errors import ProtocolError
from xmbench.protocol import (
    ClassPartition, FoldPlan, SubsetAssignment, TaskSpec, assign_subsets, build_task, ground_truth, make_fold_plan,
    partition_classes, relevance_matrix,
)


def toy(labels, num_classes, dims=(3, 2)):
    n = len(labels)
    rng = np.random.default_rng(0)
    return CrossModalDataset(rng.standard_normal((n, dims[0])), rng.standard_normal((n, dims[1])),
                             LabelTable(tuple(frozenset(s) for s in labels), num_classes),
                             tuple(f"s{i}" for i in range(n)))


def single_label(c, per_class):
    return toy([{k} for k in range(c) for _ in range(per_class)], c)


# --- partitions and plans -----------------------------------------------------------


@pytest.mark.parametrize("c,expect", [(10, (5, 5)), (20, (10, 10)), (2, (1, 1)), (7, (4, 3))])
def test_partition_sizes(c, expect):
    plan = make_fold_plan(single_label(c, 4), n_folds=5, seed=1)
    for p in plan.folds:
        assert (len(p.train_classes), len(p.test_classes)) == expect
        assert not p.train_classes & p.test_classes
        assert p.train_classes | p.test_classes == set(range(c))


def test_two_class_single_label_has_no_drops():
    plan = make_fold_plan(single_label(2, 6), n_folds=3, seed=0)
    assert all(d == () for d in plan.dropped_samples)


def test_folds_use_seed_plus_index():
    ds = single_label(10, 4)
    plan = make_fold_plan(ds, n_folds=3, seed=40)
    for f in range(3):
        assert plan.folds[f] == partition_classes(10, 40 + f)


def test_partition_rejects_overlap_and_imbalance():
    with pytest.raises(ProtocolError):
        ClassPartition(frozenset({0, 1}), frozenset({1, 2}))
    with pytest.raises(ProtocolError):
        ClassPartition(frozenset({0, 1, 2}), frozenset({3}))


def test_fold_plan_errors():
    with pytest.raises(ProtocolError):
        make_fold_plan(single_label(4, 4), n_folds=0)
    with pytest.raises(ProtocolError):
        make_fold_plan(single_label(4, 4), fraction_db=1.0)


def test_fold_plan_json_roundtrip_and_determinism():
    ds = generate_synthetic(SynthSpec(num_classes=6, samples_per_class=10, multilabel_rate=0.3, latent_dim=8))
    a = make_fold_plan(ds, 5, 3, 0.8)
    b = make_fold_plan(ds, 5, 3, 0.8)
    assert a.to_json(ds) == b.to_json(ds)
    back = FoldPlan.from_dict(json.loads(a.to_json(ds)))
    assert back.to_json() == a.to_json()
    assert "dropped_ids" in a.to_dict(ds)["folds"][0]


# --- subsets ------------------------------------------------------------------------


def test_eighty_twenty_within_half():
    ds = single_label(2, 100)
    part = ClassPartition(frozenset({0}), frozenset({1}))
    asg = assign_subsets(ds, part, 0.8, seed=0)
    assert len(asg.train_db) == 80 and len(asg.train_query) == 20
    assert len(asg.test_db) == 80 and len(asg.test_query) == 20


def test_half_split_on_two_per_class():
    ds = single_label(4, 2)
    part = ClassPartition(frozenset({0, 1}), frozenset({2, 3}))
    asg = assign_subsets(ds, part, 0.5, seed=0)
    prim = ds.labels.primary()
    for c in range(4):
        db = [i for i in asg.train_db + asg.test_db if prim[i] == c]
        q = [i for i in asg.train_query + asg.test_query if prim[i] == c]
        assert (len(db), len(q)) == (1, 1)


def test_straddler_is_dropped_from_every_subset():
    # hand oracle: classes {0,1} train, {2,3} test; only sample 8 carries labels from both halves
    labels = [{0}, {0}, {1}, {1}, {2}, {2}, {3}, {3}, {1, 2}, {0, 1}]
    ds = toy(labels, 4)
    part = ClassPartition(frozenset({0, 1}), frozenset({2, 3}))
    asg = assign_subsets(ds, part, 0.5, seed=0)
    assert asg.dropped == (8,)
    assert set(asg.train_db + asg.train_query) == {0, 1, 2, 3, 9}
    assert set(asg.test_db + asg.test_query) == {4, 5, 6, 7}


def test_empty_query_subset_is_an_error():
    ds = single_label(2, 2)
    with pytest.raises(ProtocolError, match="empty query"):
        assign_subsets(ds, ClassPartition(frozenset({0}), frozenset({1})), 0.8, seed=0)


def test_override_keeps_published_membership():
    ds = single_label(2, 4)
    override = ["db", "query", "db", "db", "query", "query", "db", "db"]
    asg = assign_subsets(ds, ClassPartition(frozenset({0}), frozenset({1})), 0.8, 0, override=override)
    assert asg.train_db == (0, 2, 3) and asg.train_query == (1,)
    assert asg.test_db == (6, 7) and asg.test_query == (4, 5)
    with pytest.raises(ProtocolError):
        assign_subsets(ds, ClassPartition(frozenset({0}), frozenset({1})), 0.8, 0, override=["db"] * 3)


def test_subset_assignment_rejects_overlap():
    with pytest.raises(ProtocolError):
        SubsetAssignment((1, 2), (2,), (3,), (4,))


@given(st.integers(2, 8), st.integers(2, 12), st.floats(0.05, 0.5), st.integers(0, 10_000))
def test_subset_invariants_on_random_multilabel_data(c, per_class, ml, seed):
    ds = generate_synthetic(SynthSpec(num_classes=c, samples_per_class=max(per_class, 4), multilabel_rate=ml,
                                      seed=seed, latent_dim=8))
    try:
        plan = make_fold_plan(ds, n_folds=2, seed=seed, fraction_db=0.5)
    except ProtocolError:
        return  # a half can lose all samples to straddlers on tiny sets; that is a documented error
    ind = ds.labels.indicator
    for part, asg in zip(plan.folds, plan.assignments):
        tr = sorted(part.train_classes)
        te = sorted(part.test_classes)
        lists = [asg.train_db, asg.train_query, asg.test_db, asg.test_query, asg.dropped]
        assert sum(len(x) for x in lists) == len(set().union(*map(set, lists)))
        for i in asg.train_db + asg.train_query:
            assert not ind[i, te].any()
        for i in asg.test_db + asg.test_query:
            assert not ind[i, tr].any()
        for i in asg.dropped:
            assert ind[i, tr].any() and ind[i, te].any()


# --- ground truth -------------------------------------------------------------------


def test_ground_truth_examples():
    g = LabelTable(({2}, {3}, {2, 3}), 10)
    rv = ground_truth({2}, g)
    assert rv.bits.tolist() == [1, 0, 1] and rv.cl == 2
    rv = ground_truth({1, 4}, LabelTable(({4}, {1}, {7}), 10))
    assert rv.bits.tolist() == [1, 1, 0] and rv.cl == 2
    rv = ground_truth({9}, LabelTable(({1}, {2}), 10))
    assert rv.cl == 0 and rv.bits.tolist() == [0, 0]


def test_ground_truth_errors():
    with pytest.raises(ProtocolError):
        ground_truth(set(), LabelTable(({1},), 3))
    with pytest.raises(ProtocolError):
        ground_truth({1}, LabelTable((), 3))


@given(st.lists(st.sets(st.integers(0, 5), min_size=1, max_size=3), min_size=1, max_size=6),
       st.lists(st.sets(st.integers(0, 5), min_size=1, max_size=3), min_size=1, max_size=8))
def test_relevance_matrix_matches_set_intersection(qs, gs):
    ql, gl = LabelTable(tuple(qs), 6), LabelTable(tuple(gs), 6)
    rel = relevance_matrix(ql, gl)
    for i, q in enumerate(qs):
        assert rel[i].tolist() == [int(bool(q & g)) for g in gs]
        rv = ground_truth(q, gl)
        assert rv.cl == rv.bits.sum() == rel[i].sum()


# --- tasks --------------------------------------------------------------------------


def test_non_xtd_gallery_is_training_set():
    ds = single_label(4, 10)
    plan = make_fold_plan(ds, 2, 0)
    v = build_task(plan, TaskSpec("non_xtd", "i2t", 1))
    np.testing.assert_array_equal(v.gallery, v.train)


def test_xtd_views_only_hold_test_classes():
    ds = generate_synthetic(SynthSpec(num_classes=6, samples_per_class=20, multilabel_rate=0.3, latent_dim=8))
    plan = make_fold_plan(ds, 3, 0)
    for f in range(3):
        v = build_task(plan, TaskSpec("xtd", "t2i", f))
        test = sorted(plan.folds[f].test_classes)
        train = sorted(plan.folds[f].train_classes)
        ind = ds.labels.indicator
        assert ind[np.ix_(v.gallery, test)].any(axis=1).all()
        assert not ind[np.ix_(np.concatenate([v.gallery, v.query]), train)].any()
        nx = build_task(plan, TaskSpec("non_xtd", "i2t", f))
        assert not ind[np.ix_(np.concatenate([nx.gallery, nx.query]), test)].any()


def test_direction_selects_modalities():
    ds = toy([{0}, {1}, {0}, {1}, {0}, {1}], 2)
    plan = make_fold_plan(ds, 1, 0, 0.5)
    v = build_task(plan, TaskSpec("non_xtd", "text_to_image", 0))
    assert (v.query_modality, v.gallery_modality) == ("b", "a")
    assert build_task(plan, TaskSpec("non_xtd", "image_to_text", 0)).query_modality == "a"


def test_task_spec_validation():
    with pytest.raises(ProtocolError):
        TaskSpec("sideways", "i2t")
    with pytest.raises(ProtocolError):
        TaskSpec("xtd", "audio_to_text")
    plan = make_fold_plan(single_label(4, 4), 2, 0, 0.5)
    with pytest.raises(ProtocolError):
        build_task(plan, TaskSpec("xtd", "i2t", 2))
