import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from xmbench.dataset import (
    CrossModalDataset, LabelTable, SynthSpec, dataset_fingerprint, generate_synthetic, load_dataset, read_features,
    read_labels, write_dataset, write_features, write_labels,
)
from xmbench.errors import DatasetError


def make_dir(tmp_path, n=4, da=3, db=2, num_classes=2, rows_a=None, labels=None, meta_extra=None):
    rng = np.random.default_rng(0)
    write_features(tmp_path / "image.xmbf", rng.standard_normal((rows_a or n, da)))
    write_features(tmp_path / "text.xmbf", rng.standard_normal((n, db)))
    ids = [f"id{i}" for i in range(n)]
    labels = labels or [frozenset({i % num_classes}) for i in range(n)]
    write_labels(tmp_path / "labels.csv", ids, LabelTable(tuple(labels), num_classes))
    meta = {"name": "toy", "modalities": ["image", "text"], "num_classes": num_classes,
            "files": {"a": "image.xmbf", "b": "text.xmbf", "labels": "labels.csv"}}
    meta.update(meta_extra or {})
    (tmp_path / "meta.json").write_text(json.dumps(meta))
    return tmp_path


def test_load_small_directory(tmp_path):
    ds = load_dataset(make_dir(tmp_path))
    assert ds.modality_a.shape == (4, 3) and ds.modality_b.shape == (4, 2)
    assert ds.sample_ids == ("id0", "id1", "id2", "id3")
    assert ds.num_classes == 2


def test_row_mismatch_names_both_counts(tmp_path):
    make_dir(tmp_path, rows_a=5)
    with pytest.raises(DatasetError, match=r"5 rows.*4 ids"):
        load_dataset(tmp_path)


def test_wikipedia_shaped_metadata(tmp_path):
    n, c = 2866, 10
    labels = [frozenset({i % c}) for i in range(n)]
    make_dir(tmp_path, n=n, da=8, db=4, num_classes=c, labels=labels, meta_extra={"num_samples": n})
    ds = load_dataset(tmp_path)
    assert ds.num_classes == 10 and len(ds) == 2866


def test_missing_files(tmp_path):
    with pytest.raises(DatasetError, match="meta.json"):
        load_dataset(tmp_path)
    make_dir(tmp_path)
    (tmp_path / "text.xmbf").unlink()
    with pytest.raises(DatasetError, match="missing feature file"):
        load_dataset(tmp_path)


def test_nonfinite_value_reports_position(tmp_path):
    m = np.ones((3, 4))
    m[2, 1] = np.nan
    write_features(tmp_path / "f.xmbf", m)
    with pytest.raises(DatasetError, match="row 2, col 1"):
        read_features(tmp_path / "f.xmbf")


def test_header_shape_mismatch(tmp_path):
    write_features(tmp_path / "f.xmbf", np.ones((3, 4)))
    raw = (tmp_path / "f.xmbf").read_bytes()
    (tmp_path / "g.xmbf").write_bytes(raw[:-4])
    with pytest.raises(DatasetError, match="header declares 3x4"):
        read_features(tmp_path / "g.xmbf")
    (tmp_path / "h.xmbf").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(DatasetError, match="bad magic"):
        read_features(tmp_path / "h.xmbf")


def test_duplicate_ids(tmp_path):
    make_dir(tmp_path)
    (tmp_path / "labels.csv").write_text("sample_id,labels\na,0\nb,1\na,0\nc,1\n")
    with pytest.raises(DatasetError, match="duplicate sample id 'a'"):
        load_dataset(tmp_path)


def test_label_out_of_range(tmp_path):
    make_dir(tmp_path)
    (tmp_path / "labels.csv").write_text("sample_id,labels\na,0\nb,1\nc,2\nd,1\n")
    with pytest.raises(DatasetError, match="label id 2 out of range"):
        load_dataset(tmp_path)


def test_label_table_invariants():
    with pytest.raises(DatasetError):
        LabelTable((frozenset(),), 2)
    with pytest.raises(DatasetError):
        LabelTable((frozenset({0}),), 1)
    t = LabelTable(({0, 2}, {1}), 3)
    assert t.indicator.tolist() == [[True, False, True], [False, True, False]]
    assert t.primary().tolist() == [0, 1]
    with pytest.raises(ValueError):
        t.indicator[0, 0] = False


def test_multilabel_csv_roundtrip(tmp_path):
    t = LabelTable(({0, 3}, {2}, {1, 2, 3}), 4)
    write_labels(tmp_path / "l.csv", ["x", "y", "z"], t)
    ids, sets = read_labels(tmp_path / "l.csv")
    assert ids == ["x", "y", "z"] and tuple(sets) == t.sets


def test_bad_label_header(tmp_path):
    (tmp_path / "l.csv").write_text("id,classes\na,0\n")
    with pytest.raises(DatasetError, match="header"):
        read_labels(tmp_path / "l.csv")


@pytest.mark.parametrize("fmt", ["xmbf", "csv"])
def test_write_load_write_is_byte_identical(tmp_path, fmt):
    ds = generate_synthetic(SynthSpec(num_classes=3, samples_per_class=5, dim_a=4, dim_b=3))
    write_dataset(ds, tmp_path / "one", fmt=fmt)
    again = load_dataset(tmp_path / "one")
    write_dataset(again, tmp_path / "two", fmt=fmt)
    for name in (f"image.{fmt}", f"text.{fmt}", "labels.csv", "meta.json"):
        assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "two" / name).read_bytes()
    assert again.meta["synth_spec"] == ds.meta["synth_spec"]


def test_dataset_is_immutable():
    ds = generate_synthetic(SynthSpec(num_classes=2, samples_per_class=4))
    with pytest.raises(ValueError):
        ds.modality_a[0, 0] = 1.0
    with pytest.raises(Exception):
        ds.name = "other"


def test_features_accessor():
    ds = generate_synthetic(SynthSpec(num_classes=2, samples_per_class=4))
    assert ds.features("a") is ds.features("image")
    assert ds.features("text") is ds.modality_b
    with pytest.raises(DatasetError):
        ds.features("audio")


# --- synthetic generator ------------------------------------------------------------


def test_synthetic_counts():
    ds = generate_synthetic(SynthSpec(num_classes=6, samples_per_class=50))
    assert len(ds) == 300
    assert all(len(s) >= 1 for s in ds.labels.sets)


def test_synthetic_is_deterministic():
    a = generate_synthetic(SynthSpec(seed=11))
    b = generate_synthetic(SynthSpec(seed=11))
    assert dataset_fingerprint(a) == dataset_fingerprint(b)
    assert a.modality_a.tobytes() == b.modality_a.tobytes()
    assert dataset_fingerprint(generate_synthetic(SynthSpec(seed=12))) != dataset_fingerprint(a)


@given(st.integers(2, 6), st.integers(4, 12), st.integers(0, 1000))
def test_no_multilabel_means_one_label_each(c, n, seed):
    ds = generate_synthetic(SynthSpec(num_classes=c, samples_per_class=n, multilabel_rate=0.0, seed=seed,
                                      latent_dim=8))
    assert ds.is_single_label()
    assert np.all(np.isfinite(ds.modality_a)) and np.all(np.isfinite(ds.modality_b))


def test_multilabel_rate_is_respected():
    ds = generate_synthetic(SynthSpec(multilabel_rate=0.3))
    frac = np.mean([len(s) == 2 for s in ds.labels.sets])
    assert abs(frac - 0.3) < 0.05
    assert all(len(s) <= 2 for s in ds.labels.sets)


def test_perfect_correlation_pairs_are_cross_modal_neighbours():
    spec = SynthSpec(num_classes=4, samples_per_class=10, dim_a=16, dim_b=16, latent_dim=16,
                     cross_modal_correlation=1.0, noise_scale=0.0, class_separation=50.0, multilabel_rate=0.0)
    ds = generate_synthetic(spec)
    # map modality A into B's space exactly; both are linear images of one latent
    w, *_ = np.linalg.lstsq(ds.modality_a, ds.modality_b, rcond=None)
    mapped = ds.modality_a @ w
    d = ((mapped[:, None, :] - ds.modality_b[None, :, :]) ** 2).sum(-1)
    nearest = d.argmin(axis=1)
    prim = ds.labels.primary()
    assert np.all(prim[nearest] == prim)
    assert np.all(nearest == np.arange(len(ds)))


@pytest.mark.parametrize("field,value", [
    ("num_classes", 1), ("samples_per_class", 3), ("dim_a", 1), ("class_separation", -1.0),
    ("cross_modal_correlation", 1.5), ("multilabel_rate", -0.1), ("noise_scale", -1.0), ("latent_dim", 4),
])
def test_invalid_spec_fields(field, value):
    with pytest.raises(DatasetError):
        SynthSpec(**{field: value})


def test_spec_dict_roundtrip_and_unknown_field():
    s = SynthSpec(num_classes=4)
    assert SynthSpec.from_dict(s.to_dict()) == s
    with pytest.raises(DatasetError, match="unknown"):
        SynthSpec.from_dict({"colour": "red"})


def test_dataset_row_mismatch_constructor():
    with pytest.raises(DatasetError, match="row count mismatch"):
        CrossModalDataset(np.ones((3, 2)), np.ones((2, 2)), LabelTable(({0}, {1}, {0}), 2), ("a", "b", "c"))


def test_extra_metadata_such_as_pooling_is_kept(tmp_path):
    (tmp_path / "src").mkdir()
    make_dir(tmp_path / "src", meta_extra={"text_pooling": "mean of sentence vectors"})
    ds = load_dataset(tmp_path / "src")
    assert ds.meta["text_pooling"] == "mean of sentence vectors"
    write_dataset(ds, tmp_path / "out")
    assert json.loads((tmp_path / "out" / "meta.json").read_text())["text_pooling"] == "mean of sentence vectors"
