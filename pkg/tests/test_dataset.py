import json
from collections import Counter

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from dermssl.backbones import BackboneSpec, build_encoder
from dermssl.dataset import (
    HOSPITAL_PRIORITIES,
    ImageRecord,
    Modality,
    Priority,
    PriorityMap,
    Source,
    SplitSpec,
    class_counts,
    dedupe_by_patient,
    filter_modality,
    map_to_priority,
    merge_sources,
    quality_filter,
    read_manifest,
    split,
    synth_dataset,
    to_arrays,
    write_manifest,
)
from dermssl.errors import DataError, SplitError, UnknownLabelError
from dermssl.head import ClassifierHead, HeadSpec

TABLE_I = {
    Priority.P1: ["Melanoma", "Squamous Cell Carcinoma", "Basal Cell Carcinoma", "Superficial Basal Cell Carcinoma"],
    Priority.P2: [
        "Actinic Keratosis",
        "Common Acquired Melanocytic Nevus",
        "Atypical Melanocytic Nevus",
        "Acral Melanocytic Nevus",
        "Spitz Reed Nevus",
        "Irritated Melanocytic Nevus",
    ],
    Priority.P3: ["Acquired Angioma", "Dermatofibroma", "Other Skin Lesions"],
}


def record(patient="p0", modality=Modality.DERMATOSCOPIC, prio=Priority.P1, source=Source.SYNTHETIC, label="Melanoma"):
    return ImageRecord(None, source, label, prio, patient, modality)


@pytest.mark.parametrize(
    "label,expected",
    [("Melanoma", Priority.P1), ("Actinic Keratosis", Priority.P2), ("Dermatofibroma", Priority.P3)],
)
def test_hospital_examples(label, expected):
    assert map_to_priority(label, "hospital") is expected


def test_hospital_vocabulary_partition():
    assert len(HOSPITAL_PRIORITIES) == 13
    for prio, labels in TABLE_I.items():
        assert [map_to_priority(lab, Source.HOSPITAL) for lab in labels] == [prio] * len(labels)
    assert Counter(HOSPITAL_PRIORITIES.values()) == {Priority.P1: 4, Priority.P2: 6, Priority.P3: 3}


def test_label_matching_ignores_case_and_spacing():
    assert map_to_priority("  spitz   reed nevus ", "hospital") is Priority.P2


def test_unlisted_hospital_label_is_other_lesion():
    assert map_to_priority("Seborrheic Keratosis", "hospital") is Priority.P3


def test_unknown_isic_label_names_label_and_source():
    with pytest.raises(UnknownLabelError) as err:
        map_to_priority("MEL", "isic")
    assert "MEL" in str(err.value) and "isic" in str(err.value)


def test_priority_map_file(tmp_path):
    path = tmp_path / "map.json"
    path.write_text(json.dumps({"isic": {"MEL": "P1", "NV": "P2", "DF": "P3"}}))
    pmap = PriorityMap.from_file(path)
    assert pmap.lookup("mel", "isic") is Priority.P1
    assert pmap.lookup("DF", "isic") is Priority.P3
    assert pmap.lookup("Melanoma", "hospital") is Priority.P1
    with pytest.raises(UnknownLabelError):
        pmap.lookup("BKL", "isic")
    roundtrip = PriorityMap.from_dict(pmap.to_dict())
    assert roundtrip.lookup("NV", "isic") is Priority.P2


def test_priority_map_rejects_bad_priority(tmp_path):
    path = tmp_path / "map.json"
    path.write_text(json.dumps({"isic": {"MEL": "P4"}}))
    with pytest.raises(DataError):
        PriorityMap.from_file(path)


def test_image_values_checked():
    with pytest.raises(DataError):
        ImageRecord(np.full((4, 4, 3), 1.5), "synthetic", "Melanoma", "P1", "p", "dermatoscopic")
    with pytest.raises(DataError):
        ImageRecord(np.zeros((4, 4)), "synthetic", "Melanoma", "P1", "p", "dermatoscopic")


def test_filter_modality_examples():
    assert filter_modality([]) == []
    d, c = record(modality=Modality.DERMATOSCOPIC), record(modality=Modality.CLINICAL)
    assert filter_modality([d, c]) == [d]


def test_filter_modality_on_synthetic_set():
    recs = synth_dataset(100, 8, seed=3, dermatoscopic_fraction=0.6)
    kept = filter_modality(recs)
    assert len(kept) == 60
    assert kept == [r for r in recs if r.modality is Modality.DERMATOSCOPIC]


@given(st.lists(st.booleans(), max_size=30))
def test_filter_modality_idempotent(flags):
    recs = [record(modality=Modality.DERMATOSCOPIC if f else Modality.CLINICAL) for f in flags]
    once = filter_modality(recs)
    assert filter_modality(once) == once


def test_quality_filter_default_passes_everything():
    recs = [record(), record()]
    assert quality_filter(recs) == recs
    assert quality_filter(recs, lambda r: r is recs[1]) == [recs[1]]


def test_dedupe_examples():
    distinct = [record(patient=f"p{i}") for i in range(5)]
    assert dedupe_by_patient(distinct, 1) == distinct
    same = [record(patient="p") for _ in range(5)]
    assert dedupe_by_patient(same, 1) == [same[0]]
    with pytest.raises(ValueError):
        dedupe_by_patient(same, 0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 5), max_size=40), st.integers(1, 4))
def test_dedupe_bounds_and_keeps_earliest(patients, cap):
    recs = [record(patient=f"p{p}") for p in patients]
    out = dedupe_by_patient(recs, cap)
    counts = Counter(r.patient_id for r in out)
    assert all(c <= cap for c in counts.values())
    for pid in counts:
        first = [r for r in recs if r.patient_id == pid][:cap]
        assert [r for r in out if r.patient_id == pid] == first


def test_dedupe_on_synthetic_patients():
    recs = synth_dataset(60, 8, seed=1, n_patients=10)
    out = dedupe_by_patient(recs, 2)
    assert max(Counter(r.patient_id for r in out).values()) <= 2
    assert len(out) < len(recs)


def test_merge_sources():
    a = [record(source=Source.HOSPITAL) for _ in range(3)]
    b = [record(source=Source.ISIC) for _ in range(4)]
    assert merge_sources(a, []) == a
    merged = merge_sources(a, b)
    assert len(merged) == 7
    assert Counter(r.source_id for r in merged) == {Source.HOSPITAL: 3, Source.ISIC: 4}
    assert Counter(map(id, merged)) == Counter(map(id, a + b))


def test_split_examples():
    recs = [record(patient=f"p{i}") for i in range(10)]
    train, val = split(recs, SplitSpec(0.8, seed=5, stratify_by="none"))
    assert (len(train), len(val)) == (8, 2)
    again = split(recs, SplitSpec(0.8, seed=5, stratify_by="none"))
    assert train == again[0] and val == again[1]
    with pytest.raises(SplitError):
        split(recs[:1], SplitSpec(0.8))
    with pytest.raises(SplitError):
        split([], SplitSpec(0.8))


def test_stratified_split_counts():
    recs = synth_dataset(30, 8, seed=0)
    train, val = split(recs, SplitSpec(0.8, seed=2))
    assert class_counts(train) == [8, 8, 8]
    assert class_counts(val) == [2, 2, 2]


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.sampled_from(list(Priority)), min_size=4, max_size=60),
    st.floats(0.2, 0.8),
    st.integers(0, 1000),
)
def test_split_properties(prios, frac, seed):
    recs = [record(prio=p, patient=f"p{i}") for i, p in enumerate(prios)]
    try:
        train, val = split(recs, SplitSpec(frac, seed))
    except SplitError:
        return
    assert sorted(map(id, train + val)) == sorted(map(id, recs))
    assert not set(map(id, train)) & set(map(id, val))
    by_class = Counter(r.priority for r in recs)
    for prio, n in by_class.items():
        n_train = sum(r.priority is prio for r in train)
        assert abs(n_train - frac * n) <= 1
    assert split(recs, SplitSpec(frac, seed)) == (train, val)


def test_split_spec_validation():
    with pytest.raises(ValueError):
        SplitSpec(1.0)
    with pytest.raises(ValueError):
        SplitSpec(0.5, stratify_by="patient")


def test_synth_round_robin_and_determinism():
    three = synth_dataset(3, 8, 3, seed=0)
    assert [r.priority for r in three] == [Priority.P1, Priority.P2, Priority.P3]
    a, b = synth_dataset(12, 16, seed=4), synth_dataset(12, 16, seed=4)
    assert all(np.array_equal(x.image, y.image) for x, y in zip(a, b))
    c = synth_dataset(12, 16, seed=5)
    assert not np.array_equal(a[0].image, c[0].image)
    two = synth_dataset(7, 8, 2)
    assert {r.priority for r in two} == {Priority.P1, Priority.P2}
    for r in a:
        assert r.image.shape == (16, 16, 3)
        assert 0.0 <= r.image.min() and r.image.max() <= 1.0
        assert map_to_priority(r.original_label, r.source_id) is r.priority


def test_synth_preconditions():
    with pytest.raises(ValueError):
        synth_dataset(0, 16, 3)
    with pytest.raises(ValueError):
        synth_dataset(2, 16, 3)
    with pytest.raises(ValueError):
        synth_dataset(6, 4, 3)


def test_synthetic_classes_are_learnable():
    # oracle: a small CNN on raw pixels separates the classes within a few epochs
    torch.manual_seed(0)
    train, val = split(synth_dataset(300, 16, 3, seed=0), SplitSpec(0.8, 0))
    (xt, yt), (xv, yv) = map(to_arrays, (train, val))
    xt, yt, xv, yv = map(torch.from_numpy, (xt, yt, xv, yv))
    encoder = build_encoder(BackboneSpec("toy_cnn", (16, 32, 64), image_size=16))
    head = ClassifierHead(HeadSpec(64, 32, 3, 0.0))
    opt = torch.optim.AdamW([*encoder.parameters(), *head.parameters()], lr=3e-3)
    gen = torch.Generator().manual_seed(0)
    for _ in range(5):
        perm = torch.randperm(len(xt), generator=gen)
        for i in range(0, len(xt), 32):
            idx = perm[i : i + 32]
            loss = F.cross_entropy(head(encoder(xt[idx])), yt[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    head.eval()
    with torch.no_grad():
        acc = (head(encoder(xv)).argmax(1) == yv).float().mean().item()
    assert acc > 0.8


def test_manifest_roundtrip(tmp_path):
    recs = synth_dataset(9, 16, seed=1, dermatoscopic_fraction=0.5)
    path = write_manifest(recs, tmp_path / "m.csv")
    back = read_manifest(path)
    assert len(back) == 9
    for r, s in zip(recs, back):
        assert (s.priority, s.patient_id, s.modality, s.source_id) == (r.priority, r.patient_id, r.modality, r.source_id)
        assert np.abs(s.image - r.image).max() <= 0.5 / 255 + 1e-6
    header = (tmp_path / "m.csv").read_text().splitlines()[0]
    assert header == "image_path,source_id,original_label,patient_id,modality"


def test_manifest_priority_is_computed(tmp_path):
    recs = synth_dataset(3, 8, seed=0)
    path = write_manifest(recs, tmp_path / "m.csv")
    text = path.read_text().replace("Dermatofibroma", "Melanoma")
    path.write_text(text)
    assert [r.priority for r in read_manifest(path)] == [Priority.P1, Priority.P2, Priority.P1]


def test_manifest_errors(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("image_path,source_id\nx.png,hospital\n")
    with pytest.raises(DataError):
        read_manifest(bad)
    unknown = tmp_path / "unknown.csv"
    unknown.write_text("image_path,source_id,original_label,patient_id,modality\nx.png,isic,MEL,p1,dermatoscopic\n")
    with pytest.raises(UnknownLabelError):
        read_manifest(unknown, load_images=False)
    with pytest.raises(DataError):
        read_manifest(tmp_path / "absent.csv")


def test_manifest_resizes_images(tmp_path):
    path = write_manifest(synth_dataset(3, 32, seed=0), tmp_path / "m.csv")
    assert read_manifest(path, resolution=16)[0].image.shape == (16, 16, 3)
