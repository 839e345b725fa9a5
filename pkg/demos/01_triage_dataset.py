"""Walk through the triage labels and the cleaning steps on synthetic records.

Run: python3 demos/01_triage_dataset.py
"""
from pathlib import Path

from dermssl.dataset import (
    PriorityMap,
    SplitSpec,
    class_counts,
    dedupe_by_patient,
    filter_modality,
    map_to_priority,
    quality_filter,
    split,
    synth_dataset,
)

HERE = Path(__file__).parent

# The built-in table covers the hospital vocabulary. Unknown hospital labels
# fall back to the lowest priority.
for label in ("Melanoma", "Spitz Reed Nevus", "Dermatofibroma", "Seborrheic Keratosis"):
    print(f"{label:24s} -> {map_to_priority(label, 'hospital').value}")

# Public-archive labels need an explicit map, loaded from JSON.
pmap = PriorityMap.from_file(HERE / "isic_priority_map.json")
print("isic MEL ->", pmap.lookup("MEL", "isic").value, "| isic NV ->", pmap.lookup("NV", "isic").value)

# 400 synthetic images: a quarter are clinical photos, and 150 patients share them.
records = synth_dataset(400, resolution=32, seed=0, dermatoscopic_fraction=0.75, n_patients=150)
print("raw          ", len(records), class_counts(records))
records = filter_modality(records)
print("dermatoscopic", len(records), class_counts(records))
records = quality_filter(records)
records = dedupe_by_patient(records, max_per_patient=1)
print("one/patient  ", len(records), class_counts(records))

train, val = split(records, SplitSpec(0.8, seed=0))
print(f"train {len(train)} {class_counts(train)}  val {len(val)} {class_counts(val)}")
