"""Load a dataset, derive its label space, and make deterministic splits.

Run: python3 demos/01_datasets_and_splits.py
"""

import tempfile
from pathlib import Path

from t2ifuse.corpus import load_dataset, make_splits, truncate_text, write_split_assignments

CSV = """\
text,label
great coffee machine works perfectly,pos
terrible blender broke after a week,neg
lovely red vacuum cleaner with strong suction,pos
awful headphones with crackling audio,neg
sleek toaster browns bread evenly,pos
flimsy kettle handle snapped off,neg
bright desk lamp with warm light,pos
noisy fan rattles all night,neg
comfortable office chair with lumbar support,pos
cheap cable frayed within days,neg
"""

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "reviews.csv"
    path.write_text(CSV)

    samples, labels = load_dataset(path, "delimited_rows")
    print(f"loaded {len(samples)} samples, classes = {labels.class_names}")

    splits = make_splits(samples, fractions=(0.8, 0.1, 0.1), seed=7)
    for name, members in splits.items():
        counts = {labels.name_of(c): sum(1 for s in members if s.label == c) for c in range(2)}
        print(f"  {name}: {len(members)} samples, per-class {counts}")

    # identical seed -> identical assignment
    again = make_splits([s for s in samples], fractions=(0.8, 0.1, 0.1), seed=7)
    assert all(
        [s.id for s in splits[n]] == [s.id for s in again[n]] for n in splits
    ), "splits must be reproducible"
    print("re-running with the same seed reproduces the assignment")

    out = Path(tmp) / "splits.jsonl"
    write_split_assignments(samples, out)
    print(f"persisted assignments -> {out.name} ({out.stat().st_size} bytes)")

    long_text = " ".join(f"token{i}" for i in range(300))
    short = truncate_text(long_text, 256)
    print(f"truncation: {len(long_text.split())} tokens -> {len(short.split())} tokens")
    assert truncate_text(short, 256) == short, "truncation is idempotent"
