"""Shared fixtures: fixture datasets, packs, and offline providers."""

from __future__ import annotations

import csv

import numpy as np
import pytest

from t2ifuse.corpus import TextSample
from t2ifuse.embedding import FeaturePack


COFFEE_REVIEW = (
    "This new coffee machine is absolutely fantastic! It brews a perfect cup "
    "every time, is super easy to clean, and its sleek black design looks "
    "stunning on my kitchen counter. Definitely a 5-star product."
)


@pytest.fixture
def coffee_sample() -> TextSample:
    return TextSample(id="amz-001", text=COFFEE_REVIEW, label=0)


@pytest.fixture
def small_csv(tmp_path):
    path = tmp_path / "reviews.csv"
    rows = [
        ("r1", "great coffee machine works perfectly", "pos"),
        ("r2", "terrible blender broke after a week", "neg"),
        ("r3", "lovely red vacuum cleaner with strong suction", "pos"),
        ("r4", "awful headphones with crackling audio", "neg"),
    ]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "text", "label"])
        writer.writerows(rows)
    return path


def random_pack(rng: np.random.Generator, n_text=3, n_image=4, text_dim=6, image_dim=5) -> FeaturePack:
    text_tokens = rng.standard_normal((n_text, text_dim))
    image_tokens = rng.standard_normal((n_image, image_dim))
    return FeaturePack(
        text_tokens=text_tokens,
        image_tokens=image_tokens,
        text_pooled=text_tokens.mean(axis=0),
        image_pooled=image_tokens.mean(axis=0),
    )


@pytest.fixture
def pack_factory():
    return random_pack
