"""Dataset manifests: (image, mask, split) entries with a seeded 60/20/20 split."""

import json
from dataclasses import dataclass

import numpy as np

from .errors import DataError

SPLITS = ("train", "val", "test")
SPLIT_FRACTIONS = (0.6, 0.2, 0.2)


@dataclass
class ManifestEntry:
    image: str
    mask: str
    split: str


@dataclass
class DatasetManifest:
    entries: list
    seed: int

    def paths(self, split: str) -> list:
        if split not in SPLITS:
            raise DataError(f"unknown split {split!r}")
        return [(e.image, e.mask) for e in self.entries if e.split == split]

    def counts(self) -> dict:
        out = {s: 0 for s in SPLITS}
        for e in self.entries:
            out[e.split] += 1
        return out


def split_manifest(pairs, seed: int) -> DatasetManifest:
    """Shuffle (image, mask) pairs and split 60/20/20, remainders train-first.

    Deterministic in seed; every pair lands in exactly one split.
    """
    pairs = list(pairs)
    if not pairs:
        raise DataError("cannot split an empty dataset")
    seen = set()
    for img, mask in pairs:
        for p in (img, mask):
            if p in seen:
                raise DataError(f"duplicate path in manifest: {p}")
            seen.add(p)
    n = len(pairs)
    counts = [int(frac * n) for frac in SPLIT_FRACTIONS]
    leftover = n - sum(counts)
    for i in range(leftover):
        counts[i % 3] += 1
    order = np.random.default_rng(seed).permutation(n)
    entries = []
    bounds = np.cumsum(counts)
    for rank, idx in enumerate(order):
        split = SPLITS[int(np.searchsorted(bounds, rank, side="right"))]
        img, mask = pairs[idx]
        entries.append(ManifestEntry(str(img), str(mask), split))
    return DatasetManifest(entries, seed)


def save_manifest(manifest: DatasetManifest, path) -> None:
    doc = {
        "seed": manifest.seed,
        "entries": [
            {"image": e.image, "mask": e.mask, "split": e.split}
            for e in manifest.entries
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def load_manifest(path) -> DatasetManifest:
    """Load a manifest; relative entry paths resolve against its directory."""
    import os

    with open(path) as fh:
        doc = json.load(fh)
    base = os.path.dirname(os.path.abspath(path))

    def resolve(p: str) -> str:
        return p if os.path.isabs(p) else os.path.join(base, p)

    entries = [
        ManifestEntry(resolve(e["image"]), resolve(e["mask"]), e["split"])
        for e in doc["entries"]
    ]
    for e in entries:
        if e.split not in SPLITS:
            raise DataError(f"manifest contains unknown split {e.split!r}")
    return DatasetManifest(entries, int(doc["seed"]))
