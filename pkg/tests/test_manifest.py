import pytest

from pointgrow.errors import DataError
from pointgrow.manifest import load_manifest, save_manifest, split_manifest


def pairs(n):
    return [(f"img_{i}.png", f"mask_{i}.png") for i in range(n)]


def test_ten_items_split_6_2_2():
    m = split_manifest(pairs(10), seed=0)
    assert m.counts() == {"train": 6, "val": 2, "test": 2}


def test_single_item_goes_to_train():
    m = split_manifest(pairs(1), seed=5)
    assert m.counts() == {"train": 1, "val": 0, "test": 0}


def test_remainders_assigned_train_first():
    assert split_manifest(pairs(4), seed=1).counts() == {"train": 3, "val": 1, "test": 0}
    assert split_manifest(pairs(7), seed=1).counts() == {"train": 5, "val": 1, "test": 1}


def test_determinism():
    a = split_manifest(pairs(23), seed=9)
    b = split_manifest(pairs(23), seed=9)
    assert [(e.image, e.split) for e in a.entries] == [(e.image, e.split) for e in b.entries]


def test_seed_changes_assignment():
    a = split_manifest(pairs(23), seed=1)
    b = split_manifest(pairs(23), seed=2)
    assert [(e.image, e.split) for e in a.entries] != [(e.image, e.split) for e in b.entries]


@pytest.mark.parametrize("n", [1, 2, 3, 5, 10, 37, 100])
def test_partition_and_proportions(n):
    m = split_manifest(pairs(n), seed=3)
    seen = [e.image for e in m.entries]
    assert sorted(seen) == sorted(p[0] for p in pairs(n))
    counts = m.counts()
    assert sum(counts.values()) == n
    for split, frac in zip(("train", "val", "test"), (0.6, 0.2, 0.2)):
        assert abs(counts[split] - frac * n) <= 1


def test_empty_rejected():
    with pytest.raises(DataError):
        split_manifest([], seed=0)


def test_duplicate_rejected():
    with pytest.raises(DataError):
        split_manifest([("a.png", "m1.png"), ("a.png", "m2.png")], seed=0)


def test_json_round_trip(tmp_path):
    import os

    m = split_manifest(pairs(10), seed=4)
    path = tmp_path / "manifest.json"
    save_manifest(m, path)
    back = load_manifest(path)
    assert back.seed == 4
    # relative entries resolve against the manifest's directory on load
    assert [(os.path.basename(e.image), e.split) for e in back.entries] == [
        (e.image, e.split) for e in m.entries
    ]
    assert all(e.image.startswith(str(tmp_path)) for e in back.entries)


def test_absolute_paths_survive_load(tmp_path):
    m = split_manifest([("/abs/img.png", "/abs/mask.png")], seed=1)
    path = tmp_path / "manifest.json"
    save_manifest(m, path)
    back = load_manifest(path)
    assert back.entries[0].image == "/abs/img.png"
