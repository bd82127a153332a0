import hashlib

import numpy as np
import pytest

from cov3d.data import read_manifest
from cov3d.synth import generate_scan, synthesize_dataset
from cov3d.volume import Volume, assemble_volume, normalize_intensity, prune_non_lung


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_counts_and_balance(tmp_path):
    manifests = synthesize_dataset(tmp_path, 8, 6, seed=2, size=(16, 24, 24))
    train, val = read_manifest(manifests["train"]), read_manifest(manifests["val"])
    assert [r.label for r in train].count(1) == 4 and len(train) == 8
    assert [r.label for r in val].count(1) == 3 and len(val) == 6
    assert len(list((tmp_path / "scans").iterdir())) == 14
    assert assemble_volume(train[0].path).shape == (16, 24, 24)


def test_seed_determinism(tmp_path):
    synthesize_dataset(tmp_path / "a", 4, 2, seed=9, size=(16, 24, 24))
    synthesize_dataset(tmp_path / "b", 4, 2, seed=9, size=(16, 24, 24))
    synthesize_dataset(tmp_path / "c", 4, 2, seed=10, size=(16, 24, 24))
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
    assert tree_digest(tmp_path / "a") != tree_digest(tmp_path / "c")


@pytest.mark.parametrize("index", range(5))
def test_paired_twins_differ_only_inside_lungs(index):
    neg = generate_scan(3, 0, index=index)
    pos = generate_scan(3, 1, index=index)
    diff = neg.raw != pos.raw
    assert diff.any()
    assert not (diff & ~pos.lung_mask).any()
    np.testing.assert_array_equal(neg.lung_mask, pos.lung_mask)
    assert not neg.lesion_mask.any() and pos.lesion_mask.any()


def test_end_slices_are_pruned():
    scan = generate_scan(4, 1)
    v = normalize_intensity(Volume(scan.raw.astype(np.float32)))
    _, report = prune_non_lung(v)
    assert report.head_removed >= 1 and report.tail_removed >= 1
    lung_slices = np.flatnonzero(scan.lung_mask.any(axis=(1, 2)))
    assert report.head_removed <= lung_slices[0] + lung_slices.size // 4


def test_invalid_arguments():
    with pytest.raises(ValueError):
        generate_scan(0, 2)
    with pytest.raises(ValueError):
        generate_scan(0, 0, size=(4, 8, 8))
