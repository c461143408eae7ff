import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from edgeleak.dataset import ImageRecord, Manifest


@pytest.fixture(params=["numpy", "numba"])
def kernel_backend(request):
    """Run a test under both kernel implementations."""
    from edgeleak import backend

    before = backend.active_backend()
    try:
        backend.set_backend(request.param)
    except ValueError:
        pytest.skip("numba unavailable")
    yield request.param
    backend.set_backend(before)


def make_manifest(n_persons, originals=2, augmented=2, conditioning=("edges", "segmentation"),
                  split=None, prefix="p"):
    """In-memory manifest with fake paths (no files on disk)."""
    records = []
    for p in range(n_persons):
        pid = f"{prefix}{p:04d}"
        for i in range(originals):
            records.append(ImageRecord(
                image_id=f"{pid}_{i:02d}_orig", person_id=pid, variant="original",
                path=f"/nonexistent/{pid}_{i:02d}.png",
                split=split or "unassigned",
            ))
        for i in range(augmented):
            records.append(ImageRecord(
                image_id=f"{pid}_{i:02d}_aug", person_id=pid, variant="augmented",
                path=f"/nonexistent/{pid}_{i:02d}_aug.png",
                base_image_id=f"{pid}_{i % originals:02d}_orig",
                conditioning=frozenset(conditioning),
                split=split or "unassigned",
            ))
    return Manifest(records=records)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
