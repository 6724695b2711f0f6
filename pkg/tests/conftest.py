import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))  # brute_force oracles live here

from clseg.phantom import PhantomSpec, generate_cohort

TINY_SPEC = PhantomSpec(
    side_voxels=48,
    cortex_thickness_voxels=4,
    lesion_counts=(3, 1, 4, 1),
    lesion_size_range=(6, 50),
    wml_count=2,
    seed=402,
)


@pytest.fixture(scope="session")
def tiny_cohort(tmp_path_factory) -> Path:
    """Two small phantom subjects on disk, shared across the suite."""
    root = tmp_path_factory.mktemp("tiny_cohort")
    generate_cohort(TINY_SPEC, 2, root, seed=TINY_SPEC.seed)
    return root


@pytest.fixture(scope="session")
def tiny_subjects(tiny_cohort):
    from clseg.pipeline import load_training_data
    return load_training_data(tiny_cohort)
