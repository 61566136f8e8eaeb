import numpy as np
import pytest

from neuropathx import synthgen


@pytest.fixture
def write(tmp_path):
    """Write text to a file under tmp_path and return its path."""

    def _write(name, text):
        path = tmp_path / name
        path.write_text(text, encoding="utf-8")
        return path

    return _write


@pytest.fixture(scope="session")
def small_cohort():
    spec = synthgen.SynthSpec(
        n_subjects=40, n_snps=200, n_genes=40, n_pathways=8, n_rois=6,
        n_causal_pathways=2, n_causal_rois=2, seed=3,
    )
    return synthgen.generate(spec)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
