"""Pytest configuration and shared fixtures."""

import pytest
import tempfile
import shutil
from pathlib import Path

import numpy as np

DEFAULT_SEED = 12345


@pytest.fixture
def temp_dir():
    """Create a temporary directory for test output."""
    temp = tempfile.mkdtemp()
    yield Path(temp)
    shutil.rmtree(temp)


@pytest.fixture
def rng(request):
    """Seeded random generator.

    Tests see the same draws unless they parametrize the seed with
    ``@pytest.mark.parametrize('rng', seeds, indirect=True)``.
    """
    return np.random.default_rng(getattr(request, 'param', DEFAULT_SEED))
