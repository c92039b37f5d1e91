import numpy as np
import pytest
import torch

from brainshift.phantom import PhantomSpec, downsample_case, generate_phantom, make_case

torch.set_num_threads(max(1, torch.get_num_threads()))


@pytest.fixture(scope="session")
def healthy():
    return generate_phantom(PhantomSpec())


@pytest.fixture(scope="session")
def left_case():
    return make_case(PhantomSpec(side="left", thickness=6.0))


@pytest.fixture(scope="session")
def bilateral_case():
    return make_case(PhantomSpec(side="bilateral", thickness=5.0))


@pytest.fixture(scope="session")
def tiny_case():
    """12^3 unilateral phantom for finite-difference checks."""
    return downsample_case(make_case(PhantomSpec(grid=(48, 48, 48), side="left", thickness=6.0)), 12)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
