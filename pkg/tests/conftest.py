import numpy as np
import pytest

from rtfkit.camera import assemble_model
from rtfkit.dataset import SamplingConfig, default_planes, generate_dataset
from rtfkit.designs import load_design
from rtfkit.evaluate import film_distance_for_object
from rtfkit.lens import reverse_lens


@pytest.fixture(scope="session")
def dgauss_rev():
    return reverse_lens(load_design("double-gauss-50mm"))


@pytest.fixture(scope="session")
def cooke_rev():
    return reverse_lens(load_design("cooke-triplet-50mm"))


@pytest.fixture(scope="session")
def petzval_rev():
    return reverse_lens(load_design("petzval-60mm"))


@pytest.fixture(scope="session")
def dgauss_planes(dgauss_rev):
    return default_planes(dgauss_rev)


@pytest.fixture(scope="session")
def dgauss_train_ds(dgauss_rev, dgauss_planes):
    return generate_dataset(
        dgauss_rev,
        dgauss_planes,
        SamplingConfig(n_field=22, y_max=9.0, n_pupil_radial=12, n_pupil_angular=20),
    )


@pytest.fixture(scope="session")
def dgauss_val_ds(dgauss_rev, dgauss_planes):
    return generate_dataset(
        dgauss_rev,
        dgauss_planes,
        SamplingConfig(
            n_field=19, y_max=9.0, n_pupil_radial=11, n_pupil_angular=18, grid_phase=0.23
        ),
    )


@pytest.fixture(scope="session")
def dgauss_film_distance(dgauss_rev):
    return film_distance_for_object(dgauss_rev, 1000.0)


@pytest.fixture(scope="session")
def dgauss_model5(dgauss_train_ds, dgauss_film_distance):
    model, _ = assemble_model(
        dgauss_train_ds, degree=5, film_distance=dgauss_film_distance
    )
    return model


@pytest.fixture(scope="session")
def petzval_ds(petzval_rev):
    planes = default_planes(petzval_rev)
    return generate_dataset(
        petzval_rev,
        planes,
        SamplingConfig(n_field=24, y_max=11.0, n_pupil_radial=16, n_pupil_angular=24),
    )
