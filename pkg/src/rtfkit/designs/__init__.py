"""Bundled public-domain-style lens prescriptions, object side first.

The double-Gauss values follow the classic expired-patent design that
circulates in the rendering literature (scaled to 50 mm); the Cooke triplet
and Petzval follow textbook layouts with apertures tuned for distinct
vignetting behavior. Indices are d-line values entered directly.
"""

from importlib import resources

from ..lens import load_lens_json

_NAMES = ("double-gauss-50mm", "cooke-triplet-50mm", "petzval-60mm")


def list_designs():
    return list(_NAMES)


def load_design(name):
    """Load a bundled prescription by name (see list_designs())."""
    if name not in _NAMES:
        raise KeyError(f"unknown bundled design {name!r}; have {_NAMES}")
    path = resources.files(__package__) / f"{name}.json"
    with resources.as_file(path) as p:
        return load_lens_json(p)
