"""Shared fixtures: classifier scenarios are expensive enough to build once."""

import pytest

from slicekit.synth import generate_classifier_scenario


@pytest.fixture(scope="session")
def scenario0(tmp_path_factory):
    """Seed-0 classifier scenario at default sizes."""
    out = tmp_path_factory.mktemp("scenario0")
    return generate_classifier_scenario(0, out)


@pytest.fixture(scope="session")
def small_scenario(tmp_path_factory):
    """A reduced scenario for protocol and plumbing tests."""
    out = tmp_path_factory.mktemp("scenario-small")
    return generate_classifier_scenario(
        5, out, train_size=300, test_size=90, val_size=150
    )
