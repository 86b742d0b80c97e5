"""Shared fixtures for the trained-system tests.

The heavy fixtures (corpus, codecs, full generation system, retrieval
extractor) are cached under <repo>/.cache keyed by config hash, so the
first run trains everything and later runs load from disk.  Unit tests
keep their own tiny throwaway models and never touch these.
"""

import pathlib

import pytest

from mote import pipeline

CACHE = pathlib.Path(__file__).resolve().parent.parent / ".cache"


@pytest.fixture(scope="session")
def full_cfg():
    return pipeline.PipelineConfig()


@pytest.fixture(scope="session")
def full_corpus(full_cfg):
    return pipeline.get_corpus(full_cfg, CACHE)


@pytest.fixture(scope="session")
def full_med(full_cfg, full_corpus):
    return pipeline.get_med(full_cfg, full_corpus, CACHE)


@pytest.fixture(scope="session")
def full_ted(full_cfg, full_corpus):
    return pipeline.get_ted(full_cfg, full_corpus, CACHE)


@pytest.fixture(scope="session")
def full_system(full_cfg):
    return pipeline.get_system(full_cfg, CACHE)


@pytest.fixture(scope="session")
def full_extractor(full_cfg, full_corpus):
    return pipeline.get_extractor(full_cfg, full_corpus, CACHE)
