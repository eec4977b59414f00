"""Shared fixtures: cached synthetic worlds and trained relevance scorers.

World generation and surrogate training are fully deterministic, so the
results are cached per configuration for the whole session. Tests that
need to measure their own runtime honestly (the acceptance gate) build
their inputs inline instead of using these caches.
"""

from __future__ import annotations

import pytest

from ebrlab.rrm import SurrogateScorer, train_rrm
from ebrlab.synthgen import World, WorldConfig, generate_world


@pytest.fixture(scope="session")
def world_cache():
    """Memoized world factory keyed by the WorldConfig overrides."""
    cache: dict = {}

    def get(**overrides) -> World:
        key = tuple(sorted(overrides.items()))
        if key not in cache:
            cache[key] = generate_world(WorldConfig(**overrides))
        return cache[key]

    return get


@pytest.fixture(scope="session")
def surrogate_cache(world_cache):
    """Memoized surrogate scorer factory, trained on all judgments of the
    matching cached world."""
    cache: dict = {}

    def get(**overrides) -> SurrogateScorer:
        key = tuple(sorted(overrides.items()))
        if key not in cache:
            world = world_cache(**overrides)
            seed = overrides.get("seed", 0)
            model, featurizer = train_rrm(
                world.judgments,
                world.queries,
                world.products,
                world.pt_predictions,
                seed=seed,
            )
            cache[key] = SurrogateScorer(model, featurizer)
        return cache[key]

    return get


@pytest.fixture(scope="session")
def default_world(world_cache) -> World:
    return world_cache()


@pytest.fixture(scope="session")
def default_surrogate(surrogate_cache) -> SurrogateScorer:
    return surrogate_cache()
