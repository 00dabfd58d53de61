"""Seed-stream derivation: stability, tag independence, range."""

import torch

from avflow.rng import derive_seed, make_generator


def test_frozen_known_values():
    # frozen reference values; a change here silently breaks every reproducible run
    assert derive_seed(0, "noise") == 7777028001210317934
    assert derive_seed(7, "time") == 2432079194132160696


def test_range_63_bit():
    for base in range(20):
        for tag in ("a", "b", "noise"):
            s = derive_seed(base, tag)
            assert 0 <= s < 2 ** 63


def test_tag_and_seed_sensitivity():
    seeds = {derive_seed(b, t) for b in range(10) for t in ("x", "y", "z")}
    assert len(seeds) == 30


def test_generator_streams_reproducible_and_independent():
    a1 = torch.randn(8, generator=make_generator(0, "noise"))
    a2 = torch.randn(8, generator=make_generator(0, "noise"))
    b = torch.randn(8, generator=make_generator(0, "drop"))
    assert torch.equal(a1, a2)
    assert not torch.equal(a1, b)
