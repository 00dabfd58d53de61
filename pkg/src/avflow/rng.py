"""Seed derivation so noise, timestep and dropout draws come from independent
streams of one run-level seed."""

from __future__ import annotations

import hashlib

import torch


def derive_seed(base_seed: int, tag: str) -> int:
    """Hash (base_seed, tag) into a 63-bit stream seed."""
    digest = hashlib.sha256(f"{base_seed}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF


def make_generator(base_seed: int, tag: str) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(base_seed, tag))
    return g
