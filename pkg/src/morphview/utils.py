"""Hashing, seed derivation, and canonical JSON helpers."""

from __future__ import annotations

import hashlib
import json
from contextlib import contextmanager

import torch


def canonical_json(obj) -> str:
    """Serialize to JSON with sorted keys and stable float text.

    Used everywhere a config or manifest is hashed, so two semantically
    identical configs always hash the same.
    """
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def derive_seed(*parts) -> int:
    """Deterministic 63-bit seed from a tuple of ints/strings.

    blake2b keeps derivation stable across platforms and Python versions,
    unlike hash().
    """
    text = ":".join(str(p) for p in parts)
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") & 0x7FFF_FFFF_FFFF_FFFF


def make_generator(*parts) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(*parts))
    return gen


@contextmanager
def single_thread_mode():
    """Pin torch to one thread; the strict mode used by bitwise-reproducibility tests."""
    prev = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(prev)
