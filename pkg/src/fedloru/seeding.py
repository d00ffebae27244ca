"""Seed splitting.

A single integer seed fans out to every subsystem through
``derive_seed(seed, name, *index)``: the tuple is serialized as text and
hashed with BLAKE2b (8-byte digest), giving a 64-bit child seed. Generators
are numpy ``Generator(PCG64(child))``, whose bit stream is fixed across
platforms and numpy releases.
"""

import hashlib

import numpy as np


def derive_seed(seed, name, *index):
    key = "|".join([str(int(seed)), str(name), *(str(int(i)) for i in index)])
    digest = hashlib.blake2b(key.encode("ascii"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def make_rng(seed, name=None, *index):
    if name is None:
        return np.random.Generator(np.random.PCG64(int(seed)))
    return np.random.Generator(np.random.PCG64(derive_seed(seed, name, *index)))
