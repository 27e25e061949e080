"""Various utility functions that are used throughout the codebase but don't belong anywhere in particular."""

from typing import Any, Hashable
from hashlib import md5
import pickle
import struct

__all__ = ("crypto_hash", "derive_seed")

_hash_unpacker = struct.Struct("<QQ")


def crypto_hash(x: Any) -> int:
    """Perform a 64 bit cryptographic hash of the given item.

    Unlike the builtin ``hash``, this is stable across interpreter runs, which is what makes it usable for seeds.
    """
    return _hash_unpacker.unpack(md5(pickle.dumps(x, protocol=4)).digest())[0]


def derive_seed(*parts: Hashable) -> int:
    """Derive a child seed from a master seed and any number of labels, e.g. ``derive_seed(master, i, "bootstrap")``.

    Children derived from distinct label tuples are independent of the order in which they are requested, so work can
    be fanned out to a pool without perturbing results.
    """
    return crypto_hash(tuple(parts))
