"""Named random streams split from one master seed."""
import zlib

import numpy as np

STREAMS = ("init", "sensor", "data", "latent", "val", "verify")


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def stream(seed: int, name: str, *sub: int) -> np.random.Generator:
    """Independent generator for ``name`` (and optional sub-indices).

    The same (seed, name, sub) always yields the same sequence, no matter
    which other streams were drawn from first.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=(stream_key(name), *map(int, sub)))
    return np.random.default_rng(ss)


def describe(seed: int, names=STREAMS) -> dict:
    """Manifest entries documenting how each stream was derived."""
    return {f"stream.{n}": f"SeedSequence({int(seed)}, spawn_key=({stream_key(n)},))" for n in names}
