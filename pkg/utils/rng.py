import numpy as np

# spawn-key tags keep sampling, Ito refinement and bootstrap streams disjoint
STREAM_SAMPLES = 0
STREAM_ITO = 1
STREAM_BOOTSTRAP = 2


def substream(seed: int, *key: int) -> np.random.Generator:
    """
    Deterministic generator for (seed, key...).

    The stream only depends on the key, never on which worker consumes it, so
    merged results are independent of the worker count.
    """
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(seq))


def chunk_sizes(total: int, chunk_size: int) -> list:
    """Split `total` samples into fixed-size chunks (last one may be short)."""
    if total <= 0:
        return []
    full, rest = divmod(total, chunk_size)
    sizes = [chunk_size] * full
    if rest:
        sizes.append(rest)
    return sizes
