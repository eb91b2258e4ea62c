"""Per-component random streams derived from one master seed.

Each component (weight init per network, data subsampling, batch shuffling,
latent draws, sample export) gets its own numpy ``SeedSequence`` child keyed
by a fixed stream id, so changing how often one component draws never shifts
another. Ablations that share a master seed therefore share data order.
"""
import numpy as np

STREAMS = {
    "init_generator": 1,
    "init_discriminator": 2,
    "init_classifier": 3,
    "subsample": 4,
    "shuffle": 5,
    "latent": 6,
    "samples": 7,
    "synthetic_train": 8,
    "synthetic_val": 9,
}


def _sequence(master, stream, keys):
    try:
        sid = STREAMS[stream]
    except KeyError:
        raise ValueError(f"unknown random stream {stream!r}") from None
    return np.random.SeedSequence(int(master) & (2**64 - 1), spawn_key=(sid, *keys))


def derive_seed(master: int, stream: str, *keys: int) -> int:
    """A 64-bit integer seed for ``stream`` (and optional integer keys)."""
    lo, hi = _sequence(master, stream, keys).generate_state(2, np.uint32)
    return int(lo) | (int(hi) << 32)


def rng_for(master: int, stream: str, *keys: int) -> np.random.Generator:
    return np.random.default_rng(_sequence(master, stream, keys))
