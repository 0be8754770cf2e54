"""Daily load shapes and the seeded profile generator."""

from __future__ import annotations

import numpy as np

# hourly shapes, peak normalised to 1; slot 1 covers 00:00-01:00
RESIDENTIAL = np.array([
    0.42, 0.38, 0.36, 0.35, 0.36, 0.42, 0.55, 0.66, 0.68, 0.66, 0.64, 0.63,
    0.62, 0.62, 0.64, 0.70, 0.80, 0.92, 1.00, 0.98, 0.92, 0.80, 0.64, 0.50,
])
COMMERCIAL = np.array([
    0.30, 0.28, 0.28, 0.28, 0.30, 0.35, 0.45, 0.65, 0.85, 0.95, 0.98, 1.00,
    1.00, 0.99, 0.97, 0.92, 0.80, 0.62, 0.50, 0.42, 0.38, 0.35, 0.32, 0.30,
])
SHAPES = {"residential": RESIDENTIAL, "commercial": COMMERCIAL}


def gen_profiles(base_loads, profile_shape, seed, std=0.1):
    """Per-slot load series ``base * shape(t) * g`` with ``g ~ N(1, std)``.

    ``base_loads`` maps a key (for instance ``(node, phase)``) to peak
    ``(p, q)``; ``profile_shape`` is either one shape for every key or a dict
    key -> shape. The same multiplier scales P and Q. Keys are drawn in sorted
    order so the output only depends on the inputs and the seed.
    """
    rng = np.random.default_rng(seed)
    out = {}
    for key in sorted(base_loads):
        shape = profile_shape[key] if isinstance(profile_shape, dict) else profile_shape
        shape = np.asarray(shape, dtype=float)
        g = rng.normal(1.0, std, size=shape.shape) if std > 0 else np.ones_like(shape)
        g = np.clip(g, 0.0, None)
        p, q = base_loads[key]
        out[key] = (p * shape * g, q * shape * g)
    return out
