"""
Synthetic weather and the determinism probe
===========================================

The generator builds 25 detailed channels from a few seasonal factors and
maps them linearly onto 6 basic channels. A small MLP should then recover
every basic channel from the detailed ones.
"""

import numpy as np

from vita.data import BASIC_CHANNELS, BASIC_INDICES, DETAILED_INDICES, SyntheticSpec, generate_synthetic
from vita.probe import determinism_probe

ds = generate_synthetic(SyntheticSpec(num_grids=120, num_years=12), seed=1234)
g = ds.grids[0]
print(g.grid_id, round(g.lat, 2), round(g.lon, 2), g.values.shape)

# the basic channels are an exact linear image of the detailed ones
basic, detailed = g.values[:, BASIC_INDICES], g.values[:, DETAILED_INDICES]
print("max |basic - map(detailed)| =", np.abs(basic - detailed @ ds.basic_map.T).max())

# yields for the first county
print({y: round(v, 1) for y, v in list(ds.yields[0].yields.items())[:5]})

res = determinism_probe(ds.grids[:110], ds.grids[110:], epochs=25, seed=0)
for name, r in zip(BASIC_CHANNELS, res):
    print(f"{name:>18s}  rmse={r.rmse:.4f}  r2={r.r2:.4f}")

# breaking the pairing removes the signal
res = determinism_probe(ds.grids[:110], ds.grids[110:], epochs=5, seed=0, shuffle_pairs=True)
print("shuffled:", [round(r.r2, 3) for r in res])
