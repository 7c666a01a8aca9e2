"""
Two sources at once
===================

The mixture weights can hold more than one peak when the two sources
occupy different time-frequency bins.  Here each source owns its own set of
frequency bands, which is the idealised W-disjoint case.
"""

import numpy as np

from acoustic_fusion import SceneScript, SourceSpec, SslPipeline, default_geometry, render_scene

geometry = default_geometry()
edges = np.linspace(125, 3875, 9)
bands_a = [(edges[i], edges[i + 1]) for i in (0, 3, 4, 7)]
bands_b = [(edges[i], edges[i + 1]) for i in (1, 2, 5, 6)]

script = SceneScript([SourceSpec([(0.0, 45.0, 2.0)], "white", bands=bands_a),
                      SourceSpec([(0.0, -60.0, 2.0)], "white", bands=bands_b)], snr_db=20.0)
clip, _ = render_scene(script, geometry, 16000, 4.0, seed=3)

pipe = SslPipeline(geometry)
frames = pipe.push(clip.samples)
last = frames[-1]
az = pipe.grid.azimuths_deg

print("peaks:", [(a, round(float(last.weights[i]), 2)) for i, a in last.peaks])
for center, lo, hi in last.region_degrees(az, 5.0):
    print(f"region around {center:g} deg spans [{lo:g}, {hi:g}]")

# a coarse text plot of the final weights
print()
for i in range(0, 72, 2):
    bar = "#" * int(round(60 * last.weights[i]))
    print(f"{az[i]:6.0f} {bar}")
