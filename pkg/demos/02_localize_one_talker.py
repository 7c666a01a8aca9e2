"""
Localizing a single talker
==========================

Render a speech-like source, run the audio front end and compare the
strongest direction with the ground truth.  First the talker stands still,
then it walks around the array.
"""

import numpy as np

from acoustic_fusion import SceneScript, SourceSpec, SslPipeline, default_geometry, render_scene
from acoustic_fusion.geometry import wrap_deg

geometry = default_geometry()


def localize(script, duration, seed):
    clip, truth = render_scene(script, geometry, sample_rate=16000, duration=duration, seed=seed)
    pipe = SslPipeline(geometry)
    frames = pipe.push(clip.samples)
    best = np.array([pipe.grid.azimuths_deg[np.argmax(f.weights)] for f in frames])
    return frames, best, truth


# a talker standing at 40 deg, two meters away
frames, best, truth = localize(SceneScript([SourceSpec([(0.0, 40.0, 2.0)], "speech")], snr_db=20.0), 6.0, 1)
print(f"{len(frames)} SSL frames at 125 Hz")
print("\n  time  estimate  weight")
for f, b in list(zip(frames, best))[::62]:
    print(f"{f.timestamp:6.2f}  {b:8.1f}  {f.weights.max():.2f}")
voiced = [p for p in range(50, len(frames)) if truth.voiced(p)]
print(f"voiced frames within 5 deg: {np.mean(np.abs(wrap_deg(best[voiced] - 40.0)) <= 5):.1%}")

# now walking from -90 deg to +90 deg in 8 s (22.5 deg/s)
walk = SceneScript([SourceSpec([(0.0, -90.0, 2.0), (8.0, 90.0, 2.0)], "speech")], snr_db=20.0)
frames, best, truth = localize(walk, 8.0, 2)
print("\n  time   truth  estimate")
for p in range(0, len(frames), 125):
    print(f"{frames[p].timestamp:6.2f}  {truth.active(p)[0][1]:6.1f}  {best[p]:8.1f}")

# the estimate trails the talker; find the delay that best explains it
true_az = np.array([truth.active(p)[0][1] for p in range(len(frames))])
lags = np.arange(0, 250, 5)
cost = [np.mean(np.abs(wrap_deg(best[250:] - true_az[250 - L : len(frames) - L]))) for L in lags]
L = lags[int(np.argmin(cost))]
print(f"\nthe estimate follows the talker about {L / 125:.2f} s late "
      f"(RLS memory plus smoothing of the weights and speech pauses)")
