"""
The microphone array and its steering table
===========================================

Where the microphones sit, how long a plane wave takes to cross the array,
and what the theoretical direct-path RTFs look like on the candidate grid.
"""

import numpy as np

from acoustic_fusion import CandidateGrid, compute_steering_table, default_geometry, far_field_tdoa

geometry = default_geometry()
print("microphones (m), x forward, y left, z up:")
print(np.round(geometry.mic_positions, 4))
print("reference channel:", geometry.reference)

# a source straight to the left reaches the left side of the array first,
# so those channels get negative delays relative to the centre microphone
for az in (0.0, 90.0, -90.0):
    delays = [far_field_tdoa(geometry, az, m) * 1e6 for m in range(geometry.n_mics)]
    print(f"azimuth {az:6.1f} deg  delays (us):", np.round(delays, 1))

grid = CandidateGrid(5.0)
print("\ncandidate azimuths:", grid.size, "from", grid.azimuths_deg[0], "to", grid.azimuths_deg[-1])

table = compute_steering_table(geometry, grid, n_bins=129, sample_rate=16000)
print("steering table means (bins, channels, directions):", table.means.shape)

# unit modulus everywhere; phase grows linearly with frequency
k = 40
d = grid.nearest_index(60.0)
print(f"|a| at bin {k}: {np.abs(table.means[k, :, d]).round(6)}")
print(f"phase at bin {k}, 60 deg (rad): {np.angle(table.means[k, :, d]).round(3)}")
