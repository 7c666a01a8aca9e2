"""
Live operation
==============

Audio arrives in small blocks and camera frames at 30 Hz.  Each camera
frame is masked with the newest SSL frame that is already complete.
"""

import numpy as np

from acoustic_fusion import SceneScript, SourceSpec, StreamingSession, default_geometry, render_scene
from acoustic_fusion.fusion import CameraModel
from acoustic_fusion.pipeline import CameraFrame

geometry = default_geometry()
camera = CameraModel(320.0, 320.0, 320.0, 240.0, 640, 480, np.eye(4), 90.0)
script = SceneScript([SourceSpec([(0.0, 20.0, 2.0), (3.0, -20.0, 2.0)], "speech")], snr_db=20.0)
clip, _ = render_scene(script, geometry, 16000, 3.0, seed=4)

session = StreamingSession(geometry, camera=camera)
block = 160  # 10 ms
next_cam, cam_index = 0.0, 0
for start in range(0, clip.n_samples, block):
    session.push_audio(clip.samples[:, start:start + block])
    now = (start + block) / 16000
    while next_cam <= now:
        mask = session.push_camera(CameraFrame(cam_index, next_cam))
        if cam_index % 15 == 0:
            spans = [(r.col_min, r.col_max) for r in mask.rectangles if not r.out_of_view]
            print(f"camera {cam_index:3d} at {next_cam:5.2f} s uses SSL frame {mask.ssl_frame}: {spans}")
        cam_index += 1
        next_cam = cam_index / 30.0

# a camera frame that arrives late is refused
print("late frame accepted:", session.push_camera(CameraFrame(999, 0.1)) is not None)
