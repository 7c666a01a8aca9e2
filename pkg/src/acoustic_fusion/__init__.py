"""Sound source localization from a planar microphone array and audio-visual
obstacle masking for RGB-D visual odometry front ends."""

from .clustering import (EmResult, MixtureState, Region, SslFrame, SslTracker, detect_peaks,
                         em_batch, em_recursive_update, feature_likelihoods, region_boundaries)
from .dprtf import CtfState, DpRtfEstimator, DpRtfFeature, FeatureSet, build_cross_relation_row, rls_update
from .fusion import (CameraModel, ObstacleMask, Rectangle, azimuth_to_column, build_mask, filter_features,
                     invalidate_depth, load_camera, region_to_rectangle, warp_pixel)
from .geometry import (ArrayGeometry, CandidateGrid, GeometryError, SteeringTable, compute_steering_table,
                       default_geometry, far_field_tdoa, load_geometry)
from .pipeline import (ConfigError, Parameters, PipelineConfig, RunReport, SslPipeline, StreamingSession,
                       benchmark, load_config, run_offline, run_streaming)
from .simulator import GroundTruth, ReverbSpec, SceneScript, SourceSpec, oracle_tdoa, render_scene
from .stft import AudioClip, read_wav, select_reliable_bins, stft, stft_stream, write_wav

__version__ = "0.1.0"
