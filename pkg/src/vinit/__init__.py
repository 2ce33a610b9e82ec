"""Visual-inertial initialization from up-to-scale predicted point clouds.

Recovers metric scale, initial velocity, and gravity from raw IMU samples
plus per-pixel 3D predictions expressed in a shared reference camera frame,
through a closed-form constrained linear solve (optionally RANSAC-robust)
followed by nonlinear refinement, and evaluates everything against a built-in
synthetic simulator.
"""

from .geometry import (GRAVITY_MAGNITUDE, NonPositiveDepth, PinholeCamera,
                       RigidTransform, Rotation3, exp_so3, gravity_align,
                       log_so3, project)
from .imu import (Biases, ImuNoise, ImuPreintegration, ImuSample, NavState,
                  compose_preintegrations, correct_for_bias, load_imu_csv,
                  preintegrate, propagate, save_imu_csv)
from .cloud import (CloudFrame, InsufficientPoints, PredictedCloud, RegionGrid,
                    SampledSet, assign_regions, filter_and_sample,
                    interpolate_at, lift_to_I0, load_cloud, save_cloud,
                    validate_cloud_dir)
from .linear_init import (FewerThanThreeFrames, LinearInitState, LinearSystem,
                          NoValidHypothesis, RankDeficient, RansacConfig,
                          RootFindFailed, build_feature_based_system,
                          build_feature_free_system, ransac_solve,
                          rank_diagnostics, solve_constrained,
                          solve_feature_based)
from .refine import (DivergedNaN, ImuState, PriorConfig, Problem, RefineNoise,
                     ScaleField, SolverConfig, check_jacobians, solve_lm,
                     softplus_scale, softplus_scale_inv)
from .sim import (GroundTruth, SensorSpec, TrajectorySpec, exact_preintegration,
                  generate_trajectory, synthesize_cloud, synthesize_imu)
from .metrics import (InitReport, chi_square_gate, gravity_error_deg,
                      scale_error_pct, success_gate, window_ate)
from .pipeline import RunConfig, Scenario, run_ablation, run_pipeline

__version__ = "0.1.0"
