"""Procedural scenes with analytic SDFs and simulated LiDAR/camera sensors."""
from .primitives import (
    DEFAULT_BOUNDS,
    KINDS,
    Scene,
    SceneError,
    ScenePrimitive,
    generate_scene,
    ground_plane,
    yaw_matrix,
)
from .sensors import (
    CameraFrame,
    CameraPose,
    PointCloud,
    SensorSample,
    default_camera_poses,
    lidar_directions,
    look_at_rotation,
    pinhole_intrinsics,
    project,
    ray_box,
    simulate_camera,
    simulate_lidar,
    simulate_sample,
    sphere_trace,
)
