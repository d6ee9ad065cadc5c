"""Synthetic desk-scale scenes and demonstrations for the default hand.

The reference grasp is a top-down pinch: the palm rests on the top face of
a box, both fingers lie flat on its +y face and the thumb on its -y face.
Fingers in the default hand are straight at zero joint angle and touch a
face at distance ``FINGER_BASE_Y - PHALANX_RADIUS`` from the palm centre,
so a box of that half-width is pinched with ``h_g = 0``.
"""

from __future__ import annotations

import numpy as np

from .geometry import Pose, axis_angle_quat, look_at, quat_mul
from .hand import FINGER_BASE_Y, PALM_HALF, PHALANX_RADIUS, HandModel, default_hand
from .pipeline import Demonstration
from .surface import Camera, PointCloud, Primitive, Scene, simulate_depth_view

#: hand +z points down, hand +y stays world +y
TOP_DOWN_Q = np.array([0.0, 1.0, 0.0, 0.0])
PINCH_HALF_Y = FINGER_BASE_Y - PHALANX_RADIUS
OPEN_ANGLE = 0.3


def box_scene(half=(0.035, PINCH_HALF_Y, 0.05), yaw: float = 0.0, center=(0.0, 0.0, 0.0), name: str = "box") -> Scene:
    q = axis_angle_quat(np.array([0.0, 0.0, 1.0]), yaw)
    return Scene([Primitive("box", Pose(center, q), size=tuple(2 * h for h in half))], name)


def pinch_grasp(scene: Scene, hand: HandModel | None = None):
    """Wrist pose and (h_g, h_t) for the top-down pinch of a single-box scene."""
    hand = default_hand() if hand is None else hand
    box = scene.solids()[0]
    half = 0.5 * np.asarray(box.size)
    # close the fingers until their inner surface meets the side faces
    lean = (PINCH_HALF_Y - half[1]) / 0.09
    theta = float(np.arcsin(np.clip(lean, -1, 1)))
    h_g = np.array([theta, 0.0, theta, 0.0, theta, 0.0])
    h_t = h_g - OPEN_ANGLE
    top = box.pose.p + box.pose.rotation() @ np.array([0, 0, half[2]])
    wp = top + box.pose.rotation() @ np.array([0.0, 0.0, PALM_HALF[2]])
    wq = quat_mul(box.pose.q, TOP_DOWN_Q)
    return Pose(wp, wq), h_g, h_t


def side_camera(scene: Scene, azimuth: float = np.pi / 2, elevation: float = 0.6, distance: float = 0.35,
                width: int = 160, height: int = 120) -> Camera:
    """Camera on a sphere around the scene's first solid, looking at its centre."""
    c = scene.solids()[0].pose.p
    eye = c + distance * np.array([np.cos(elevation) * np.cos(azimuth), np.cos(elevation) * np.sin(azimuth), np.sin(elevation)])
    return Camera(look_at(eye, c), width, height)


def render(scene: Scene, camera: Camera, noise_std: float = 0.0, rng=None) -> PointCloud:
    return simulate_depth_view(scene, camera, noise_std, rng)


def box_pinch_demo(grasp_id: str = "g0", azimuths=(np.pi / 2,), yaw: float = 0.0, half=None, noise_std: float = 0.0,
                   rng=None, elevation: float = 0.6):
    """Box pinch seen from the given azimuths (pi/2 looks at the +y face); returns (demo, scene)."""
    scene = box_scene(half if half is not None else (0.035, PINCH_HALF_Y, 0.05), yaw=yaw)
    h_w, h_g, h_t = pinch_grasp(scene)
    cams = [side_camera(scene, yaw + a, elevation) for a in azimuths]
    clouds = [render(scene, c, noise_std, rng) for c in cams]
    return Demonstration(grasp_id, clouds, h_w, h_g, h_t, cams), scene


def scene_suite(n: int = 20, seed: int = 0):
    """Boxes of varying size and yaw, each seen once from a random side."""
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        half = (rng.uniform(0.03, 0.04), PINCH_HALF_Y + rng.uniform(-0.002, 0.002), rng.uniform(0.045, 0.055))
        yaw = rng.uniform(-np.pi, np.pi)
        scene = box_scene(half, yaw, name=f"box{k:02d}")
        az = yaw + np.pi / 2 + rng.uniform(-0.4, 0.4)
        cam = side_camera(scene, az, rng.uniform(0.45, 0.75))
        out.append((scene, cam))
    return out
