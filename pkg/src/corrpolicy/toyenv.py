"""Deterministic planar-push environment with a scripted expert.

A gantry-style arm (prismatic x, prismatic y, wrist yaw) carries two cylinder
fingers and pushes a disc across the plane to a goal. Contacts follow a
quasi-static penetration-resolution rule, so (state, action) fully determines
the next state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .obsbuild import Observation, build_observation
from .pcgeom import aligned_distance, contact_map, estimate_normals
from .se3kin import (
    Joint,
    JointVector,
    KinematicChain,
    Link,
    Pose,
    fk_pointcloud,
    quat_from_axis_angle,
    sample_link_surface,
)
from .seeding import component_rng

DT = 0.2  # seconds per step, mirroring the 5 Hz demonstration rate

DISC_RADIUS = 0.05
DISC_HEIGHT = 0.02
DISC_CENTER_Z = 0.01

ARM_RATE = 0.025  # prismatic meters per step
YAW_RATE = 0.3  # wrist radians per step
FINGER_RATE = 0.3  # finger radians per step

WORKSPACE = 0.55  # |x|,|y| bound for the object center
SUCCESS_RADIUS = 0.02
START_RECT = np.array([[0.12, 0.32], [-0.05, 0.05]])  # 0.2 x 0.1 m
START_YAW = np.pi / 6

HAND_LINKS = (4, 5)

# Expert controller geometry.
_ORBIT_RADIUS = 0.12
_ORBIT_TOL = 0.18
_PUSH_OFFSET = 0.048
_FINGER_AMP = 0.2
_FINGER_PERIOD = 24


def make_hand_chain() -> KinematicChain:
    """Gantry arm (3 joints) plus two finger cylinders hanging from the wrist."""
    identity = Pose.identity()
    links = (
        Link("base", "box", (0.04, 0.04, 0.02)),
        Link("carriage_x", "box", (0.03, 0.03, 0.02)),
        Link("carriage_y", "box", (0.03, 0.03, 0.02)),
        Link("wrist", "cylinder", (0.012, 0.02)),
        Link("finger_a", "cylinder", (0.008, 0.08)),
        Link("finger_b", "cylinder", (0.008, 0.08)),
    )
    joints = (
        Joint("prismatic", np.array([1.0, 0, 0]), 0, Pose(np.array([1.0, 0, 0, 0]), np.array([0.0, 0, 0.1])), (-0.6, 0.6)),
        Joint("prismatic", np.array([0.0, 1, 0]), 1, identity, (-0.6, 0.6)),
        Joint("revolute", np.array([0.0, 0, 1]), 2, identity, (-3.2, 3.2)),
        Joint("revolute", np.array([1.0, 0, 0]), 3, Pose(np.array([1.0, 0, 0, 0]), np.array([0.0, 0.0, -0.045])), (-0.6, 0.6)),
        Joint("revolute", np.array([1.0, 0, 0]), 3, Pose(np.array([1.0, 0, 0, 0]), np.array([0.0, 0.12, -0.045])), (-0.6, 0.6)),
    )
    return KinematicChain(links, joints)


@dataclass(frozen=True)
class ToyHandModel:
    """Kinematic chain, per-link surface samples, and the canonical object cloud."""

    chain: KinematicChain
    link_samples: tuple
    canonical_cloud: np.ndarray
    n_points: int
    gamma: float
    theta: float
    normal_k: int


def build_toy_model(n_points: int = 1024, gamma: float = 1.0, theta: float = 10.0, sample_seed: int = 7) -> ToyHandModel:
    chain = make_hand_chain()
    per_finger = n_points // len(HAND_LINKS)
    counts = [64, 64, 64, 64, per_finger, per_finger]
    samples = tuple(
        sample_link_surface(link, counts[i], seed=sample_seed + i) for i, link in enumerate(chain.links)
    )
    disc = Link("disc", "cylinder", (DISC_RADIUS, DISC_HEIGHT))
    cloud = sample_link_surface(disc, n_points, seed=sample_seed + 100)
    cloud = cloud - cloud.mean(axis=0)
    return ToyHandModel(
        chain=chain,
        link_samples=samples,
        canonical_cloud=cloud,
        n_points=n_points,
        gamma=gamma,
        theta=theta,
        normal_k=10,
    )


@dataclass(frozen=True)
class EnvState:
    obj_xy: np.ndarray
    obj_yaw: float
    q_arm: np.ndarray
    q_hand: np.ndarray
    goal: np.ndarray
    step_index: int


def object_pose(state: EnvState) -> Pose:
    quat = quat_from_axis_angle(np.array([0.0, 0, 1]), state.obj_yaw)
    return Pose(quat, np.array([state.obj_xy[0], state.obj_xy[1], DISC_CENTER_Z]))


def joint_vector(model: ToyHandModel, q_arm, q_hand) -> JointVector:
    return JointVector.clamp(model.chain, np.concatenate([q_arm, q_hand]))


def reset(seed: int) -> EnvState:
    """Start state: object uniform in the start rectangle, yaw within +-pi/6, goal at center."""
    rng = component_rng(seed, "env")
    xy = rng.uniform(START_RECT[:, 0], START_RECT[:, 1])
    yaw = rng.uniform(-START_YAW, START_YAW)
    return EnvState(
        obj_xy=xy,
        obj_yaw=float(yaw),
        q_arm=np.array([-0.30, 0.0, 0.0]),
        q_hand=np.zeros(2),
        goal=np.zeros(2),
        step_index=0,
    )


def resolve_push(obj_xy: np.ndarray, hand_xy: np.ndarray, radius: float = DISC_RADIUS) -> np.ndarray:
    """Quasi-static contact rule: resolve the deepest 2D penetration radially outward.

    Returns the displaced object center (unchanged array when nothing penetrates).
    """
    delta = obj_xy[None, :] - hand_xy
    dist = np.linalg.norm(delta, axis=1)
    depth = radius - dist
    deepest = int(np.argmax(depth))
    if depth[deepest] <= 0:
        return obj_xy
    d = dist[deepest]
    direction = delta[deepest] / d if d > 1e-12 else np.array([1.0, 0.0])
    return obj_xy + depth[deepest] * direction


def _rate_limit(current, target, rate):
    return current + np.clip(target - current, -rate, rate)


def hand_cloud(model: ToyHandModel, q_arm, q_hand) -> np.ndarray:
    q = joint_vector(model, q_arm, q_hand)
    return fk_pointcloud(model.chain, q, list(model.link_samples), subset=list(HAND_LINKS), n_points=model.n_points)


def step(model: ToyHandModel, state: EnvState, arm_action, hand_action) -> EnvState:
    """Advance one tick: move joints toward absolute targets, then resolve contact."""
    arm_action = np.asarray(arm_action, dtype=float)
    hand_action = np.asarray(hand_action, dtype=float)
    if arm_action.shape != (3,) or hand_action.shape != (2,):
        raise ValueError(f"expected actions (3,) and (2,), got {arm_action.shape}, {hand_action.shape}")
    if not (np.all(np.isfinite(arm_action)) and np.all(np.isfinite(hand_action))):
        raise ValueError("non-finite action")
    target = joint_vector(model, arm_action, hand_action).values
    rates = np.array([ARM_RATE, ARM_RATE, YAW_RATE, FINGER_RATE, FINGER_RATE])
    q_new = _rate_limit(np.concatenate([state.q_arm, state.q_hand]), target, rates)
    pts = hand_cloud(model, q_new[:3], q_new[3:])
    obj_xy = resolve_push(state.obj_xy, pts[:, :2])
    obj_xy = np.clip(obj_xy, -WORKSPACE, WORKSPACE)
    return EnvState(
        obj_xy=obj_xy,
        obj_yaw=state.obj_yaw,
        q_arm=q_new[:3],
        q_hand=q_new[3:],
        goal=state.goal,
        step_index=state.step_index + 1,
    )


def _wrap_angle(a: float) -> float:
    return (a + np.pi) % (2 * np.pi) - np.pi


def expert_action(state: EnvState):
    """Scripted pusher: orbit behind the object along the goal->object line, then advance.

    Finger joints follow a fixed sinusoidal open/close profile so hand actions
    stay non-constant. All targets are clamped to the per-step rate limits.
    """
    wrist = state.q_arm[:2]
    to_obj = state.obj_xy - state.goal
    dist_goal = float(np.linalg.norm(to_obj))
    if dist_goal < 0.5 * SUCCESS_RADIUS:
        target_xy = wrist.copy()
        yaw_target = state.q_arm[2]
    else:
        u = to_obj / dist_goal
        rel = wrist - state.obj_xy
        theta_w = float(np.arctan2(rel[1], rel[0]))
        theta_t = float(np.arctan2(u[1], u[0]))
        dtheta = _wrap_angle(theta_t - theta_w)
        if abs(dtheta) > _ORBIT_TOL:
            step_ang = np.clip(dtheta, -ARM_RATE / _ORBIT_RADIUS, ARM_RATE / _ORBIT_RADIUS)
            theta_n = theta_w + step_ang
            target_xy = state.obj_xy + _ORBIT_RADIUS * np.array([np.cos(theta_n), np.sin(theta_n)])
        else:
            target_xy = state.obj_xy + _PUSH_OFFSET * u
        w2o = state.obj_xy - wrist
        yaw_target = float(np.arctan2(w2o[0], -w2o[1]))  # outrigger finger points away
    phase = 2 * np.pi * state.step_index / _FINGER_PERIOD
    finger_target = _FINGER_AMP * np.sin(phase + np.array([0.0, np.pi / 2]))

    arm_target = np.array([target_xy[0], target_xy[1], yaw_target])
    arm_target[2] = state.q_arm[2] + _wrap_angle(arm_target[2] - state.q_arm[2])
    rates = np.array([ARM_RATE, ARM_RATE, YAW_RATE])
    arm_target = _rate_limit(state.q_arm, arm_target, rates)
    hand_target = _rate_limit(state.q_hand, finger_target, FINGER_RATE)
    return arm_target, hand_target


def observe(model: ToyHandModel, state: EnvState) -> Observation:
    """Interaction-aware observation without the contact map (rollout path)."""
    q = joint_vector(model, state.q_arm, state.q_hand)
    return build_observation(
        model.canonical_cloud,
        object_pose(state),
        model.chain,
        q,
        list(model.link_samples),
        list(HAND_LINKS),
        model.n_points,
    )


def render_observation(model: ToyHandModel, state: EnvState):
    """Observation plus its ground-truth contact map (data generation path)."""
    obs = observe(model, state)
    normals = estimate_normals(obs.obj_pc, k=model.normal_k)
    dists = aligned_distance(obs.obj_pc, normals.values, obs.hand_pc, gamma=model.gamma)
    return obs, contact_map(dists, theta=model.theta)


def success(state: EnvState) -> bool:
    return bool(np.linalg.norm(state.obj_xy - state.goal) < SUCCESS_RADIUS)


class PlanarPushEnv:
    """Convenience wrapper bundling the model with the functional environment API."""

    def __init__(self, model: ToyHandModel | None = None):
        self.model = model or build_toy_model()

    @property
    def dt(self) -> float:
        return DT

    @property
    def arm_dim(self) -> int:
        return 3

    @property
    def hand_dim(self) -> int:
        return 2

    @property
    def n_points(self) -> int:
        return self.model.n_points

    def reset(self, seed: int) -> EnvState:
        return reset(seed)

    def step(self, state, arm_action, hand_action) -> EnvState:
        return step(self.model, state, arm_action, hand_action)

    def expert_action(self, state):
        return expert_action(state)

    def observe(self, state) -> Observation:
        return observe(self.model, state)

    def render_observation(self, state):
        return render_observation(self.model, state)

    def success(self, state) -> bool:
        return success(state)

    def object_pose_row(self, state) -> np.ndarray:
        pose = object_pose(state)
        return np.concatenate([pose.quat, pose.trans])
