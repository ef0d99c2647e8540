"""Planar biped model: kinematics and simplified contact dynamics.

The robot is a rigid base (mass + pitch inertia) with two massless 3-joint
legs (hip, knee, ankle).  Each ankle carries a flat foot segment that
contacts the ground at a heel and a toe point, which gives standing a real
support polygon (pure point feet make an unstabilized inverted pendulum).

Massless-leg approximation taken consistently: joints are torque-driven
second-order servos (lumped reflected inertia, PD torque, damping) and the
ground reaction forces - normal spring-damper plus anchored stick/slip
friction - act on the base rigid body alone.  Feeding contact reactions
back into zero-mass legs has no well-defined scale and in practice turns
the leg into an undamped oscillation engine, so the legs shape *where* the
contact points are and the base carries all contact dynamics.

Lateral/yaw motion is collapsed to a proxy pair (yaw rate, lateral offset)
driven by hip-torque asymmetry while in contact; it exists so yaw-rate
commands and the lateral-drift penalties keep an honest, controllable target
in the planar model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

N_JOINTS = 6  # [hip_l, knee_l, ankle_l, hip_r, knee_r, ankle_r]
LEFT = 0
RIGHT = 1


@dataclass(frozen=True)
class BipedModel:
    thigh_len: float = 0.42
    shin_len: float = 0.42
    foot_len: float = 0.05
    foot_half: float = 0.09  # heel/toe half-spacing of the flat foot segment
    base_mass: float = 12.0
    base_inertia: float = 0.8
    base_half_height: float = 0.12
    joint_inertia: float = 0.12
    joint_damping: float = 1.5
    kp: tuple = (220.0, 220.0, 60.0) * 2  # hip, knee, ankle
    kd: tuple = (6.0, 6.0, 2.0) * 2
    torque_limit: tuple = (120.0, 120.0, 45.0) * 2
    action_scale: float = 0.25  # rad of joint target per unit action
    action_bound: float = 4.0
    nominal_pose: tuple = (0.35, -0.7, 0.35, 0.35, -0.7, 0.35)
    joint_lower: tuple = (-1.6, -2.4, -1.2, -1.6, -2.4, -1.2)
    joint_upper: tuple = (1.6, -0.02, 1.2, 1.6, -0.02, 1.2)
    joint_vel_limit: float = 20.0
    gravity: float = 9.81
    # spring-damper normal contact, anchored-spring (stick/slip) friction;
    # damping ramps in with penetration so touchdown does not slam
    contact_kn: float = 8000.0
    contact_dn: float = 300.0
    contact_damp_ramp: float = 0.004  # m of penetration for full damping
    contact_force_cap: float = 900.0  # N per point, kinematic-penetration guard
    contact_kt: float = 4000.0
    contact_ct: float = 120.0
    # unmodeled 3-D/arm dissipation; also tames airborne tumbling
    base_rot_damping: float = 1.5
    # yaw-proxy dynamics
    yaw_inertia: float = 0.5
    yaw_damping: float = 2.0
    yaw_gain: float = 0.35

    def __post_init__(self):
        # frozen dataclass: stash read-only array views of the tuple fields
        for name, src in (
            ("_nominal", self.nominal_pose),
            ("_lower", self.joint_lower),
            ("_upper", self.joint_upper),
            ("_kp", self.kp),
            ("_kd", self.kd),
            ("_tlim", self.torque_limit),
        ):
            arr = np.array(src, dtype=np.float64)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    def nominal(self) -> np.ndarray:
        return self._nominal.copy()

    def lower(self) -> np.ndarray:
        return self._lower.copy()

    def upper(self) -> np.ndarray:
        return self._upper.copy()

    def standing_height(self, pose: np.ndarray | None = None) -> float:
        """Base-to-ground distance when the lowest foot touches down."""
        q = self.nominal() if pose is None else np.asarray(pose, dtype=np.float64)
        drop = 0.0
        for side in (LEFT, RIGHT):
            _, _, (fx, fz) = leg_points(self, 0.0, 0.0, 0.0, q[3 * side : 3 * side + 3])
            drop = max(drop, -fz)
        return drop


def leg_points(
    model: BipedModel,
    base_x: float,
    base_z: float,
    pitch: float,
    q: np.ndarray,
) -> tuple[tuple[float, float], tuple[float, float], tuple[float, float]]:
    """World positions of (knee, ankle, foot) for one leg's joint triple q."""
    a1 = pitch + q[0]
    a2 = a1 + q[1]
    a3 = a2 + q[2]
    kx = base_x + model.thigh_len * math.sin(a1)
    kz = base_z - model.thigh_len * math.cos(a1)
    ax = kx + model.shin_len * math.sin(a2)
    az = kz - model.shin_len * math.cos(a2)
    fx = ax + model.foot_len * math.sin(a3)
    fz = az - model.foot_len * math.cos(a3)
    return (kx, kz), (ax, az), (fx, fz)


def leg_jacobian(model: BipedModel, pitch: float, q: np.ndarray) -> np.ndarray:
    """d(foot xz)/d(hip, knee, ankle); column 0 doubles as d/d(pitch)."""
    a1 = pitch + q[0]
    a2 = a1 + q[1]
    a3 = a2 + q[2]
    c1, s1 = math.cos(a1), math.sin(a1)
    c2, s2 = math.cos(a2), math.sin(a2)
    c3, s3 = math.cos(a3), math.sin(a3)
    l1, l2, l3 = model.thigh_len, model.shin_len, model.foot_len
    j = np.empty((2, 3))
    j[0, 2] = l3 * c3
    j[1, 2] = l3 * s3
    j[0, 1] = l2 * c2 + j[0, 2]
    j[1, 1] = l2 * s2 + j[1, 2]
    j[0, 0] = l1 * c1 + j[0, 1]
    j[1, 0] = l1 * s1 + j[1, 1]
    return j


@dataclass
class BipedState:
    """Full mutable simulation state plus per-control-step derived quantities."""

    x: float = 0.0
    z: float = 0.0
    pitch: float = 0.0
    vx: float = 0.0
    vz: float = 0.0
    pitch_rate: float = 0.0
    yaw_rate: float = 0.0
    heading: float = 0.0
    y_offset: float = 0.0
    joint_pos: np.ndarray = field(default_factory=lambda: np.zeros(N_JOINTS))
    joint_vel: np.ndarray = field(default_factory=lambda: np.zeros(N_JOINTS))
    joint_acc: np.ndarray = field(default_factory=lambda: np.zeros(N_JOINTS))
    joint_torque: np.ndarray = field(default_factory=lambda: np.zeros(N_JOINTS))
    foot_pos: np.ndarray = field(default_factory=lambda: np.zeros((2, 2)))
    foot_vel: np.ndarray = field(default_factory=lambda: np.zeros((2, 2)))
    contact: np.ndarray = field(default_factory=lambda: np.zeros(2, dtype=bool))
    contact_force: np.ndarray = field(default_factory=lambda: np.zeros((2, 2)))
    knee_heights: np.ndarray = field(default_factory=lambda: np.zeros(2))
    # friction anchors per [foot][heel, toe]
    anchor_x: np.ndarray = field(default_factory=lambda: np.zeros((2, 2)))
    anchor_on: np.ndarray = field(default_factory=lambda: np.zeros((2, 2), dtype=bool))
    n_collisions: int = 0
    time: float = 0.0

    def proj_gravity(self) -> np.ndarray:
        return np.array([-math.sin(self.pitch), -math.cos(self.pitch)])

    def copy(self) -> "BipedState":
        c = BipedState(
            x=self.x, z=self.z, pitch=self.pitch, vx=self.vx, vz=self.vz,
            pitch_rate=self.pitch_rate, yaw_rate=self.yaw_rate,
            heading=self.heading, y_offset=self.y_offset,
            joint_pos=self.joint_pos.copy(), joint_vel=self.joint_vel.copy(),
            joint_acc=self.joint_acc.copy(), joint_torque=self.joint_torque.copy(),
            foot_pos=self.foot_pos.copy(), foot_vel=self.foot_vel.copy(),
            contact=self.contact.copy(), contact_force=self.contact_force.copy(),
            knee_heights=self.knee_heights.copy(),
            anchor_x=self.anchor_x.copy(), anchor_on=self.anchor_on.copy(),
            n_collisions=self.n_collisions, time=self.time,
        )
        return c


def action_targets(model: BipedModel, action: np.ndarray) -> np.ndarray:
    """Joint-position targets for one action (constant across the substeps)."""
    return model.action_scale * action + model._nominal


def pd_torques(
    model: BipedModel,
    state: BipedState,
    action: np.ndarray,
    kp_scale: float,
    kd_scale: float,
    motor_strength: float,
    target: np.ndarray | None = None,
) -> np.ndarray:
    """Target-position PD control: torque toward scaled action + nominal pose."""
    if target is None:
        target = action_targets(model, action)
    tau = model._kp * kp_scale * (target - state.joint_pos) - model._kd * kd_scale * state.joint_vel
    tau *= motor_strength
    np.minimum(tau, model._tlim, out=tau)
    np.maximum(tau, -model._tlim, out=tau)
    return tau


def substep(
    model: BipedModel,
    state: BipedState,
    tau: np.ndarray,
    terrain,
    dt: float,
    friction: float,
    restitution: float,
    total_mass: float,
    com_shift: float,
    inertia_scale: float = 1.0,
) -> None:
    """One physics integration step (semi-implicit Euler), in place.

    Restitution softens the normal contact damping, letting touchdown keep a
    share of its vertical momentum; friction scales the tangential force cap.
    """
    # joints first: torque-driven servos (semi-implicit)
    qdd = (tau - model.joint_damping * state.joint_vel) / model.joint_inertia
    state.joint_vel += dt * qdd
    np.clip(state.joint_vel, -model.joint_vel_limit, model.joint_vel_limit, out=state.joint_vel)
    state.joint_pos += dt * state.joint_vel
    lo, hi = model._lower, model._upper
    below = state.joint_pos < lo
    above = state.joint_pos > hi
    if below.any() or above.any():
        # hard joint stops kill velocity into the limit
        state.joint_pos = np.clip(state.joint_pos, lo, hi)
        state.joint_vel[below & (state.joint_vel < 0)] = 0.0
        state.joint_vel[above & (state.joint_vel > 0)] = 0.0

    # scalar math below: this loop dominates the simulation profile
    q = state.joint_pos.tolist()
    qd = state.joint_vel.tolist()
    bx, bz = float(state.x), float(state.z)
    vx, vz = float(state.vx), float(state.vz)
    pitch, pr = float(state.pitch), float(state.pitch_rate)
    l1, l2, l3, fh = model.thigh_len, model.shin_len, model.foot_len, model.foot_half
    f_x = 0.0
    f_z = -total_mass * model.gravity
    torque = 0.0
    cosp = math.cos(pitch)
    com_x = bx + com_shift * cosp
    com_z = bz - com_shift * math.sin(pitch)
    dn = model.contact_dn * (1.0 - 0.85 * restitution)
    kn, kt, ct = model.contact_kn, model.contact_kt, model.contact_ct

    for side in (LEFT, RIGHT):
        q1, q2, q3 = q[3 * side], q[3 * side + 1], q[3 * side + 2]
        qd1, qd2, qd3 = qd[3 * side], qd[3 * side + 1], qd[3 * side + 2]
        a1 = pitch + q1
        a2 = a1 + q2
        a3 = a2 + q3
        s1, c1 = math.sin(a1), math.cos(a1)
        s2, c2 = math.sin(a2), math.cos(a2)
        s3, c3 = math.sin(a3), math.cos(a3)
        kx = bx + l1 * s1
        kz = bz - l1 * c1
        fx = kx + l2 * s2 + l3 * s3
        fz = kz - l2 * c2 - l3 * c3
        j02 = l3 * c3
        j12 = l3 * s3
        j01 = l2 * c2 + j02
        j11 = l2 * s2 + j12
        j00 = l1 * c1 + j01
        j10 = l1 * s1 + j11
        # foot-center velocity = base translation + pitch sweep + joint sweep
        vfx = vx + j00 * (pr + qd1) + j01 * qd2 + j02 * qd3
        vfz = vz + j10 * (pr + qd1) + j11 * qd2 + j12 * qd3
        state.foot_pos[side, 0] = fx
        state.foot_pos[side, 1] = fz
        state.foot_vel[side, 0] = vfx
        state.foot_vel[side, 1] = vfz
        state.knee_heights[side] = kz - (terrain.height_at(kx) if terrain is not None else 0.0)

        in_contact = False
        force_x = force_z = 0.0
        if terrain is not None:
            rate_sum = pr + qd1 + qd2 + qd3
            # heel and toe of the flat foot; the segment is horizontal at a3 = 0
            for pt, sgn in ((0, -1.0), (1, 1.0)):
                px = fx + sgn * fh * c3
                pz = fz + sgn * fh * s3
                if terrain.is_void(px):
                    state.anchor_on[side, pt] = False
                    continue
                pen = terrain.height_at(px) - pz
                if pen <= 0.0:
                    state.anchor_on[side, pt] = False
                    continue
                # the heel/toe offset swings with every angle in the chain
                vpx = vfx - sgn * fh * s3 * rate_sum
                vpz = vfz + sgn * fh * c3 * rate_sum
                ramp = min(pen / model.contact_damp_ramp, 1.0)
                fcz = kn * pen - dn * ramp * vpz
                if fcz <= 0.0:
                    state.anchor_on[side, pt] = False
                    continue
                fcz = min(fcz, model.contact_force_cap)
                # anchored tangential spring: stick until the friction cone slips
                if not state.anchor_on[side, pt]:
                    state.anchor_on[side, pt] = True
                    state.anchor_x[side, pt] = px
                fcx = -kt * (px - state.anchor_x[side, pt]) - ct * vpx
                cap = friction * fcz
                if fcx > cap:
                    fcx = cap
                    state.anchor_x[side, pt] = px + (fcx + ct * vpx) / kt
                elif fcx < -cap:
                    fcx = -cap
                    state.anchor_x[side, pt] = px + (fcx + ct * vpx) / kt
                in_contact = True
                force_x += fcx
                force_z += fcz
                f_x += fcx
                f_z += fcz
                torque += (px - com_x) * fcz - (pz - com_z) * fcx
        state.contact[side] = in_contact
        state.contact_force[side, 0] = force_x
        state.contact_force[side, 1] = force_z

    # base (semi-implicit: velocities first)
    torque -= model.base_rot_damping * pr
    vx += dt * f_x / total_mass
    vz += dt * f_z / total_mass
    pr += dt * torque / (model.base_inertia * inertia_scale)
    state.vx = vx
    state.vz = vz
    state.pitch_rate = pr
    state.x = bx + dt * vx
    state.z = bz + dt * vz
    state.pitch = pitch + dt * pr

    # yaw proxy: hip-torque asymmetry turns the robot while grounded
    grounded = bool(state.contact[0] or state.contact[1])
    yaw_tau = model.yaw_gain * float(tau[0] - tau[3]) * (1.0 if grounded else 0.0)
    yr = float(state.yaw_rate)
    yr += dt * (yaw_tau - model.yaw_damping * yr) / model.yaw_inertia
    state.yaw_rate = yr
    state.heading = float(state.heading) + dt * yr
    state.y_offset = float(state.y_offset) + dt * yr * vx * 0.5

    state.time += dt
