"""Reward terms: locomotion set, gait-command-gated set, and composition.

Each term returns its raw (unweighted) value; weights live in the config so
logs can carry both.  Stage 1 enables only the locomotion set; stage 2 adds
the adversarial style reward (computed in :mod:`gaitrl.amp`) and the gait
terms, both routed by the active gait command.

Two rows are published with literal positive weights on error/spread
expressions (squat height, feet distance).  Applied literally they pay the
agent for being wrong, so the default evaluates them with the evident
penalty/bonus intent; ``literal_signs=True`` switches to the published
reading.  Termination-style rows with no planar quantity (lateral foot
spread uses fore/aft separation, posture deviation uses the ankles instead
of arms) are evaluated on the documented stand-ins and can be masked off.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .biped import BipedState
from .env import CommandState

GAIT_WALK_RUN = 0
GAIT_HIGH_KNEES = 1
GAIT_SQUAT = 2

DEFAULT_WEIGHTS = {
    "track_lin_vel": 2.0,
    "track_ang_vel": 2.0,
    "joint_acc": -5e-7,
    "joint_vel": -1e-3,
    "action_rate": -0.03,
    "action_smoothness": -0.05,
    "ang_vel_pitch": -0.05,
    "joint_power": -2.5e-5,
    "feet_stumble": -1.0,
    "posture_deviation": -0.5,
    "joint_pos_limits": -2.0,
    "joint_vel_limits": -1.0,
    "torque_limits": -1.0,
    "feet_distance": 0.5,
    "feet_slippage": -0.25,
    "feet_force": -2.5e-4,
    "collision": -15.0,
    "stuck": -1.0,
    "cheat": -2.0,
    "y_offset": -2.0,
    "knee_height": 2.0,
    "squat_height": 2.0,
}

STYLE_WEIGHT = 5.0

LOCOMOTION_TERMS = tuple(k for k in DEFAULT_WEIGHTS if k not in ("knee_height", "squat_height"))
GAIT_TERMS = ("knee_height", "squat_height")


@dataclass
class RewardConfig:
    weights: dict = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))
    enabled: dict = field(default_factory=dict)  # per-term mask, default all on
    style_weight: float = STYLE_WEIGHT
    tracking_sigma: float = 0.25
    gait_sigma: float = 0.25
    knee_lift_target: float = 0.58
    squat_height_target: float = 0.68
    f_min_force: float = 90.0  # N, ~1.5x standing weight per foot
    d_min_feet: float = 0.18  # m, fore/aft separation floor
    heading_limit: float = 1.0  # rad
    stuck_v: float = 0.1
    stuck_cmd: float = 0.2
    # floor the per-step total at zero for the learner (a net-negative step
    # income otherwise makes early termination the optimal policy); the
    # logged breakdown always keeps the exact signed sum
    only_positive_total: bool = True
    soft_limit_frac: float = 0.9
    joint_vel_soft: float = 12.0  # rad/s
    torque_soft_frac: float = 0.9
    literal_signs: bool = False
    posture_joints: tuple = (2, 5)  # ankles stand in for the arm-deviation row

    def weight(self, name: str) -> float:
        return self.weights.get(name, 0.0)

    def is_enabled(self, name: str) -> bool:
        return self.enabled.get(name, True)


@dataclass
class RewardBreakdown:
    raw: dict = field(default_factory=dict)
    weighted: dict = field(default_factory=dict)
    r_l: float = 0.0
    r_s: float = 0.0
    r_g: float = 0.0
    total: float = 0.0

    def merge(self, other: "RewardBreakdown") -> None:
        self.raw.update(other.raw)
        self.weighted.update(other.weighted)


# -- locomotion terms ---------------------------------------------------------


def _limit_arrays(cfg: RewardConfig, model):
    # per-(config, model) cache; both are long-lived in a training run
    key = id(model)
    cached = getattr(cfg, "_limit_cache", None)
    if cached is not None and cached[0] == key:
        return cached[1:]
    lower, upper = model.lower(), model.upper()
    mid = 0.5 * (lower + upper)
    half = 0.5 * (upper - lower) * cfg.soft_limit_frac
    soft_lo, soft_hi = mid - half, mid + half
    tmax = np.asarray(model.torque_limit) * cfg.torque_soft_frac
    nominal = model.nominal()
    cfg._limit_cache = (key, soft_lo, soft_hi, tmax, nominal)
    return soft_lo, soft_hi, tmax, nominal


def locomotion_rewards(
    state: BipedState,
    commands: CommandState,
    a_t: np.ndarray,
    a_prev: np.ndarray,
    a_prev2: np.ndarray,
    dt: float,
    cfg: RewardConfig,
    model,
) -> RewardBreakdown:
    """Evaluate every locomotion-table row on the post-step state."""
    soft_lo, soft_hi, tmax, nominal = _limit_arrays(cfg, model)
    st = state
    jv = st.joint_vel
    jt = st.joint_torque
    jp = st.joint_pos
    abs_jv = np.abs(jv)
    abs_jt = np.abs(jt)
    d1 = a_t - a_prev
    d2 = d1 - (a_prev - a_prev2)
    verr = commands.v_cmd - st.vx
    werr = commands.w_cmd - st.yaw_rate
    f = st.contact_force
    stumble = float(
        (st.contact[0] and abs(f[0, 0]) >= 3.0 * abs(f[0, 1]))
        or (st.contact[1] and abs(f[1, 0]) >= 3.0 * abs(f[1, 1]))
    )
    out = np.maximum(soft_lo - jp, 0.0)
    out += np.maximum(jp - soft_hi, 0.0)
    sep = abs(st.foot_pos[0, 0] - st.foot_pos[1, 0])
    slip = float(
        st.contact[0] * math.hypot(st.foot_vel[0, 0], st.foot_vel[0, 1])
        + st.contact[1] * math.hypot(st.foot_vel[1, 0], st.foot_vel[1, 1])
    )
    raw = {
        "track_lin_vel": math.exp(-(verr * verr) / cfg.tracking_sigma),
        "track_ang_vel": math.exp(-(werr * werr) / cfg.tracking_sigma),
        # sequential sums rather than BLAS dots: the acceptance bar holds these
        # to 1e-12 absolute against a plain re-evaluation loop
        "joint_acc": float(np.sum(st.joint_acc * st.joint_acc)),
        "joint_vel": float(np.sum(jv * jv)),
        "action_rate": float(np.sum(d1 * d1)),
        "action_smoothness": float(np.sum(d2 * d2)),
        "ang_vel_pitch": st.pitch_rate * st.pitch_rate,
        "joint_power": float(np.sum(abs_jt * abs_jv)),
        "feet_stumble": stumble,
        "posture_deviation": float(
            sum(abs(jp[j] - nominal[j]) for j in cfg.posture_joints)
        ),
        "joint_pos_limits": float(out.sum()),
        "joint_vel_limits": float(np.maximum(abs_jv - cfg.joint_vel_soft, 0.0).sum()),
        "torque_limits": float(np.maximum(abs_jt - tmax, 0.0).sum()),
        "feet_distance": (sep - cfg.d_min_feet)
        if cfg.literal_signs
        else -max(cfg.d_min_feet - sep, 0.0),
        "feet_slippage": slip,
        "feet_force": float(
            max(f[0, 1] - cfg.f_min_force, 0.0) + max(f[1, 1] - cfg.f_min_force, 0.0)
        ),
        "collision": float(st.n_collisions),
        "stuck": float(
            abs(st.vx) <= cfg.stuck_v
            and math.hypot(commands.v_cmd, commands.w_cmd) >= cfg.stuck_cmd
        ),
        "cheat": float(abs(st.heading) > cfg.heading_limit),
        "y_offset": abs(st.y_offset),
    }
    bd = RewardBreakdown()
    weights = cfg.weights
    enabled = cfg.enabled
    total = 0.0
    for name, value in raw.items():
        if not enabled.get(name, True):
            continue
        bd.raw[name] = value
        wv = weights.get(name, 0.0) * value
        bd.weighted[name] = wv
        total += wv
    bd.r_l = total
    return bd


# -- gait terms ---------------------------------------------------------------


def gait_rewards(
    state: BipedState, gait: np.ndarray, cfg: RewardConfig
) -> RewardBreakdown:
    """Gait-command-routed terms; non-commanded gaits contribute exactly zero."""
    bd = RewardBreakdown()
    active = int(np.argmax(gait)) if np.any(gait) else -1

    knee = 0.0
    if active == GAIT_HIGH_KNEES and cfg.is_enabled("knee_height"):
        err = abs(cfg.knee_lift_target - float(np.max(state.knee_heights)))
        knee = float(np.exp(-err / cfg.gait_sigma))
    bd.raw["knee_height"] = knee
    bd.weighted["knee_height"] = cfg.weight("knee_height") * knee

    squat = 0.0
    if active == GAIT_SQUAT and cfg.is_enabled("squat_height"):
        base_height = state.z - min(state.foot_pos[0, 1], state.foot_pos[1, 1])
        squat = (cfg.squat_height_target - base_height) ** 2
        if not cfg.literal_signs:
            squat = -squat  # published +2.0 on a squared error reads as a penalty
    bd.raw["squat_height"] = squat
    bd.weighted["squat_height"] = cfg.weight("squat_height") * squat

    bd.r_g = sum(bd.weighted.values())
    return bd


def total_reward(
    loco: RewardBreakdown,
    style_raw: float,
    gait_bd: RewardBreakdown,
    stage: int,
    cfg: RewardConfig,
) -> RewardBreakdown:
    """Compose the stage-masked total; per-term logging is preserved."""
    bd = RewardBreakdown()
    bd.merge(loco)
    bd.r_l = loco.r_l
    if stage >= 2:
        bd.merge(gait_bd)
        bd.r_g = gait_bd.r_g
        bd.raw["style"] = style_raw
        bd.weighted["style"] = cfg.style_weight * style_raw
        bd.r_s = bd.weighted["style"]
    else:
        bd.r_s = 0.0
        bd.r_g = 0.0
    bd.total = bd.r_l + bd.r_s + bd.r_g
    return bd
