"""Sequential adaptive subsampling of a pose trajectory.

Walking the trajectory, travelled distance and absolute heading change are
accumulated since the last kept frame. A frame is kept as soon as either
accumulator reaches its threshold, and then both reset to zero. The first
frame is always kept.
"""

import csv
import math
from dataclasses import dataclass

# guards threshold comparisons against rounding in accumulated sums
_REL_TOL = 1e-9


@dataclass
class PoseRecord:
    frame_index: int
    x: float
    y: float
    yaw: float
    timestamp: float = 0.0


@dataclass
class SamplerConfig:
    tau_d_acc: float = 5.0
    tau_theta_acc: float = math.radians(15.0)

    def __post_init__(self):
        if not (self.tau_d_acc > 0 and self.tau_theta_acc > 0):
            raise ValueError("sampling thresholds must be strictly positive")


def wrap_angle(a):
    """Map to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2 * math.pi)
    if a <= 0:
        a += 2 * math.pi
    return a - math.pi


def _reached(acc, tau):
    return acc >= tau * (1 - _REL_TOL)


def adaptive_subsample(poses, config: SamplerConfig = None):
    """Frame indices of the kept poses, in order."""
    config = config or SamplerConfig()
    poses = list(poses)
    if not poses:
        raise ValueError("adaptive_subsample: no poses")
    for a, b in zip(poses, poses[1:]):
        if b.frame_index <= a.frame_index:
            raise ValueError(f"frame indices not strictly increasing at {a.frame_index} -> {b.frame_index}")
    selected = [poses[0].frame_index]
    dist = turn = 0.0
    prev = poses[0]
    for pose in poses[1:]:
        dist += math.hypot(pose.x - prev.x, pose.y - prev.y)
        turn += abs(wrap_angle(pose.yaw - prev.yaw))
        prev = pose
        if _reached(dist, config.tau_d_acc) or _reached(turn, config.tau_theta_acc):
            selected.append(pose.frame_index)
            dist = turn = 0.0
    return selected


def read_pose_csv(path, yaw_degrees=False):
    """Header ``frame,timestamp,x,y,yaw``; yaw in radians unless ``yaw_degrees``."""
    poses = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"frame", "x", "y", "yaw"} - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: pose CSV missing columns {sorted(missing)}")
        for row in reader:
            yaw = float(row["yaw"])
            poses.append(PoseRecord(
                frame_index=int(row["frame"]),
                x=float(row["x"]),
                y=float(row["y"]),
                yaw=math.radians(yaw) if yaw_degrees else yaw,
                timestamp=float(row.get("timestamp") or 0.0),
            ))
    return poses
