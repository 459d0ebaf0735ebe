"""Receding-horizon planner with a committed safe backup trajectory.

The package couples a sliding occupancy grid, a 3-D jump point search
global planner, ellipsoid-seeded convex corridors, a dense QP / branch
and bound MIQP solver, and jerk-spline local trajectories into a
replanning loop that only ever commits to motion ending at rest inside
known-free space.  A deterministic simulator and a batch CLI sit on top.
"""

from .mapping import DepthScan, SlidingGrid, VoxelState
from .traj import JerkSpline, Limits, State

__all__ = [
    "DepthScan",
    "SlidingGrid",
    "VoxelState",
    "JerkSpline",
    "Limits",
    "State",
]

__version__ = "0.1.0"
