"""Work-zone merge simulator: microscopic motorway traffic with a
game-theoretic lane-change planner and surrogate-safety metrics."""

from wzmerge.core import (
    AutomationLevel,
    LaneGeometry,
    Manoeuvre,
    Trajectory,
    VehicleState,
    arc_position,
    build_straight_network,
    lateral_offset,
    longitudinal_gap,
    smoothstep,
)

__version__ = "0.1.0"
