"""Drive the simulated robot through a short action sequence with the 10 Hz PD loop."""
import math

from dualanchor.bridge import RobotState, execute_sequence
from dualanchor.worldsim import NavAction, wrap_angle

F, L, R = NavAction.MOVE_FORWARD, NavAction.TURN_LEFT, NavAction.TURN_RIGHT
seq = [F, F, L, L, F, F, F, R, F, F, R, R, F, F, L, F, F, F, F, F]
execs, ratio = execute_sequence(RobotState(0.0, 0.0, 0.0), seq)

for a, ex in zip(seq, execs):
    s = ex.final
    peak = max((abs(c.linear) for c in ex.commands), default=0.0)
    print(f"{a.name:13s} ticks={len(ex.commands):3d}  pose=({s.x:6.3f}, {s.y:6.3f}, "
          f"{math.degrees(wrap_angle(s.heading)):6.1f} deg)  peak v={peak:.2f} m/s")
print(f"tracking error {100 * ratio:.2f}% of path length")
