"""How the CBF-QP filter reshapes a proposed CAV acceleration.

Places the CAV 6 m behind a slower predecessor and sweeps the policy's
proposal. Shows the filtered command, which constraints are active and
the sensitivities the PPO update uses.

    python3 demos/filter_walkthrough.py
"""
import numpy as np

from safeplatoon.safety_layer import SafetyParams, cbf_values, safe_action
from safeplatoon.vehicle_dynamics import PlatoonConfig, PlatoonState, hdv_accelerations

ROWS = ("cav", "veh4", "veh5", "feasible", "a_max", "a_min")


def main():
    pc = PlatoonConfig()
    x = PlatoonState.equilibrium(pc)
    i = pc.cav_index
    x.s[i - 1], x.v[i - 1], x.v[i - 2] = 6.0, 16.0, 15.0  # tight gap, closing on the car ahead
    params = SafetyParams.for_config(pc)
    f_hat = dict(hdv_accelerations(x, pc))
    h_cav, h_f = cbf_values(x, pc, params.tau)
    print(f"h_cav {h_cav:.2f}  follower barriers {np.round(h_f, 2)}")
    print(f"{'u_rl':>6} {'u_final':>8} {'du/du_rl':>9}  active")
    for u_rl in np.linspace(-6, 4, 11):
        r = safe_action(x, pc, float(u_rl), params, f_hat)
        act = ",".join(ROWS[k] for k in r.active_constraints) or "-"
        print(f"{u_rl:6.2f} {r.u_final:8.3f} {r.du_final_du_rl:9.3f}  {act}")
    r = safe_action(x, pc, 2.0, params, f_hat)
    print("d u_final / d [k_cav, k_4, k_5, k_f] at u_rl=2:", np.round(r.du_final_dk, 4))


if __name__ == "__main__":
    main()
