"""Safe reinforcement learning for a mixed-autonomy platoon.

One connected automated vehicle (CAV) drives among human-driven vehicles
(HDVs) that follow an optimal-velocity car-following law. A PPO policy
proposes the CAV acceleration and a differentiable CBF-QP filter corrects
it, using learned models of the neighbouring drivers.
"""
__version__ = "0.1.0"
