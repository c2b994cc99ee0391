"""Trajectory-diffusion planning toolkit: diffusion prior over robot
trajectory segments, reward-guided constrained sampling, interactive
reward-weighted finetuning, and an asynchronous receding-horizon executor,
exercised on a toy articulated-robot simulator."""

__version__ = "0.1.0"
