"""The three control experiments: double slit, robotic arm, stochastic optimization."""

from impsamp.problems import double_slit, robot_arm, stochastic_opt

__all__ = ["double_slit", "robot_arm", "stochastic_opt"]
