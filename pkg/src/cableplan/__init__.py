"""Trajectory planning for a cable-suspended rigid payload carried by a
team of quadrotors: polytope collision certificates, discrete exponential
barrier constraints, and a receding-horizon nonlinear program."""

__version__ = "0.1.0"
