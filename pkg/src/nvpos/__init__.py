"""Simulation and estimation toolkit for locating a single 13C nuclear spin
next to an NV center in three dimensions.

The package covers lab-frame two-spin dynamics under microwave and rf
control, synthetic measurement traces with photon shot noise,
Levenberg-Marquardt fits of the bias field and hyperfine azimuth, and
point-dipole inversion with diamond lattice-site assignment.
"""

__version__ = "0.1.0"
