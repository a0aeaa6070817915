"""Physical constants in SI units; gyromagnetic ratios in rad/s/T."""

import math

TWO_PI = 2 * math.pi
HBAR = 1.054571817e-34  # J s
MU0 = 1.25663706212e-6  # T m / A

GAMMA_C13 = TWO_PI * 10.7084e6
GAMMA_E = TWO_PI * 28.024e9

DIAMOND_LATTICE_CONSTANT = 3.567e-10  # m
