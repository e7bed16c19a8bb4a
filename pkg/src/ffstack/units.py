"""Unit system: eV, Angstrom, fs, amu.

All public APIs take and return quantities in these units. The only
conversion constant needed internally is the one turning eV/(amu*A) force
terms into A/fs^2 accelerations.
"""

# Boltzmann constant, eV/K
KB = 8.617333262e-5

# 1 eV expressed in amu*A^2/fs^2 (e / amu * 1e-5, CODATA 2018 values).
# Used to convert potential-derived quantities into dynamical units:
#   a [A/fs^2] = F [eV/A] / m [amu] * EV_PER_DYN
EV_PER_DYN = 9.648533215665328e-3
