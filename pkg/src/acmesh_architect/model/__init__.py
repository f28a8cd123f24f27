"""
Lattice, site potentials, coupled energies, optimizer and error estimator.
"""
