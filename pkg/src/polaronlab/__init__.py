"""Numerical laboratory for impurity dynamics in a dense Fermi gas.

Subpackages cover the momentum lattice, interaction profiles, the
fermion-mediated pair potential, effective n-impurity propagation,
truncated Fock-space dynamics, scaling-bound functionals, and the
experiment harness.
"""

__version__ = "0.1.0"
