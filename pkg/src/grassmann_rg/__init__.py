"""grassmann_rg: desk-scale lattice fermion engine.

Builds finite Grassmann-integral formulations of multi-band lattice fermion
free energies, runs the frequency-UV and infrared multi-scale flows, and
checks the numerically testable statements against exact Fock-space and
brute-force references.
"""

__version__ = "0.1.0"
