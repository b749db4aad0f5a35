"""Free-time action potentials, Busemann functions and fixed-shape slices
for the Newtonian N-body problem."""
__version__ = "0.1.0"
