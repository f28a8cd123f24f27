"""
Tetrahedral mesh kernel: predicates, Delaunay, atomistic/continuum meshing, adaptation, transfer.
"""
