"""Topology optimisation on adaptively refined quadtree meshes.

Mesh refinement and coarsening is driven by discrete configurational forces
(Eshelby stress), filtered density, or von Mises stress.
"""

__version__ = "0.1.0"
