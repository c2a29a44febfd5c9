"""Finite-element solver for coupled free-flow / dual-porosity Darcy systems.

The conduit carries incompressible Navier-Stokes flow discretized with the
MINI element and a modified-characteristics treatment of convection; the
porous block carries two mixed Darcy systems (microfracture and matrix)
discretized with BDM1/P0.  The three subproblems are decoupled by lagged
interface data, stabilized with a Nitsche-type penalty, and advanced with
nested time steps (small steps in the conduit, large in the porous block).
"""

__version__ = "0.1.0"
