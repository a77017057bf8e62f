"""Stochastic variational toolkit for incompressible Navier-Stokes on the 2-torus.

The package evolves stochastic Lagrangian flows driven by a Navier-Stokes
velocity field, evaluates the pressure-constrained action of such flows and
its Gateaux derivatives, checks conservation-law residuals along the flow,
and integrates the transport-noise stochastic momentum equation, all on a
pseudo-spectral periodic grid with reproducible counter-based noise.
"""

__version__ = "0.1.0"
