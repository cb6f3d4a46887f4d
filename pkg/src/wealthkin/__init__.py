"""wealthkin: particle, kinetic and hydrodynamic solvers for a kinetic
wealth-distribution model with Gibbs/Nash equilibria."""

__version__ = "0.1.0"
