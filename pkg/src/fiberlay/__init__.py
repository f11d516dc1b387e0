"""Numerical laboratory for the fiber lay-down model.

Modules
-------
model    potentials, model parameters, equilibrium, hypothesis checks
sde      Euler-Maruyama particle simulation and histogram diagnostics
grid     phase-space grid, discrete operators and the Fokker-Planck solver
hypo     discrete hypocoercivity machinery and the theoretical rate chain
rates    decay-rate fitting and the sweep over the noise amplitude
cli      command-line runner
"""
__version__ = "0.1.0"
