"""flowbeam: subsonic potential flow coupled to a clamped-free nonlinear beam.

Modules
-------
beam         clamped-free beam operators, quasilinear force, integrators
flow         half-plane convected-wave field, wake condition, sponge layers
elliptic     mixed Dirichlet/Neumann solves, transport antiderivative, resolvent
coupled      monolithic generator, dissipativity probe, coupled stepping,
             regularized fixed-point machinery, parameter sweeps
diagnostics  energy ledgers, negative-order trace norms, blow-up envelope fits
cli          configuration parsing and the command-line scenarios
"""

__version__ = "0.1.0"
