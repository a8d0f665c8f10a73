"""
Dynamic Deviation - g-deviation measures and equilibrium mean-deviation portfolios

Components:
- jumps: finite-activity Levy measures and compound Poisson sampling
- drivers: driver functions g(h, h~) and randomized axiom checks
- deviation: D_t of representing pairs, the dyadic CVaR deviation and its mesh limit
- market: jump-diffusion market, deterministic policies, exact wealth simulation
- equilibrium: boundary maximisation, a_-, the a* fixed point, closed forms, HJB residuals
- validate: Monte Carlo objective checks and perturbation tests
- cli: config-driven command-line runner
"""

__version__ = "0.1.0"
