"""adaptctl: learned basis-function dynamics models and amortized
predictive control for families of parametric dynamical systems."""

__version__ = "0.1.0"
