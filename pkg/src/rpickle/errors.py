"""Exception types shared across the package.

``ValueError`` (and :class:`ConfigError`) signal bad inputs or configuration;
subclasses of :class:`NumericalError` signal failures of the numerics on valid
inputs.  The command-line driver maps the former to exit code 1 and the latter
to exit code 2.
"""

from __future__ import annotations


class ConfigError(ValueError):
    """Invalid configuration or input data; message names the offending field."""


class NumericalError(RuntimeError):
    """Base class for numerical failures (solvers, conditioning, sampling)."""


class SingularSystemError(NumericalError):
    """The forward problem has no Dirichlet face and is singular up to a constant."""


class SolveConvergenceError(NumericalError):
    """A linear or nonlinear solve stopped above its residual tolerance."""


class IllConditionedError(NumericalError):
    """A conditioning matrix is too ill-conditioned to factor reliably."""


class NonPsdHessianError(NumericalError):
    """A Hessian expected to be positive definite has a nonpositive eigenvalue."""


class EnsembleFailureError(NumericalError):
    """Too many ensemble members failed to converge for moments to be trusted."""
