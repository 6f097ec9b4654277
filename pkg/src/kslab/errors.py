"""Exception types shared across the package."""

from __future__ import annotations


class DataError(ValueError):
    """Input field contains non-finite or otherwise unusable values."""


class NumericalFailureError(RuntimeError):
    """A time step produced NaN or meaningfully negative density.

    Carries the simulation time and step index at which the failure occurred
    so a run can be post-mortemed from the failure report alone.
    """

    def __init__(self, message: str, *, t: float | None = None, step: int | None = None):
        super().__init__(message)
        self.t = t
        self.step = step


class CollisionError(RuntimeError):
    """Two points fell below the minimum-separation guard.

    ``pair`` holds the offending indices, ``t`` the time of the rejected
    state and ``collapse_time`` the binary-collision extrapolation of when
    the pair distance reaches zero.
    """

    def __init__(
        self,
        message: str,
        *,
        pair: tuple[int, int] | None = None,
        t: float | None = None,
        collapse_time: float | None = None,
    ):
        super().__init__(message)
        self.pair = pair
        self.t = t
        self.collapse_time = collapse_time


class DetectionFailureError(RuntimeError):
    """Atom detection did not converge within the iteration budget."""


class SearchFailureError(RuntimeError):
    """Critical-point search did not reach the residual tolerance."""

    def __init__(self, message: str, *, residual: float | None = None):
        super().__init__(message)
        self.residual = residual
