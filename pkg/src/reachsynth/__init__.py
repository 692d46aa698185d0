"""Reachset-conformant disturbance identification and reachability-based control synthesis."""

__version__ = "0.1.0"

from .sets import Interval, Polytope, Zonotope  # noqa: F401
from .systems import LtiSystem, TestCase, TestSuite, discretize  # noqa: F401
