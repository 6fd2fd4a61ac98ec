"""Named experiment presets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kalman import StateSpaceModel


@dataclass(frozen=True, eq=False)
class Scenario:
    """A plant plus the defaults needed to run it.

    ``n`` is the integer bit count that covers the reachable state range and
    ``P0`` the covariance of the initial estimation error.
    """

    name: str
    model: StateSpaceModel
    P0: np.ndarray
    n: int
    N: int = 250


def tracking2d(sigma_x: float = 0.01, sigma_y: float = 10.0, dt: float = 1.0) -> Scenario:
    """Constant-velocity target observed through noisy position readings."""
    F = np.array([[1.0, dt], [0.0, 1.0]])
    H = np.array([[1.0, 0.0]])
    Q = np.eye(2) * sigma_x ** 2
    R = np.eye(1) * sigma_y ** 2
    model = StateSpaceModel(F, H, Q, R, name="tracking2d")
    return Scenario("tracking2d", model, P0=Q.copy(), n=8)


def shift20(c: int = 20, sigma_x: float = 0.01, sigma_y: float = 10.0) -> Scenario:
    """Cyclic shift register of ``c`` states, each observed directly."""
    F = np.roll(np.eye(c), 1, axis=0)
    model = StateSpaceModel(F, np.eye(c), np.eye(c) * sigma_x ** 2, np.eye(c) * sigma_y ** 2,
                            name=f"shift{c}")
    return Scenario(f"shift{c}" if c != 20 else "shift20", model, P0=np.eye(c), n=6)


PRESETS = {"tracking2d": tracking2d, "shift20": shift20}


def get_scenario(name: str) -> Scenario:
    try:
        return PRESETS[name]()
    except KeyError:
        raise KeyError(f"unknown scenario {name!r}; choose from {sorted(PRESETS)}") from None
