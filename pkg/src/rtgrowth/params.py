"""Physical constants of the compressible flow problem."""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass(frozen=True)
class PhysParams:
    """Gravity, equation of state and viscosities.

    ``a = gamma - 1`` and ``mu0 = mu + lambda_v`` are derived, never set
    directly.  Validity: g > 0, gamma > 1, mu > 0 and 3*lambda_v + 2*mu >= 0.
    """

    g: float = 1.0
    gamma: float = 5.0 / 3.0
    mu: float = 0.1
    lambda_v: float = 0.1
    a: float = field(init=False)
    mu0: float = field(init=False)

    def __post_init__(self):
        if not self.g > 0:
            raise ValueError(f"g must be positive, got {self.g}")
        if not self.gamma > 1:
            raise ValueError(f"gamma must exceed 1, got {self.gamma}")
        if not self.mu > 0:
            raise ValueError(f"mu must be positive, got {self.mu}")
        if 3.0 * self.lambda_v + 2.0 * self.mu < 0:
            raise ValueError(
                f"need 3*lambda + 2*mu >= 0, got {3 * self.lambda_v + 2 * self.mu}"
            )
        object.__setattr__(self, "a", self.gamma - 1.0)
        object.__setattr__(self, "mu0", self.mu + self.lambda_v)
