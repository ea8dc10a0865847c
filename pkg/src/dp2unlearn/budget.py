"""Privacy budget record shared by the DP-SGD and DP-MLM mechanisms.

Accounting is naive sequential composition: epsilons and deltas add across
applications of a mechanism to the same data.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .errors import ConfigurationError


class Mechanism(Enum):
    DP_SGD = "DpSgd"
    DP_MLM = "DpMlm"


@dataclass(frozen=True)
class PrivacyBudget:
    mechanism: Mechanism
    epsilon: float
    delta: float
    composed_steps: int
    composed_epsilon: float
    composed_delta: float

    def __post_init__(self):
        if self.composed_steps < 0:
            raise ConfigurationError("composed_steps must be >= 0")
        if abs(self.composed_epsilon - self.composed_steps * self.epsilon) > 1e-9 * max(
            1.0, abs(self.composed_epsilon)
        ):
            raise ConfigurationError("composed_epsilon must equal steps * epsilon")
        if abs(self.composed_delta - self.composed_steps * self.delta) > 1e-12:
            raise ConfigurationError("composed_delta must equal steps * delta")

    @classmethod
    def compose(cls, mechanism: Mechanism, epsilon: float, delta: float,
                steps: int) -> "PrivacyBudget":
        return cls(mechanism=mechanism, epsilon=epsilon, delta=delta,
                   composed_steps=steps, composed_epsilon=steps * epsilon,
                   composed_delta=steps * delta)

    def to_dict(self) -> dict:
        return {
            "mechanism": self.mechanism.value,
            "epsilon": self.epsilon,
            "delta": self.delta,
            "composed_steps": self.composed_steps,
            "composed_epsilon": self.composed_epsilon,
            "composed_delta": self.composed_delta,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PrivacyBudget":
        return cls(
            mechanism=Mechanism(doc["mechanism"]),
            epsilon=doc["epsilon"],
            delta=doc["delta"],
            composed_steps=doc["composed_steps"],
            composed_epsilon=doc["composed_epsilon"],
            composed_delta=doc["composed_delta"],
        )
