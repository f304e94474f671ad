"""l-infinity evasion attacks (FGSM, PGD) and robust-accuracy evaluation.

Attacks work in raw pixel space: inputs and outputs are images in [0, 1],
and any normalisation lives inside the predictor. A predictor is anything
with ``logits(x)`` and ``input_gradient(x, y)``, where the latter is the
gradient of the mean cross-entropy of ``logits(x)`` w.r.t. ``x``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np


class Predictor(Protocol):
    def logits(self, x: np.ndarray) -> np.ndarray: ...

    def input_gradient(self, x: np.ndarray, y: np.ndarray) -> np.ndarray: ...


class AttackFamily(enum.Enum):
    NONE = "NONE"
    FGSM = "FGSM"
    PGD = "PGD"

    @classmethod
    def parse(cls, value: "str | AttackFamily") -> "AttackFamily":
        return value if isinstance(value, cls) else cls(str(value).upper())


@dataclass(frozen=True)
class AttackSpec:
    family: AttackFamily = AttackFamily.FGSM
    epsilon: float = 0.0
    alpha: float = 0.02
    steps: int = 2
    random_start: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "family", AttackFamily.parse(self.family))
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.family is AttackFamily.PGD:
            if not self.alpha > 0:
                raise ValueError(f"PGD step size must be > 0, got {self.alpha}")
            if self.steps < 1:
                raise ValueError(f"PGD needs at least one step, got {self.steps}")

    @property
    def is_noop(self) -> bool:
        return self.family is AttackFamily.NONE or self.epsilon == 0


def fgsm_perturbation(grad: np.ndarray, epsilon: float) -> np.ndarray:
    """``epsilon * sign(grad)`` with sign(0) = 0, in the dtype of ``grad``."""
    return np.sign(grad) * grad.dtype.type(epsilon)


def fgsm(predictor: Predictor, x: np.ndarray, y: np.ndarray, epsilon: float) -> np.ndarray:
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    delta = fgsm_perturbation(predictor.input_gradient(x, y), epsilon)
    return np.clip(x + delta, 0, 1)


def pgd(
    predictor: Predictor,
    x: np.ndarray,
    y: np.ndarray,
    spec: AttackSpec,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Signed-gradient ascent with projection onto the epsilon box.

    The perturbation is projected back to ``[-eps, eps]`` after every step;
    the result is clamped to [0, 1] once at the end.
    """
    if spec.family is not AttackFamily.PGD:
        raise ValueError(f"pgd called with a {spec.family.name} spec")
    eps = x.dtype.type(spec.epsilon)
    alpha = x.dtype.type(spec.alpha)
    if spec.random_start:
        rng = rng if rng is not None else np.random.default_rng(0)
        delta = rng.uniform(-spec.epsilon, spec.epsilon, size=x.shape).astype(x.dtype)
    else:
        delta = np.zeros_like(x)
    for _ in range(spec.steps):
        grad = predictor.input_gradient(x + delta, y)
        delta = np.clip(delta + alpha * np.sign(grad), -eps, eps)
    return np.clip(x + delta, 0, 1)


def attack(
    predictor: Predictor,
    x: np.ndarray,
    y: np.ndarray,
    spec: AttackSpec,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Dispatch on ``spec.family``; a no-op spec returns ``x`` itself."""
    if spec.is_noop:
        return x
    if spec.family is AttackFamily.FGSM:
        return fgsm(predictor, x, y, spec.epsilon)
    return pgd(predictor, x, y, spec, rng)


def predict(predictor: Predictor, x: np.ndarray) -> np.ndarray:
    """Class predictions; ``argmax`` breaks ties towards the lowest index."""
    return predictor.logits(x).argmax(axis=1)


def robust_accuracy(
    predictor: Predictor,
    images: np.ndarray,
    labels: np.ndarray,
    spec: AttackSpec,
    batch_size: int = 500,
    source: Predictor | None = None,
    rng: np.random.Generator | None = None,
    on_attack: Callable[[], None] | None = None,
) -> float:
    """Accuracy of ``predictor`` on inputs attacked under ``spec``.

    Adversarial batches are crafted against ``source`` (default: the
    predictor itself), which gives transfer evaluation when they differ.
    """
    n = len(labels)
    if n == 0:
        raise ValueError("robust_accuracy: empty evaluation split")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    source = predictor if source is None else source
    correct = 0
    for start in range(0, n, batch_size):
        xb = images[start:start + batch_size]
        yb = labels[start:start + batch_size]
        if not spec.is_noop:
            xb = attack(source, xb, yb, spec, rng)
            if on_attack is not None:
                on_attack()
        correct += int((predict(predictor, xb) == yb).sum())
    return correct / n
