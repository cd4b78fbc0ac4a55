"""Symmetrical-component transforms and three-value containers.

Sequence ordering is fixed as (zero, positive, negative) everywhere in this
package. Angles are radians internally; degrees appear only at I/O edges.
"""

from __future__ import annotations

import cmath
import enum
from dataclasses import dataclass

import numpy as np

from .errors import FrameError

# Rotation operator a = exp(j*2*pi/3), computed once at full double precision.
ALPHA = cmath.exp(2j * cmath.pi / 3)


class Frame(enum.Enum):
    PHASE = "phase"
    SEQUENCE = "sequence"


@dataclass(frozen=True)
class ComplexTriple:
    """Three complex values (voltage, power, or current) tagged with a frame.

    Phase frame orders components (a, b, c); sequence frame orders them
    (zero, positive, negative). The frame tag is immutable and arithmetic
    across frames raises ``FrameError``.
    """

    x1: complex
    x2: complex
    x3: complex
    frame: Frame

    def __post_init__(self):
        for v in (self.x1, self.x2, self.x3):
            c = complex(v)
            if not (cmath.isfinite(c)):
                raise ValueError(f"non-finite component in ComplexTriple: {v!r}")
        if not isinstance(self.frame, Frame):
            raise FrameError(f"frame must be a Frame enum, got {self.frame!r}")

    @classmethod
    def from_array(cls, arr, frame: Frame) -> "ComplexTriple":
        a = np.asarray(arr, dtype=complex).reshape(3)
        return cls(complex(a[0]), complex(a[1]), complex(a[2]), frame)

    @classmethod
    def balanced(cls, v: complex, frame: Frame = Frame.PHASE) -> "ComplexTriple":
        """Balanced positive-sequence set with phase-a value ``v``."""
        if frame is Frame.SEQUENCE:
            return cls(0j, complex(v), 0j, frame)
        return cls(complex(v), complex(v) * ALPHA**2, complex(v) * ALPHA, frame)

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.x2, self.x3], dtype=complex)

    def magnitudes(self) -> np.ndarray:
        return np.abs(self.as_array())

    def _check_frame(self, other: "ComplexTriple"):
        if self.frame is not other.frame:
            raise FrameError(
                f"cannot combine {self.frame.value}-frame and "
                f"{other.frame.value}-frame triples"
            )

    def __add__(self, other: "ComplexTriple") -> "ComplexTriple":
        self._check_frame(other)
        return ComplexTriple(
            self.x1 + other.x1, self.x2 + other.x2, self.x3 + other.x3, self.frame
        )

    def __sub__(self, other: "ComplexTriple") -> "ComplexTriple":
        self._check_frame(other)
        return ComplexTriple(
            self.x1 - other.x1, self.x2 - other.x2, self.x3 - other.x3, self.frame
        )

    def __mul__(self, k) -> "ComplexTriple":
        k = complex(k)
        return ComplexTriple(self.x1 * k, self.x2 * k, self.x3 * k, self.frame)

    __rmul__ = __mul__

    def __neg__(self) -> "ComplexTriple":
        return self * -1.0


def _build_matrices():
    a = ALPHA
    t = np.array(
        [[1, 1, 1], [1, a, a * a], [1, a * a, a]], dtype=complex
    ) / 3.0
    inv = np.array([[1, 1, 1], [1, a * a, a], [1, a, a * a]], dtype=complex)
    return t, inv


@dataclass(frozen=True)
class SequenceTransform:
    """The 1/3-scaled decomposition matrix T and its inverse A (T @ A = I)."""

    T: np.ndarray
    A: np.ndarray
    a: complex

    @classmethod
    def build(cls) -> "SequenceTransform":
        t, inv = _build_matrices()
        t.setflags(write=False)
        inv.setflags(write=False)
        return cls(T=t, A=inv, a=ALPHA)


TRANSFORM = SequenceTransform.build()


def phase_to_sequence(v: ComplexTriple) -> ComplexTriple:
    """Decompose a phase-frame triple into (zero, positive, negative)."""
    if v.frame is not Frame.PHASE:
        raise FrameError("phase_to_sequence expects a phase-frame triple")
    return ComplexTriple.from_array(TRANSFORM.T @ v.as_array(), Frame.SEQUENCE)


def sequence_to_phase(v: ComplexTriple) -> ComplexTriple:
    """Recompose (zero, positive, negative) into phase values (a, b, c)."""
    if v.frame is not Frame.SEQUENCE:
        raise FrameError("sequence_to_phase expects a sequence-frame triple")
    return ComplexTriple.from_array(TRANSFORM.A @ v.as_array(), Frame.PHASE)


def unbalance_percent(m: ComplexTriple) -> float:
    """Percent maximum deviation of component magnitudes from their mean.

    ANSI C84.1 definition, applicable to voltage or current magnitudes.
    """
    mags = m.magnitudes()
    mean = float(mags.mean())
    if mean <= 0.0:
        raise ValueError("unbalance undefined for zero mean magnitude")
    return 100.0 * float(np.max(np.abs(mags - mean))) / mean
