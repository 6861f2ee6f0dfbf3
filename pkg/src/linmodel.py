"""
Linearized Model - Upright Equilibrium
Implements: state-space matrices, transfer functions, poles, eigenvalues and
the characteristic polynomial for small deviations phi = theta - pi.

State order everywhere in this module: (x, x_dot, phi, phi_dot).
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple, Union

import control as ctrl
import numpy as np

from .errors import InputDomainError
from .plant import ForceCommand, PlantParams, PlantState

logger = logging.getLogger(__name__)

STATE_LABELS = ("x", "x_dot", "phi", "phi_dot")
RESIDUAL_TOL = 1e-8


@dataclass(frozen=True)
class LinState:
    x: float = 0.0
    x_dot: float = 0.0
    phi: float = 0.0
    phi_dot: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.x_dot, self.phi, self.phi_dot], dtype=float)

    @classmethod
    def from_array(cls, v) -> "LinState":
        return cls(*(float(c) for c in v))

    @classmethod
    def from_plant(cls, state: PlantState) -> "LinState":
        return cls(state.x, state.x_dot, state.phi, state.theta_dot)


@dataclass(frozen=True)
class StateSpaceModel:
    """
    Linear model  d/dt s = A s + B u,  y = C s + D u

    q is the common denominator (M+m)(I+ml^2) - (ml)^2.
    """
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    q: float
    outputs: Tuple[str, ...] = ("x", "phi")

    def to_dict(self) -> Dict:
        return {
            "A": self.A.tolist(),
            "B": self.B.tolist(),
            "C": self.C.tolist(),
            "D": self.D.tolist(),
            "q": self.q,
            "outputs": list(self.outputs),
        }

    def to_ss(self) -> ctrl.StateSpace:
        return ctrl.ss(self.A, np.reshape(self.B, (-1, 1)), self.C, self.D)


@dataclass(frozen=True)
class TransferFunction:
    """
    Rational function num(s)/den(s), coefficients in descending powers of s

    The denominator is normalized to a leading 1 on construction.
    """
    num: Tuple[float, ...]
    den: Tuple[float, ...]
    units: str = ""

    def __post_init__(self):
        num = tuple(float(c) for c in self.num)
        den = tuple(float(c) for c in self.den)
        while len(den) > 1 and den[0] == 0.0:
            den = den[1:]
        if not den or den[0] == 0.0:
            raise InputDomainError("denominator is identically zero")
        lead = den[0]
        object.__setattr__(self, "num", tuple(c / lead for c in num))
        object.__setattr__(self, "den", tuple(c / lead for c in den))

    @property
    def order(self) -> int:
        return len(self.den) - 1

    def to_tf(self) -> ctrl.TransferFunction:
        """The same rational function as a python-control object, no reduction applied"""
        return ctrl.tf(list(self.num), list(self.den))

    def to_dict(self) -> Dict:
        return {"num": list(self.num), "den": list(self.den), "units": self.units}


def q_factor(params: PlantParams) -> float:
    """(M+m)(I+ml^2) - (ml)^2"""
    return params.q


def q_factor_expanded(params: PlantParams) -> float:
    """The same quantity written as I(M+m) + M m l^2"""
    p = params
    return p.I * (p.M + p.m) + p.M * p.m * p.l ** 2


_OUTPUT_ROWS = {name: i for i, name in enumerate(STATE_LABELS)}


def linearize(params: PlantParams, outputs: Sequence[str] = ("x", "phi")) -> StateSpaceModel:
    """
    Linear model about theta = pi

    Solving the two linearized equations of motion for (xdd, phidd):
        xdd   = [-(I+ml^2) b xd + m^2 l^2 g phi + (I+ml^2) u] / q
        phidd = [-ml b xd + mgl (M+m) phi + ml u] / q

    Args:
        outputs: state names selected by C, default (x, phi)
    """
    p = params
    q = p.q
    ml = p.m * p.l
    j = p.I + ml * p.l

    A = np.zeros((4, 4))
    A[0, 1] = 1.0
    A[1, 1] = -j * p.b / q
    A[1, 2] = ml * ml * p.g / q
    A[2, 3] = 1.0
    A[3, 1] = -ml * p.b / q
    A[3, 2] = ml * p.g * (p.M + p.m) / q

    B = np.array([0.0, j / q, 0.0, ml / q])

    try:
        C = np.array([np.eye(4)[_OUTPUT_ROWS[name]] for name in outputs])
    except KeyError as e:
        raise InputDomainError(f"unknown output {e.args[0]!r}; choose from {STATE_LABELS}")
    D = np.zeros((len(outputs), 1))
    return StateSpaceModel(A=A, B=B, C=C, D=D, q=q, outputs=tuple(outputs))


def linear_deriv(model: StateSpaceModel, state: LinState,
                 u: Union[ForceCommand, float]) -> LinState:
    """A s + B u, returned with the same field layout as the state"""
    force = u.force if isinstance(u, ForceCommand) else float(u)
    return LinState.from_array(model.A @ state.as_array() + model.B * force)


def _cancel_origin(num: List[float], den: List[float]) -> Tuple[List[float], List[float]]:
    # strip common factors of s while both polynomials end in an exact zero
    while len(num) > 1 and len(den) > 1 and num[-1] == 0.0 and den[-1] == 0.0:
        num, den = num[:-1], den[:-1]
    return num, den


def _quartic(params: PlantParams) -> List[float]:
    p = params
    q = p.q
    ml = p.m * p.l
    j = p.I + ml * p.l
    mgl = ml * p.g
    return [1.0, p.b * j / q, -(p.M + p.m) * mgl / q, -p.b * mgl / q, 0.0]


def tf_pendulum(params: PlantParams) -> TransferFunction:
    """
    Phi(s)/U(s) in rad/N

    The fourth-order form (ml/q) s^2 / (s^4 + ... + c s) carries a pole and a
    zero at the origin; they are cancelled. With b = 0 a second pair cancels.
    """
    p = params
    num = [p.m * p.l / p.q, 0.0, 0.0]
    num, den = _cancel_origin(num, _quartic(params))
    return TransferFunction(num=tuple(num), den=tuple(den), units="rad/N")


def tf_cart(params: PlantParams) -> TransferFunction:
    """X(s)/U(s) in m/N over the un-cancelled quartic"""
    p = params
    ml = p.m * p.l
    num = [(p.I + ml * p.l) / p.q, 0.0, -ml * p.g / p.q]
    return TransferFunction(num=tuple(num), den=tuple(_quartic(params)), units="m/N")


def _residual_scale(coeffs: Sequence[float], r: complex) -> float:
    deg = len(coeffs) - 1
    return sum(abs(c) for c in coeffs) * max(1.0, abs(r)) ** deg


def poles(tf: TransferFunction) -> List[complex]:
    """Roots of the denominator (companion-matrix eigenvalues), residual checked"""
    if tf.order < 1:
        raise InputDomainError("denominator has degree 0, there are no poles")
    roots = np.roots(tf.den)
    for r in roots:
        res = abs(np.polyval(tf.den, r))
        if res > RESIDUAL_TOL * _residual_scale(tf.den, r):
            logger.warning("pole %s has residual %.3e", r, res)
    return [complex(r) for r in roots]


def char_poly(model: StateSpaceModel) -> List[float]:
    """
    Monic characteristic polynomial of A by Faddeev-LeVerrier

    Returns:
        [1, c_{n-1}, ..., c_0] for det(lambda I - A)
    """
    A = np.asarray(model.A, dtype=float)
    n = A.shape[0]
    coeffs = [1.0]
    Mk = np.zeros_like(A)
    c = 1.0
    for k in range(1, n + 1):
        Mk = A @ Mk + c * np.eye(n)
        c = -np.trace(A @ Mk) / k
        coeffs.append(float(c))
    return coeffs


def eigenvalues(model: StateSpaceModel) -> List[complex]:
    """Poles of the state-space system, each checked against det(A - lambda I)"""
    A = np.asarray(model.A, dtype=float)
    lams = ctrl.poles(model.to_ss())
    cp = char_poly(model)
    for lam in lams:
        res = abs(np.linalg.det(A - lam * np.eye(A.shape[0])))
        if res > RESIDUAL_TOL * _residual_scale(cp, lam):
            logger.warning("eigenvalue %s has residual %.3e", lam, res)
    return [complex(v) for v in lams]


def _complex_list(values: Sequence[complex]) -> List[Dict[str, float]]:
    return [{"re": float(v.real), "im": float(v.imag)} for v in values]


def model_report(params: PlantParams, outputs: Sequence[str] = ("x", "phi")) -> Dict:
    """Everything the `model` subcommand prints, as plain JSON types"""
    ss = linearize(params, outputs)
    pend = tf_pendulum(params)
    cart = tf_cart(params)
    report = ss.to_dict()
    report.update({
        "q_alt": q_factor_expanded(params),
        "char_poly": char_poly(ss),
        "tf_pendulum": pend.to_dict(),
        "tf_cart": cart.to_dict(),
        "poles": {
            "pendulum": _complex_list(poles(pend)),
            "cart": _complex_list(poles(cart)),
        },
        "zeros": {
            "pendulum": _complex_list(ctrl.zeros(pend.to_tf())),
            "cart": _complex_list(ctrl.zeros(cart.to_tf())),
        },
        "eigenvalues": _complex_list(eigenvalues(ss)),
    })
    return report
