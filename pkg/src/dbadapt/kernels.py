"""FHE-friendly replacements for softmax, GELU, division and LayerNorm.

Each kernel is written with additions, multiplications and level-free
reductions only, so the same function evaluates a numpy array, an autodiff
:class:`~dbadapt.autodiff.Tensor` or a :class:`~dbadapt.he.Ciphertext`.
Range management constants (logit shift, rescale bounds) are public
plaintext values calibrated beforehand; see :func:`calibrated_max`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .autodiff import Tensor
from .he import Ciphertext

# margin applied on top of the largest calibration value
CALIBRATION_MARGIN = 1.25


class KernelDomainError(ValueError):
    pass


@dataclass(frozen=True)
class KernelConfig:
    exp_degree: int = 6
    inv_degree: int = 7
    gelu_coeffs: tuple = (0.125, 0.25, 0.5)
    rescale_max: float = 16.0
    sqrt_iters: int = 7
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.exp_degree < 1 or self.inv_degree < 1:
            raise ValueError("exp_degree and inv_degree must be >= 1")
        if not self.rescale_max > 0:
            raise ValueError("rescale_max must be positive")
        if self.sqrt_iters < 1:
            raise ValueError("sqrt_iters must be >= 1")
        if len(self.gelu_coeffs) != 3:
            raise ValueError("gelu_coeffs must be a triple")
        object.__setattr__(self, "gelu_coeffs", tuple(float(c) for c in self.gelu_coeffs))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gelu_coeffs"] = list(self.gelu_coeffs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "KernelConfig":
        d = dict(d)
        if "gelu_coeffs" in d:
            d["gelu_coeffs"] = tuple(d["gelu_coeffs"])
        return cls(**d)


def calibrated_max(values) -> float:
    """Plaintext calibration bound: the margin times the largest observed value."""
    return CALIBRATION_MARGIN * float(np.max(values))


def _plain_values(x) -> Optional[np.ndarray]:
    if isinstance(x, Ciphertext):
        return None
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def power_ladder(x, degree: int) -> dict:
    """x**k for k = 1..degree with depth ceil(log2 k) each.

    x**k is built as x**a * x**(k - a) with a the largest power of two below
    k, so the powers of two form a squaring ladder and every other power
    costs one extra level at most.
    """
    powers = {1: x}
    for k in range(2, degree + 1):
        a = 1 << ((k - 1).bit_length() - 1)
        powers[k] = powers[a] * powers[k - a]
    return powers


def approx_exp(x, d: int):
    """Truncated Taylor series sum_{i<=d} x^i / i!, evaluated on a power ladder."""
    if d < 0:
        raise ValueError("degree must be >= 0")
    if d == 0:
        return x * 0.0 + 1.0
    powers = power_ladder(x, d)
    out = powers[1] + 1.0
    for k in range(2, d + 1):
        out = out + powers[k] * (1.0 / math.factorial(k))
    return out


def exp_remainder_bound(x: float, d: int) -> float:
    """Bound on |approx_exp(x, d) - e^x| as computed in float64.

    Lagrange remainder e^max(0,x) |x|^(d+1) / (d+1)! plus a rounding allowance
    of (d + 2) machine epsilons relative to e^|x| for the d + 1 additions.
    """
    truncation = math.exp(max(0.0, x)) * abs(x) ** (d + 1) / math.factorial(d + 1)
    return truncation + (d + 2) * np.finfo(np.float64).eps * math.exp(abs(x))


def quad_gelu(x, coeffs=(0.125, 0.25, 0.5)):
    a, b, c = coeffs
    return (x * x) * a + x * b + c


def goldschmidt_inverse(x, d: int):
    """Approximate 1/x for x in (0, 2) with d squaring steps.

    a_0 = 2 - x, b_0 = 1 - x, b_{n+1} = b_n^2, a_{n+1} = a_n (1 + b_{n+1}).
    The result equals (1 - (1 - x)^(2^(d+1))) / x.  Plaintext inputs are
    range checked; ciphertexts cannot be.
    """
    values = _plain_values(x)
    if values is not None and not np.all((values > 0.0) & (values < 2.0)):
        bad = values[~((values > 0.0) & (values < 2.0))]
        raise KernelDomainError(
            f"goldschmidt_inverse needs inputs in (0, 2); got {bad.size} outside, e.g. {float(bad.flat[0])!r}"
        )
    a = 2.0 - x
    b = 1.0 - x
    for _ in range(d):
        b = b * b
        a = a * (b + 1.0)
    return a


def approx_softmax(z, cfg: KernelConfig, shift: float = 0.0, scale: Optional[float] = None):
    """Softmax over the last axis with Taylor exp and Goldschmidt division.

    ``shift`` is subtracted from every logit before exponentiation and
    ``scale`` maps the row sum into Goldschmidt's domain; both are public
    calibrated constants.
    """
    m = cfg.rescale_max if scale is None else scale
    e = approx_exp(z - shift, cfg.exp_degree)
    total = e.sum(axis=-1, keepdims=True)
    inv = goldschmidt_inverse(total * (1.0 / m), cfg.inv_degree)
    return e * (inv * (1.0 / m))


# Newton start is NEWTON_START / sqrt(scale); converges for v < 3 scale / NEWTON_START**2
NEWTON_START = 1.5


def newton_inv_sqrt(v, scale: float, iters: int):
    """Newton iteration y <- y (3 - v y^2) / 2 for v^(-1/2) on v in (0, scale].

    Written as 1.5 y - 0.5 (v y)(y y) so each step costs two levels.  The
    start above 1/sqrt(scale) speeds up rows with small variance.
    """
    y = NEWTON_START / math.sqrt(scale)
    for _ in range(iters):
        y = y * 1.5 - ((v * y) * (y * y)) * 0.5
    return y


def approx_layernorm(x, gain, bias, cfg: KernelConfig, scale: Optional[float] = None):
    """LayerNorm over the last axis without division or square root.

    The variance is brought to a standard deviation with a Newton inverse
    square root (std = v * v^(-1/2)); the division by the standard deviation
    goes through Goldschmidt after mapping std into (0, 1] with the
    calibrated variance bound ``scale``.
    """
    m = cfg.rescale_max if scale is None else scale
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True) + cfg.ln_eps
    std = var * newton_inv_sqrt(var, m, cfg.sqrt_iters)
    root_m = math.sqrt(m)
    inv_std = goldschmidt_inverse(std * (1.0 / root_m), cfg.inv_degree) * (1.0 / root_m)
    return (centered * inv_std) * gain + bias


# exact references, used by the teacher and by oracles


def exact_softmax(z):
    if isinstance(z, Tensor):
        shifted = z - np.max(z.data, axis=-1, keepdims=True)
        e = shifted.exp()
        return e / e.sum(axis=-1, keepdims=True)
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def exact_gelu(x):
    if isinstance(x, Tensor):
        return x.gelu()
    if isinstance(x, Ciphertext):
        raise TypeError("exact GELU is not a polynomial; use quad_gelu under encryption")
    from scipy.special import erf

    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def exact_layernorm(x, gain, bias, eps: float = 1e-5):
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    if isinstance(var, Tensor):
        return centered * (var + eps).sqrt().reciprocal() * gain + bias
    return centered / np.sqrt(var + eps) * gain + bias
