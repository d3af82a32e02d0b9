"""The four NQDE vector fields, their parameters, the CDE right-hand side and the collapse readout.

The hidden state holds two complex amplitudes stored as real pairs,
``(Re psi_1, Im psi_1, Re psi_2, Im psi_2)``. The vector field maps it to a
4x3 matrix that is contracted with the derivative of the control path.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .linalg import orthogonal_from_generator, orthogonality_error, polar_project
from .paths import SplinePath
from .solvers import NFECounter, Solution, SolverConfig, solve

__all__ = [
    "Variant",
    "Constraint",
    "Parameter",
    "ModelParams",
    "IntegrityError",
    "DegenerateStateError",
    "init_params",
    "declared_shapes",
    "count_params",
    "VectorField",
    "eval_field",
    "init_hidden",
    "cde_rhs",
    "integrate",
    "collapse_g1",
    "collapse_g2",
    "collapse_g3",
]

HIDDEN = 4
CHANNELS = 3
WIDTH = 32
ORTHO_TOL = 1e-6


class Variant(str, enum.Enum):
    NQDE1_UNN = "nqde1_unn"
    NQDE2_UNN = "nqde2_unn"
    NQDE3_GEO = "nqde3_geo"
    NQDE4_GEO = "nqde4_geo"

    @property
    def projected(self) -> bool:
        return self in (Variant.NQDE1_UNN, Variant.NQDE2_UNN)

    @property
    def concat_before_readout(self) -> bool:
        return self in (Variant.NQDE1_UNN, Variant.NQDE3_GEO)


class Constraint(str, enum.Enum):
    FREE = "free"
    ORTHO_MAINTAINED = "ortho_maintained"
    SKEW_EXP = "skew_exp"


class IntegrityError(RuntimeError):
    """A matrix that should be orthogonal is not."""


class DegenerateStateError(ValueError):
    pass


@dataclass
class Parameter:
    tensor: Tensor
    constraint: Constraint = Constraint.FREE


class ModelParams:
    """Named trainable tensors of one variant, in a fixed order."""

    def __init__(self, variant: Variant, params: dict[str, Parameter]):
        self.variant = Variant(variant)
        self.params = params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name].tensor

    def items(self):
        return self.params.items()

    def tensors(self) -> list[Tensor]:
        return [p.tensor for p in self.params.values()]

    def constrained(self, kind: Constraint) -> dict[str, Tensor]:
        return {k: p.tensor for k, p in self.params.items() if p.constraint is kind}

    def count(self) -> int:
        return sum(p.tensor.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for t in self.tensors():
            t.grad = None

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.variant,
            {
                k: Parameter(Tensor(p.tensor.data.copy(), requires_grad=p.tensor.requires_grad), p.constraint)
                for k, p in self.params.items()
            },
        )

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.tensor.data.copy() for k, p in self.params.items()}

    def orthogonal_weights(self) -> dict[str, np.ndarray]:
        """Every weight that must be orthogonal, in realised form."""
        out = {k: t.data for k, t in self.constrained(Constraint.ORTHO_MAINTAINED).items()}
        for k, t in self.constrained(Constraint.SKEW_EXP).items():
            out[k] = orthogonal_from_generator(Tensor(t.data)).data
        return out

    def max_orthogonality_error(self) -> float:
        return max((orthogonality_error(w) for w in self.orthogonal_weights().values()), default=0.0)


def declared_shapes(variant: Variant) -> dict[str, tuple[tuple[int, ...], Constraint]]:
    """Parameter names, shapes and constraints of each variant."""
    variant = Variant(variant)
    free, ortho, skew_exp = Constraint.FREE, Constraint.ORTHO_MAINTAINED, Constraint.SKEW_EXP
    shapes: dict[str, tuple[tuple[int, ...], Constraint]] = {
        "initial.weight": ((HIDDEN, CHANNELS), free),
        "initial.bias": ((HIDDEN,), free),
        "linear1.weight": ((WIDTH, HIDDEN), free),
        "linear1.bias": ((WIDTH,), free),
    }
    for k in (1, 2):
        if variant.projected:
            shapes[f"rnn{k}.recurrent"] = ((WIDTH, WIDTH), ortho)
            shapes[f"rnn{k}.input"] = ((WIDTH, WIDTH), free)
        else:
            shapes[f"stiefel{k}.generator"] = ((WIDTH, WIDTH), skew_exp)
            shapes[f"stiefel{k}.bias"] = ((WIDTH,), free)
    out = HIDDEN * CHANNELS
    if variant.concat_before_readout:
        shapes["readout.weight"] = ((out, 2 * WIDTH), free)
        shapes["readout.bias"] = ((out,), free)
    else:
        shapes["readout.weight"] = ((out // 2, WIDTH), free)
        shapes["readout.bias"] = ((out // 2,), free)
    return shapes


def count_params(variant: Variant) -> int:
    return sum(int(np.prod(shape)) for shape, _ in declared_shapes(variant).values())


def init_params(variant: Variant, seed: int = 0) -> ModelParams:
    """Free weights and biases ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); orthogonal
    weights start at the polar factor of a Gaussian matrix; exponential-map
    generators start at N(0, 0.01^2) so those layers begin near the identity."""
    rng = np.random.default_rng(seed)
    shapes = declared_shapes(variant)
    params: dict[str, Parameter] = {}
    for name, (shape, constraint) in shapes.items():
        if constraint is Constraint.ORTHO_MAINTAINED:
            data = polar_project(rng.standard_normal(shape))
        elif constraint is Constraint.SKEW_EXP:
            data = 0.01 * rng.standard_normal(shape)
        else:
            layer = name.rsplit(".", 1)[0]
            wshape = shapes.get(f"{layer}.weight", (shape, None))[0]
            fan_in = wshape[1] if len(wshape) == 2 else shape[-1]
            bound = 1.0 / np.sqrt(fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Parameter(Tensor(data, requires_grad=True), constraint)
    return ModelParams(variant, params)


class VectorField:
    """``z -> f(z)``, a (batch, 4, 3) matrix field for one variant.

    Orthogonal weights of the exponential-map variants are realised once at
    construction, so build a new field after every parameter update.
    """

    def __init__(self, params: ModelParams, check: bool = True):
        self.variant = params.variant
        self.p = params
        if check:
            for name, W in params.constrained(Constraint.ORTHO_MAINTAINED).items():
                err = orthogonality_error(W.data)
                if err > ORTHO_TOL:
                    raise IntegrityError(f"{name} has orthogonality error {err:.3e} > {ORTHO_TOL:g}")
        self.stiefel = {
            k: orthogonal_from_generator(params[f"stiefel{k}.generator"])
            for k in (1, 2)
            if not self.variant.projected
        }

    def _branch(self, k: int, h: Tensor) -> Tensor:
        p = self.p
        if self.variant.projected:
            return ad.relu(ad.add(ad.affine(h, p[f"rnn{k}.recurrent"]), ad.affine(h, p[f"rnn{k}.input"])))
        return ad.relu(ad.affine(h, self.stiefel[k], p[f"stiefel{k}.bias"]))

    def __call__(self, z: Tensor) -> Tensor:
        p = self.p
        single = z.data.ndim == 1
        if single:
            z = ad.reshape(z, (1, HIDDEN))
        h = ad.relu(ad.affine(z, p["linear1.weight"], p["linear1.bias"]))
        b1, b2 = self._branch(1, h), self._branch(2, h)
        W, b = p["readout.weight"], p["readout.bias"]
        if self.variant.concat_before_readout:
            out = ad.affine(ad.concat([b1, b2], axis=1), W, b)
        else:
            out = ad.concat([ad.affine(b1, W, b), ad.affine(b2, W, b)], axis=1)
        shape = (HIDDEN, CHANNELS) if single else (-1, HIDDEN, CHANNELS)
        return ad.reshape(out, shape)


def eval_field(params: ModelParams, z: Tensor) -> Tensor:
    return VectorField(params)(ad._as_tensor(z))


def init_hidden(x0, params: ModelParams) -> Tensor:
    """Initial hidden state from the first path value."""
    return ad.affine(ad._as_tensor(x0), params["initial.weight"], params["initial.bias"])


def cde_rhs(t: float, z: Tensor, path: SplinePath, field: VectorField,
            counter: Optional[NFECounter] = None) -> Tensor:
    """``dz/dt = f(z) dX/dt``; one call is one function evaluation."""
    if counter is not None:
        counter.forward += 1
    tape = ad.current_tape()
    dX = path.derivative(t)
    if tape is None:
        return _contract(field(z), dX)
    with tape.scope():
        return _contract(field(z), dX)


def _contract(F: Tensor, dX: np.ndarray) -> Tensor:
    if F.data.ndim == 2:
        return ad.reshape(ad.bmv(ad.reshape(F, (1, HIDDEN, CHANNELS)), Tensor(dX[None])), (HIDDEN,))
    return ad.bmv(F, Tensor(dX))


def integrate(params: ModelParams, path: SplinePath, config: SolverConfig,
              counter: Optional[NFECounter] = None, trajectory: bool = False,
              check: bool = True) -> Solution:
    """Solve the CDE from the first to the last knot of ``path`` (single or batched)."""
    field = VectorField(params, check=check)
    z0 = init_hidden(path.evaluate(path.t0), params)

    def rhs(t, z):
        return cde_rhs(t, z, path, field, counter)

    stops = path.knots if config.knot_stops else None
    return solve(rhs, z0, path.t0, path.t1, config, trajectory=trajectory, breakpoints=stops)


def collapse_g1(z):
    """Squared modulus of each complex amplitude: (..., 4) -> (..., 2)."""
    if isinstance(z, Tensor):
        lead = z.shape[:-1]
        pairs = ad.reshape(z, lead + (2, 2))
        return ad.sum_axis(ad.square(pairs), -1)
    z = np.asarray(z, dtype=np.float64)
    pairs = z.reshape(z.shape[:-1] + (2, 2))
    return (pairs * pairs).sum(axis=-1)


def collapse_g2(p, mode: str = "softmax") -> np.ndarray:
    """Map squared moduli onto the probability simplex."""
    p = np.asarray(p, dtype=np.float64)
    if mode == "normalize":
        total = p.sum(axis=-1, keepdims=True)
        if np.any(total <= 0):
            raise DegenerateStateError("cannot normalise a zero state")
        return p / total
    if mode == "softmax":
        e = np.exp(p - p.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)
    raise ValueError(f"unknown g2 mode {mode!r}")


def collapse_g3(probs, mode: str = "argmax", rng: Optional[np.random.Generator] = None):
    """Pick a label: the most probable one (ties -> lower index) or a draw."""
    probs = np.asarray(probs, dtype=np.float64)
    if mode == "argmax":
        return np.argmax(probs, axis=-1)
    if mode == "sample":
        if rng is None:
            raise ValueError("sampling needs an rng")
        if probs.ndim == 1:
            return int(rng.choice(probs.shape[0], p=probs))
        u = rng.random(probs.shape[:-1])[..., None]
        return (u >= np.cumsum(probs, axis=-1)).sum(axis=-1)
    raise ValueError(f"unknown g3 mode {mode!r}")
