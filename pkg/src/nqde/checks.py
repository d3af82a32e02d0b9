"""Verification suites with independent oracles; ``nqde check`` runs all of them.

Each suite returns a list of :class:`CheckResult`. Oracles here never call the
code path they verify: the matrix exponential is compared against a long
Taylor sum in extended precision, polar projection against an
eigendecomposition, and reverse-mode gradients against central differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import mpmath
import numpy as np
import scipy.linalg

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .linalg import expm, expm_vjp, orthogonality_error, polar_project, skew
from .model import (
    Constraint,
    ModelParams,
    Variant,
    collapse_g1,
    collapse_g2,
    collapse_g3,
    count_params,
    init_params,
    init_hidden,
    VectorField,
    cde_rhs,
)
from .paths import fit_natural_cubic, generate_spirals
from .solvers import SolverConfig, dopri5_solve, rk4_solve

EXPECTED_PARAM_COUNTS = {
    Variant.NQDE1_UNN: 5052,
    Variant.NQDE2_UNN: 4470,
    Variant.NQDE3_GEO: 3068,
    Variant.NQDE4_GEO: 2486,
}


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: {self.value:.3e} (tol {self.tolerance:.1e}) {self.detail}".rstrip()


# ------------------------------------------------------------------ oracles


def taylor_expm_oracle(A: np.ndarray, terms: int = 60, dps: int = 34) -> np.ndarray:
    """sum_{k<terms} A^k / k! accumulated in ``dps``-digit arithmetic, no scaling."""
    with mpmath.workdps(dps):
        M = mpmath.matrix(A.tolist())
        n = A.shape[0]
        term = mpmath.eye(n)
        total = mpmath.eye(n)
        for k in range(1, terms):
            term = term * M / k
            total += term
        return np.array(total.tolist(), dtype=np.float64)


def polar_oracle(M: np.ndarray) -> np.ndarray:
    """Orthogonal polar factor ``M (M^T M)^(-1/2)`` from a symmetric eigendecomposition."""
    w, V = np.linalg.eigh(M.T @ M)
    return M @ (V * (1.0 / np.sqrt(w))) @ V.T


def central_difference(f: Callable[[], float], x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Gradient of ``f`` w.r.t. array ``x`` (perturbed in place, then restored)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error ``|a-b| / max(|a|, |b|)`` (0 when both vanish)."""
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


def random_skew(rng: np.random.Generator, n: int) -> np.ndarray:
    return skew(rng.uniform(-1.0, 1.0, size=(n, n)))


def well_conditioned(rng: np.random.Generator, n: int) -> np.ndarray:
    """Random matrix with singular values in [0.5, 2]."""
    Q1 = np.linalg.qr(rng.standard_normal((n, n)))[0]
    Q2 = np.linalg.qr(rng.standard_normal((n, n)))[0]
    return (Q1 * rng.uniform(0.5, 2.0, n)) @ Q2.T


# ------------------------------------------------------------------ suites


def parameter_counts() -> list[CheckResult]:
    out = []
    for v, expected in EXPECTED_PARAM_COUNTS.items():
        got = count_params(v)
        built = init_params(v).count()
        ok = got == expected and built == expected
        out.append(CheckResult(f"param count {v.value}", ok, float(abs(got - expected)), 0.0,
                               f"declared={got} built={built} expected={expected}"))
    return out


def kernel_suite(seed: int = 0, draws: int = 100) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    worst = max(np.linalg.norm(expm(A) - taylor_expm_oracle(A))
                for A in (random_skew(rng, 8) for _ in range(draws)))
    res = [CheckResult("expm vs long Taylor (8x8 skew)", worst <= 1e-10, worst, 1e-10)]

    worst = max(np.linalg.norm(polar_project(M) - polar_oracle(M))
                for M in (well_conditioned(rng, 32) for _ in range(draws)))
    res.append(CheckResult("polar_project vs eigendecomposition (32x32)", worst <= 1e-9, worst, 1e-9))

    worst = max(orthogonality_error(expm(random_skew(rng, 32))) for _ in range(draws))
    res.append(CheckResult("expm(skew) orthogonality (32x32)", worst <= 1e-12, worst, 1e-12))

    worst = 0.0
    eps = 1e-6
    for _ in range(20):
        A = rng.uniform(-1, 1, (6, 6))
        G = rng.standard_normal((6, 6))
        E = rng.standard_normal((6, 6))
        fd = (expm(A + eps * E) - expm(A - eps * E)) / (2 * eps)
        lhs = float(np.sum(expm_vjp(A, G) * E))
        rhs = float(np.sum(G * fd))
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), abs(rhs)))
    res.append(CheckResult("expm_vjp vs finite differences (6x6)", worst <= 1e-6, worst, 1e-6))
    return res


def _t(W: np.ndarray) -> np.ndarray:
    return np.swapaxes(W, -1, -2)


def _bias(b: np.ndarray) -> np.ndarray:
    return b[:, None, :] if b.ndim == 2 else b


def _reference_field(variant: Variant, W: dict, z: np.ndarray) -> np.ndarray:
    """Vector field on states of shape (P, B, 4); any weight may carry a leading P axis."""
    relu = lambda x: np.maximum(x, 0.0)
    h = relu(z @ _t(W["linear1.weight"]) + _bias(W["linear1.bias"]))
    branches = []
    for k in (1, 2):
        if variant.projected:
            pre = h @ _t(W[f"rnn{k}.recurrent"]) + h @ _t(W[f"rnn{k}.input"])
        else:
            pre = h @ _t(W[f"stiefel{k}.weight"]) + _bias(W[f"stiefel{k}.bias"])
        branches.append(relu(pre))
    Wo, bo = W["readout.weight"], _bias(W["readout.bias"])
    if variant.concat_before_readout:
        out = np.concatenate(branches, axis=-1) @ _t(Wo) + bo
    else:
        out = np.concatenate([b @ _t(Wo) + bo for b in branches], axis=-1)
    return out.reshape(out.shape[:-1] + (4, 3))


def reference_losses(variant: Variant, W: dict, path, labels: np.ndarray, h: float, P: int) -> np.ndarray:
    """Loss of ``P`` weight sets at once: fixed-step RK4 of the CDE, squared moduli, mean NLL.

    Written directly in numpy, independent of the tape, the solver module and
    the in-house matrix exponential.
    """
    W = dict(W)
    if not variant.projected:
        for k in (1, 2):
            G = W[f"stiefel{k}.generator"]
            W[f"stiefel{k}.weight"] = scipy.linalg.expm(G - _t(G))
    x0 = path.evaluate(path.t0)
    z = np.broadcast_to(x0 @ _t(W["initial.weight"]) + _bias(W["initial.bias"]), (P,) + x0.shape[:-1] + (4,))
    n = max(1, int(np.ceil((path.t1 - path.t0) / h - 1e-9)))
    dt = (path.t1 - path.t0) / n

    def f(t, z):
        return np.einsum("pbij,bj->pbi", _reference_field(variant, W, z), path.derivative(t))

    for i in range(n):
        t = path.t0 + i * dt
        k1 = f(t, z)
        k2 = f(t + dt / 2, z + dt / 2 * k1)
        k3 = f(t + dt / 2, z + dt / 2 * k2)
        k4 = f(t + dt, z + dt * k3)
        z = z + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    logits = (z.reshape(z.shape[:-1] + (2, 2)) ** 2).sum(axis=-1)
    m = logits.max(axis=-1, keepdims=True)
    logp = logits - m - np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))
    return -np.take_along_axis(logp, labels[None, :, None], axis=-1)[..., 0].mean(axis=-1)


def finite_difference_grads(params: ModelParams, path, labels: np.ndarray, h: float,
                            step: float = 1e-6, chunk: int = 256) -> dict[str, np.ndarray]:
    """Central differences of :func:`reference_losses` for every parameter entry."""
    base = params.state()
    out = {}
    for name, value in base.items():
        flat = value.reshape(-1)
        g = np.empty(flat.size)
        for lo in range(0, flat.size, chunk):
            idx = np.arange(lo, min(lo + chunk, flat.size))
            m = idx.size
            stacked = np.repeat(flat[None, :], 2 * m, axis=0)
            stacked[np.arange(m), idx] += step
            stacked[m + np.arange(m), idx] -= step
            W = dict(base)
            W[name] = stacked.reshape((2 * m,) + value.shape)
            L = reference_losses(params.variant, W, path, labels, h, 2 * m)
            g[idx] = (L[:m] - L[m:]) / (2 * step)
        out[name] = g.reshape(value.shape)
    return out


def model_gradcheck(variant: Variant, seed: int = 0, samples: int = 2, steps: int = 5,
                    h: float = 0.05) -> dict[str, float]:
    """Per-tensor relative error between tape gradients and finite differences."""
    from .training import batch_loss

    data = generate_spirals(max(samples, 2), steps, 0.02, seed)
    path = fit_natural_cubic(data.series[:samples])
    labels = data.labels[:samples]
    params = init_params(variant, seed)
    config = SolverConfig(method="rk4", step=h)

    with Tape() as tape:
        loss = batch_loss(params, path, labels, config)
        ad.backward(loss, tape)
    ref = float(reference_losses(variant, params.state(), path, labels, h, 1)[0])
    if abs(ref - float(loss.data)) > 1e-10 * max(1.0, abs(ref)):
        raise AssertionError(f"reference forward disagrees with the model: {ref} vs {float(loss.data)}")
    fd = finite_difference_grads(params, path, labels, h)
    return {name: relative_error(p.tensor.grad, fd[name]) for name, p in params.items()}


def gradient_suite(seed: int = 0) -> list[CheckResult]:
    res = []
    for v in Variant:
        err = max(model_gradcheck(v, seed).values())
        res.append(CheckResult(f"end-to-end gradcheck {v.value}", err <= 1e-4, err, 1e-4))
    return res


def _decay(t, z):
    return ad.scale(z, -1.0)


def solver_suite(seed: int = 0) -> list[CheckResult]:
    z0 = Tensor(np.array([1.0]))
    errs = [abs(float(rk4_solve(_decay, z0, 0.0, 1.0, SolverConfig("rk4", step=h)).state.data[0]) - np.exp(-1))
            for h in (0.1, 0.05, 0.025)]
    ratios = [errs[0] / errs[1], errs[1] / errs[2]]
    dev = max(abs(r - 16.0) for r in ratios)
    res = [CheckResult("rk4 order-4 error ratio", dev <= 2.0, dev, 2.0,
                       "ratios=" + ",".join(f"{r:.3f}" for r in ratios))]

    rng = np.random.default_rng(seed)
    data = generate_spirals(4, 100, 0.02, seed)
    path = fit_natural_cubic(data.series)
    worst = 0.0
    for k in range(4):
        params = init_params(list(Variant)[k], int(rng.integers(1 << 30)))
        for p in params.params.values():
            if p.constraint is Constraint.FREE:
                p.tensor.data *= 0.5
        field = VectorField(params)
        z0 = init_hidden(path.evaluate(path.t0), params)
        rhs = lambda t, z: cde_rhs(t, z, path, field)
        fine = rk4_solve(rhs, z0, path.t0, path.t1, SolverConfig("rk4", step=1e-3)).state.data
        adaptive = dopri5_solve(rhs, z0, path.t0, path.t1, SolverConfig("dopri5", rtol=1e-7, atol=1e-9),
                                breakpoints=path.knots).state.data
        worst = max(worst, float(np.abs(fine - adaptive).max()))
    res.append(CheckResult("dopri5 vs fine rk4 on NQDE instances", worst <= 1e-5, worst, 1e-5))

    calls = []

    def counting(t, z):
        calls.append(t)
        return _decay(t, z)

    sol = dopri5_solve(counting, z0 := Tensor(np.array([1.0])), 0.0, 1.0, SolverConfig())
    expected = 2 + 6 * (sol.accepted + sol.rejected)
    res.append(CheckResult("dopri5 evaluations per step", len(calls) == expected,
                           float(len(calls) - expected), 0.0,
                           f"calls={len(calls)} steps={sol.accepted}+{sol.rejected} rejected"))
    return res


def collapse_suite(seed: int = 0, draws: int = 1000, samples: int = 100_000) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((draws, 4))
    phi = rng.uniform(0, 2 * np.pi, (draws, 2))
    rotated = np.empty_like(z)
    for k in range(2):
        c, s = np.cos(phi[:, k]), np.sin(phi[:, k])
        re, im = z[:, 2 * k], z[:, 2 * k + 1]
        rotated[:, 2 * k] = c * re - s * im
        rotated[:, 2 * k + 1] = s * re + c * im
    dev = float(np.abs(collapse_g1(z) - collapse_g1(rotated)).max())
    res = [CheckResult("g1 phase invariance", dev <= 1e-12, dev, 1e-12)]
    simplex = 0.0
    for mode in ("normalize", "softmax"):
        p = collapse_g2(collapse_g1(z), mode)
        if np.any(p < 0):
            simplex = np.inf
        simplex = max(simplex, float(np.abs(p.sum(axis=1) - 1).max()))
    res.append(CheckResult("g2 simplex", simplex <= 1e-12, simplex, 1e-12))
    probs = np.tile([0.25, 0.75], (samples, 1))
    ones = int(np.sum(collapse_g3(probs, "sample", rng)))
    sigma = np.sqrt(samples * 0.25 * 0.75)
    z_score = abs(ones - 0.75 * samples) / sigma
    res.append(CheckResult("g3 sampling frequency (z-score)", z_score <= 3.0, z_score, 3.0))
    return res


def run_all(seed: int = 0) -> list[CheckResult]:
    out = []
    for suite in (parameter_counts, kernel_suite, solver_suite, collapse_suite, gradient_suite):
        out.extend(suite() if suite is parameter_counts else suite(seed))
    return out
