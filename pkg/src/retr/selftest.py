"""Fast invariant checks run by ``retr selftest``.

Each suite returns a list of ``Check`` records; a failing check carries the
inputs that broke it so the report is actionable.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np
from scipy import sparse

from . import autodiff as ad
from .nn import MultiHeadAttention
from .renderer import (
    CpeConfig,
    OcclusionBlock,
    continuous_positional_encoding,
    generalized_render_specialcase_check,
    occlusion_transform,
)


@dataclass
class Check:
    suite: str
    name: str
    passed: bool
    detail: str = ""


def cpe_identity_error(n_pairs: int = 1000, dim: int = 64, beta: float = 100.0, seed: int = 0) -> float:
    """Max |pe(ti).pe(tj) - sum_k cos(beta dt / 10000^(2k/D))| over random pairs."""
    rng = np.random.default_rng(seed)
    ti = rng.uniform(0.0, 5.0, n_pairs)
    tj = rng.uniform(0.0, 5.0, n_pairs)
    cfg = CpeConfig(beta, dim)
    dots = np.sum(continuous_positional_encoding(ti, cfg) * continuous_positional_encoding(tj, cfg), axis=1)
    k = np.arange(dim // 2)
    ref = np.sum(np.cos(beta * (ti - tj)[:, None] / 10000.0 ** (2.0 * k / dim)), axis=1)
    return float(np.max(np.abs(dots - ref)))


def specialcase_error(n_instances: int = 100, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_instances):
        n = int(rng.integers(1, 33))
        m = int(rng.integers(1, 5))
        sig = rng.uniform(0.0, 3.0, n)
        w = rng.dirichlet(np.ones(m), size=n)
        rgb = rng.uniform(0.0, 1.0, (n, m, 3))
        worst = max(worst, generalized_render_specialcase_check(sig, w, rgb))
    return worst


def causality_violations(n: int = 8, dim: int = 16, heads: int = 2, trials: int = 20, seed: int = 0) -> List[str]:
    """Perturb f_j and require f_occ_i (i < j) bit-identical with zero gradient."""
    rng = np.random.default_rng(seed)
    problems = []
    for trial in range(trials):
        block = OcclusionBlock(dim, heads, rng)
        tok = ad.constant(rng.normal(size=(dim,)))
        f = rng.normal(size=(n, dim))
        j = int(rng.integers(1, n))
        base = occlusion_transform(tok, ad.constant(f), None, block).data
        g = f.copy()
        g[j] += rng.normal(size=dim)
        moved = occlusion_transform(tok, ad.constant(g), None, block).data
        if not np.array_equal(base[:j], moved[:j]):
            problems.append(f"trial {trial}: output rows < {j} changed after perturbing row {j}")
        x = ad.tensor(f, requires_grad=True)
        out = occlusion_transform(tok, x, None, block)
        probe = rng.normal(size=(n, dim))
        probe[j:] = 0.0
        ad.backward(ad.sum_(out * ad.constant(probe)))
        if np.any(x.grad[j:] != 0.0):
            problems.append(f"trial {trial}: nonzero gradient of rows < {j} w.r.t. rows >= {j}")
    return problems


def _op_cases(rng: np.random.Generator) -> Dict[str, Tuple[List[ad.Tensor], Callable[[], ad.Tensor]]]:
    """One forward op per entry, applied directly to fresh leaf tensors."""

    def leaf(*shape, positive=False):
        d = rng.uniform(0.5, 2.0, shape) if positive else rng.normal(size=shape)
        return ad.tensor(d, requires_grad=True)

    mask = np.array([[True, False, True, True], [False, True, True, False], [True, True, True, True]])
    a, b, row = leaf(3, 4), leaf(3, 4), leaf(1, 4)
    p = leaf(3, 4, positive=True)
    # keep relu and abs inputs away from their kink
    k = ad.tensor(rng.choice([-1.0, 1.0], (3, 4)) * rng.uniform(0.2, 2.0, (3, 4)), requires_grad=True)
    m1, m2 = leaf(3, 5), leaf(5, 4)
    idx = np.array([2, 0, 2, 1])
    sp = sparse.random(6, 3, density=0.5, random_state=np.random.RandomState(int(rng.integers(1 << 31))), format="csr")
    return {
        "add": ([a, row], lambda: ad.add(a, row)),
        "sub": ([a, b], lambda: ad.sub(a, b)),
        "mul": ([a, b], lambda: ad.mul(a, b)),
        "div": ([a, p], lambda: ad.div(a, p)),
        "neg": ([a], lambda: ad.neg(a)),
        "matmul": ([m1, m2], lambda: ad.matmul(m1, m2)),
        "exp": ([a], lambda: ad.exp(a)),
        "log": ([p], lambda: ad.log(p)),
        "sqrt": ([p], lambda: ad.sqrt(p)),
        "relu": ([k], lambda: ad.relu(k)),
        "sigmoid": ([a], lambda: ad.sigmoid(a)),
        "softplus": ([a], lambda: ad.softplus(a)),
        "abs": ([k], lambda: ad.abs_(k)),
        "concat": ([a, m1], lambda: ad.concat([a, m1], axis=1)),
        "slice": ([a], lambda: ad.slice_(a, (slice(1, 3), [0, 2, 2]))),
        "take": ([a], lambda: ad.take(a, idx, axis=1)),
        "spmm": ([a], lambda: ad.spmm(sp, a)),
        "reshape": ([a], lambda: ad.reshape(a, (2, 6))),
        "transpose": ([m1], lambda: ad.transpose(m1)),
        "broadcast": ([row], lambda: ad.broadcast_to(row, (3, 4))),
        "sum": ([a], lambda: ad.sum_(a, axis=0)),
        "mean": ([a], lambda: ad.mean(a, axis=1, keepdims=True)),
        "max": ([a], lambda: ad.max_(a, axis=1)),
        "softmax": ([a], lambda: ad.softmax(a, axis=1, mask=mask)),
    }


def vjp_error(leaves: Sequence[ad.Tensor], fn: Callable[[], ad.Tensor], seed: int = 0, eps: float = 1e-6) -> float:
    """Check the output node's own rule against central differences of <probe, fn()>.

    Only the rule registered for the output op is exercised, so a wrong rule is
    reported under its own name and cannot leak into other checks.
    """
    out = fn()
    probe = np.random.default_rng(seed).normal(size=out.shape)
    grads = ad.GRAD_RULES[out.op](probe, out.data, out)
    worst = 0.0
    for leaf in leaves:
        pos = [i for i, par in enumerate(out.parents) if par is leaf]
        if not pos:
            raise ValueError(f"{out.op}: leaf is not a direct input")
        g = ad._unbroadcast(np.asarray(grads[pos[0]]), leaf.shape)
        flat = leaf.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            vals = []
            for sgn in (1.0, -1.0):
                flat[i] = orig + sgn * eps
                with ad.no_grad():
                    vals.append(float(np.sum(probe * fn().data)))
            flat[i] = orig
            fd = (vals[0] - vals[1]) / (2 * eps)
            worst = max(worst, abs(g.reshape(-1)[i] - fd) / max(1.0, abs(fd)))
    return worst


def gradient_errors(seed: int = 0) -> Dict[str, float]:
    """Per-op rule errors plus an end-to-end grad_check through attention."""
    rng = np.random.default_rng(seed)
    errs = {name: vjp_error(leaves, fn, seed) for name, (leaves, fn) in _op_cases(rng).items()}
    mha = MultiHeadAttention(4, 2, rng)
    q = ad.tensor(rng.normal(size=(2, 4)), requires_grad=True)
    kv = ad.tensor(rng.normal(size=(5, 4)), requires_grad=True)
    w = rng.normal(size=(2, 4))
    errs["attention"] = ad.grad_check(lambda: ad.sum_(mha(q, kv, kv)[0] * ad.constant(w)), [q, kv] + mha.parameters())
    return errs


def softmax_problems(seed: int = 0) -> List[str]:
    rng = np.random.default_rng(seed)
    problems = []
    for trial in range(50):
        x = rng.normal(scale=10.0, size=(4, 7))
        mask = rng.uniform(size=(4, 7)) < 0.6
        mask[np.arange(4), rng.integers(0, 7, 4)] = True
        y = ad.softmax(ad.constant(x), axis=1, mask=mask).data
        if np.max(np.abs(y.sum(axis=1) - 1.0)) > 1e-12:
            problems.append(f"trial {trial}: rows do not sum to 1")
        if np.any(y[~mask] != 0.0) or np.any(y < 0):
            problems.append(f"trial {trial}: masked or negative weight")
        shifted = ad.softmax(ad.constant(x + rng.normal(size=(4, 1)) * 50), axis=1, mask=mask).data
        if np.max(np.abs(shifted - y)) > 1e-12:
            problems.append(f"trial {trial}: not shift invariant")
    big = ad.softmax(ad.constant(np.array([[1e4, 0.0, -1e4]])), axis=1).data
    if not np.all(np.isfinite(big)):
        problems.append("overflow on logits of magnitude 1e4")
    return problems


GRAD_TOL = 1e-6


def run_selftest() -> List[Check]:
    checks: List[Check] = []
    err = cpe_identity_error()
    checks.append(Check("cpe", "dot product identity", err < 1e-9, f"max error {err:.3e}"))
    err = specialcase_error()
    checks.append(Check("special-case", "generalized vs classical rendering", err < 1e-9, f"max error {err:.3e}"))
    probs = causality_violations()
    checks.append(Check("causality", "occlusion mask", not probs, "; ".join(probs[:3])))
    try:
        errs = gradient_errors()
    except ad.GradCheckError as e:
        checks.append(Check("gradients", "grad_check", False, str(e)))
    else:
        for name, e in errs.items():
            checks.append(Check("gradients", name, e < GRAD_TOL, f"max rel error {e:.3e}"))
    probs = softmax_problems()
    checks.append(Check("softmax", "normalization, masking, stability", not probs, "; ".join(probs[:3])))
    return checks


def format_report(checks: List[Check], elapsed: float) -> str:
    lines = [f"{'PASS' if c.passed else 'FAIL'}  {c.suite}: {c.name}  {c.detail}".rstrip() for c in checks]
    n_fail = sum(not c.passed for c in checks)
    lines.append(f"{len(checks) - n_fail}/{len(checks)} checks passed in {elapsed:.2f}s")
    return "\n".join(lines)


def main() -> int:
    t0 = time.perf_counter()
    checks = run_selftest()
    print(format_report(checks, time.perf_counter() - t0))
    return 0 if all(c.passed for c in checks) else 1
