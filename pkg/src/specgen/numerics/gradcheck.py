"""Finite-difference verification of tape gradients.

``gradcheck`` compares the reverse-mode gradient of a scalar function against
central differences, parameter block by parameter block. The error measure per
element is |tape - fd| / max(|tape|, |fd|, 1), i.e. relative with an absolute
fallback for near-zero gradients; the reported figure per block is the max.

Fragments should use float64 (h = 1e-6) for tolerances around 1e-5; float32
checks need h around 1e-3 and a 1e-2 tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, backward


@dataclass
class BlockResult:
    name: str
    max_rel_err: float
    passed: bool


@dataclass
class GradcheckReport:
    tolerance: float
    blocks: list[BlockResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(b.passed for b in self.blocks)

    @property
    def max_rel_err(self) -> float:
        return max((b.max_rel_err for b in self.blocks), default=0.0)

    def summary(self) -> str:
        lines = [
            f"  {'PASS' if b.passed else 'FAIL'}  {b.name:<32} max_rel_err={b.max_rel_err:.3e}"
            for b in self.blocks
        ]
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"gradcheck {verdict} (tolerance {self.tolerance:.1e})")
        return "\n".join(lines)


def _default_step(dtype) -> float:
    return 1e-6 if dtype == np.float64 else 1e-3


def finite_difference_grad(fn: Callable[[], Tensor], param: Tensor, h: float) -> np.ndarray:
    """Central-difference d fn / d param, one forward pair per element."""
    grad = np.zeros_like(param.data, dtype=np.float64)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn().data)
        flat[i] = orig - h
        fm = float(fn().data)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def op_fragments(seed: int = 0, dtype=np.float64) -> list[tuple[str, Callable[[], Tensor], dict]]:
    """Small randomized scalar fragments exercising every registered op.

    Returns (name, fn, params) triples ready for ``gradcheck``; each fragment
    reduces the op output to a scalar through a fixed random projection so the
    full Jacobian is probed.
    """
    from . import tensor as T
    from .rng import RngState

    rng = RngState(seed).derive(901)

    def leaf(shape, scale=1.0):
        return Tensor(rng.normal(shape, dtype=dtype) * scale, requires_grad=True)

    def proj(shape):
        return Tensor(rng.normal(shape, dtype=dtype))

    frags: list[tuple[str, Callable[[], Tensor], dict]] = []

    def register(name, fn, params):
        frags.append((name, fn, params))

    a, b = leaf((3, 4)), leaf((3, 4))
    r = proj((3, 4))
    register("add", lambda a=a, b=b, r=r: T.sum_(T.mul(T.add(a, b), r)), {"a": a, "b": b})
    a2, b2 = leaf((3, 4)), leaf((4,))
    register("add_broadcast", lambda a=a2, b=b2, r=r: T.sum_(T.mul(T.add(a, b), r)), {"a": a2, "b": b2})
    a3, b3 = leaf((3, 4)), leaf((3, 4))
    register("sub", lambda a=a3, b=b3, r=r: T.sum_(T.mul(T.sub(a, b), r)), {"a": a3, "b": b3})
    a4, b4 = leaf((3, 4)), leaf((3, 4))
    register("mul", lambda a=a4, b=b4, r=r: T.sum_(T.mul(T.mul(a, b), r)), {"a": a4, "b": b4})
    a5 = leaf((3, 4))
    b5 = Tensor(rng.uniform((3, 4)).astype(dtype) + 0.5, requires_grad=True)
    register("div", lambda a=a5, b=b5, r=r: T.sum_(T.mul(T.div(a, b), r)), {"a": a5, "b": b5})
    a6 = leaf((3, 4))
    register("neg", lambda a=a6, r=r: T.sum_(T.mul(T.neg(a), r)), {"a": a6})
    p7 = Tensor(rng.uniform((3, 4)).astype(dtype) + 0.5, requires_grad=True)
    register("power", lambda a=p7, r=r: T.sum_(T.mul(T.power(a, 1.7), r)), {"a": p7})
    p8 = Tensor(rng.uniform((3, 4)).astype(dtype) + 0.5, requires_grad=True)
    register("sqrt", lambda a=p8, r=r: T.sum_(T.mul(T.sqrt(a), r)), {"a": p8})
    a9 = leaf((3, 4), 0.5)
    register("exp", lambda a=a9, r=r: T.sum_(T.mul(T.exp(a), r)), {"a": a9})
    p10 = Tensor(rng.uniform((3, 4)).astype(dtype) + 0.5, requires_grad=True)
    register("log", lambda a=p10, r=r: T.sum_(T.mul(T.log(a), r)), {"a": p10})
    a11 = leaf((3, 4))
    register("tanh", lambda a=a11, r=r: T.sum_(T.mul(T.tanh(a), r)), {"a": a11})
    a12 = leaf((3, 4))
    register("erf", lambda a=a12, r=r: T.sum_(T.mul(T.erf(a), r)), {"a": a12})
    a13 = leaf((3, 4))
    register("sigmoid", lambda a=a13, r=r: T.sum_(T.mul(T.sigmoid(a), r)), {"a": a13})
    a14 = leaf((3, 4))
    register("silu", lambda a=a14, r=r: T.sum_(T.mul(T.silu(a), r)), {"a": a14})
    a15 = leaf((2, 5))
    r15 = proj((2, 5))
    register("softmax", lambda a=a15, r=r15: T.sum_(T.mul(T.softmax(a, axis=-1), r)), {"a": a15})
    m1, m2 = leaf((3, 4)), leaf((4, 2))
    rm = proj((3, 2))
    register("matmul", lambda a=m1, b=m2, r=rm: T.sum_(T.mul(T.matmul(a, b), r)), {"a": m1, "b": m2})
    mb1, mb2 = leaf((2, 3, 4)), leaf((2, 4, 2))
    rmb = proj((2, 3, 2))
    register(
        "matmul_batched",
        lambda a=mb1, b=mb2, r=rmb: T.sum_(T.mul(T.matmul(a, b), r)),
        {"a": mb1, "b": mb2},
    )
    a16 = leaf((2, 3, 4))
    r16 = proj((4, 3, 2))
    register(
        "transpose",
        lambda a=a16, r=r16: T.sum_(T.mul(T.transpose(a, (2, 1, 0)), r)),
        {"a": a16},
    )
    a17 = leaf((2, 6))
    r17 = proj((3, 4))
    register("reshape", lambda a=a17, r=r17: T.sum_(T.mul(T.reshape(a, (3, 4)), r)), {"a": a17})
    c1, c2 = leaf((2, 3)), leaf((2, 2))
    rc = proj((2, 5))
    register(
        "concat",
        lambda a=c1, b=c2, r=rc: T.sum_(T.mul(T.concat([a, b], axis=1), r)),
        {"a": c1, "b": c2},
    )
    a18 = leaf((4, 5))
    r18 = proj((2, 3))
    register("getitem", lambda a=a18, r=r18: T.sum_(T.mul(a[1:3, 0:3], r)), {"a": a18})
    a19 = leaf((3, 4))
    register("sum_axis", lambda a=a19, r=proj((3,)): T.sum_(T.mul(T.sum_(a, axis=1), r)), {"a": a19})
    a20 = leaf((3, 4))
    register("mean", lambda a=a20: T.mean_(a), {"a": a20})
    a21, b21 = leaf((3, 4)), leaf((3, 4))
    register("mean_square_error", lambda a=a21, b=b21: T.mean_square_error(a, b), {"a": a21, "b": b21})
    # clamp: keep values away from the bounds so the subgradient is unambiguous
    a22 = Tensor(rng.uniform((3, 4)).astype(dtype) * 0.8 - 0.4, requires_grad=True)
    register("clamp", lambda a=a22, r=r: T.sum_(T.mul(T.clamp(a, -1.0, 1.0), r)), {"a": a22})
    x23, w23 = leaf((2, 3, 6, 6)), leaf((4, 3, 3, 3), 0.5)
    b23 = leaf((4,))
    r23 = proj((2, 4, 3, 3))
    register(
        "conv2d",
        lambda x=x23, w=w23, b=b23, r=r23: T.sum_(T.mul(T.conv2d(x, w, b, stride=2, padding=1), r)),
        {"x": x23, "w": w23, "b": b23},
    )
    x24 = leaf((2, 3, 4, 4))
    r24 = proj((2, 3, 2, 2))
    register("avgpool2x", lambda x=x24, r=r24: T.sum_(T.mul(T.avgpool2x(x), r)), {"x": x24})
    x25 = leaf((2, 3, 3, 3))
    r25 = proj((2, 3, 6, 6))
    register(
        "upsample_nearest2x",
        lambda x=x25, r=r25: T.sum_(T.mul(T.upsample_nearest2x(x), r)),
        {"x": x25},
    )
    x26 = leaf((2, 8, 3, 3))
    g26 = Tensor(rng.uniform((8,)).astype(dtype) + 0.5, requires_grad=True)
    be26 = leaf((8,))
    r26 = proj((2, 8, 3, 3))
    register(
        "group_norm",
        lambda x=x26, g=g26, b=be26, r=r26: T.sum_(T.mul(T.group_norm(x, 4, g, b), r)),
        {"x": x26, "gamma": g26, "beta": be26},
    )
    q27, k27, v27 = leaf((2, 4, 6)), leaf((2, 4, 6)), leaf((2, 4, 6))
    r27 = proj((2, 4, 6))
    register(
        "attention",
        lambda q=q27, k=k27, v=v27, r=r27: T.sum_(T.mul(T.attention(q, k, v), r)),
        {"q": q27, "k": k27, "v": v27},
    )
    return frags


def gradcheck(
    fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    tolerance: float = 1e-5,
    step: float | None = None,
) -> GradcheckReport:
    """Check d fn / d param for every block in ``params``.

    ``fn`` must return a scalar Tensor computed from the live Tensor objects
    in ``params`` (it is re-evaluated many times with perturbed values).
    Fragments are limited to 10^4 total parameters to keep runtime bounded.
    """
    total = sum(int(p.size) for p in params.values())
    if total > 10_000:
        raise ValueError(f"gradcheck fragment has {total} parameters (limit 10000)")

    for p in params.values():
        p.requires_grad = True
        p.grad = None
    loss = fn()
    tape_grads = backward(loss, write_leaves=False)

    report = GradcheckReport(tolerance=tolerance)
    for name, p in params.items():
        h = step if step is not None else _default_step(p.dtype)
        tape = np.asarray(tape_grads.get(p, np.zeros_like(p.data)), dtype=np.float64)
        fd = finite_difference_grad(fn, p, h)
        denom = np.maximum(np.maximum(np.abs(tape), np.abs(fd)), 1.0)
        err = float((np.abs(tape - fd) / denom).max()) if p.size else 0.0
        report.blocks.append(BlockResult(name=name, max_rel_err=err, passed=err < tolerance))
    return report
