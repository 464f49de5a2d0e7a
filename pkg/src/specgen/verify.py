"""Built-in oracle suite backing the ``verify`` command.

Each check compares part of the pipeline against an independent reference:
central finite differences for gradients, hand-evaluated closed forms for the
schedule/KL/posterior algebra, time-domain energy and analytic tones for the
STFT, scalar-loop reimplementations for the image metrics, and byte-level
round-trips for the checkpoint container. Output is deterministic (fixed
seeds, fixed formatting) so two runs of ``verify`` are byte-identical.
"""

from __future__ import annotations

import math
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import metrics as M
from . import unet as U
from .diffusion import (
    CheckpointError,
    from_betas,
    gaussian_kl,
    load_checkpoint,
    make_linear_schedule,
    p_sample_step,
    q_posterior,
    q_sample,
    save_checkpoint,
    vlb_terms,
)
from .numerics import RngState, Tensor, gradcheck
from .numerics import tensor as T
from .numerics.gradcheck import op_fragments
from .rfscene import SceneConfig, generate_dataset, stft, synth_iq


@dataclass
class OracleResult:
    name: str
    passed: bool
    detail: str


# -- independent scalar-loop references (kept free of library code paths) -------


def _psnr_loops(a, b, max_value):
    total = 0.0
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            d = float(a[i, j]) - float(b[i, j])
            total += d * d
    mse = total / a.size
    return math.inf if mse == 0 else 10.0 * math.log10(max_value * max_value / mse)


def _ssim_loops(a, b, window=7, k1=0.01, k2=0.03, data_range=1.0):
    h, w = a.shape
    n = window * window
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    vals = []
    for i in range(h - window + 1):
        for j in range(w - window + 1):
            pa = a[i : i + window, j : j + window].ravel()
            pb = b[i : i + window, j : j + window].ravel()
            mua, mub = pa.mean(), pb.mean()
            va = ((pa - mua) ** 2).sum() / (n - 1)
            vb = ((pb - mub) ** 2).sum() / (n - 1)
            vab = ((pa - mua) * (pb - mub)).sum() / (n - 1)
            vals.append(
                ((2 * mua * mub + c1) * (2 * vab + c2))
                / ((mua**2 + mub**2 + c1) * (va + vb + c2))
            )
    return float(np.mean(vals))


# -- checks ----------------------------------------------------------------------


def check_rng_moments() -> OracleResult:
    z = RngState(314159).normal((100_000,))
    n = z.size
    mean_ok = abs(z.mean()) < 5.0 / math.sqrt(n)
    var_ok = abs(z.var() - 1.0) < 5.0 * math.sqrt(2.0 / (n - 1))
    return OracleResult(
        "rng_gaussian_moments",
        mean_ok and var_ok,
        f"mean={z.mean():+.3e} var={z.var():.5f} over {n} draws",
    )


def check_op_gradients() -> OracleResult:
    worst_name, worst = "", 0.0
    for name, fn, params in op_fragments(seed=0):
        report = gradcheck(fn, params, tolerance=1e-5)
        if report.max_rel_err > worst:
            worst, worst_name = report.max_rel_err, name
        if not report.passed:
            return OracleResult("op_gradients", False, f"{name} err {report.max_rel_err:.3e}")
    return OracleResult("op_gradients", True, f"worst {worst_name} err {worst:.3e} < 1e-5")


def check_block_gradients() -> OracleResult:
    rng = RngState(42)
    details = []
    # residual block
    cfg = U.UNetConfig(resolution=4, base_channels=8, channel_mult=(1,),
                       res_blocks_per_level=1, attention_resolutions=(),
                       time_embed_dim=8, num_heads=1)
    params = U.init_weights(cfg, rng, dtype=np.float64)
    block = {k: v for k, v in params.items() if k.startswith("enc0.res0")}
    for p in block.values():
        p.data = p.data + rng.normal(p.shape) * 0.05
    x = Tensor(rng.normal((2, 8, 4, 4)))
    emb = Tensor(rng.normal((2, 8)))
    r = Tensor(rng.normal((2, 8, 4, 4)))
    rep = gradcheck(lambda: T.mean_(T.mul(U._resblock(block, "enc0.res0", x, emb), r)),
                    block, tolerance=1e-4, step=1e-6)
    if not rep.passed:
        return OracleResult("block_gradients", False, f"res block err {rep.max_rel_err:.3e}")
    details.append(f"res {rep.max_rel_err:.1e}")
    # attention block on a 2x8x4x4 input
    attn = {k: v for k, v in U.init_weights(cfg, rng, dtype=np.float64).items()
            if k.startswith("mid.attn")}
    attn = {k.replace("mid.attn", "attn"): v for k, v in attn.items()}
    for p in attn.values():
        p.data = p.data + rng.normal(p.shape) * 0.05
    xa = Tensor(rng.normal((2, 8, 4, 4)))
    ra = Tensor(rng.normal((2, 8, 4, 4)))
    rep = gradcheck(lambda: T.mean_(T.mul(U._attention_block(attn, "attn", xa, 2), ra)),
                    attn, tolerance=1e-4, step=1e-6)
    if not rep.passed:
        return OracleResult("block_gradients", False, f"attention err {rep.max_rel_err:.3e}")
    details.append(f"attn {rep.max_rel_err:.1e}")
    return OracleResult("block_gradients", True, "max rel err: " + ", ".join(details))


def check_unet_gradients() -> OracleResult:
    cfg = U.UNetConfig(resolution=8, base_channels=4, channel_mult=(1, 2),
                       res_blocks_per_level=1, attention_resolutions=(4,),
                       time_embed_dim=8, num_heads=2)
    rng = RngState(77)
    params = U.init_weights(cfg, rng, dtype=np.float64)
    for p in params.values():
        p.data = p.data + rng.normal(p.shape) * 0.05
    count = sum(p.size for p in params.values())
    x = Tensor(rng.normal((1, 1, 8, 8)))
    r = Tensor(rng.normal((1, 1, 8, 8)))
    rep = gradcheck(lambda: T.mean_(T.mul(U.forward(x, 3, params, cfg), r)),
                    params, tolerance=1e-4, step=1e-6)
    return OracleResult(
        "unet_gradients",
        rep.passed and count <= 10_000,
        f"{count} params, max rel err {rep.max_rel_err:.3e} (tol 1e-4)",
    )


def check_schedule() -> OracleResult:
    s = make_linear_schedule(4, 0.1, 0.4)
    hand = np.array([0.9, 0.72, 0.504, 0.3024])
    ok = np.allclose(s.alpha_bar, hand, atol=1e-12)
    s2 = make_linear_schedule(1000, 1e-4, 0.02)
    prod = 1.0
    for b in np.linspace(1e-4, 0.02, 1000):
        prod *= 1.0 - b
    ok = ok and abs(s2.alpha_bar[-1] - prod) / prod < 1e-12 and 0.9 * 4e-5 < prod < 1.1 * 4e-5
    return OracleResult("schedule_cumprod", ok, f"alpha_bar_1000 = {s2.alpha_bar[-1]:.4e}")


def check_q_sample_statistics() -> OracleResult:
    s = make_linear_schedule(10, 0.02, 0.2)
    t, x0v = 7, 0.6
    ab = s.alpha_bar[t - 1]
    eps = RngState(2718).normal((100_000,))
    xt = q_sample(np.full(100_000, x0v), np.full(100_000, t), eps, s)
    n = xt.size
    ok_mean = abs(xt.mean() - math.sqrt(ab) * x0v) < 5 * math.sqrt(1 - ab) / math.sqrt(n)
    ok_var = abs(xt.var() - (1 - ab)) < 5 * (1 - ab) * math.sqrt(2.0 / (n - 1))
    return OracleResult(
        "q_sample_marginals", ok_mean and ok_var,
        f"mean={xt.mean():.5f} (want {math.sqrt(ab) * x0v:.5f}), var={xt.var():.5f} (want {1 - ab:.5f})",
    )


def check_kl_closed_forms() -> OracleResult:
    cases = [
        (gaussian_kl(0.3, 1.2, 0.3, 1.2).item(), 0.0),
        (gaussian_kl(1.0, 1.0, 0.0, 1.0).item(), 0.5),
        (gaussian_kl(0.0, 4.0, 0.0, 1.0).item(), 0.5 * (math.log(0.25) + 3.0)),
    ]
    worst = max(abs(got - want) for got, want in cases)
    return OracleResult("kl_closed_forms", worst < 1e-12, f"worst abs err {worst:.2e}")


def check_posterior_and_sampler() -> OracleResult:
    s = make_linear_schedule(4, 0.1, 0.4)
    mean, var = q_posterior(np.asarray(1.0), np.asarray(1.0), 2, s)
    want_mean = (math.sqrt(0.9) * 0.2 + math.sqrt(0.8) * 0.1) / 0.28
    want_var = 0.2 * 0.1 / 0.28
    ok = abs(float(mean) - want_mean) < 1e-12 and abs(var - want_var) < 1e-12

    class _Oracle:
        params = {}

        def __call__(self, x, t):  # emits the eps that reconstructs x0 = 1
            ab = s.alpha_bar[int(t[0]) - 1]
            return Tensor((x.data - math.sqrt(ab) * 1.0) / math.sqrt(1 - ab))

    class _Zero(RngState):
        def __init__(self):
            super().__init__(0)

        def normal(self, shape=(), dtype=np.float64):
            return np.zeros(shape, dtype=dtype)

    t = 2
    ab = s.alpha_bar[t - 1]
    x_t = np.full((1, 1, 1, 1), math.sqrt(ab) + math.sqrt(1 - ab))
    out = p_sample_step(_Oracle(), x_t, t, _Zero(), s, "fixed_small")
    want = (x_t.item() - s.beta[t - 1] / math.sqrt(1 - ab)) / math.sqrt(s.alpha[t - 1])
    ok = ok and abs(out.item() - want) < 1e-12
    return OracleResult("posterior_and_sampler_mean", ok, f"mu err {abs(out.item() - want):.2e}")


def check_vlb_oracle() -> OracleResult:
    s = make_linear_schedule(4, 0.1, 0.4)
    x0 = np.clip(RngState(55).normal((2, 1, 4, 4)), -1, 1)

    class _Posterior:
        params = {}

        def __call__(self, x, t):
            out = np.zeros_like(x.data)
            for i, ti in enumerate(np.asarray(t)):
                ti = int(ti)
                ab = s.alpha_bar[ti - 1]
                if ti == 1:
                    qm = x0[i]
                else:
                    qm, _ = q_posterior(x0[i], x.data[i], ti, s)
                out[i] = (x.data[i] - math.sqrt(s.alpha[ti - 1]) * qm) * math.sqrt(1 - ab) / s.beta[ti - 1]
            return Tensor(out)

    terms = vlb_terms(_Posterior(), x0, RngState(56), s)
    worst = float(np.max(np.abs(terms[1 : s.T])))
    return OracleResult("vlb_exact_posterior", worst < 1e-10, f"worst KL term {worst:.2e}")


def check_stft() -> OracleResult:
    rng = RngState(99)
    x = rng.normal((512,)) + 1j * rng.normal((512,))
    p = stft(x, nfft=64, hop=64, window="rectangular")
    covered = x[: p.shape[0] * 64]
    parseval = abs(p.sum() / 64 - np.sum(np.abs(covered) ** 2)) / np.sum(np.abs(covered) ** 2)
    tone_ok = True
    for k in (1, 16, 40, 63):
        tonep = stft(np.exp(2j * math.pi * (k / 64) * np.arange(256)), 64, 64, "rectangular")
        tone_ok = tone_ok and int(tonep.sum(axis=0).argmax()) == k
    return OracleResult(
        "stft_parseval_and_tones", parseval < 1e-9 and tone_ok, f"parseval rel err {parseval:.2e}"
    )


def check_metrics() -> OracleResult:
    a = np.zeros((10, 10))
    b = np.full((10, 10), 0.1)
    ok = abs(M.psnr(a, b) - 20.0) < 1e-12
    rng = RngState(123)
    worst = 0.0
    for _ in range(5):
        x = rng.uniform((16, 16))
        y = rng.uniform((16, 16))
        ok = ok and abs(M.ssim(x, x) - 1.0) < 1e-9
        worst = max(worst, abs(M.ssim(x, y) - _ssim_loops(x, y)))
        worst = max(worst, abs(M.psnr(x, y) - _psnr_loops(x, y, 1.0)))
    return OracleResult("metric_oracles", ok and worst < 1e-6, f"worst loop-oracle err {worst:.2e}")


def check_checkpoint() -> OracleResult:
    rng = RngState(7)
    params = {"a.w": Tensor(rng.normal((3, 3), dtype=np.float32)),
              "b.w": Tensor(rng.normal((5,), dtype=np.float64))}
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "t.ckpt"
        save_checkpoint(path, "[x]\ny = 1\n", params, None)
        cfg, live, ema = load_checkpoint(path)
        ok = cfg == "[x]\ny = 1\n" and all(np.array_equal(live[k], params[k].data) for k in params)
        raw = bytearray(path.read_bytes())
        raw[len(raw) // 2] ^= 0x10
        path.write_bytes(bytes(raw))
        try:
            load_checkpoint(path)
            ok = False
        except CheckpointError:
            pass
    return OracleResult("checkpoint_roundtrip_crc", ok, "round-trip exact, corruption detected")


def check_dataset_determinism() -> OracleResult:
    import hashlib

    digests = []
    for _ in range(2):
        with tempfile.TemporaryDirectory() as d:
            generate_dataset(1, SceneConfig(rng=RngState(2024)), d, resolution=16)
            h = hashlib.sha256()
            for f in sorted(Path(d).rglob("*")):
                if f.is_file():
                    h.update(f.name.encode())
                    h.update(f.read_bytes())
            digests.append(h.hexdigest())
    return OracleResult("dataset_determinism", digests[0] == digests[1], f"sha256 {digests[0][:16]}")


def check_scene_statistics() -> OracleResult:
    cfg = SceneConfig(rng=RngState(11), duration=0.1)
    var = float(np.mean(np.abs(synth_iq(cfg, [])) ** 2))
    return OracleResult("scene_noise_variance", 0.97 < var < 1.03, f"variance {var:.4f}")


ALL_CHECKS: list[Callable[[], OracleResult]] = [
    check_rng_moments,
    check_op_gradients,
    check_block_gradients,
    check_unet_gradients,
    check_schedule,
    check_q_sample_statistics,
    check_kl_closed_forms,
    check_posterior_and_sampler,
    check_vlb_oracle,
    check_stft,
    check_metrics,
    check_checkpoint,
    check_dataset_determinism,
    check_scene_statistics,
]


def run_verification(name_filter: str = "") -> tuple[list[OracleResult], str]:
    """Run (filtered) oracle checks; returns results and the printable report."""
    results = []
    for check in ALL_CHECKS:
        name = check.__name__.removeprefix("check_")
        if name_filter and name_filter not in name:
            continue
        results.append(check())
    lines = [
        f"{'PASS' if r.passed else 'FAIL'}  {r.name:<28} {r.detail}" for r in results
    ]
    n_pass = sum(r.passed for r in results)
    lines.append(f"{n_pass}/{len(results)} oracle checks passed")
    return results, "\n".join(lines)
