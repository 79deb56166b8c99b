"""Trajectory orchestration, noise averaging, and statistical error.

Trajectories are processed in fixed-size batches.  Within a batch the running
(mean, M2) statistics are combined over a pairwise tree; batch partials are
then folded in batch order.  The tree depends only on trajectory indices, so
results are bit-identical for any worker count, and a checkpoint taken between
batches resumes to the same bits.

Two normalization estimators:

* ``ensemble`` (default): trajectories stay unnormalized through real time and
  every output is scaled once by 1 / Tr <rho_bar(hbar*beta)>.  This matches the
  linearity of the noise average exactly.
* ``per-trajectory``: each trajectory is normalized at tau = hbar*beta before
  real-time evolution.  Popular variance-reduction heuristic; a different
  (biased) estimator, so it is opt-in.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig, emit_config
from .errors import TooManyFailures, ValidationError
from .kernels import KernelContext
from .model import BathSpec, NormalModes, SystemSpec, diagonalize_bath, mode_couplings
from .noise import (NoiseCovariance, NoiseFactor, TimeGrids, build_covariance,
                    derive_seed, draw_normal, factorize)
from .propagate import equilibrate_batch, evolve_batch

BATCH_SIZE = 256
FAILURE_FRACTION = 0.01
DOCUMENT_SCHEMA = "esln-result/1"


# ---------------------------------------------------------------------------
# pipeline assembly

@dataclass(frozen=True)
class Pipeline:
    """All derived objects a run needs, built once from the config."""

    config: RunConfig
    modes: NormalModes
    ctx: KernelContext
    cov: NoiseCovariance
    factor: NoiseFactor

    @property
    def system(self) -> SystemSpec:
        return self.config.system

    @property
    def bath(self) -> BathSpec:
        return self.config.bath

    @property
    def grids(self) -> TimeGrids:
        return self.config.grids

    def mode_coupling_ops(self) -> list:
        return mode_couplings(self.modes, self.bath, self.system)


def build_pipeline(cfg: RunConfig) -> Pipeline:
    modes = diagonalize_bath(cfg.bath)
    ctx = KernelContext.from_bath(cfg.bath, modes, cfg.system.hbar, cfg.system.beta)
    cov = build_covariance(ctx, cfg.grids, cross_kernel=cfg.cross_kernel,
                           dim_cap=cfg.dim_cap)
    factor = factorize(cov, method=cfg.factorization)
    return Pipeline(config=cfg, modes=modes, ctx=ctx, cov=cov, factor=factor)


# ---------------------------------------------------------------------------
# streaming statistics (Chan's parallel mean/M2 merge, complex-valued)

@dataclass
class _Stats:
    n: int
    mean: np.ndarray        # complex
    m2_re: np.ndarray       # real
    m2_im: np.ndarray       # real

    @classmethod
    def empty(cls, shape) -> "_Stats":
        return cls(0, np.zeros(shape, complex), np.zeros(shape), np.zeros(shape))

    def merge(self, other: "_Stats") -> "_Stats":
        if self.n == 0:
            return other
        if other.n == 0:
            return self
        n = self.n + other.n
        delta = other.mean - self.mean
        w = other.n / n
        mean = self.mean + delta * w
        corr = self.n * other.n / n
        m2_re = self.m2_re + other.m2_re + delta.real ** 2 * corr
        m2_im = self.m2_im + other.m2_im + delta.imag ** 2 * corr
        return _Stats(n, mean, m2_re, m2_im)

    def se(self):
        """Standard error of the mean, (re, im) parts."""
        if self.n < 2:
            z = np.zeros_like(self.m2_re)
            return z, z.copy()
        f = 1.0 / (self.n * (self.n - 1))
        return np.sqrt(self.m2_re * f), np.sqrt(self.m2_im * f)


def _pairwise_stats(values: np.ndarray) -> _Stats:
    """Pairwise-tree (mean, M2) of values along axis 0 (complex array)."""
    k = values.shape[0]
    if k == 0:
        return _Stats.empty(values.shape[1:])
    n = np.ones(k)
    mean = values.astype(complex)
    m2_re = np.zeros(values.shape, dtype=float)
    m2_im = np.zeros(values.shape, dtype=float)
    while k > 1:
        pairs = k // 2
        a = slice(0, 2 * pairs, 2)
        b = slice(1, 2 * pairs, 2)
        na, nb = n[a], n[b]
        nsum = na + nb
        delta = mean[b] - mean[a]
        shape = (-1,) + (1,) * (values.ndim - 1)
        w = (nb / nsum).reshape(shape)
        corr = (na * nb / nsum).reshape(shape)
        new_mean = mean[a] + delta * w
        new_m2_re = m2_re[a] + m2_re[b] + delta.real ** 2 * corr
        new_m2_im = m2_im[a] + m2_im[b] + delta.imag ** 2 * corr
        if k % 2:
            mean = np.concatenate([new_mean, mean[-1:]])
            m2_re = np.concatenate([new_m2_re, m2_re[-1:]])
            m2_im = np.concatenate([new_m2_im, m2_im[-1:]])
            n = np.concatenate([nsum, n[-1:]])
        else:
            mean, m2_re, m2_im, n = new_mean, new_m2_re, new_m2_im, nsum
        k = mean.shape[0]
    return _Stats(int(n[0]), mean[0], m2_re[0], m2_im[0])


# ---------------------------------------------------------------------------
# batch execution

@dataclass
class _BatchResult:
    series: _Stats          # (n_t, d, d) trajectory statistics
    zfac: _Stats            # scalar z-factor statistics
    n_failed: int


def _run_batch(pipe: Pipeline, indices: np.ndarray, substeps: int,
               integrator: str) -> _BatchResult:
    cfg = pipe.config
    system, grids, factor = cfg.system, cfg.grids, pipe.factor
    m, n_t, n_tau = factor.n_sites, factor.n_t, factor.n_tau
    b = len(indices)
    w = np.empty((factor.rank, b))
    for j, idx in enumerate(indices):
        w[:, j] = draw_normal(factor, derive_seed(cfg.master_seed, int(idx)))
    z = factor.a @ w                                   # (dim, b)
    ne = m * n_t
    eta = z[:ne].T.reshape(b, m, n_t) if m else np.zeros((b, 0, n_t), complex)
    nu = z[ne:2 * ne].T.reshape(b, m, n_t) if m else np.zeros((b, 0, n_t), complex)
    mu = z[2 * ne:].T.reshape(b, m, n_tau) if m else np.zeros((b, 0, n_tau), complex)

    rho_end, div_imag = equilibrate_batch(system, mu, grids, substeps)
    traces = np.trace(rho_end, axis1=1, axis2=2)
    degenerate = np.abs(traces) < 1e-300
    failed = div_imag | degenerate
    if cfg.normalize == "per-trajectory":
        safe = np.where(failed, 1.0, traces)
        rho_start = rho_end / safe[:, None, None]
    else:
        rho_start = rho_end
    series, div_real = evolve_batch(system, eta, nu, grids, rho_start, substeps,
                                    integrator)
    failed |= div_real
    ok = ~failed
    zfac = traces[ok] / system.dim
    return _BatchResult(series=_pairwise_stats(series[ok]),
                        zfac=_pairwise_stats(zfac),
                        n_failed=int(failed.sum()))


def _batch_ranges(n_traj: int):
    return [(start, min(start + BATCH_SIZE, n_traj))
            for start in range(0, n_traj, BATCH_SIZE)]


# ---------------------------------------------------------------------------
# results

@dataclass
class EnsembleResult:
    """Noise-averaged reduced density matrix with per-element standard errors."""

    times: np.ndarray           # (n_t,)
    mean_rho: np.ndarray        # (n_t, d, d) complex
    se_re: np.ndarray           # (n_t, d, d)
    se_im: np.ndarray           # (n_t, d, d)
    mean_rho0: np.ndarray       # (d, d)
    n_traj: int
    n_ok: int
    n_failed: int
    master_seed: int
    normalize: str
    z_factor_mean: complex
    z_factor_se: float
    config_echo: dict = field(default_factory=dict)

    @property
    def stderr_rho(self) -> np.ndarray:
        """Per-element standard error, real and imaginary parts in quadrature."""
        return np.sqrt(self.se_re ** 2 + self.se_im ** 2)


@dataclass(frozen=True)
class HermiticityReport:
    """How far the averaged state is from Hermitian, unit trace, and positivity,
    in units of its own standard error."""

    max_hermiticity_z: float
    max_trace_z: float
    min_eigenvalue: float
    n_ok: int
    threshold: float = 5.0
    inconclusive_below: int = 100

    @property
    def status(self) -> str:
        if max(self.max_hermiticity_z, self.max_trace_z) < self.threshold:
            return "PASS"
        if self.n_ok < self.inconclusive_below:
            return "INCONCLUSIVE"
        return "FAIL"

    def lines(self):
        return [
            f"hermiticity: worst |rho - rho^dag| = {self.max_hermiticity_z:.3f} stderr units",
            f"trace:       worst |Tr rho - 1|   = {self.max_trace_z:.3f} stderr units",
            f"min eigenvalue of the Hermitized mean: {self.min_eigenvalue:.3e}",
            f"status: {self.status} (threshold {self.threshold:g}, n_ok = {self.n_ok})",
        ]


def hermiticity_trace_report(result: EnsembleResult) -> HermiticityReport:
    mean = result.mean_rho
    ser, sei = result.se_re, result.se_im
    anti = mean - np.conj(np.swapaxes(mean, -1, -2))
    scale_re = np.sqrt(ser ** 2 + np.swapaxes(ser, -1, -2) ** 2)
    scale_im = np.sqrt(sei ** 2 + np.swapaxes(sei, -1, -2) ** 2)
    herm_z = _safe_ratio(np.abs(anti.real), scale_re)
    herm_z = np.maximum(herm_z, _safe_ratio(np.abs(anti.imag), scale_im))
    trace_dev = np.abs(np.einsum("tii->t", mean) - 1.0)
    trace_scale = np.sqrt(np.einsum("tii->t", ser ** 2) + np.einsum("tii->t", sei ** 2))
    trace_z = _safe_ratio(trace_dev, trace_scale)
    hermitized = 0.5 * (mean + np.conj(np.swapaxes(mean, -1, -2)))
    min_eig = min(float(np.linalg.eigvalsh(h).min()) for h in hermitized)
    return HermiticityReport(max_hermiticity_z=float(herm_z.max()),
                             max_trace_z=float(trace_z.max()),
                             min_eigenvalue=min_eig,
                             n_ok=result.n_ok)


def _safe_ratio(num, den):
    num = np.asarray(num, dtype=float)
    den = np.asarray(den, dtype=float)
    out = np.where(num <= 1e-14, 0.0, num / np.maximum(den, 1e-300))
    return out


# ---------------------------------------------------------------------------
# checkpointing

def _stats_to_doc(st: _Stats) -> dict:
    return {"n": st.n,
            "mean_re": st.mean.real.tolist(), "mean_im": st.mean.imag.tolist(),
            "m2_re": st.m2_re.tolist(), "m2_im": st.m2_im.tolist()}


def _stats_from_doc(doc: dict) -> _Stats:
    mean = np.array(doc["mean_re"]) + 1j * np.array(doc["mean_im"])
    return _Stats(int(doc["n"]), mean, np.array(doc["m2_re"]), np.array(doc["m2_im"]))


def _write_checkpoint(path: str, cfg_echo: dict, next_batch: int, series: _Stats,
                      zfac: _Stats, n_failed: int):
    doc = {"schema": DOCUMENT_SCHEMA + "+checkpoint",
           "config": cfg_echo,
           "next_batch": next_batch,
           "n_failed": n_failed,
           "series": _stats_to_doc(series),
           "z_factor": _stats_to_doc(zfac)}
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")
    os.replace(tmp, path)


def _read_checkpoint(path: str, cfg_echo: dict):
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("config") != cfg_echo:
        raise ValidationError("checkpoint", "checkpoint belongs to a different configuration")
    return (int(doc["next_batch"]), _stats_from_doc(doc["series"]),
            _stats_from_doc(doc["z_factor"]), int(doc["n_failed"]))


# ---------------------------------------------------------------------------
# the ensemble run

def run_ensemble(cfg: RunConfig, n_traj: int | None = None,
                 master_seed: int | None = None, workers: int = 1,
                 substeps: int = 1, integrator: str = "direct",
                 checkpoint_path: str | None = None,
                 pipeline: Pipeline | None = None) -> EnsembleResult:
    """Run the full two-time Monte Carlo and average it.

    Deterministic in (config, master_seed, n_traj): the per-trajectory seeds,
    the batch layout, and the reduction tree are all functions of trajectory
    indices alone, so the worker count cannot change any output bit.
    """
    if n_traj is not None or master_seed is not None:
        cfg = cfg.with_overrides(
            **({"n_traj": n_traj} if n_traj is not None else {}),
            **({"master_seed": master_seed} if master_seed is not None else {}))
    pipe = pipeline if pipeline is not None and pipeline.config is cfg \
        else build_pipeline(cfg)
    cfg_echo = emit_config(cfg)
    ranges = _batch_ranges(cfg.n_traj)
    d = cfg.system.dim
    series_acc = _Stats.empty((cfg.grids.n_t, d, d))
    zfac_acc = _Stats.empty(())
    n_failed = 0
    start_batch = 0
    if checkpoint_path and os.path.exists(checkpoint_path):
        start_batch, series_acc, zfac_acc, n_failed = _read_checkpoint(
            checkpoint_path, cfg_echo)

    interval_batches = 0
    if checkpoint_path and cfg.checkpoint_interval > 0:
        interval_batches = max(1, cfg.checkpoint_interval // BATCH_SIZE)

    def work(batch_idx: int) -> _BatchResult:
        lo, hi = ranges[batch_idx]
        return _run_batch(pipe, np.arange(lo, hi), substeps, integrator)

    todo = list(range(start_batch, len(ranges)))
    pos = 0
    while pos < len(todo):
        wave = todo[pos:pos + max(1, workers)]
        if workers > 1 and len(wave) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                outs = list(pool.map(work, wave))
        else:
            outs = [work(b) for b in wave]
        for b_idx, out in zip(wave, outs):
            series_acc = series_acc.merge(out.series)
            zfac_acc = zfac_acc.merge(out.zfac)
            n_failed += out.n_failed
            done_batches = b_idx + 1
            if interval_batches and done_batches % interval_batches == 0:
                _write_checkpoint(checkpoint_path, cfg_echo, done_batches,
                                  series_acc, zfac_acc, n_failed)
        pos += len(wave)

    n_ok = series_acc.n
    if n_failed > FAILURE_FRACTION * cfg.n_traj:
        raise TooManyFailures(
            f"{n_failed} of {cfg.n_traj} trajectories diverged "
            f"(> {FAILURE_FRACTION:.0%})")
    if n_ok < 2:
        raise TooManyFailures("fewer than two trajectories completed")

    mean = series_acc.mean
    se_re, se_im = series_acc.se()
    if cfg.normalize == "ensemble":
        z_hat = np.trace(mean[0])
        scale = 1.0 / z_hat
        mean = mean * scale
        se_re = se_re * abs(scale)
        se_im = se_im * abs(scale)
    zf_se_re, zf_se_im = zfac_acc.se()
    return EnsembleResult(
        times=cfg.grids.t, mean_rho=mean, se_re=se_re, se_im=se_im,
        mean_rho0=mean[0].copy(), n_traj=cfg.n_traj, n_ok=n_ok, n_failed=n_failed,
        master_seed=cfg.master_seed, normalize=cfg.normalize,
        z_factor_mean=complex(zfac_acc.mean), z_factor_se=float(np.hypot(zf_se_re, zf_se_im)),
        config_echo=cfg_echo)


def run_equilibration(cfg: RunConfig, n_traj: int | None = None,
                      master_seed: int | None = None, workers: int = 1,
                      substeps: int = 1) -> EnsembleResult:
    """Imaginary-time phase only: statistics of the initial reduced density.

    Returns an EnsembleResult whose time axis has the single entry t = 0.
    """
    if n_traj is not None or master_seed is not None:
        cfg = cfg.with_overrides(
            **({"n_traj": n_traj} if n_traj is not None else {}),
            **({"master_seed": master_seed} if master_seed is not None else {}))
    pipe = build_pipeline(cfg)
    d = cfg.system.dim
    factor = pipe.factor
    m, n_t, n_tau = factor.n_sites, factor.n_t, factor.n_tau

    def work(rng):
        lo, hi = rng
        idx = np.arange(lo, hi)
        w = np.empty((factor.rank, len(idx)))
        for j, i in enumerate(idx):
            w[:, j] = draw_normal(factor, derive_seed(cfg.master_seed, int(i)))
        z = factor.a @ w
        mu = z[2 * m * n_t:].T.reshape(len(idx), m, n_tau) if m else \
            np.zeros((len(idx), 0, n_tau), complex)
        rho_end, diverged = equilibrate_batch(cfg.system, mu, cfg.grids, substeps)
        traces = np.trace(rho_end, axis1=1, axis2=2)
        failed = diverged | (np.abs(traces) < 1e-300)
        ok = ~failed
        vals = rho_end[ok]
        if cfg.normalize == "per-trajectory":
            vals = vals / traces[ok][:, None, None]
        return (_pairwise_stats(vals[:, None]),          # (1, d, d) time axis
                _pairwise_stats(traces[ok] / d), int(failed.sum()))

    ranges = _batch_ranges(cfg.n_traj)
    series_acc = _Stats.empty((1, d, d))
    zfac_acc = _Stats.empty(())
    n_failed = 0
    if workers > 1 and len(ranges) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(work, ranges))
    else:
        outs = [work(r) for r in ranges]
    for s, zf, nf in outs:
        series_acc = series_acc.merge(s)
        zfac_acc = zfac_acc.merge(zf)
        n_failed += nf
    if n_failed > FAILURE_FRACTION * cfg.n_traj:
        raise TooManyFailures(f"{n_failed} of {cfg.n_traj} trajectories diverged")
    mean = series_acc.mean
    se_re, se_im = series_acc.se()
    if cfg.normalize == "ensemble":
        scale = 1.0 / np.trace(mean[0])
        mean = mean * scale
        se_re = se_re * abs(scale)
        se_im = se_im * abs(scale)
    zf_se_re, zf_se_im = zfac_acc.se()
    return EnsembleResult(
        times=np.zeros(1), mean_rho=mean, se_re=se_re, se_im=se_im,
        mean_rho0=mean[0].copy(), n_traj=cfg.n_traj, n_ok=series_acc.n,
        n_failed=n_failed, master_seed=cfg.master_seed, normalize=cfg.normalize,
        z_factor_mean=complex(zfac_acc.mean), z_factor_se=float(np.hypot(zf_se_re, zf_se_im)),
        config_echo=emit_config(cfg))


# ---------------------------------------------------------------------------
# output document and CSV

def result_document(result: EnsembleResult) -> dict:
    """JSON-compatible output document (deterministic for identical results)."""
    return {
        "schema": DOCUMENT_SCHEMA,
        "config": result.config_echo,
        "master_seed": result.master_seed,
        "normalize": result.normalize,
        "n_traj": result.n_traj,
        "n_ok": result.n_ok,
        "n_failed": result.n_failed,
        "grid": {"n_t": int(result.times.size),
                 "dt": float(result.times[1] - result.times[0]) if result.times.size > 1 else 0.0},
        "times": [float(t) for t in result.times],
        "z_factor": {"mean_re": result.z_factor_mean.real,
                     "mean_im": result.z_factor_mean.imag,
                     "se": result.z_factor_se},
        "mean_rho": [[[[float(v.real), float(v.imag)] for v in row] for row in mat]
                     for mat in result.mean_rho],
        "stderr_re": [[[float(v) for v in row] for row in mat] for mat in result.se_re],
        "stderr_im": [[[float(v) for v in row] for row in mat] for mat in result.se_im],
    }


def document_bytes(doc: dict) -> bytes:
    return (json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n").encode()


def write_document(result: EnsembleResult, path: str):
    with open(path, "wb") as fh:
        fh.write(document_bytes(result_document(result)))


def csv_lines(times, mean, se_re, se_im):
    """Shared CSV schema: one row per (t, row, col)."""
    yield "t,row,col,re,im,se_re,se_im"
    d = mean.shape[1]
    for k, t in enumerate(times):
        for r in range(d):
            for c in range(d):
                v = mean[k, r, c]
                yield (f"{float(t)!r},{r},{c},{float(v.real)!r},{float(v.imag)!r},"
                       f"{float(se_re[k, r, c])!r},{float(se_im[k, r, c])!r}")


def write_csv(result: EnsembleResult, path: str):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in csv_lines(result.times, result.mean_rho, result.se_re, result.se_im):
            fh.write(line + "\n")


def read_csv(path: str):
    """Read the CSV schema back into (times, mean, se_re, se_im)."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "t,row,col,re,im,se_re,se_im":
            raise ValidationError(path, f"unexpected CSV header {header!r}")
        for line in fh:
            parts = line.strip().split(",")
            if len(parts) != 7:
                raise ValidationError(path, f"malformed CSV row {line.strip()!r}")
            rows.append((float(parts[0]), int(parts[1]), int(parts[2]),
                         float(parts[3]), float(parts[4]), float(parts[5]),
                         float(parts[6])))
    if not rows:
        raise ValidationError(path, "empty CSV")
    d = max(r[1] for r in rows) + 1
    times = sorted({r[0] for r in rows})
    t_index = {t: i for i, t in enumerate(times)}
    n_t = len(times)
    mean = np.zeros((n_t, d, d), complex)
    se_re = np.zeros((n_t, d, d))
    se_im = np.zeros((n_t, d, d))
    for t, r, c, re, im, sr, si in rows:
        k = t_index[t]
        mean[k, r, c] = re + 1j * im
        se_re[k, r, c] = sr
        se_im[k, r, c] = si
    return np.array(times), mean, se_re, se_im


def compare_series(path_a: str, path_b: str):
    """Per-element z-scores between two CSV series on the same grid.

    z = |mean_a - mean_b| / sqrt(se_a^2 + se_b^2) with the standard errors of
    each element's real and imaginary parts combined in quadrature.
    Returns (max_z, z_array) with z_array shaped (n_t, d, d).
    """
    times_a, mean_a, se_re_a, se_im_a = read_csv(path_a)
    times_b, mean_b, se_re_b, se_im_b = read_csv(path_b)
    if times_a.shape != times_b.shape or np.abs(times_a - times_b).max() > 1e-9:
        raise ValidationError(path_b, "time grids differ between the two series")
    if mean_a.shape != mean_b.shape:
        raise ValidationError(path_b, "matrix dimensions differ between the two series")
    diff = np.abs(mean_a - mean_b)
    scale = np.sqrt(se_re_a ** 2 + se_im_a ** 2 + se_re_b ** 2 + se_im_b ** 2)
    z = _safe_ratio(diff, scale)
    return float(z.max()), z
