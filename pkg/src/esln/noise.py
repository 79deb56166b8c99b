"""Correlated complex Gaussian noise on the two-time grid.

The stochastic fields are eta_i(t_k), nu_i(t_k) on the real-time grid and
mu_i(tau_k) on the imaginary-time grid.  Only the unconjugated second moments
<z z^T> (the pseudo-covariance) are constrained:

    <eta_i(t) eta_j(t')> = hbar * L^R_ij(t - t')
    <eta_i(t) nu_j(t')>  = 2i Theta(t - t') L^I_ij(t - t'),  Theta(0) = 1/2
    <eta_i(t) mu_j(tau)> = hbar * L_ij(t - i (hbar*beta - tau))      [default]
    <mu_i(tau) mu_j(tau')> = hbar * [L^e_ij(tau - tau') - L^o_ij(|tau - tau'|)]
    <nu nu> = <nu mu> = 0

The eta-mu cross block fixes the correlation between the equilibrium
preparation and the subsequent real-time kicks.  Two alternative conventions
for it circulate (see ``CROSS_KERNEL_VARIANTS``); the default is the one
validated against exact diagonalization — with either alternative the
noise-averaged state drifts away from a manifestly stationary equilibrium
(tests/test_ensemble.py covers this).

Sampling draws z = a @ w with w real i.i.d. standard normal and a a^T = sigma,
so the pseudo-covariance holds by construction while <z z^dagger> = a a^dagger
remains free, as it must.  The factor a comes from a Takagi (Autonne)
factorization of the complex symmetric sigma.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CapExceeded, FactorizationFailure
from .kernels import KernelContext, site_kernel, _mode_values

CROSS_KERNEL_VARIANTS = ("equilibrium", "printed-master", "printed-split")
DEFAULT_DIM_CAP = 6000
FACTOR_REL_TOL = 1e-8
SV_TRUNCATION = 1e-12
_CHUNK = 4096


@dataclass(frozen=True)
class TimeGrids:
    """Uniform real-time and imaginary-time grids, both endpoints included.

    Spans are primary so they survive emit/parse round trips exactly; the
    steps dt = t_f/(n_t-1) and dtau = hbar_beta/(n_tau-1) are derived.
    """

    t_f: float
    n_t: int
    hbar_beta: float
    n_tau: int

    def __post_init__(self):
        if self.n_t < 2 or self.n_tau < 2:
            raise ValueError("both grids need at least two points")
        if self.t_f <= 0 or self.hbar_beta <= 0:
            raise ValueError("grid spans must be positive")

    @classmethod
    def from_spans(cls, t_f: float, n_t: int, hbar_beta: float, n_tau: int) -> "TimeGrids":
        return cls(t_f=t_f, n_t=n_t, hbar_beta=hbar_beta, n_tau=n_tau)

    @classmethod
    def from_steps(cls, n_t: int, dt: float, n_tau: int, dtau: float) -> "TimeGrids":
        return cls(t_f=(n_t - 1) * dt, n_t=n_t, hbar_beta=(n_tau - 1) * dtau, n_tau=n_tau)

    @property
    def dt(self) -> float:
        return self.t_f / (self.n_t - 1)

    @property
    def dtau(self) -> float:
        return self.hbar_beta / (self.n_tau - 1)

    @property
    def t(self) -> np.ndarray:
        return np.arange(self.n_t) * self.dt

    @property
    def tau(self) -> np.ndarray:
        return np.arange(self.n_tau) * self.dtau


@dataclass(frozen=True)
class NoiseCovariance:
    """Joint pseudo-covariance of (eta, nu, mu) stacked site-major within fields."""

    sigma: np.ndarray
    n_sites: int
    n_t: int
    n_tau: int
    cross_kernel: str

    @property
    def dim(self) -> int:
        return self.n_sites * (2 * self.n_t + self.n_tau)

    def offset(self, fieldname: str) -> int:
        base = {"eta": 0, "nu": self.n_sites * self.n_t, "mu": 2 * self.n_sites * self.n_t}
        return base[fieldname]

    def index(self, fieldname: str, site: int, k: int) -> int:
        n = self.n_t if fieldname in ("eta", "nu") else self.n_tau
        if not (0 <= site < self.n_sites and 0 <= k < n):
            raise IndexError(f"({fieldname}, {site}, {k}) out of range")
        return self.offset(fieldname) + site * n + k

    def field_slice(self, fieldname: str) -> slice:
        n = self.n_t if fieldname in ("eta", "nu") else self.n_tau
        start = self.offset(fieldname)
        return slice(start, start + self.n_sites * n)

    def block(self, field_a: str, field_b: str) -> np.ndarray:
        return self.sigma[self.field_slice(field_a), self.field_slice(field_b)]


def _interleave(block: np.ndarray) -> np.ndarray:
    """Reshape (M, M, nk, nl) site/time values into (M*nk, M*nl) row = site*nk + k."""
    m, _, nk, nl = block.shape
    return block.transpose(0, 2, 1, 3).reshape(m * nk, m * nl)


def build_covariance(ctx: KernelContext, grids: TimeGrids,
                     cross_kernel: str = "equilibrium",
                     dim_cap: int = DEFAULT_DIM_CAP) -> NoiseCovariance:
    """Assemble the dense joint pseudo-covariance on the two-time grid.

    ``cross_kernel`` selects the eta-mu block convention:

    * ``"equilibrium"`` (default): +hbar L(t - i(hbar*beta - tau)); keeps the
      noise-averaged state of an undriven system exactly stationary.
    * ``"printed-master"``: -hbar L(t - i tau) with L from the master kernel.
    * ``"printed-split"``: -hbar L built from the printed split form (sign of
      the coth*sinh term flipped relative to the master kernel).
    """
    if cross_kernel not in CROSS_KERNEL_VARIANTS:
        raise ValueError(f"cross_kernel must be one of {CROSS_KERNEL_VARIANTS}")
    m = ctx.n_modes
    n_t, n_tau = grids.n_t, grids.n_tau
    dim = m * (2 * n_t + n_tau)
    if dim > dim_cap:
        raise CapExceeded(
            f"covariance dimension {dim} exceeds cap {dim_cap}; "
            "reduce the grids or raise noise.dim_cap")
    hbar = ctx.hbar
    hb = ctx.hbar_beta
    t = grids.t
    tau = grids.tau
    if abs(hb - grids.hbar_beta) > 1e-9 * max(hb, 1.0):
        raise ValueError("imaginary grid span does not equal hbar*beta of the kernel context")

    sigma = np.zeros((dim, dim), dtype=complex)
    cov = NoiseCovariance(sigma=sigma, n_sites=m, n_t=n_t, n_tau=n_tau,
                          cross_kernel=cross_kernel)
    if m == 0:
        sigma.setflags(write=False)
        return cov

    # Lags from integer index differences so equal lags are bitwise equal and
    # the eta blocks are exactly stationary (Toeplitz per site pair).
    k_idx = np.arange(n_t)
    lag_idx = k_idx[:, None] - k_idx[None, :]
    dt_mat = lag_idx * grids.dt
    l_r = site_kernel(ctx, _mode_values(ctx, "R", dt_mat, 0.0))      # (n_t, n_t, M, M)
    l_r = np.moveaxis(l_r, (-2, -1), (0, 1))                         # (M, M, n_t, n_t)
    assert np.array_equal(l_r[..., 1:, 1:], l_r[..., :-1, :-1]), \
        "eta-eta block lost its Toeplitz structure"
    eta_sl = cov.field_slice("eta")
    nu_sl = cov.field_slice("nu")
    mu_sl = cov.field_slice("mu")
    sigma[eta_sl, eta_sl] = hbar * _interleave(l_r)

    # <eta nu>: causal step, Theta(0) = 1/2 (value immaterial since L^I(0) = 0).
    theta = (lag_idx > 0).astype(float) + 0.5 * (lag_idx == 0)
    l_i = np.moveaxis(site_kernel(ctx, _mode_values(ctx, "I", dt_mat, 0.0)), (-2, -1), (0, 1))
    blk = _interleave(2j * theta[None, None, :, :] * l_i)
    sigma[eta_sl, nu_sl] = blk
    sigma[nu_sl, eta_sl] = blk.T

    # <eta mu>: convention selected by ``cross_kernel``.
    tt = t[:, None] + 0.0 * tau[None, :]
    if cross_kernel == "equilibrium":
        kv = _mode_values(ctx, "complex", tt, hb - tau[None, :])
        sign = +1.0
    elif cross_kernel == "printed-master":
        kv = _mode_values(ctx, "complex", tt, tau[None, :] + 0.0 * t[:, None])
        sign = -1.0
    else:  # printed-split
        kv = _mode_values(ctx, "printed-split", tt, tau[None, :] + 0.0 * t[:, None])
        sign = -1.0
    l_c = np.moveaxis(site_kernel(ctx, kv), (-2, -1), (0, 1))        # (M, M, n_t, n_tau)
    blk = _interleave(sign * hbar * l_c)
    sigma[eta_sl, mu_sl] = blk
    sigma[mu_sl, eta_sl] = blk.T

    # <mu mu>: hbar [L^e(dtau) - L^o(|dtau|)] = hbar L(-i |dtau|), evaluated
    # through the master kernel so large w*hbar*beta stays finite.
    l_idx = np.arange(n_tau)
    abs_dtau = np.abs(l_idx[:, None] - l_idx[None, :]) * grids.dtau
    l_mm = np.moveaxis(site_kernel(ctx, _mode_values(ctx, "complex", 0.0, abs_dtau).real),
                       (-2, -1), (0, 1))
    sigma[mu_sl, mu_sl] = hbar * _interleave(l_mm)

    # <nu nu> and <nu mu> stay identically zero.
    assert np.array_equal(sigma, sigma.T), "covariance must be exactly symmetric"
    sigma.setflags(write=False)
    return cov


@dataclass(frozen=True)
class NoiseFactor:
    """Factor a with a @ a.T ~= sigma, plus the grid layout needed to unpack draws."""

    a: np.ndarray
    method: str
    n_sites: int
    n_t: int
    n_tau: int

    @property
    def dim(self) -> int:
        return self.a.shape[0]

    @property
    def rank(self) -> int:
        return self.a.shape[1]


def takagi(sym: np.ndarray, rel_cutoff: float = 0.0):
    """Takagi factorization sym = U diag(s) U^T of a complex symmetric matrix.

    Computed through the real symmetric embedding
    B = [[Re A, Im A], [Im A, -Re A]]: an eigenpair B (x; y) = s (x; y) with
    s > 0 yields a con-eigenvector u = x + i y with A conj(u) = s u, and the
    positive-spectrum eigenvectors are automatically orthonormal as complex
    vectors, including inside degenerate clusters (their pair partners live in
    the mirrored negative-s subspace).  This stays accurate where SVD-based
    constructions lose the pairing between near-degenerate singular subspaces.
    Returns (s, U) with s descending; ``rel_cutoff`` is accepted for signature
    stability but truncation happens in ``factorize``.
    """
    n = sym.shape[0]
    if n == 0:
        return np.zeros(0), np.zeros((0, 0), dtype=complex)
    re, im = sym.real, sym.imag
    big = np.block([[re, im], [im, -re]])
    evals, evecs = np.linalg.eigh(big)
    order = np.argsort(evals)[::-1][:n]       # the +s half of the ± spectrum
    s = np.maximum(evals[order], 0.0)
    u = evecs[:n, order] + 1j * evecs[n:, order]
    return s, u


def _symmetric_cholesky(sym: np.ndarray, jitter: float) -> np.ndarray:
    """Lower-triangular l with l @ l.T = sym + jitter*I (non-conjugated, complex sqrt)."""
    n = sym.shape[0]
    a = sym + jitter * np.eye(n)
    l = np.zeros_like(a)
    for k in range(n):
        d = a[k, k] - np.sum(l[k, :k] ** 2)
        piv = np.sqrt(d + 0j)
        if abs(piv) < np.sqrt(jitter) * 1e-3:
            piv = np.sqrt(jitter + 0j)
        l[k, k] = piv
        if k + 1 < n:
            l[k + 1:, k] = (a[k + 1:, k] - l[k + 1:, :k] @ l[k, :k]) / piv
    return l


def _factor_once(cov: NoiseCovariance, method: str) -> np.ndarray:
    sigma = cov.sigma
    scale = np.abs(sigma).max() if sigma.size else 0.0
    if method == "takagi":
        s, u = takagi(sigma, rel_cutoff=SV_TRUNCATION)
        if scale == 0.0 or s.size == 0:
            return np.zeros((cov.dim, 0), dtype=complex)
        keep = s > SV_TRUNCATION * s.max()
        return u[:, keep] * np.sqrt(s[keep])[None, :]
    if method == "cholesky":
        jitter = 1e-10 * max(scale, 1e-300)
        return _symmetric_cholesky(sigma, jitter)
    raise ValueError(f"unknown factorization method {method!r}")


def factorize(cov: NoiseCovariance, method: str = "takagi",
              rel_tol: float = FACTOR_REL_TOL) -> NoiseFactor:
    """Factor sigma = a a^T, truncating singular values below 1e-12 * max.

    ``method`` is "takagi" (default) or "cholesky" (symmetric non-conjugated
    Cholesky with diagonal jitter).  If the requested method misses the
    residual bound ``rel_tol * max|sigma|`` the other method is tried;
    FactorizationFailure is raised only when both fail.
    """
    sigma = cov.sigma
    scale = np.abs(sigma).max() if sigma.size else 0.0
    order = [method] + [m for m in ("takagi", "cholesky") if m != method]
    if method not in ("takagi", "cholesky"):
        raise ValueError(f"unknown factorization method {method!r}")
    worst = 0.0
    for m in order:
        a = _factor_once(cov, m)
        residual = np.abs(a @ a.T - sigma).max() if sigma.size else 0.0
        if residual <= rel_tol * max(scale, 1e-300):
            a.setflags(write=False)
            return NoiseFactor(a=a, method=m, n_sites=cov.n_sites, n_t=cov.n_t,
                               n_tau=cov.n_tau)
        worst = max(worst, residual)
    raise FactorizationFailure(
        f"factor residual {worst:g} exceeds {rel_tol:g} * {scale:g} "
        f"after both methods")


@dataclass(frozen=True)
class NoiseBundle:
    """One realization of all fields; eta/nu are (M, n_t), mu_bar is (M, n_tau)."""

    eta: np.ndarray
    nu: np.ndarray
    mu_bar: np.ndarray
    seed: int


def derive_seed(master_seed: int, index: int) -> int:
    """Deterministic 64-bit stream key for trajectory ``index``."""
    ss = np.random.SeedSequence(entropy=master_seed, spawn_key=(index,))
    return int(ss.generate_state(1, np.uint64)[0])


def _generator(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def draw_normal(factor: NoiseFactor, seed: int) -> np.ndarray:
    """The real standard-normal vector w used for this seed (length = rank)."""
    return _generator(seed).standard_normal(factor.rank)


def unpack(factor: NoiseFactor, z: np.ndarray, seed: int) -> NoiseBundle:
    m, n_t, n_tau = factor.n_sites, factor.n_t, factor.n_tau
    ne = m * n_t
    eta = z[:ne].reshape(m, n_t)
    nu = z[ne:2 * ne].reshape(m, n_t)
    mu = z[2 * ne:].reshape(m, n_tau)
    for arr in (eta, nu, mu):
        arr.setflags(write=False)
    return NoiseBundle(eta=eta, nu=nu, mu_bar=mu, seed=seed)


def sample(factor: NoiseFactor, seed: int) -> NoiseBundle:
    """Draw one bundle; identical seed gives a bit-identical bundle."""
    z = factor.a @ draw_normal(factor, seed)
    return unpack(factor, z, seed)


@dataclass(frozen=True)
class NoiseVerification:
    """Per-block worst z-scores of empirical pseudo-covariance vs target.

    ``empirical`` and ``z`` hold the full matrices for inspection/CSV dumps.
    """

    n_samples: int
    worst_z: dict
    empirical: np.ndarray
    z: np.ndarray
    threshold: float = 5.0

    @property
    def passed(self) -> bool:
        return all(z < self.threshold for z in self.worst_z.values())

    def lines(self):
        out = [f"noise verification with {self.n_samples} samples "
               f"(threshold {self.threshold:g})"]
        for name, z in self.worst_z.items():
            mark = "ok" if z < self.threshold else "FAIL"
            out.append(f"  <{name}>: worst |z| = {z:8.3f}   {mark}")
        out.append("PASS" if self.passed else "FAIL")
        return out


def _chunked_draws(factor: NoiseFactor, n_samples: int, seed: int):
    """Yield (r, chunk) standard-normal blocks, deterministic in (seed, chunk index)."""
    done = 0
    idx = 0
    while done < n_samples:
        take = min(_CHUNK, n_samples - done)
        rng = np.random.Generator(
            np.random.Philox(np.random.SeedSequence(entropy=seed, spawn_key=(idx,))))
        yield rng.standard_normal((factor.rank, take))
        done += take
        idx += 1


def verify_empirical(factor: NoiseFactor, cov: NoiseCovariance, n_samples: int,
                     seed: int = 0) -> NoiseVerification:
    """Monte Carlo check that sampled draws reproduce every covariance block.

    The z-score of each matrix entry is |empirical - target| / SE, with the
    standard error estimated from the per-sample product fluctuations; real and
    imaginary parts are scored separately and the per-block worst is reported.
    """
    if n_samples < 100:
        raise ValueError("need at least 100 samples for a meaningful check")
    dim = factor.dim
    s1 = np.zeros((dim, dim), dtype=complex)     # sum z z^T
    m_xx = np.zeros((dim, dim))                  # sum over n of x_i^2 x_j^2, etc.
    m_yy = np.zeros((dim, dim))
    m_xy2 = np.zeros((dim, dim))                 # sum (x_i y_i)(x_j y_j)
    m_x2y2 = np.zeros((dim, dim))                # sum x_i^2 y_j^2
    for w in _chunked_draws(factor, n_samples, seed):
        z = factor.a @ w
        x, y = z.real, z.imag
        s1 += z @ z.T
        x2, y2, xy = x * x, y * y, x * y
        m_xx += x2 @ x2.T
        m_yy += y2 @ y2.T
        m_xy2 += xy @ xy.T
        m_x2y2 += x2 @ y2.T
    n = float(n_samples)
    mean = s1 / n
    # Var of Re(z_i z_j) = E[(x_i x_j - y_i y_j)^2] - mean_re^2, and similarly Im.
    e_re2 = (m_xx - 2.0 * m_xy2 + m_yy) / n
    e_im2 = (m_x2y2 + 2.0 * m_xy2 + m_x2y2.T) / n
    var_re = np.maximum(e_re2 - mean.real ** 2, 0.0)
    var_im = np.maximum(e_im2 - mean.imag ** 2, 0.0)
    se_re = np.sqrt(var_re / n)
    se_im = np.sqrt(var_im / n)

    diff = mean - cov.sigma
    floor = 1e-300
    z_re = np.abs(diff.real) / np.maximum(se_re, floor)
    z_re[np.abs(diff.real) < 1e-14] = 0.0
    z_im = np.abs(diff.imag) / np.maximum(se_im, floor)
    z_im[np.abs(diff.imag) < 1e-14] = 0.0
    z_all = np.maximum(z_re, z_im)

    worst = {}
    pairs = [("eta", "eta"), ("eta", "nu"), ("eta", "mu"),
             ("nu", "nu"), ("nu", "mu"), ("mu", "mu")]
    for fa, fb in pairs:
        block = z_all[cov.field_slice(fa), cov.field_slice(fb)]
        worst[f"{fa} {fb}"] = float(block.max()) if block.size else 0.0
    return NoiseVerification(n_samples=n_samples, worst_z=worst, empirical=mean,
                             z=z_all)


@dataclass(frozen=True)
class HsCheckResult:
    """One test vector's Monte Carlo vs closed-form characteristic function."""

    mc: complex
    exact: complex
    se: float
    z: float


def hs_identity_check(cov: NoiseCovariance, factor: NoiseFactor, n_vectors: int = 5,
                      n_samples: int = 100_000, seed: int = 0, hbar: float = 1.0):
    """Check <exp(i z.k)> = exp(-k^T sigma k / 2) for random physical test vectors.

    Test vectors mimic the structure that couples to the fields: real weights
    on the eta and nu slots and purely imaginary weights on the mu slots.
    """
    rng = np.random.default_rng(seed)
    dim = cov.dim
    scale = 0.5 / np.sqrt(max(dim, 1) * max(np.abs(cov.sigma).max(), 1e-30))
    ks = []
    for _ in range(n_vectors):
        k = np.zeros(dim, dtype=complex)
        k[cov.field_slice("eta")] = rng.standard_normal(cov.n_sites * cov.n_t) * scale / hbar
        k[cov.field_slice("nu")] = rng.standard_normal(cov.n_sites * cov.n_t) * scale
        k[cov.field_slice("mu")] = 1j * rng.standard_normal(cov.n_sites * cov.n_tau) * scale / hbar
        ks.append(k)
    kmat = np.array(ks)                                # (n_vectors, dim)
    exact = np.exp(-0.5 * np.einsum("vi,ij,vj->v", kmat, cov.sigma, kmat))
    cmat = kmat @ factor.a                             # (n_vectors, rank)
    s_val = np.zeros(n_vectors, dtype=complex)
    s_re2 = np.zeros(n_vectors)
    s_im2 = np.zeros(n_vectors)
    for w in _chunked_draws(factor, n_samples, seed):
        vals = np.exp(1j * (cmat @ w))                 # same draws for every vector
        s_val += vals.sum(axis=1)
        s_re2 += np.sum(vals.real ** 2, axis=1)
        s_im2 += np.sum(vals.imag ** 2, axis=1)
    n = float(n_samples)
    results = []
    for v in range(n_vectors):
        mc = s_val[v] / n
        se = np.sqrt(max(s_re2[v] / n - mc.real ** 2, 0.0) / n
                     + max(s_im2[v] / n - mc.imag ** 2, 0.0) / n)
        z = abs(mc - exact[v]) / max(se, 1e-300)
        results.append(HsCheckResult(mc=complex(mc), exact=complex(exact[v]), se=float(se),
                                     z=float(z)))
    return results
