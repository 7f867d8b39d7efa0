"""Conjugate Gibbs samplers for the NB, SS and NS covariance priors.

One sweep updates, in order: noise variances; the mean coefficients ``Psi``
with ``Theta`` (and any factor scores) integrated out, immediately followed
by ``Theta_i`` from its full conditional; factor scores (``H_i`` or
``eta_i``); loadings; residual variances; local shrinkage precisions;
global shrinkage increments; Wishart blocks.  Drawing ``Psi`` marginally and
then ``Theta`` conditionally is an exact joint draw of ``(Psi, Theta)``, so
every family benefits from the marginalization.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, lapack, solve_triangular

from .archive import PosteriorArchive
from .errors import ConfigurationError, NumericalError, StructuralError
from .model import (
    LOG2PI,
    BandPowerDataset,
    DataSummary,
    LatentState,
    ModelSpec,
    build_model_basis,
    implied_sigma_z,
    mean_coefficients,
    nb_precision,
    sample_prior,
    simulate_data,
    unvec,
    vec,
)

FIXABLE = ("sigma_eps", "psi", "theta", "S", "upsilon", "gamma", "H", "sigma_p", "sigma_q", "phi", "rho",
           "delta_u", "delta_pi", "xi", "eta", "sigma_r", "omega", "delta")


@dataclass(frozen=True)
class SamplerConfig:
    iterations: int = 10000
    burn_in: int = 5000
    thin: int = 5
    seed: int = 0
    parallel_chains: int = 1
    per_subject_parallel: bool = False
    store_theta: bool = True
    store_loglik: bool = False
    fixed: tuple = ()

    def __post_init__(self):
        if self.thin < 1:
            raise ConfigurationError("thin must be >= 1")
        if self.burn_in < 0:
            raise ConfigurationError("burn_in must be >= 0")
        if self.iterations <= self.burn_in:
            raise ConfigurationError("iterations must exceed burn_in")
        if self.n_draws < 1:
            raise ConfigurationError("configuration keeps no draws after burn-in and thinning")
        if self.parallel_chains < 1:
            raise ConfigurationError("parallel_chains must be >= 1")
        bad = set(self.fixed) - set(FIXABLE)
        if bad:
            raise ConfigurationError(f"unknown fixed blocks {sorted(bad)}")
        object.__setattr__(self, "fixed", tuple(self.fixed))

    @property
    def n_draws(self) -> int:
        return (self.iterations - self.burn_in) // self.thin


def _chol(M, what, iteration):
    """Cholesky with a single jitter retry (1e-10 * trace on the diagonal)."""
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        tr = np.trace(M, axis1=-2, axis2=-1)
        eye = np.eye(M.shape[-1])
        jitter = 1e-10 * np.abs(tr)[..., None, None] * eye if M.ndim > 2 else 1e-10 * abs(tr) * eye
        try:
            return np.linalg.cholesky(M + jitter)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"non-positive-definite {what}", iteration) from exc


def _tri_inv(L):
    """Inverse of a stack of lower-triangular matrices."""
    if L.ndim == 2 or L.shape[-1] < 16:
        return np.linalg.inv(L)
    # batched LU is slow at moderate sizes; a LAPACK trtri loop is faster
    flat = L.reshape(-1, *L.shape[-2:])
    out = np.empty_like(flat)
    for i in range(len(flat)):
        out[i], _ = lapack.dtrtri(flat[i], lower=1)
    return out.reshape(L.shape)


def _mvn_from_precision(rng, prec, lin, what, iteration):
    """Draw from N(prec^{-1} lin, prec^{-1})."""
    L = _chol(prec, what, iteration)
    mean = cho_solve((L, True), lin)
    z = rng.standard_normal(lin.shape)
    return mean + solve_triangular(L.T, z, lower=False)


def _batched_mvn_from_precision(rng, prec, lin, what, iteration):
    """Batched version: ``prec`` (b, k, k), ``lin`` (b, k)."""
    L = _chol(prec, what, iteration)
    Linv = _tri_inv(L)
    LinvT = np.swapaxes(Linv, -1, -2)
    mean = (LinvT @ (Linv @ lin[..., None]))[..., 0]
    z = rng.standard_normal(lin.shape)
    return mean + (LinvT @ z[..., None])[..., 0]


def wishart_draw(rng, df, scale):
    """Bartlett-decomposition draw from W(df, scale)."""
    p = scale.shape[0]
    L = np.linalg.cholesky(scale)
    A = np.zeros((p, p))
    A[np.diag_indices(p)] = np.sqrt(rng.chisquare(df - np.arange(p)))
    il = np.tril_indices(p, -1)
    A[il] = rng.standard_normal(len(il[0]))
    LA = L @ A
    return LA @ LA.T


def _top_factors(C, k):
    """``k`` columns ``U sqrt(lambda)`` from the leading eigenpairs of ``C`` (zero-padded)."""
    lam, U = np.linalg.eigh(C)
    lam, U = lam[::-1][:k], U[:, ::-1][:, :k]
    F = np.zeros((C.shape[0], k))
    F[:, :len(lam)] = U * np.sqrt(np.maximum(lam, 0.0))
    return F


def _invgamma(rng, shape, rate):
    return rate / rng.gamma(shape, 1.0, size=np.shape(rate))


class GibbsSampler:
    """A single chain over :class:`LatentState` for one prior family."""

    def __init__(self, dataset: BandPowerDataset, spec: ModelSpec, basis, config: SamplerConfig,
                 rng=None, init: LatentState | None = None, _mutation: str | None = None):
        self.spec = spec.resolve(dataset.p, basis.q)
        self.basis = basis
        self.config = config
        self.rng = np.random.default_rng(config.seed) if rng is None else rng
        self.fixed = set(config.fixed)
        self._mutation = _mutation
        self.p, self.q, self.d = dataset.p, basis.q, dataset.d
        self.pq = self.p * self.q
        self.omega0 = nb_precision(self.spec, basis) if self.spec.prior_family == "NB" else None
        self.set_data(dataset)
        self.state = init.copy() if init is not None else self._initial_state()
        if self.spec.prior_family == "NB":
            self.state.omega0 = self.omega0
        self.iteration = 0

    # -- data -----------------------------------------------------------------

    def set_data(self, dataset: BandPowerDataset):
        if dataset.p != self.p:
            raise StructuralError("dataset region count changed")
        self.dataset = dataset
        self.n = dataset.n
        self.summ = DataSummary.build(dataset, self.basis)

    def set_observations(self, Y):
        """Replace the observed values, keeping every subject's time grid."""
        s = self.summ
        s.YB = np.stack([y @ b for y, b in zip(Y, s.B)])
        s.yy = np.stack([np.sum(y * y, axis=1) for y in Y])

    # -- initialization -------------------------------------------------------

    def _initial_state(self) -> LatentState:
        rng, spec, p, q, n = self.rng, self.spec, self.p, self.q, self.n
        s = self.summ
        lam = 1e-3 * max(1.0, float(np.mean(np.trace(s.BtB, axis1=1, axis2=2))))
        theta = np.stack([np.linalg.solve(s.BtB[i] + lam * np.eye(q), s.YB[i].T).T for i in range(n)])
        flat = theta.reshape(n, -1)
        coef, *_ = np.linalg.lstsq(s.W, flat, rcond=None)
        psi = coef.reshape(self.d, p, q)
        Z = theta - np.einsum("il,lpq->ipq", s.W, psi)
        rss = np.maximum(s.yy - 2 * np.einsum("ipq,ipq->ip", theta, s.YB)
                         + np.einsum("ipq,iqr,ipr->ip", theta, s.BtB, theta, optimize=True), 0).sum(0)
        sig = np.maximum(rss / max(s.m.sum(), 1.0), 1e-3)
        st = LatentState(spec.prior_family, theta, psi, sig)
        zf = vec(Z)
        Cz = zf.T @ zf / n if n > 1 else np.eye(self.pq)
        Cz = 0.5 * (Cz + Cz.T) + 1e-2 * np.eye(self.pq)
        zvar = np.diag(Cz).copy()
        if spec.prior_family == "NB":
            st.S = np.diag(zvar.reshape(q, p).mean(0))
        elif spec.prior_family == "SS":
            # factors from the Kronecker moment split of the crude Z covariance
            k1, k2 = spec.k1, spec.k2
            C4 = Cz.reshape(q, p, q, p)
            Sp = np.einsum("sjst->jt", C4) / q
            Tq = np.einsum("sjuj->su", C4) / p
            Sp, Tq = Sp / np.sqrt(np.mean(zvar)), Tq / np.sqrt(np.mean(zvar))
            st.upsilon = _top_factors(0.9 * Sp, k1)
            st.gamma = _top_factors(0.9 * Tq, k2)
            fit = np.kron(st.gamma @ st.gamma.T, st.upsilon @ st.upsilon.T)
            resid = np.maximum(zvar - np.diag(fit), 1e-2).reshape(q, p)
            st.sigma_p = np.sqrt(resid.mean(0))
            st.sigma_q = resid.mean(1) / st.sigma_p.mean()
            st.H = np.zeros((n, k1, k2))
            st.phi = np.ones((p, k1))
            st.rho = np.ones((q, k2))
            st.delta_u = np.ones(k1)
            st.delta_pi = np.ones(k2)
        else:
            k = spec.k
            st.xi = _top_factors(0.9 * Cz, k)
            st.eta = np.zeros((n, k))
            st.sigma_r = np.maximum(zvar - np.sum(st.xi ** 2, axis=1), 1e-2)
            st.omega = np.stack([spec.omega_scale * np.eye(p) for _ in range(q)])
            st.delta = np.ones(k)
        return st

    # -- helpers --------------------------------------------------------------

    def _sigma_z_precision(self):
        """``(Q, logdet Sigma_z)`` for the current family blocks (vec layout)."""
        st = self.state
        if st.family == "NB":
            Sinv = np.linalg.inv(st.S)
            Q = np.kron(self.omega0, Sinv)
            _, ld_o = np.linalg.slogdet(self.omega0)
            _, ld_si = np.linalg.slogdet(Sinv)
            return Q, -(self.p * ld_o + self.q * ld_si)
        Sz = implied_sigma_z(st)
        L = _chol(Sz, "Sigma_z", self.iteration)
        Linv = solve_triangular(L, np.eye(self.pq), lower=True)
        return Linv.T @ Linv, 2.0 * np.sum(np.log(np.diag(L)))

    def _region_structure(self):
        """Region-decoupled form of the coefficient prior.

        Returns ``(T, lam, R, Xr)``: coefficients are ``Theta_i = T U_i`` with
        ``U_i`` rows independent given the factors, likelihood precision of
        row ``j`` equal to ``lam[j] * B'B``, prior precision ``R[j]`` (q x q)
        for the non-factor part, and factor loadings ``Xr`` (p, q, k) in
        region-major layout (``None`` for NB).
        """
        st, p, q = self.state, self.p, self.q
        inv_s2 = 1.0 / st.sigma_eps
        if st.family == "NB":
            # V' S^{-1} V = I and V' D^{-1} V = diag(lam)
            Ls = np.linalg.cholesky(st.S)
            lam, U = np.linalg.eigh(Ls.T @ (inv_s2[:, None] * Ls))
            T = Ls @ U
            R = np.broadcast_to(self.omega0, (p, q, q))
            return T, lam, R, None
        if st.family == "NS":
            xi, sr = st.xi, st.sigma_r
        else:
            xi = np.kron(st.gamma, st.upsilon)
            sr = np.kron(st.sigma_q, st.sigma_p)
        k = xi.shape[1]
        Xr = xi.reshape(q, p, k).transpose(1, 0, 2)
        R = np.zeros((p, q, q))
        R[:, np.arange(q), np.arange(q)] = (1.0 / sr).reshape(q, p).T
        return None, inv_s2, R, Xr

    def _collapsed(self, theta_known: bool = False):
        """Per-subject information form for ``u_i = T^{-1}(Psi' w_i)`` rows.

        With ``theta_known`` the "data" are the current coefficients rather
        than the curves (used when ``theta`` is held fixed).
        """
        it = self.iteration
        s, st = self.summ, self.state
        n, p, q = self.n, self.p, self.q
        T, lam, R, Xr = self._region_structure()
        out = dict(T=T, Tinv=None if T is None else np.linalg.inv(T), lam=lam, R=R, Xr=Xr)
        if theta_known:
            th = st.theta if T is None else np.einsum("jk,ikq->ijq", out["Tinv"], st.theta)
            out["K0"] = np.broadcast_to(R, (n, p, q, q))
            out["g0"] = (R[None] @ th[..., None])[..., 0]
        else:
            h = s.YB * (1.0 / st.sigma_eps)[None, :, None]  # (n, p, q)
            if T is not None:
                h = np.einsum("jk,ijq->ikq", T, h)
            M0 = s.BtB[:, None] * lam[None, :, None, None] + R[None]
            L0 = _chol(M0, "subject precision", it)
            L0inv = _tri_inv(L0)
            C = np.swapaxes(L0inv, -1, -2) @ L0inv
            RC = R[None] @ C
            out.update(h=h, L0=L0, L0inv=L0inv, C=C)
            out["g0"] = (RC @ h[..., None])[..., 0]
            out["K0"] = R[None] - RC @ R[None]
        if Xr is not None:
            k = Xr.shape[2]
            KX = out["K0"] @ Xr[None]  # (n, p, q, k)
            Xf = Xr.reshape(p * q, k)
            F = np.eye(k)[None] + Xf.T[None] @ KX.reshape(n, p * q, k)
            LF = _chol(F, "factor precision", it)
            LFinv = _tri_inv(LF)
            Xtg0 = out["g0"].reshape(n, p * q) @ Xf
            out.update(KX=KX, LF=LF, LFinv=LFinv, Xtg0=Xtg0)
        return out

    def _psi_information(self, cb, scores=None):
        """Precision and linear term for region-major ``vec(Psi)``.

        Factor scores are integrated out unless ``scores`` is given.
        """
        n, p, q, d = self.n, self.p, self.q, self.d
        pq = p * q
        W = self.summ.W
        WW = (W[:, :, None] * W[:, None, :]).reshape(n, d * d)
        # block-diagonal part, reduced over subjects before expanding
        K0s = (WW.T @ cb["K0"].reshape(n, -1)).reshape(d, d, p, q, q)
        prec = np.zeros((d, p, q, d, p, q))
        for j in range(p):
            prec[:, j, :, :, j, :] = K0s[:, :, j].transpose(0, 2, 1, 3)
        prec = prec.reshape(d * pq, d * pq)
        g = cb["g0"]
        if cb["Xr"] is not None and scores is not None:
            c = np.einsum("jqc,ic->ijq", cb["Xr"], scores)
            g = g - (cb["K0"] @ c[..., None])[..., 0]
        g = g.reshape(n, pq)
        if cb["Xr"] is not None and scores is None:
            # K_i -= Y_i Y_i' with Y_i = K0_i Xi L_F^{-T}
            Y = cb["KX"].reshape(n, pq, -1) @ np.swapaxes(cb["LFinv"], -1, -2)
            YY = (WW.T @ (Y @ np.swapaxes(Y, -1, -2)).reshape(n, -1)).reshape(d, d, pq, pq)
            prec -= YY.transpose(0, 2, 1, 3).reshape(d * pq, d * pq)
            v = (cb["LFinv"] @ cb["Xtg0"][..., None])
            g = g - (Y @ v)[..., 0]
        lin = (W.T @ g).reshape(-1)
        if cb["T"] is not None:
            Tb = np.kron(np.eye(d), np.kron(cb["Tinv"], np.eye(q)))
            prec = Tb.T @ prec @ Tb
            lin = Tb.T @ lin
        return prec, lin

    # -- block updates ----------------------------------------------------------

    def update_noise(self):
        if "sigma_eps" in self.fixed:
            return
        s, th = self.summ, self.state.theta
        rss = s.yy - 2 * np.einsum("ipq,ipq->ip", th, s.YB) + np.einsum("ipq,iqr,ipr->ip", th, s.BtB, th, optimize=True)
        rss = np.maximum(rss.sum(0), 0.0)
        N = s.m.sum()
        shape = self.spec.noise_shape + (N if self._mutation == "noise_shape" else 0.5 * N)
        self.state.sigma_eps = _invgamma(self.rng, shape, self.spec.noise_rate + 0.5 * rss)

    def update_psi_theta(self):
        """Draw ``Psi`` with ``Theta`` and factor scores integrated out, then the rest.

        The factor scores (``eta_i`` or ``vec(H_i)``) are drawn given ``Psi``
        with ``Theta`` integrated out, then ``Theta_i`` given both, so the
        triple is an exact joint draw from its conditional.  Held-fixed blocks
        are conditioned on instead of integrated out.
        """
        st, rng, it = self.state, self.rng, self.iteration
        d, p, q = self.d, self.p, self.q
        theta_known = "theta" in self.fixed
        cb = self._collapsed(theta_known)
        Xr, T = cb["Xr"], cb["T"]
        scores = None
        if Xr is not None and ("eta" in self.fixed or "H" in self.fixed):
            scores = st.eta if st.family == "NS" else vec(st.H)
        if "psi" not in self.fixed:
            prec, lin = self._psi_information(cb, scores)
            prec[np.diag_indices_from(prec)] += 1.0 / self.spec.psi_prior_var
            prec = 0.5 * (prec + prec.T)
            beta = _mvn_from_precision(rng, prec, lin, "Psi precision", it)
            st.psi = beta.reshape(d, p, q)
        m = np.einsum("il,lpq->ipq", self.summ.W, st.psi)
        if T is not None:
            m = np.einsum("jk,ikq->ijq", cb["Tinv"], m)
        u = m
        if Xr is not None:
            if scores is None:
                b = cb["Xtg0"] - np.einsum("jqc,ijq->ic", Xr, (cb["K0"] @ m[..., None])[..., 0])
                z = rng.standard_normal(b.shape)
                v = cb["LFinv"] @ b[..., None] + z[..., None]
                scores = (np.swapaxes(cb["LFinv"], -1, -2) @ v)[..., 0]
                if st.family == "NS":
                    st.eta = scores
                else:
                    st.H = unvec(scores, self.spec.k1, self.spec.k2)
            u = m + np.einsum("jqc,ic->ijq", Xr, scores)
        if not theta_known:
            rhs = cb["h"] + (cb["R"][None] @ u[..., None])[..., 0]
            mean = (cb["C"] @ rhs[..., None])[..., 0]
            z = rng.standard_normal(mean.shape)
            th = mean + (np.swapaxes(cb["L0inv"], -1, -2) @ z[..., None])[..., 0]
            if T is not None:
                th = np.einsum("jk,ikq->ijq", T, th)
            st.theta = th

    def _Z(self):
        return self.state.theta - mean_coefficients(self.state, self.summ.W)

    # NB

    def update_nb(self):
        if "S" in self.fixed:
            return
        spec, Z = self.spec, self._Z()
        S0 = np.asarray(spec.S0)
        V_inv = spec.nu * S0 + np.einsum("ipq,qr,isr->ps", Z, self.omega0, Z, optimize=True)
        V_inv = 0.5 * (V_inv + V_inv.T)
        Sinv = wishart_draw(self.rng, spec.nu + self.n * self.q, np.linalg.inv(V_inv))
        self.state.S = np.linalg.inv(Sinv)

    # SS

    def update_ss(self):
        st, rng, spec, it = self.state, self.rng, self.spec, self.iteration
        p, q, n = self.p, self.q, self.n
        k1, k2 = spec.k1, spec.k2
        Z = self._Z()
        H = st.H
        # Upsilon rows
        if "upsilon" not in self.fixed:
            Gq = st.gamma.T @ (st.gamma / st.sigma_q[:, None])  # (k2, k2)
            C = np.einsum("iab,bc,idc->ad", H, Gq, H, optimize=True)  # (k1, k1)
            prec = np.einsum("jr,rs->jrs", st.phi * st.tau[None, :], np.eye(k1)) + C[None] / st.sigma_p[:, None, None]
            lin = np.einsum("ipq,qb,iab->pa", Z, st.gamma / st.sigma_q[:, None], H, optimize=True) / st.sigma_p[:, None]
            st.upsilon = _batched_mvn_from_precision(rng, prec, lin, "Upsilon precision", it)
        # Gamma rows
        if "gamma" not in self.fixed:
            Up = st.upsilon.T @ (st.upsilon / st.sigma_p[:, None])  # (k1, k1)
            C = np.einsum("iab,ac,icd->bd", H, Up, H, optimize=True)  # (k2, k2)
            prec = np.einsum("vs,st->vst", st.rho * st.kappa[None, :], np.eye(k2)) + C[None] / st.sigma_q[:, None, None]
            lin = np.einsum("ipq,pa,iab->qb", Z, st.upsilon / st.sigma_p[:, None], H, optimize=True) / st.sigma_q[:, None]
            st.gamma = _batched_mvn_from_precision(rng, prec, lin, "Gamma precision", it)
        # residual variances
        R = Z - np.einsum("pa,iab,qb->ipq", st.upsilon, H, st.gamma, optimize=True)
        R2 = np.sum(R * R, axis=0)  # (p, q)
        if "sigma_p" not in self.fixed:
            st.sigma_p = _invgamma(rng, spec.resid_shape + 0.5 * n * q,
                                   spec.resid_rate + 0.5 * R2 @ (1.0 / st.sigma_q))
        if "sigma_q" not in self.fixed:
            st.sigma_q = _invgamma(rng, spec.resid_shape + 0.5 * n * p,
                                   spec.resid_rate + 0.5 * (1.0 / st.sigma_p) @ R2)
        # local precisions
        if "phi" not in self.fixed:
            st.phi = rng.gamma(0.5 * (spec.nu1 + 1), 1.0, size=(p, k1)) / (
                0.5 * (spec.nu1 + st.tau[None, :] * st.upsilon ** 2))
        if "rho" not in self.fixed:
            st.rho = rng.gamma(0.5 * (spec.nu2 + 1), 1.0, size=(q, k2)) / (
                0.5 * (spec.nu2 + st.kappa[None, :] * st.gamma ** 2))
        # global shrinkage
        if "delta_u" not in self.fixed:
            sums = np.sum(st.phi * st.upsilon ** 2, axis=0)
            st.delta_u = self._mgp_update(st.delta_u, sums, p, spec.a11, spec.a12)
        if "delta_pi" not in self.fixed:
            sums = np.sum(st.rho * st.gamma ** 2, axis=0)
            st.delta_pi = self._mgp_update(st.delta_pi, sums, q, spec.a21, spec.a22)

    def _mgp_update(self, delta, col_sums, rows, a_first, a_rest):
        """Sequential update of multiplicative-gamma increments.

        ``col_sums[c]`` is the column's quadratic form with the local
        precisions (excluding the global ``tau_c``); each column has ``rows``
        entries.
        """
        delta = delta.copy()
        k = len(delta)
        for h in range(k):
            tau = np.cumprod(delta)
            tau_minus = tau[h:] / delta[h]
            shape = (a_first if h == 0 else a_rest) + 0.5 * rows * (k - h)
            rate = 1.0 + 0.5 * np.sum(tau_minus * col_sums[h:])
            delta[h] = self.rng.gamma(shape, 1.0) / rate
        return delta

    # NS

    def update_ns(self):
        st, rng, spec, it = self.state, self.rng, self.spec, self.iteration
        p, q, n, k = self.p, self.q, self.n, spec.k
        z = vec(self._Z())  # (n, pq)
        eta = st.eta
        tau = st.tau
        # Xi, block by block
        if "xi" not in self.fixed:
            E = eta.T @ eta
            xi = st.xi.reshape(q, p, k).copy()
            zb = z.reshape(n, q, p)
            for s in range(q):
                inv_r = 1.0 / st.sigma_r[s * p:(s + 1) * p]
                prec = np.kron(np.diag(tau), st.omega[s]) + np.kron(E, np.diag(inv_r))
                lin = vec((inv_r[:, None] * (zb[:, s, :].T @ eta))[None])[0]
                x = _mvn_from_precision(rng, prec, lin, "Xi block precision", it)
                xi[s] = unvec(x, p, k)
            st.xi = xi.reshape(q * p, k)
        # residual variances
        if "sigma_r" not in self.fixed:
            r = z - eta @ st.xi.T
            st.sigma_r = _invgamma(rng, spec.resid_shape + 0.5 * n, spec.resid_rate + 0.5 * np.sum(r * r, axis=0))
        xi_b = st.xi.reshape(q, p, k)
        # global shrinkage
        if "delta" not in self.fixed:
            quad = np.einsum("spc,spr,src->c", xi_b, st.omega, xi_b, optimize=True)
            st.delta = self._mgp_update(st.delta, quad, p * q, spec.a1, spec.a2)
        # Omega_s
        if "omega" not in self.fixed:
            tau = st.tau
            base = (spec.nu / spec.omega_scale) * np.eye(p)
            for s in range(q):
                V_inv = base + (xi_b[s] * tau[None, :]) @ xi_b[s].T
                V_inv = 0.5 * (V_inv + V_inv.T)
                st.omega[s] = wishart_draw(rng, spec.nu + k, np.linalg.inv(V_inv))

    # -- sweep ------------------------------------------------------------------

    def sweep(self):
        self.update_noise()
        self.update_psi_theta()
        fam = self.spec.prior_family
        if fam == "NB":
            self.update_nb()
        elif fam == "SS":
            self.update_ss()
        else:
            self.update_ns()
        self.iteration += 1

    def subject_loglik(self) -> np.ndarray:
        """``log p(Y_i | Psi, Sigma_z, Sigma_eps)`` with ``Theta_i`` integrated out."""
        st, s = self.state, self.summ
        cb = self._collapsed()
        m = np.einsum("il,lpq->ipq", s.W, st.psi)
        if cb["T"] is not None:
            m = np.einsum("jk,ikq->ijq", cb["Tinv"], m)
        R = cb["R"]
        _, ld_R = np.linalg.slogdet(R)
        ld_M0 = 2.0 * np.sum(np.log(np.diagonal(cb["L0"], axis1=-2, axis2=-1)), axis=(1, 2))
        w = (cb["L0inv"] @ cb["h"][..., None])[..., 0]
        hCh = np.sum(w * w, axis=(1, 2))
        yDy = s.yy @ (1.0 / st.sigma_eps)
        N = s.m * self.p
        const = -0.5 * (N * LOG2PI + s.m * np.sum(np.log(st.sigma_eps)) - np.sum(ld_R) + ld_M0 + yDy - hCh)
        K0m = (cb["K0"] @ m[..., None])[..., 0]
        out = const - 0.5 * np.sum(m * K0m, axis=(1, 2)) + np.sum(m * cb["g0"], axis=(1, 2))
        if cb["Xr"] is not None:
            b = cb["Xtg0"] - np.einsum("jqc,ijq->ic", cb["Xr"], K0m)
            v = (cb["LFinv"] @ b[..., None])[..., 0]
            ld_F = 2.0 * np.sum(np.log(np.diagonal(cb["LF"], axis1=-2, axis2=-1)), axis=1)
            out = out - 0.5 * ld_F + 0.5 * np.sum(v * v, axis=1)
        return out

    def conditional_loglik(self) -> float:
        st, s = self.state, self.summ
        th = st.theta
        rss = s.yy - 2 * np.einsum("ipq,ipq->ip", th, s.YB) + np.einsum("ipq,iqr,ipr->ip", th, s.BtB, th, optimize=True)
        return float(-0.5 * np.sum(rss.sum(0) / st.sigma_eps + s.m.sum() * (np.log(st.sigma_eps) + LOG2PI)))


ARCHIVE_BLOCKS = {
    "NB": ("S",),
    "SS": ("upsilon", "gamma", "sigma_p", "sigma_q", "delta_u", "delta_pi"),
    "NS": ("xi", "sigma_r", "delta"),
}


def _run_chain(dataset, spec, basis, config, seed, progress=None):
    rng = np.random.default_rng(seed)
    smp = GibbsSampler(dataset, spec, basis, config, rng=rng)
    fam = smp.spec.prior_family
    keys = ["psi", "sigma_eps", *ARCHIVE_BLOCKS[fam]]
    if config.store_theta:
        keys.append("theta")
    out = {k: [] for k in keys}
    out["loglik"] = []
    if config.store_loglik:
        out["subject_loglik"] = []
    for it in range(config.iterations):
        smp.sweep()
        if it >= config.burn_in and (it - config.burn_in + 1) % config.thin == 0:
            for k in keys:
                out[k].append(np.array(getattr(smp.state, k), copy=True))
            ll = smp.conditional_loglik()
            if not np.isfinite(ll):
                raise NumericalError("non-finite log-likelihood", it)
            out["loglik"].append(ll)
            if config.store_loglik:
                out["subject_loglik"].append(smp.subject_loglik())
        if progress is not None:
            progress(it)
    return {k: np.asarray(v) for k, v in out.items()}, smp


def gibbs_fit(dataset: BandPowerDataset, spec: ModelSpec, config: SamplerConfig, basis=None,
              progress=None) -> PosteriorArchive:
    """Run ``config.parallel_chains`` chains and archive the thinned draws."""
    if basis is None:
        basis = build_model_basis(spec, dataset)
    spec_r = spec.resolve(dataset.p, basis.q)
    seeds = np.random.SeedSequence(config.seed).spawn(config.parallel_chains) if config.parallel_chains > 1 \
        else [config.seed]
    chains = []
    for c, seed in enumerate(seeds):
        draws, smp = _run_chain(dataset, spec_r, basis, config, seed, progress)
        draws["chain"] = np.full(len(draws["psi"]), c)
        chains.append(draws)
    draws = {k: np.concatenate([ch[k] for ch in chains]) for k in chains[0]}
    extra = {}
    if spec_r.prior_family == "NB":
        extra["omega0"] = smp.omega0
    return PosteriorArchive(
        family=spec_r.prior_family,
        spec=spec_r,
        basis=basis,
        draws=draws,
        fixed=extra,
        metadata={
            "spec_hash": spec_r.digest(),
            "seed": config.seed,
            "n_draws": int(len(draws["psi"])),
            "iterations": config.iterations,
            "burn_in": config.burn_in,
            "thin": config.thin,
            "chains": config.parallel_chains,
            "n": dataset.n,
            "p": dataset.p,
            "q": basis.q,
            "d": dataset.d,
        },
    )


# ---------------------------------------------------------------------------
# joint-distribution (Geweke) test


def geweke_probes(state: LatentState) -> np.ndarray:
    """Scalar functionals compared between the two simulators."""
    Sz = implied_sigma_z(state)
    p = state.p
    return np.array([
        Sz[0, 0],
        Sz[1, 1],
        Sz[0, 1],
        Sz[0, p],
        np.trace(Sz) / Sz.shape[0],
        state.sigma_eps[0],
        state.sigma_eps[-1],
        state.psi[0, 0, 0],
        state.psi[0, -1, -1],
        state.psi[0, 0, 0] ** 2,
        np.log(state.sigma_eps[0]),
    ])


GEWEKE_PROBE_NAMES = ("Sz[0,0]", "Sz[1,1]", "Sz[0,1]", "Sz[0,p]", "mean diag Sz", "sigma_eps[0]",
                      "sigma_eps[-1]", "Psi[0,0,0]", "Psi[0,-1,-1]", "Psi[0,0,0]^2", "log sigma_eps[0]")


def _batch_means_var(x, batches=50):
    """Variance of the mean of an autocorrelated series via batch means."""
    m = len(x) // batches
    bm = x[: m * batches].reshape(batches, m, -1).mean(axis=1)
    return bm.var(axis=0, ddof=1) / batches


def geweke_joint_test(spec: ModelSpec, iterations: int = 5000, n: int = 4, p: int = 3, q: int = 5,
                      m: int = 6, seed: int = 0, _mutation: str | None = None) -> dict:
    """Compare marginal-conditional and successive-conditional simulators.

    Forward draws sample (state, data) from the prior; the successive
    chain alternates a Gibbs sweep with a fresh data draw given the state.
    Both target the same joint, so probe means must agree.  Returns z-scores
    per probe.  Hyperparameters should give the probes finite variance.
    """
    from .basis import build_basis

    rng = np.random.default_rng(seed)
    basis = build_basis(q, (0.0, 1.0))
    spec = spec.resolve(p, q)
    W = np.ones((n, 1))
    times = [np.sort(rng.uniform(0.0, 1.0, m)) for _ in range(n)]
    fwd = np.empty((iterations, len(GEWEKE_PROBE_NAMES)))
    for g in range(iterations):
        fwd[g] = geweke_probes(sample_prior(spec, n, p, q, W, rng, basis))
    st = sample_prior(spec, n, p, q, W, rng, basis)
    ds = simulate_data(st, times, basis, W, rng)
    config = SamplerConfig(iterations=2, burn_in=1, thin=1, seed=seed)
    smp = GibbsSampler(ds, spec, basis, config, rng=rng, init=st, _mutation=_mutation)
    sc = np.empty_like(fwd)
    for g in range(iterations):
        smp.sweep()
        sc[g] = geweke_probes(smp.state)
        Y = simulate_data(smp.state, times, basis, W, rng).Y
        smp.set_observations(Y)
    se = np.sqrt(fwd.var(axis=0, ddof=1) / iterations + _batch_means_var(sc))
    z = (fwd.mean(axis=0) - sc.mean(axis=0)) / se
    return dict(zip(GEWEKE_PROBE_NAMES, z.tolist()))
