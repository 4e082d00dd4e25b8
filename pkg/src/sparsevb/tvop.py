"""Total-variation deblurring as a LASSO problem.

Images are ``p0 x p0`` arrays on a periodic grid.  Conventions:

* FFT: ``numpy.fft.fft2`` (unnormalized) forward, ``ifft2`` (normalized)
  inverse; integer wavenumbers ``k = fftfreq(p0) * p0``.
* Axis 1 is ``x`` (wavenumber ``k1``), axis 0 is ``y`` (``k2``).
* Blur: multiplier ``exp(-omega |k|^2)``, i.e. periodic Gaussian convolution.
* Derivatives are taken with respect to the angle ``t = 2 pi s / p0`` so the
  multiplier of ``d/dx`` is ``i k1``.  At the Nyquist index the multiplier
  is replaced by the real number ``p0/2``; the operator then maps real
  images to real images and ``D^T D`` has symbol ``|k|^2`` exactly.

The TV coordinates are ``beta = (D1 img, D2 img, beta0)`` with ``p = 2 p0^2 +
1``; ``D = (D1; D2)`` has the constants as its kernel, which ``beta0``
restores.  The forward model on ``beta`` is ``X = S B (D^+, 1)`` with ``B``
the blur, ``D^+ = (D^T D)^{-1} D^T`` and ``S`` the observation subset.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

__all__ = [
    "BlurSpec",
    "TruncationCapacityError",
    "wavenumbers",
    "blur_multiplier",
    "blur_apply",
    "grad_apply",
    "grad_pinv_apply",
    "TvOperator",
    "build_tv_design",
    "cov_diag_trick",
    "FourierTruncation",
    "fourier_truncate",
    "truncation_error",
    "relative_error",
    "shepp_logan",
    "write_pgm",
    "read_pgm",
    "write_image_csv",
    "read_image_csv",
]

IMAG_TOL = 1e-10


class TruncationCapacityError(MemoryError):
    """Too many retained modes for a dense solve."""


def wavenumbers(p0: int) -> tuple[NDArray, NDArray]:
    """Integer wavenumber grids ``(k1, k2)`` broadcastable to ``(p0, p0)``."""
    if p0 < 2 or p0 % 2:
        raise ValueError(f"p0 must be even and >= 2, got {p0}")
    k = np.fft.fftfreq(p0) * p0
    return k[None, :], k[:, None]


def _ksq(p0: int) -> NDArray:
    k1, k2 = wavenumbers(p0)
    return k1**2 + k2**2


def blur_multiplier(p0: int, omega: float) -> NDArray:
    if not omega >= 0:
        raise ValueError("omega must be nonnegative")
    return np.exp(-omega * _ksq(p0))


def _real(z: NDArray, scale: float) -> NDArray:
    resid = np.max(np.abs(z.imag)) if z.size else 0.0
    assert resid <= IMAG_TOL * max(scale, 1.0), f"imaginary residue {resid:.3e}"
    return np.ascontiguousarray(z.real)


def blur_apply(img: NDArray, omega: float) -> NDArray:
    """Periodic Gaussian blur by spectral multiplication with ``exp(-omega |k|^2)``."""
    img = np.asarray(img, dtype=float)
    z = np.fft.ifft2(np.fft.fft2(img) * blur_multiplier(img.shape[0], omega))
    return _real(z, np.max(np.abs(img), initial=0.0))


def _deriv_symbols(p0: int) -> tuple[NDArray, NDArray]:
    k1, k2 = wavenumbers(p0)
    nyq = p0 // 2
    s1 = 1j * np.broadcast_to(k1, (p0, p0)).astype(complex)
    s2 = 1j * np.broadcast_to(k2, (p0, p0)).astype(complex)
    s1[:, nyq] = nyq
    s2[nyq, :] = nyq
    return s1, s2


@dataclass
class _Spectral:
    """Cached symbols for one grid size."""

    p0: int
    s1: NDArray = field(init=False)
    s2: NDArray = field(init=False)
    inv_ksq: NDArray = field(init=False)

    def __post_init__(self):
        self.s1, self.s2 = _deriv_symbols(self.p0)
        ksq = _ksq(self.p0)
        with np.errstate(divide="ignore"):
            inv = 1.0 / ksq
        inv[0, 0] = 0.0
        self.inv_ksq = inv


_CACHE: dict[int, _Spectral] = {}


def _spectral(p0: int) -> _Spectral:
    if p0 not in _CACHE:
        _CACHE[p0] = _Spectral(p0)
    return _CACHE[p0]


def grad_apply(img: NDArray) -> tuple[NDArray, NDArray]:
    """Spectral derivatives ``(dx, dy)`` of a periodic image."""
    img = np.asarray(img, dtype=float)
    sp = _spectral(img.shape[0])
    F = np.fft.fft2(img)
    scale = np.max(np.abs(img), initial=0.0) * img.shape[0]
    return _real(np.fft.ifft2(F * sp.s1), scale), _real(np.fft.ifft2(F * sp.s2), scale)


def grad_pinv_apply(dx: NDArray, dy: NDArray, mean: float = 0.0) -> NDArray:
    """Left pseudo-inverse ``(D^T D)^{-1} D^T (dx, dy)`` plus the constant ``mean``."""
    dx = np.asarray(dx, dtype=float)
    dy = np.asarray(dy, dtype=float)
    sp = _spectral(dx.shape[0])
    G = (np.conj(sp.s1) * np.fft.fft2(dx) + np.conj(sp.s2) * np.fft.fft2(dy)) * sp.inv_ksq
    G[0, 0] = mean * dx.size
    return _real(np.fft.ifft2(G), max(np.max(np.abs(dx), initial=0.0), np.max(np.abs(dy), initial=0.0), abs(mean)))


def _pinv_adjoint(img: NDArray) -> tuple[NDArray, NDArray]:
    # (D^+)^T = D (D^T D)^{-1}; the constant mode is annihilated
    sp = _spectral(img.shape[0])
    F = np.fft.fft2(img) * sp.inv_ksq
    scale = np.max(np.abs(img), initial=0.0)
    return _real(np.fft.ifft2(F * sp.s1), scale), _real(np.fft.ifft2(F * sp.s2), scale)


@dataclass(frozen=True)
class BlurSpec:
    """Grid size, blur width, noise level and observed pixels.

    ``observed`` holds flat row-major pixel indices; ``None`` means every
    pixel.
    """

    p0: int
    omega: float
    gamma: float
    observed: tuple[int, ...] | None = None

    def __post_init__(self):
        wavenumbers(self.p0)
        if not self.omega > 0 or not self.gamma > 0:
            raise ValueError("omega and gamma must be positive")
        if self.observed is not None:
            obs = np.asarray(self.observed)
            if obs.size and (obs.min() < 0 or obs.max() >= self.p0**2):
                raise ValueError("observation index outside the grid")

    @classmethod
    def strided(cls, p0: int, omega: float, gamma: float, stride: int) -> BlurSpec:
        return cls(p0, omega, gamma, tuple(range(0, p0 * p0, stride)))

    @property
    def p_tilde(self) -> int:
        return self.p0 * self.p0

    @property
    def obs_index(self) -> NDArray:
        if self.observed is None:
            return np.arange(self.p_tilde)
        return np.asarray(self.observed, dtype=np.int64)

    @property
    def n(self) -> int:
        return self.p_tilde if self.observed is None else len(self.observed)


class TvOperator:
    """Matrix-free ``X`` and ``X^T`` on TV coordinates, plus dense row builders."""

    def __init__(self, spec: BlurSpec):
        self.spec = spec
        self.p0 = spec.p0
        self.pt = spec.p_tilde
        self.p = 2 * self.pt + 1
        self.n = spec.n
        self._mult = blur_multiplier(spec.p0, spec.omega)
        self._kernel: tuple[NDArray, NDArray] | None = None

    # coordinate maps
    def coords_from_image(self, img: NDArray) -> NDArray:
        dx, dy = grad_apply(img)
        return np.concatenate([dx.ravel(), dy.ravel(), [float(np.mean(img))]])

    def split(self, beta: NDArray) -> tuple[NDArray, NDArray, float]:
        beta = np.asarray(beta, dtype=float)
        if beta.size != self.p:
            raise ValueError(f"expected {self.p} coefficients, got {beta.size}")
        s = (self.p0, self.p0)
        return beta[: self.pt].reshape(s), beta[self.pt : 2 * self.pt].reshape(s), float(beta[-1])

    def image_from_coords(self, beta: NDArray) -> NDArray:
        dx, dy, b0 = self.split(beta)
        return grad_pinv_apply(dx, dy, b0)

    def _blur(self, img: NDArray) -> NDArray:
        return _real(np.fft.ifft2(np.fft.fft2(img) * self._mult), np.max(np.abs(img), initial=0.0))

    def blur_image(self, img: NDArray) -> NDArray:
        return self._blur(np.asarray(img, dtype=float))

    def observe(self, img: NDArray) -> NDArray:
        """``S B img``: blurred image at the observed pixels."""
        return self._blur(np.asarray(img, dtype=float)).ravel()[self.spec.obs_index]

    def apply(self, beta: NDArray) -> NDArray:
        return self.observe(self.image_from_coords(beta))

    def adjoint(self, w: NDArray) -> NDArray:
        w = np.asarray(w, dtype=float).ravel()
        if w.size != self.n:
            raise ValueError(f"expected {self.n} observations, got {w.size}")
        W = np.zeros(self.pt)
        np.add.at(W, self.spec.obs_index, w)
        B = self._blur(W.reshape(self.p0, self.p0))
        ax, ay = _pinv_adjoint(B)
        return np.concatenate([ax.ravel(), ay.ravel(), [float(B.sum())]])

    def adjoint_image(self, img: NDArray) -> NDArray:
        """``(D^+, 1)^T B^T img`` for a full-grid image (observation subset ignored)."""
        B = self._blur(np.asarray(img, dtype=float))
        ax, ay = _pinv_adjoint(B)
        return np.concatenate([ax.ravel(), ay.ravel(), [float(B.sum())]])

    # dense rows
    def _row_kernel(self) -> tuple[NDArray, NDArray]:
        if self._kernel is None:
            e0 = np.zeros((self.p0, self.p0))
            e0[0, 0] = 1.0
            self._kernel = _pinv_adjoint(self._blur(e0))
        return self._kernel

    def rows(self, pixels: NDArray, out: NDArray | None = None) -> NDArray:
        """Dense rows of ``X`` for flat pixel indices; each is a shifted kernel."""
        pixels = np.asarray(pixels, dtype=np.int64).ravel()
        if out is None:
            out = np.empty((pixels.size, self.p))
        kx, ky = self._row_kernel()
        pt = self.pt
        for r, l in enumerate(pixels):
            i, j = divmod(int(l), self.p0)
            out[r, :pt] = np.roll(kx, (i, j), axis=(0, 1)).ravel()
            out[r, pt : 2 * pt] = np.roll(ky, (i, j), axis=(0, 1)).ravel()
            out[r, -1] = 1.0  # the blur preserves the mean
        return out

    def matrix(self) -> NDArray:
        """Full dense ``X`` (small grids only)."""
        return self.rows(self.spec.obs_index)


def build_tv_design(spec: BlurSpec) -> TvOperator:
    return TvOperator(spec)


def cov_diag_trick(K: NDArray, C0Xt: NDArray) -> NDArray:
    """``diag(K (C0 X^T)^T)`` as ``(K * C0 X^T) 1`` without the ``p x p`` product."""
    K = np.asarray(K, dtype=float)
    C0Xt = np.asarray(C0Xt, dtype=float)
    if K.shape != C0Xt.shape:
        raise ValueError(f"shape mismatch {K.shape} vs {C0Xt.shape}")
    if K.ndim == 1:
        return K * C0Xt
    return np.einsum("ij,ij->i", K, C0Xt)


# --------------------------------------------------------------------------
# Fourier truncation for full observations


@dataclass
class FourierTruncation:
    """Reduced full-observation problem on the retained blur modes.

    With ``Phi`` the real orthonormal Fourier basis of the retained modes and
    ``b`` their blur factors, ``X ~ X_l X_r`` with ``X_l = Phi diag(b)`` and
    ``X_r = Phi^T (D^+, 1)``.  Because ``X_l`` has orthogonal columns the
    likelihood reduces to ``Y_r = Phi^T Y`` against ``diag(b) X_r`` with the
    same noise level, which is the modified Woodbury form in real arithmetic.
    """

    spec: BlurSpec
    modes: NDArray  # (n_tilde, 3): k1, k2, kind (0 constant, 1 cos, 2 sin)
    factors: NDArray  # blur factor of each basis vector
    threshold: float

    @property
    def n_tilde(self) -> int:
        return self.modes.shape[0]

    def basis_image(self, r: int) -> NDArray:
        p0 = self.spec.p0
        k1, k2, kind = self.modes[r]
        s = np.arange(p0)
        phase = 2.0 * np.pi * (k1 * s[None, :] + k2 * s[:, None]) / p0
        if kind == 0:
            return np.full((p0, p0), 1.0 / p0)
        norm = math.sqrt(2.0) / p0
        if kind == 3:  # self-conjugate mode: cosine only, no factor sqrt(2)
            return np.cos(phase) / p0
        return norm * (np.cos(phase) if kind == 1 else np.sin(phase))

    def project(self, img: NDArray) -> NDArray:
        """``Phi^T img``."""
        img = np.asarray(img, dtype=float)
        return np.array([np.sum(self.basis_image(r) * img) for r in range(self.n_tilde)])

    def project_fast(self, img: NDArray) -> NDArray:
        """``Phi^T img`` read off a single FFT."""
        p0 = self.spec.p0
        F = np.fft.fft2(np.asarray(img, dtype=float))
        k1 = self.modes[:, 0].astype(int) % p0
        k2 = self.modes[:, 1].astype(int) % p0
        c = F[k2, k1]
        kind = self.modes[:, 2]
        out = np.where(kind == 2, -c.imag, c.real) * (math.sqrt(2.0) / p0)
        out[kind == 0] = c.real[kind == 0] / p0
        out[kind == 3] = c.real[kind == 3] / p0
        return out

    def synthesize(self, coef: NDArray) -> NDArray:
        return sum(c * self.basis_image(r) for r, c in enumerate(coef))

    def design_rows(self, op: TvOperator, out: NDArray | None = None) -> NDArray:
        """Rows of ``diag(b) X_r``, i.e. ``X^T phi_r`` for each basis image."""
        if out is None:
            out = np.empty((self.n_tilde, op.p))
        for r in range(self.n_tilde):
            out[r] = op.adjoint_image(self.basis_image(r))
        return out

    def reduced_data(self, Y_full: NDArray) -> NDArray:
        p0 = self.spec.p0
        return self.project_fast(np.asarray(Y_full, dtype=float).reshape(p0, p0))

    def truncated_blur(self, img: NDArray) -> NDArray:
        """``X_I img``: blur keeping only the retained modes."""
        return self.synthesize(self.factors * self.project_fast(img))


def _mode_list(p0: int, keep: NDArray) -> NDArray:
    """One representative per conjugate pair of the retained wavenumbers."""
    k = (np.fft.fftfreq(p0) * p0).astype(int)
    nyq = p0 // 2
    rows = []
    for i2, k2 in enumerate(k):
        for i1, k1 in enumerate(k):
            if not keep[i2, i1]:
                continue
            if k1 == 0 and k2 == 0:
                rows.append((0, 0, 0))
                continue
            self_conj = (k1 in (0, -nyq)) and (k2 in (0, -nyq))
            if self_conj:
                rows.append((k1, k2, 3))
                continue
            # keep the half-plane representative: k2 > 0, or k2 == 0 and k1 > 0
            nk1 = -k1 if k1 != -nyq else k1
            nk2 = -k2 if k2 != -nyq else k2
            if (k2, k1) > (nk2, nk1):
                rows.append((k1, k2, 1))
                rows.append((k1, k2, 2))
    modes = np.array(rows, dtype=np.int64).reshape(-1, 3)
    order = np.lexsort((modes[:, 2], modes[:, 0], modes[:, 1], modes[:, 0] ** 2 + modes[:, 1] ** 2))
    return modes[order]


def fourier_truncate(
    spec: BlurSpec, rho: float | None = None, n_modes: int | None = None, max_modes: int = 6000
) -> FourierTruncation:
    """Retain ``{k : exp(-omega |k|^2) > rho gamma}`` (or the shells closest to ``n_modes``).

    Raises :class:`TruncationCapacityError` when more than ``max_modes``
    modes survive; the online path is the alternative then.
    """
    if spec.observed is not None:
        raise ValueError("Fourier truncation needs full observations")
    mult = blur_multiplier(spec.p0, spec.omega)
    if n_modes is not None:
        ksq = _ksq(spec.p0).ravel()
        shells, counts = np.unique(ksq, return_counts=True)
        cum = np.cumsum(counts)
        i = int(np.argmin(np.abs(cum - n_modes)))
        keep = _ksq(spec.p0) <= shells[i]
        thr = float(math.exp(-spec.omega * shells[i]))
    else:
        if rho is None or not 0 < rho * spec.gamma < 1:
            raise ValueError("need rho with 0 < rho * gamma < 1")
        thr = rho * spec.gamma
        keep = mult > thr
    count = int(keep.sum())
    if count > max_modes:
        raise TruncationCapacityError(
            f"{count} retained modes exceed the dense limit {max_modes}; use the online path instead"
        )
    modes = _mode_list(spec.p0, keep)
    factors = np.exp(-spec.omega * (modes[:, 0] ** 2 + modes[:, 1] ** 2).astype(float))
    return FourierTruncation(spec, modes, factors, thr)


def truncation_error(img: NDArray, spec: BlurSpec, trunc: FourierTruncation) -> float:
    """``|z - z_I| / |z|`` for ``z`` the blurred image and ``z_I`` its truncation."""
    z = blur_apply(img, spec.omega)
    mask = np.zeros((spec.p0, spec.p0), dtype=bool)
    p0 = spec.p0
    for k1, k2, _ in trunc.modes:
        mask[k2 % p0, k1 % p0] = True
        mask[(-k2) % p0, (-k1) % p0] = True
    zt = _real(np.fft.ifft2(np.fft.fft2(img) * blur_multiplier(p0, spec.omega) * mask), 1.0)
    return float(np.linalg.norm(z - zt) / np.linalg.norm(z))


def relative_error(estimate: NDArray, truth: NDArray) -> float:
    """``|estimate - truth|_2 / |truth|_2`` over the flattened image."""
    truth = np.asarray(truth, dtype=float).ravel()
    return float(np.linalg.norm(np.asarray(estimate, dtype=float).ravel() - truth) / np.linalg.norm(truth))


# --------------------------------------------------------------------------
# Test image


_SHEPP_LOGAN = (
    # intensity, semi-axis a, semi-axis b, x0, y0, angle (deg); modified contrast
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.8740, 0.0, -0.0184, 0.0),
    (-0.2, 0.1100, 0.3100, 0.22, 0.0, -18.0),
    (-0.2, 0.1600, 0.4100, -0.22, 0.0, 18.0),
    (0.1, 0.2100, 0.2500, 0.0, 0.35, 0.0),
    (0.1, 0.0460, 0.0460, 0.0, 0.1, 0.0),
    (0.1, 0.0460, 0.0460, 0.0, -0.1, 0.0),
    (0.1, 0.0460, 0.0230, -0.08, -0.605, 0.0),
    (0.1, 0.0230, 0.0230, 0.0, -0.606, 0.0),
    (0.1, 0.0230, 0.0460, 0.06, -0.605, 0.0),
)


def shepp_logan(p0: int) -> NDArray:
    """Modified Shepp-Logan head phantom on a ``p0 x p0`` grid (values in [0, 1])."""
    ax = (np.arange(p0) - (p0 - 1) / 2.0) / ((p0 - 1) / 2.0)
    x = ax[None, :]
    y = -ax[:, None]
    img = np.zeros((p0, p0))
    for A, a, b, x0, y0, phi in _SHEPP_LOGAN:
        c, s = math.cos(math.radians(phi)), math.sin(math.radians(phi))
        u = (x - x0) * c + (y - y0) * s
        v = -(x - x0) * s + (y - y0) * c
        img[(u / a) ** 2 + (v / b) ** 2 <= 1.0] += A
    return img


# --------------------------------------------------------------------------
# Image files


def write_pgm(path, img: NDArray, vmin: float | None = None, vmax: float | None = None) -> None:
    """Binary 16-bit PGM; the value range is stored in a comment so reading inverts it."""
    img = np.asarray(img, dtype=float)
    lo = float(np.min(img) if vmin is None else vmin)
    hi = float(np.max(img) if vmax is None else vmax)
    span = hi - lo if hi > lo else 1.0
    q = np.clip(np.rint((img - lo) / span * 65535.0), 0, 65535).astype(">u2")
    header = f"P5\n# min={lo!r} max={hi!r}\n{img.shape[1]} {img.shape[0]}\n65535\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(q.tobytes())


def read_pgm(path) -> NDArray:
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    lo = hi = None
    pos = 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            end = data.index(b"\n", pos)
            comment = data[pos + 1 : end].decode("ascii").split()
            for item in comment:
                key, _, val = item.partition("=")
                if key == "min":
                    lo = float(val)
                elif key == "max":
                    hi = float(val)
            pos = end + 1
            continue
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise ValueError("only binary P5 graymaps are supported")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    dtype = ">u2" if maxval > 255 else "u1"
    raw = np.frombuffer(data, dtype=dtype, count=w * h, offset=pos).reshape(h, w).astype(float)
    if lo is None or hi is None:
        return raw / maxval
    span = hi - lo if hi > lo else 1.0
    return lo + raw / maxval * span


def write_image_csv(path, img: NDArray) -> None:
    """Flat CSV: header ``p0=<N>`` then one value per line in row-major order."""
    img = np.asarray(img, dtype=float)
    if img.ndim != 2 or img.shape[0] != img.shape[1]:
        raise ValueError("image must be square")
    with open(path, "w") as fh:
        fh.write(f"p0={img.shape[0]}\n")
        for v in img.ravel():
            fh.write(f"{float(v)!r}\n")


def read_image_csv(path) -> NDArray:
    with open(path) as fh:
        head = fh.readline().strip()
        if not head.startswith("p0="):
            raise ValueError(f"expected 'p0=<N>' header, got {head!r}")
        p0 = int(head[3:])
        vals = np.array([float(line) for line in fh if line.strip()])
    if vals.size != p0 * p0:
        raise ValueError(f"expected {p0 * p0} values, got {vals.size}")
    return vals.reshape(p0, p0)
