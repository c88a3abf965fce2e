"""
Spectral Map Module
Random Fourier feature and polynomial feature mappings Phi(x, y)
"""
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
from sklearn.preprocessing import PolynomialFeatures

from modules.dataset import Dataset
from utils.errors import InvalidArgumentError

logger = logging.getLogger(__name__)

FOURIER = "fourier"
POLYNOMIAL = "polynomial"
DEFAULT_N_FREQUENCIES = 600


@dataclass(frozen=True, eq=False)
class SpectralMap:
    """
    Feature mapping Phi(x, y) = onehot(y) kron psi(x)

    For the fourier kind psi(x) = sqrt(2/D) [cos(w_1 x), sin(w_1 x), ..., cos(w_D x), sin(w_D x)]
    with frequencies w_j ~ N(0, sigma^2 I). Frequencies are regenerated from the seed as
    sigma * Z with Z standard normal, so maps that differ only in sigma share one draw.
    """
    kind: str
    d: int
    n_classes: int
    D: int = 0
    sigma: float = 1.0
    seed: int = 0
    degree: int = 0
    omega: Optional[np.ndarray] = field(default=None, init=False, repr=False)
    _powers: Optional[np.ndarray] = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if self.d < 1:
            raise InvalidArgumentError(f"Feature dimension must be >= 1, got {self.d}")
        if self.n_classes < 2:
            raise InvalidArgumentError(f"Need at least 2 classes, got {self.n_classes}")
        if self.kind == FOURIER:
            if self.D < 1:
                raise InvalidArgumentError(f"Number of frequencies D must be >= 1, got {self.D}")
            if not np.isfinite(self.sigma) or self.sigma <= 0:
                raise InvalidArgumentError(f"sigma must be positive, got {self.sigma}")
            standard = np.random.default_rng(self.seed).standard_normal((self.D, self.d))
            omega = self.sigma * standard
            omega.setflags(write=False)
            object.__setattr__(self, "omega", omega)
        elif self.kind == POLYNOMIAL:
            if self.degree < 1:
                raise InvalidArgumentError(f"Polynomial degree must be >= 1, got {self.degree}")
            expansion = PolynomialFeatures(degree=self.degree, include_bias=True)
            powers = expansion.fit(np.zeros((1, self.d))).powers_.astype(np.int64)
            powers.setflags(write=False)
            object.__setattr__(self, "_powers", powers)
        else:
            raise InvalidArgumentError(f"Unknown map kind '{self.kind}'")

    @property
    def block_dim(self) -> int:
        """Length of psi(x), the non-zero block of Phi(x, y)"""
        if self.kind == FOURIER:
            return 2 * self.D
        return self._powers.shape[0]

    @property
    def m(self) -> int:
        return self.block_dim * self.n_classes

    def _check_features(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != self.d:
            raise InvalidArgumentError(f"Expected inputs with {self.d} features, got shape {X.shape}")
        return X

    def _check_labels(self, y: np.ndarray, n: int) -> np.ndarray:
        y = np.asarray(y)
        if y.shape != (n,):
            raise InvalidArgumentError(f"Expected {n} labels, got shape {y.shape}")
        if not np.issubdtype(y.dtype, np.integer) or y.min() < 0 or y.max() >= self.n_classes:
            raise InvalidArgumentError(f"Labels must be integers in [0, {self.n_classes - 1}]")
        return y

    def base_features(self, X: np.ndarray) -> np.ndarray:
        """psi(x) for every row of X, shape (N, block_dim)"""
        X = self._check_features(X)
        if self.kind == POLYNOMIAL:
            return np.prod(X[:, None, :] ** self._powers[None, :, :], axis=2)
        projection = X @ self.omega.T
        psi = np.empty((X.shape[0], 2 * self.D))
        psi[:, 0::2] = np.cos(projection)
        psi[:, 1::2] = np.sin(projection)
        return psi * np.sqrt(2.0 / self.D)

    def embed(self, psi: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Place each row of psi into the block selected by its label"""
        n, k = psi.shape
        out = np.zeros((n, k * self.n_classes))
        cols = y[:, None] * k + np.arange(k)[None, :]
        np.put_along_axis(out, cols, psi, axis=1)
        return out

    def apply(self, x: np.ndarray, y: int) -> np.ndarray:
        """Phi(x, y) as an m-vector"""
        x = np.asarray(x, dtype=float)
        if x.ndim != 1:
            raise InvalidArgumentError(f"apply expects a single d-vector, got shape {x.shape}")
        labels = self._check_labels(np.asarray([y]), 1)
        return self.embed(self.base_features(x), labels)[0]

    def apply_rows(self, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        X = self._check_features(X)
        y = self._check_labels(y, X.shape[0])
        return self.embed(self.base_features(X), y)

    def apply_batch(self, ds: Dataset) -> np.ndarray:
        """N x m matrix whose row i is Phi(x_i, y_i)"""
        if ds.n_classes > self.n_classes:
            raise InvalidArgumentError(
                f"Dataset has {ds.n_classes} classes but the map was built for {self.n_classes}"
            )
        return self.apply_rows(ds.features, ds.labels)

    def scores(self, X: np.ndarray, mu: np.ndarray) -> np.ndarray:
        """Phi(x, y)^T mu for every row and label, shape (N, n_classes)"""
        mu = np.asarray(mu, dtype=float)
        if mu.shape != (self.m,):
            raise InvalidArgumentError(f"Coefficient vector must have length {self.m}, got {mu.shape}")
        return self.base_features(X) @ mu.reshape(self.n_classes, self.block_dim).T

    def truncated(self, n_frequencies: int) -> "SpectralMap":
        """Same draw restricted to its first n_frequencies frequencies"""
        if self.kind != FOURIER:
            raise InvalidArgumentError("Only fourier maps can be truncated")
        if not 1 <= n_frequencies <= self.D:
            raise InvalidArgumentError(f"Truncation must keep between 1 and {self.D} frequencies")
        if n_frequencies == self.D:
            return self
        return SpectralMap(kind=FOURIER, d=self.d, n_classes=self.n_classes,
                           D=n_frequencies, sigma=self.sigma, seed=self.seed)

    def with_sigma(self, sigma: float) -> "SpectralMap":
        return SpectralMap(kind=self.kind, d=self.d, n_classes=self.n_classes, D=self.D,
                           sigma=sigma, seed=self.seed, degree=self.degree)

    def to_dict(self) -> Dict[str, Any]:
        """Descriptor from which the map is rebuilt; frequencies are never stored"""
        data = {"kind": self.kind, "d": self.d, "n_classes": self.n_classes}
        if self.kind == FOURIER:
            data.update({"D": self.D, "sigma": float(self.sigma), "seed": int(self.seed)})
        else:
            data["degree"] = self.degree
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SpectralMap":
        return cls(
            kind=data["kind"],
            d=int(data["d"]),
            n_classes=int(data["n_classes"]),
            D=int(data.get("D", 0)),
            sigma=float(data.get("sigma", 1.0)),
            seed=int(data.get("seed", 0)),
            degree=int(data.get("degree", 0)),
        )


def sample_map(d: int, D: int, sigma: float, n_classes: int, seed: int) -> SpectralMap:
    """Random Fourier feature map approximating the Gaussian kernel of bandwidth 1/sigma"""
    spectral = SpectralMap(kind=FOURIER, d=d, n_classes=n_classes, D=D, sigma=sigma, seed=seed)
    logger.debug(f"Sampled fourier map: d={d}, D={D}, sigma={sigma:.6g}, seed={seed}")
    return spectral


def polynomial_map(d: int, degree: int, n_classes: int) -> SpectralMap:
    """All monomials of x with total degree <= degree, constant included"""
    return SpectralMap(kind=POLYNOMIAL, d=d, n_classes=n_classes, degree=degree)


def sigma_scale(train: Dataset, D: int) -> float:
    """sqrt(2 / (D * mean per-column population variance of the training features))"""
    if D < 1:
        raise InvalidArgumentError(f"D must be >= 1, got {D}")
    variance = float(np.mean(np.var(train.features, axis=0)))
    if variance <= 0.0:
        raise InvalidArgumentError("Training features have zero variance; sigma scale is undefined")
    return float(np.sqrt(2.0 / (D * variance)))


def sigma_grid(train: Dataset, D: int = DEFAULT_N_FREQUENCIES, n_points: int = 10) -> List[float]:
    """
    Log-spaced sigma values from 0.1 to 10 times the sigma scale

    Returns:
        n_points strictly increasing values, endpoints included
    """
    if n_points < 2:
        raise InvalidArgumentError(f"sigma grid needs at least 2 points, got {n_points}")
    scale = sigma_scale(train, D)
    grid = np.geomspace(0.1 * scale, 10.0 * scale, n_points)
    return [float(s) for s in grid]


def kernel_estimate(spectral: SpectralMap, x: np.ndarray, x_other: np.ndarray) -> float:
    """Monte-Carlo Gaussian kernel value: mean of cos(w^T (x - x')) over the frequencies"""
    if spectral.kind != FOURIER:
        raise InvalidArgumentError("Kernel estimates need a fourier map")
    psi = spectral.base_features(np.vstack([x, x_other]))
    return float(0.5 * psi[0] @ psi[1])


def gaussian_kernel(sigma: float, x: np.ndarray, x_other: np.ndarray) -> float:
    diff = np.asarray(x, dtype=float) - np.asarray(x_other, dtype=float)
    return float(np.exp(-0.5 * sigma ** 2 * diff @ diff))
