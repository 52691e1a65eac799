"""Phase I: randomization-based sparse feature extraction.

A frozen grouped random encoder maps inputs to codes; a FISTA-fit sparse
decoder is solved per view, and the view-optimal feature is the input
re-encoded through the fitted (transposed) decoder weights with the
encoder's activation and original random bias.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("linear", "tanh", "sigmoid")


def apply_activation(name: str, x: np.ndarray) -> np.ndarray:
    if name == "linear":
        return x
    if name == "tanh":
        return np.tanh(x)
    if name == "sigmoid":
        return 1.0 / (1.0 + np.exp(-x))
    raise ValueError(f"unknown activation {name!r}; expected one of {ACTIVATIONS}")


def activation_derivative(name: str, preact: np.ndarray, out: np.ndarray) -> np.ndarray:
    """Derivative of the activation w.r.t. its preactivation.

    `out` is the already-computed activation output, reused so tanh/sigmoid
    derivatives cost one elementwise expression.
    """
    if name == "linear":
        return np.ones_like(preact)
    if name == "tanh":
        return 1.0 - out * out
    if name == "sigmoid":
        return out * (1.0 - out)
    raise ValueError(f"unknown activation {name!r}; expected one of {ACTIVATIONS}")


@dataclass(frozen=True)
class RandomEncoder:
    """n groups of frozen random affine maps, output dim n*L.

    Weights are drawn once, uniform on [-1, 1], and never mutated; arrays are
    marked read-only so the reset contract is enforced structurally.
    """

    n: int
    L: int
    input_dim: int
    activation: str
    seed: int
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    @classmethod
    def create(
        cls,
        input_dim: int,
        n: int = 30,
        L: int = 20,
        activation: str = "tanh",
        seed: int = 0,
    ) -> "RandomEncoder":
        if n < 1 or L < 1 or input_dim < 1:
            raise ValueError(f"n, L, input_dim must be >= 1, got {n}, {L}, {input_dim}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}; expected one of {ACTIVATIONS}")
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        ws, bs = [], []
        for _ in range(n):
            w = rng.uniform(-1.0, 1.0, size=(input_dim, L))
            b = rng.uniform(-1.0, 1.0, size=L)
            w.setflags(write=False)
            b.setflags(write=False)
            ws.append(w)
            bs.append(b)
        return cls(n, L, input_dim, activation, seed, tuple(ws), tuple(bs))

    @property
    def output_dim(self) -> int:
        return self.n * self.L

    def encode(self, X: np.ndarray) -> np.ndarray:
        return encode(self, X)


def encode(encoder: RandomEncoder, X: np.ndarray) -> np.ndarray:
    """Concatenation over groups of activation(X @ W_g + b_g); [N x n*L]."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != encoder.input_dim:
        raise ValueError(
            f"expected inputs with {encoder.input_dim} columns, got shape {X.shape}"
        )
    blocks = [
        apply_activation(encoder.activation, X @ w + b)
        for w, b in zip(encoder.weights, encoder.biases)
    ]
    return np.concatenate(blocks, axis=1)


def soft_threshold(x: np.ndarray, tau: float) -> np.ndarray:
    """Elementwise sign(x) * max(|x| - tau, 0)."""
    if tau < 0:
        raise ValueError(f"tau must be >= 0, got {tau}")
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.maximum(np.abs(x) - tau, 0.0)


def lipschitz_constant(
    Z: np.ndarray, tol: float = 1e-6, max_iter: int = 1000, seed: int = 0
) -> float:
    """2 * lambda_max(Z^T Z) by power iteration to relative tolerance `tol`.

    All-zero Z returns 0.0; the solver substitutes a unit step with a warning.
    """
    Z = np.asarray(Z, dtype=np.float64)
    if Z.size == 0:
        raise ValueError("Z must be nonempty")
    if not np.any(Z):
        return 0.0
    G = Z.T @ Z
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(G.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = G @ v
        lam_new = float(v @ w)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            # v landed in the null space; restart from a fresh direction
            v = rng.standard_normal(G.shape[0])
            v /= np.linalg.norm(v)
            continue
        v = w / nw
        if abs(lam_new - lam) <= tol * max(abs(lam_new), 1e-300):
            lam = lam_new
            break
        lam = lam_new
    return 2.0 * lam


def _objective(G: np.ndarray, B: np.ndarray, xsq: float, theta: np.ndarray, lam: float) -> float:
    # ||Z theta - X||_F^2 expanded via precomputed G = Z^T Z, B = Z^T X, xsq = ||X||_F^2
    quad = float(np.sum(theta * (G @ theta))) - 2.0 * float(np.sum(theta * B)) + xsq
    return quad + lam * float(np.sum(np.abs(theta)))


def fista_fit(
    Z: np.ndarray,
    X: np.ndarray,
    lam: float,
    K: int,
    xi: float | None = None,
) -> tuple[np.ndarray, list[float]]:
    """Fit decoder theta' minimizing ||Z theta' - X||_F^2 + lam * ||theta'||_1.

    Runs K iterations of {gradient step at y_k with step 1/xi, soft threshold
    with tau = lam/xi, momentum extrapolation with t_{k+1} = (1+sqrt(1+4 t_k^2))/2}
    from a zero start. Returns the last prox iterate and the objective trace
    (K+1 entries, initial value first).
    """
    Z = np.asarray(Z, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    if Z.ndim != 2 or X.ndim != 2 or Z.shape[0] != X.shape[0]:
        raise ValueError(f"row counts must match, got Z {Z.shape} and X {X.shape}")
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    if xi is None:
        xi = lipschitz_constant(Z)
    if xi == 0.0:
        warnings.warn("all-zero code matrix: Lipschitz constant is 0, using unit step")
        xi = 1.0

    G = Z.T @ Z
    B = Z.T @ X
    xsq = float(np.sum(X * X))
    theta = np.zeros((Z.shape[1], X.shape[1]))
    y = theta
    t = 1.0
    trace = [_objective(G, B, xsq, theta, lam)]
    for k in range(1, K + 1):
        grad = 2.0 * (G @ y - B)
        theta_new = soft_threshold(y - grad / xi, lam / xi)
        t_new = (1.0 + np.sqrt(1.0 + 4.0 * t * t)) / 2.0
        y = theta_new + ((t - 1.0) / t_new) * (theta_new - theta)
        theta, t = theta_new, t_new
        obj = _objective(G, B, xsq, theta, lam)
        if not np.isfinite(obj):
            raise FloatingPointError(f"FISTA objective diverged at iteration {k}")
        trace.append(obj)
    return theta, trace


@dataclass
class SparseCoder:
    """FISTA solver configuration and last-fit state for one decoder.

    `code_activation` selects the activation on the codes the decoder is fit
    against (linear by default; the final re-encoding uses the encoder's own
    activation).
    """

    lam: float = 1e-3
    max_iter: int = 50
    code_activation: str = "linear"
    theta: np.ndarray | None = field(default=None, repr=False)
    t_k: float = 1.0
    trace: list[float] = field(default_factory=list, repr=False)

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")
        if self.code_activation not in ACTIVATIONS:
            raise ValueError(
                f"unknown activation {self.code_activation!r}; expected one of {ACTIVATIONS}"
            )

    def fit(self, Z: np.ndarray, X: np.ndarray) -> tuple[np.ndarray, list[float]]:
        theta, trace = fista_fit(Z, X, self.lam, self.max_iter)
        self.theta = theta
        self.trace = trace
        t = 1.0
        for _ in range(self.max_iter):
            t = (1.0 + np.sqrt(1.0 + 4.0 * t * t)) / 2.0
        self.t_k = t
        return theta, trace


@dataclass(frozen=True)
class ExtractionConfig:
    """Hyper-parameters for the encoder + sparse decoder pair."""

    n: int = 30
    L: int = 20
    max_iter: int = 50
    lam: float = 1e-3
    activation: str = "tanh"
    code_activation: str = "linear"

    def __post_init__(self) -> None:
        if self.n < 1 or self.L < 1:
            raise ValueError(f"n and L must be >= 1, got {self.n}, {self.L}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        for act in (self.activation, self.code_activation):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}; expected one of {ACTIVATIONS}")

    def make_encoder(self, input_dim: int, seed: int) -> "RandomEncoder":
        return RandomEncoder.create(
            input_dim, n=self.n, L=self.L, activation=self.activation, seed=seed
        )

    def make_coder(self) -> "SparseCoder":
        return SparseCoder(
            lam=self.lam, max_iter=self.max_iter, code_activation=self.code_activation
        )


@dataclass(frozen=True)
class ViewFeature:
    """View-optimal feature matrix for one (class, view) batch."""

    features: np.ndarray
    class_id: int
    view_id: int
    sparsity: float

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.features)):
            raise ValueError("view feature contains non-finite entries")


def extract_view_feature(encoder: RandomEncoder, batch, coder: SparseCoder) -> ViewFeature:
    """Alg.-style extraction: encode, fit the sparse decoder per group,
    re-encode with theta* = theta'^T and the original random bias.

    The encoder is immutable; calling this any number of times leaves its
    stored random weights bitwise unchanged.
    """
    X = np.asarray(batch.inputs, dtype=np.float64)
    if X.shape[1] != encoder.input_dim:
        raise ValueError(
            f"batch input_dim {X.shape[1]} does not match encoder input_dim {encoder.input_dim}"
        )
    blocks = []
    zeros = 0
    total = 0
    for w, b in zip(encoder.weights, encoder.biases):
        Zg = apply_activation(coder.code_activation, X @ w + b)
        theta_g, _ = fista_fit(Zg, X, coder.lam, coder.max_iter)
        zeros += int(np.count_nonzero(theta_g == 0.0))
        total += theta_g.size
        # theta*_g = theta'_g^T maps inputs back to this group's L nodes
        blocks.append(apply_activation(encoder.activation, X @ theta_g.T + b))
    feats = np.concatenate(blocks, axis=1)
    return ViewFeature(
        features=feats,
        class_id=int(batch.class_id),
        view_id=int(batch.view_id),
        sparsity=zeros / total,
    )
