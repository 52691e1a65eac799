"""Phase II: orthogonal-projection fusion.

A running d x d projector P tracks the subspace spanned by all previously
absorbed view features; fusion-layer weights are updated only along P's
range, so new sessions do not interfere with directions already in use.
P is maintained by rank-1 recursive least-squares updates (with an exact
block form for mini-batches), never by storing past features.
"""

from __future__ import annotations

import numpy as np

from .sparse_features import ACTIVATIONS, activation_derivative, apply_activation


def projector_direct(Z: np.ndarray, alpha: float, d: int | None = None) -> np.ndarray:
    """Reference form: I - Z~ (Z~^T Z~ + alpha I)^-1 Z~^T with Z~ = Z^T.

    Z holds absorbed features as rows [m x d]. Dense solve; intended for
    testing and small d. Empty Z returns the identity.
    """
    if alpha <= 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    Z = np.asarray(Z, dtype=np.float64)
    if Z.size == 0:
        if d is None:
            d = Z.shape[1] if Z.ndim == 2 else 0
        if d < 1:
            raise ValueError("empty Z requires an explicit dimension d")
        return np.eye(d)
    if Z.ndim != 2:
        raise ValueError(f"Z must be a 2-d feature matrix, got shape {Z.shape}")
    m, dim = Z.shape
    gram = Z @ Z.T + alpha * np.eye(m)
    return np.eye(dim) - Z.T @ np.linalg.solve(gram, Z)


class Projector:
    """Orthogonal projector maintained recursively; fresh state is I."""

    def __init__(self, dim: int, alpha: float = 1.0):
        if dim < 1:
            raise ValueError(f"dim must be >= 1, got {dim}")
        if alpha <= 0:
            raise ValueError(f"alpha must be > 0, got {alpha}")
        self.dim = dim
        self.alpha = float(alpha)
        self.P = np.eye(dim)
        self.samples_absorbed = 0

    def reset(self) -> None:
        self.P = np.eye(self.dim)
        self.samples_absorbed = 0

    def absorb(self, z: np.ndarray, chunk_size: int = 256) -> None:
        """Absorb one feature vector or a mini-batch of rows.

        The block update over a chunk Zb,
            P <- P - P Zb^T (alpha I_k + Zb P Zb^T)^-1 Zb P,
        equals absorbing the rows one at a time by the rank-1 rule
        P <- P - (P z z^T P)/(alpha + z^T P z); no past features are stored.
        """
        z = np.asarray(z, dtype=np.float64)
        if z.ndim == 1:
            z = z[None, :]
        if z.ndim != 2 or z.shape[1] != self.dim:
            raise ValueError(f"expected features of dim {self.dim}, got shape {z.shape}")
        if not np.all(np.isfinite(z)):
            raise ValueError("cannot absorb non-finite features")
        for start in range(0, z.shape[0], chunk_size):
            zb = z[start : start + chunk_size]
            if zb.shape[0] == 1:
                self._absorb_one(zb[0])
            else:
                self._absorb_block(zb)
            self.samples_absorbed += zb.shape[0]
        # keep P numerically symmetric
        self.P = (self.P + self.P.T) / 2.0

    def _absorb_one(self, z: np.ndarray) -> None:
        k = self.P @ z
        denom = self.alpha + float(z @ k)
        if not np.isfinite(denom) or denom <= 0:
            raise FloatingPointError(f"degenerate projector denominator {denom}")
        self.P = self.P - np.outer(k, k) / denom

    def _absorb_block(self, zb: np.ndarray) -> None:
        kb = zb @ self.P  # [k x d]; P symmetric so this is (P zb^T)^T
        gram = self.alpha * np.eye(zb.shape[0]) + kb @ zb.T
        if not np.all(np.isfinite(gram)):
            raise FloatingPointError("degenerate projector block update")
        self.P = self.P - kb.T @ np.linalg.solve(gram, kb)


class FusionLayer:
    """One affine + activation fusion stage with projector-modulated updates."""

    def __init__(
        self,
        d_in: int,
        d_out: int,
        activation: str = "tanh",
        eta: float = 0.01,
        alpha: float = 1.0,
        seed: int = 0,
    ):
        if d_in < 1 or d_out < 1:
            raise ValueError(f"layer dims must be >= 1, got {d_in}, {d_out}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}; expected one of {ACTIVATIONS}")
        if eta <= 0:
            raise ValueError(f"eta must be > 0, got {eta}")
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        limit = np.sqrt(6.0 / (d_in + d_out))
        self.weights = rng.uniform(-limit, limit, size=(d_in, d_out))
        self.bias = np.zeros(d_out)
        self.activation = activation
        self.eta = float(eta)
        self.projector = Projector(d_in, alpha)

    @property
    def d_in(self) -> int:
        return self.weights.shape[0]

    @property
    def d_out(self) -> int:
        return self.weights.shape[1]

    def forward(self, Z: np.ndarray) -> np.ndarray:
        return fusion_forward(self, Z)

    def forward_with_grad(self, Z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Returns (activations, elementwise activation derivative at the preactivation)."""
        Z = np.asarray(Z, dtype=np.float64)
        pre = Z @ self.weights + self.bias
        out = apply_activation(self.activation, pre)
        return out, activation_derivative(self.activation, pre, out)

    def orthogonal_step(
        self, grad_w: np.ndarray, grad_b: np.ndarray | None = None, project: bool = True
    ) -> None:
        """W <- W - eta * (P @ grad_w); bias steps unprojected."""
        grad_w = np.asarray(grad_w, dtype=np.float64)
        if grad_w.shape != self.weights.shape:
            raise ValueError(
                f"gradient shape {grad_w.shape} does not match weights {self.weights.shape}"
            )
        if not np.all(np.isfinite(grad_w)):
            raise FloatingPointError("non-finite fusion gradient")
        step = self.projector.P @ grad_w if project else grad_w
        self.weights = self.weights - self.eta * step
        if grad_b is not None:
            if not np.all(np.isfinite(grad_b)):
                raise FloatingPointError("non-finite fusion bias gradient")
            self.bias = self.bias - self.eta * np.asarray(grad_b, dtype=np.float64)


def orthogonal_step(layer: FusionLayer, grad_w: np.ndarray, grad_b=None) -> np.ndarray:
    layer.orthogonal_step(grad_w, grad_b)
    return layer.weights


def fusion_forward(layer: FusionLayer, Z) -> np.ndarray:
    """activation(Z @ W + b); accepts a raw matrix or an object with .features."""
    feats = getattr(Z, "features", Z)
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[1] != layer.d_in:
        raise ValueError(
            f"expected inputs with {layer.d_in} columns, got shape {feats.shape}"
        )
    return apply_activation(layer.activation, feats @ layer.weights + layer.bias)
