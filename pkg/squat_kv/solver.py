"""Orthogonality-preserving key quantization.

Keys are quantized block by block (g channels per iteration). After block t is
snapped to its grid, the remaining channels absorb the correction B_t·H_t·d, which
is the closed-form minimizer of

    ‖δ‖² + λ‖Q̂δ‖²   subject to   δ[:(t-1)g] = 0,  δ[(t-1)g:tg] = d

where d is the quantization error of block t. B_t is the bottom-left block of
P_inv = (I + λQ̂ᵀQ̂)⁻¹ and H_t the last g columns of A_t⁻¹, the inverse of P_inv's
top-left tg×tg block. The A_t⁻¹ sequence comes from Schur-complement downdates
starting at A_T⁻¹ = I + λQ̂ᵀQ̂, so no per-step inversion is needed.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .quant import GroupedCodes, quantize_per_channel
from .subspace import QuerySubspace

log = logging.getLogger(__name__)

# Trailing blocks with a larger condition number are treated as singular.
MAX_BLOCK_CONDITION = 1e12
# Woodbury path for P_inv when rank < dim / WOODBURY_RATIO.
WOODBURY_RATIO = 4


class SingularBlockError(np.linalg.LinAlgError):
    """A block that must be inverted is numerically singular."""

    def __init__(self, message: str, condition: float):
        super().__init__(f"{message} (condition estimate {condition:.3e})")
        self.condition = condition


@dataclass(frozen=True)
class SolverState:
    """Precomputed matrices shared by every key group of one (layer, head)."""
    lam: float
    block: int
    p_inv: np.ndarray                      # (d, d)
    a_inv_seq: tuple[np.ndarray, ...]      # A_t⁻¹ for t = 1..T, each (tg, tg)
    gains: tuple[np.ndarray, ...] = field(repr=False)  # B_t·H_t for t = 1..T-1, each (d - tg, g)

    @property
    def dim(self) -> int:
        return self.p_inv.shape[0]

    @property
    def num_blocks(self) -> int:
        return self.dim // self.block

    def a_inv(self, t: int) -> np.ndarray:
        return self.a_inv_seq[t - 1]

    def h(self, t: int) -> np.ndarray:
        """H_t: last g columns of A_t⁻¹."""
        return self.a_inv(t)[:, -self.block:]

    def b(self, t: int) -> np.ndarray:
        """B_t: bottom-left (d - tg)×tg block of P_inv."""
        split = t * self.block
        return self.p_inv[split:, :split]

    def gain(self, t: int) -> np.ndarray:
        return self.gains[t - 1]


@dataclass(frozen=True)
class KeyBlockUpdate:
    """One iteration of quantize_key_block."""
    quantized_block: GroupedCodes  # g channel groups of G codes
    residual: np.ndarray           # (G, g) deq − pre-quantization values
    correction: np.ndarray         # (G, d - tg) added to the remaining channels


@dataclass(frozen=True)
class QuantizedKeys:
    """Result of quantizing one token group of keys."""
    updates: tuple[KeyBlockUpdate, ...]
    dequantized: np.ndarray              # (G, d) final k̂
    steps: tuple[np.ndarray, ...] = ()   # k̂_0..k̂_T when recorded

    @property
    def codes(self) -> GroupedCodes:
        """All d channel groups in channel order."""
        first = self.updates[0].quantized_block
        return GroupedCodes.concat([u.quantized_block for u in self.updates], first.bits, first.n)


# -- Precompute --


def _p_matrix(basis: np.ndarray, lam: float) -> np.ndarray:
    d = basis.shape[1]
    return np.eye(d) + lam * (basis.T @ basis)


def _p_inverse(basis: np.ndarray, lam: float) -> np.ndarray:
    r, d = basis.shape
    if lam == 0.0 or not np.any(basis):
        return np.eye(d)
    if r * WOODBURY_RATIO < d:
        # (I + λQᵀQ)⁻¹ = I − λQᵀ(I_r + λQQᵀ)⁻¹Q
        inner = np.eye(r) + lam * (basis @ basis.T)
        c, lower = scipy.linalg.cho_factor(inner)
        p_inv = np.eye(d) - lam * basis.T @ scipy.linalg.cho_solve((c, lower), basis)
        log.debug("P_inv via Woodbury (r=%d, d=%d)", r, d)
    else:
        c, lower = scipy.linalg.cho_factor(_p_matrix(basis, lam))
        p_inv = scipy.linalg.cho_solve((c, lower), np.eye(d))
        log.debug("P_inv via dense Cholesky solve (r=%d, d=%d)", r, d)
    return 0.5 * (p_inv + p_inv.T)


def downdate(a_inv_next: np.ndarray, block: int) -> np.ndarray:
    """A_t⁻¹ from A_{t+1}⁻¹ by dropping the trailing g×g block: M − NᵀO⁻¹N."""
    a = np.asarray(a_inv_next, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    n = a.shape[0]
    if block < 1 or n <= block:
        raise ValueError(f"block ({block}) must be in [1, {n - 1}] for a {n}x{n} matrix")

    split = n - block
    m = a[:split, :split]
    nn = a[split:, :split]
    o = a[split:, split:]

    if block == 1:
        pivot = float(o[0, 0])
        condition = np.inf if pivot == 0.0 else abs(float(np.max(np.abs(a))) / pivot)
        if pivot == 0.0 or not np.isfinite(pivot):
            raise SingularBlockError("trailing pivot is zero", condition)
        row = nn[0]
        result = m - np.outer(row, row) / pivot
    else:
        condition = float(np.linalg.cond(o))
        if not np.isfinite(condition) or condition > MAX_BLOCK_CONDITION:
            raise SingularBlockError(f"trailing {block}x{block} block is singular", condition)
        result = m - nn.T @ scipy.linalg.solve(o, nn, assume_a="sym")
    return 0.5 * (result + result.T)


def precompute(sub: QuerySubspace, lam: float, block: int) -> SolverState:
    """P_inv, the downdated A_t⁻¹ sequence and the per-iteration gains B_t·H_t."""
    if not np.isfinite(lam) or lam < 0:
        raise ValueError(f"lambda must be a finite value >= 0, got {lam}")
    d = sub.dim
    if block < 1 or d % block:
        raise ValueError(f"block (g={block}) must divide the head dimension (d={d})")

    basis = sub.basis
    num_blocks = d // block
    p_inv = _p_inverse(basis, lam)

    seq: list[np.ndarray] = [None] * num_blocks  # type: ignore[list-item]
    seq[-1] = _p_matrix(basis, lam) if lam else np.eye(d)
    for t in range(num_blocks - 1, 0, -1):
        seq[t - 1] = downdate(seq[t], block)

    gains = []
    for t in range(1, num_blocks):
        split = t * block
        gains.append(p_inv[split:, :split] @ seq[t - 1][:, -block:])

    log.debug("Precomputed solver state: d=%d, g=%d, T=%d, lambda=%g", d, block, num_blocks, lam)
    return SolverState(
        lam=float(lam),
        block=block,
        p_inv=p_inv,
        a_inv_seq=tuple(seq),
        gains=tuple(gains),
    )


def direct_inverse_sequence(p_inv: np.ndarray, block: int) -> list[np.ndarray]:
    """A_t⁻¹ by inverting every top-left block of P_inv directly (O(d⁴) reference path)."""
    d = p_inv.shape[0]
    return [np.linalg.inv(p_inv[: t * block, : t * block]) for t in range(1, d // block + 1)]


# -- Key quantization --


def quantize_key_block(
    keys: np.ndarray,
    state: SolverState,
    bits: int,
    record_steps: bool = False,
) -> QuantizedKeys:
    """Quantize a (G, d) token group per channel, one block of g channels at a time."""
    k = np.array(keys, dtype=np.float64)
    if k.ndim != 2 or k.shape[1] != state.dim:
        raise ValueError(f"keys must have shape (tokens, {state.dim}), got {k.shape}")

    g = state.block
    steps = [k.copy()] if record_steps else []
    updates = []
    for t in range(1, state.num_blocks + 1):
        lo, hi = (t - 1) * g, t * g
        quantized = quantize_per_channel(k[:, lo:hi], bits)
        deq = quantized.dequantize().T
        residual = deq - k[:, lo:hi]
        k[:, lo:hi] = deq
        if t < state.num_blocks:
            correction = residual @ state.gain(t).T
            if state.lam > 0:
                k[:, hi:] += correction
        else:
            correction = np.zeros((k.shape[0], 0))
        updates.append(KeyBlockUpdate(quantized_block=quantized, residual=residual, correction=correction))
        if record_steps:
            steps.append(k.copy())

    return QuantizedKeys(updates=tuple(updates), dequantized=k, steps=tuple(steps))


# -- Reference solver --


def objective(delta: np.ndarray, basis: np.ndarray, lam: float) -> float:
    """δᵀ(I + λQ̂ᵀQ̂)δ."""
    delta = np.asarray(delta, dtype=np.float64)
    return float(delta @ delta + lam * np.sum((basis @ delta) ** 2))


def kkt_oracle(
    k_prev: np.ndarray,
    fixed_prefix: np.ndarray,
    quantized_block: np.ndarray,
    q_hat: np.ndarray,
    lam: float,
) -> np.ndarray:
    """Solve the per-iteration equality-constrained QP through its dense KKT system.

    Minimizes δᵀPδ subject to Tδ = b with T = [I, 0] and b = [prefix − k_prev; block − k_prev],
    by solving [[2P, −Tᵀ], [T, 0]]·[δ; μ] = [0; b]. Returns k_prev + δ.
    """
    k_prev = np.asarray(k_prev, dtype=np.float64)
    fixed_prefix = np.asarray(fixed_prefix, dtype=np.float64).ravel()
    quantized_block = np.asarray(quantized_block, dtype=np.float64).ravel()
    q_hat = np.atleast_2d(np.asarray(q_hat, dtype=np.float64))
    d = k_prev.shape[0]
    if q_hat.shape[1] != d:
        raise ValueError(f"q_hat has {q_hat.shape[1]} columns, expected {d}")

    m = fixed_prefix.size + quantized_block.size
    if m > d:
        raise ValueError(f"{m} constrained coordinates exceed dimension {d}")
    target = np.concatenate([fixed_prefix, quantized_block])
    b = target - k_prev[:m]

    p = _p_matrix(q_hat, lam)
    t_mat = np.eye(m, d)
    kkt = np.block([[2.0 * p, -t_mat.T], [t_mat, np.zeros((m, m))]])
    rhs = np.concatenate([np.zeros(d), b])

    condition = float(np.linalg.cond(kkt))
    if not np.isfinite(condition) or condition > MAX_BLOCK_CONDITION:
        raise SingularBlockError("KKT system is singular", condition)
    solution = scipy.linalg.solve(kkt, rhs)
    return k_prev + solution[:d]
