"""BPRMF and LightGCN trained with the BPR objective."""
from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .dataset import InteractionDataset, sample_negatives
from .kernels import adam_step, scatter_add_cols

_logger = logging.getLogger(__name__)

FACTORS_MAGIC = b"CMBF"
FACTORS_VERSION = 1
SIGMOID_CLAMP = 35.0


class NumericOverflowError(FloatingPointError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


def _f32(a: np.ndarray) -> np.ndarray:
    """Round to float32 precision but keep float64 storage, so the factor
    file round-trips exactly."""
    return np.ascontiguousarray(a, dtype=np.float32).astype(np.float64)


@dataclass
class LatentFactors:
    """User matrix ``P`` (d x n_users) and item matrix ``Q`` (d x n_items)."""

    P: np.ndarray
    Q: np.ndarray
    kind: str = "bprmf"
    history: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        self.P = np.ascontiguousarray(self.P, dtype=np.float64)
        self.Q = np.ascontiguousarray(self.Q, dtype=np.float64)
        if self.P.ndim != 2 or self.Q.ndim != 2 or self.P.shape[0] != self.Q.shape[0]:
            raise ValueError(f"incompatible factor shapes {self.P.shape} / {self.Q.shape}")
        if not (np.isfinite(self.P).all() and np.isfinite(self.Q).all()):
            raise ValueError("latent factors contain non-finite entries")

    @property
    def d(self) -> int:
        return self.P.shape[0]

    @property
    def n_users(self) -> int:
        return self.P.shape[1]

    @property
    def n_items(self) -> int:
        return self.Q.shape[1]


@dataclass(frozen=True)
class TrainConfig:
    d: int = 50
    lr: float = 0.005
    reg: float = 1e-4
    epochs: int = 100
    n_neg: int = 3
    L: int = 3
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    batch_size: int = 2048
    init_std: float = 0.01
    patience: int = 10
    eval_k: int = 10

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if self.L < 1:
            raise ValueError("L must be >= 1")
        if self.epochs < 0 or self.n_neg < 1 or self.batch_size < 1:
            raise ValueError("epochs >= 0, n_neg >= 1 and batch_size >= 1 required")


def score_bprmf(f: LatentFactors, u: int, v: int) -> float:
    return float(f.P[:, u] @ f.Q[:, v])


def _bpr_terms(P, Q, batch, reg):
    u, i, j = batch[:, 0], batch[:, 1], batch[:, 2]
    pu, qi, qj = P[:, u], Q[:, i], Q[:, j]
    with np.errstate(over="ignore", invalid="ignore"):
        x = np.einsum("db,db->b", pu, qi - qj)
        x = np.clip(x, -SIGMOID_CLAMP, SIGMOID_CLAMP)
        loss = float(np.logaddexp(0.0, -x).sum())
        loss += reg * float((pu * pu).sum() + (qi * qi).sum() + (qj * qj).sum())
    if not np.isfinite(loss):
        raise NumericOverflowError("non-finite BPR loss")
    return loss, x, pu, qi, qj


def bpr_loss(f: LatentFactors, batch, reg: float) -> float:
    """Summed ``-ln sigma(y_ui - y_uj)`` plus ``reg`` times the squared norm
    of every embedding gathered by the batch."""
    batch = np.asarray(batch, dtype=np.int64).reshape(-1, 3)
    if len(batch) == 0:
        raise ValueError("empty batch")
    return _bpr_terms(f.P, f.Q, batch, reg)[0]


def bpr_loss_and_grad(P, Q, batch, reg):
    """Loss and dense gradients with respect to ``P`` and ``Q``."""
    loss, x, pu, qi, qj = _bpr_terms(P, Q, batch, reg)
    g = -0.5 * (1.0 - np.tanh(0.5 * x))  # d/dx of -ln sigma(x) = -sigma(-x)
    gP = np.zeros_like(P)
    gQ = np.zeros_like(Q)
    scatter_add_cols(gP, batch[:, 0], g * (qi - qj) + 2.0 * reg * pu)
    scatter_add_cols(gQ, batch[:, 1], g * pu + 2.0 * reg * qi)
    scatter_add_cols(gQ, batch[:, 2], -g * pu + 2.0 * reg * qj)
    return loss, gP, gQ


# ---------------------------------------------------------------------------
# LightGCN propagation
# ---------------------------------------------------------------------------


def normalized_adjacency(ds: InteractionDataset) -> sp.csr_matrix:
    """Symmetric ``D^-1/2 A D^-1/2`` over the bipartite train graph, users
    first.  Isolated nodes get an all-zero row."""
    R = ds.matrix("train")
    A = sp.bmat([[None, R], [R.T, None]], format="csr")
    deg = np.asarray(A.sum(axis=1)).ravel()
    inv = np.zeros_like(deg)
    nz = deg > 0
    inv[nz] = 1.0 / np.sqrt(deg[nz])
    D = sp.diags(inv)
    return (D @ A @ D).tocsr()


def _layer_average(adj, E0, L):
    acc = E0.copy()
    E = E0
    for _ in range(L):
        E = adj @ E
        acc += E
    return acc / (L + 1)


def propagate_lightgcn(f: LatentFactors, ds: InteractionDataset, L: int, adj=None) -> LatentFactors:
    """Layer-averaged embeddings over ``L`` normalised propagation steps."""
    if L == 0:
        return LatentFactors(f.P.copy(), f.Q.copy(), kind="lightgcn")
    adj = normalized_adjacency(ds) if adj is None else adj
    E = _layer_average(adj, np.vstack([f.P.T, f.Q.T]), L)
    U = f.n_users
    return LatentFactors(E[:U].T, E[U:].T, kind="lightgcn")


def lightgcn_loss_and_grad(P0, Q0, adj, L, batch, reg):
    """BPR loss on propagated embeddings; gradients w.r.t. layer-0 ``P0, Q0``.

    Propagation is linear and ``adj`` symmetric, so the backward pass is the
    same layer average applied to the effective-embedding gradient.
    """
    U = P0.shape[1]
    E = _layer_average(adj, np.vstack([P0.T, Q0.T]), L)
    Pe, Qe = np.ascontiguousarray(E[:U].T), np.ascontiguousarray(E[U:].T)
    loss, gPe, gQe = bpr_loss_and_grad(Pe, Qe, batch, 0.0)
    G0 = _layer_average(adj, np.vstack([gPe.T, gQe.T]), L)
    gP, gQ = np.ascontiguousarray(G0[:U].T), np.ascontiguousarray(G0[U:].T)
    u, i, j = batch[:, 0], batch[:, 1], batch[:, 2]
    pu, qi, qj = P0[:, u], Q0[:, i], Q0[:, j]
    loss += reg * float((pu * pu).sum() + (qi * qi).sum() + (qj * qj).sum())
    scatter_add_cols(gP, u, 2.0 * reg * pu)
    scatter_add_cols(gQ, i, 2.0 * reg * qi)
    scatter_add_cols(gQ, j, 2.0 * reg * qj)
    return loss, gP, gQ


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def validation_recall(f: LatentFactors, ds: InteractionDataset, k: int = 10, split: str = "valid") -> float:
    from .metrics import mean_recall
    from .ranking import topk_recommend

    users = np.flatnonzero(np.diff(ds.splits[split][0]) > 0)
    if len(users) == 0:
        return 0.0
    recs = topk_recommend(f, ds, k, users=users)
    return mean_recall(recs, ds, split, k)


def _train(ds, cfg, lightgcn):
    rng = np.random.default_rng(cfg.seed)
    P = _f32(rng.normal(0.0, cfg.init_std, size=(cfg.d, ds.n_users)))
    Q = _f32(rng.normal(0.0, cfg.init_std, size=(cfg.d, ds.n_items)))
    kind = "lightgcn" if lightgcn else "bprmf"
    adj = normalized_adjacency(ds) if lightgcn and cfg.L > 0 else None

    def effective(P, Q):
        f = LatentFactors(P, Q, kind=kind)
        if lightgcn:
            f = propagate_lightgcn(f, ds, cfg.L, adj=adj)
            f = LatentFactors(_f32(f.P), _f32(f.Q), kind=kind)
        return f

    if cfg.epochs == 0:
        return effective(P, Q)
    if ds.n_interactions("train") == 0:
        raise ValueError("dataset has no training interactions")

    b1, b2 = cfg.adam_betas
    mP, vP = np.zeros_like(P), np.zeros_like(P)
    mQ, vQ = np.zeros_like(Q), np.zeros_like(Q)
    step = 0
    best = None
    best_recall = -np.inf
    stale = 0
    history = []
    for epoch in range(1, cfg.epochs + 1):
        triplets = sample_negatives(ds, cfg.n_neg, rng)
        triplets = triplets[rng.permutation(len(triplets))]
        total = 0.0
        for start in range(0, len(triplets), cfg.batch_size):
            batch = triplets[start : start + cfg.batch_size]
            try:
                if lightgcn:
                    loss, gP, gQ = lightgcn_loss_and_grad(P, Q, adj, cfg.L, batch, cfg.reg)
                else:
                    loss, gP, gQ = bpr_loss_and_grad(P, Q, batch, cfg.reg)
            except NumericOverflowError as exc:
                raise TrainingDivergedError(f"epoch {epoch}: {exc}") from exc
            step += 1
            adam_step(P, gP, mP, vP, cfg.lr, b1, b2, cfg.adam_eps, step)
            adam_step(Q, gQ, mQ, vQ, cfg.lr, b1, b2, cfg.adam_eps, step)
            total += loss
        if not (np.isfinite(total) and np.isfinite(P).all() and np.isfinite(Q).all()):
            raise TrainingDivergedError(f"loss diverged at epoch {epoch}")
        f = effective(_f32(P), _f32(Q))
        recall = validation_recall(f, ds, cfg.eval_k)
        history.append({"epoch": epoch, "loss": total, "valid_recall": recall})
        _logger.info("epoch %d loss %.4f valid recall@%d %.4f", epoch, total, cfg.eval_k, recall)
        if recall > best_recall:
            best_recall, best, stale = recall, f, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    best.history = history
    return best


def train_bprmf(ds: InteractionDataset, cfg: TrainConfig) -> LatentFactors:
    """Adam on mini-batched BPR loss with fresh negatives every epoch.

    Returns the factors of the epoch with the best validation recall;
    ``history`` records per-epoch loss and recall.
    """
    return _train(ds, cfg, lightgcn=False)


def train_lightgcn(ds: InteractionDataset, cfg: TrainConfig) -> LatentFactors:
    """As :func:`train_bprmf`, but scores pass through ``cfg.L`` propagation
    layers.  The returned factors are the propagated (effective) embeddings."""
    return _train(ds, cfg, lightgcn=True)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_factors(f: LatentFactors, path) -> None:
    with open(path, "wb") as fh:
        fh.write(FACTORS_MAGIC)
        fh.write(struct.pack("<IIII", FACTORS_VERSION, f.d, f.n_users, f.n_items))
        fh.write(f.P.astype("<f4").tobytes())
        fh.write(f.Q.astype("<f4").tobytes())


def load_factors(path, kind: str = "bprmf") -> LatentFactors:
    with open(path, "rb") as fh:
        if fh.read(4) != FACTORS_MAGIC:
            raise ValueError(f"{path}: not a CMBF factors file")
        version, d, U, V = struct.unpack("<IIII", fh.read(16))
        if version != FACTORS_VERSION:
            raise ValueError(f"{path}: unsupported factors version {version}")
        P = np.frombuffer(fh.read(4 * d * U), dtype="<f4").reshape(d, U)
        Q = np.frombuffer(fh.read(4 * d * V), dtype="<f4").reshape(d, V)
    return LatentFactors(P.astype(np.float64), Q.astype(np.float64), kind=kind)


def export_factors_csv(f: LatentFactors, path) -> None:
    """One row per entity: ``entity,index,f0,...,f{d-1}``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["entity", "index"] + [f"f{r}" for r in range(f.d)])
        for name, M in (("user", f.P), ("item", f.Q)):
            for c in range(M.shape[1]):
                w.writerow([name, c] + [repr(float(x)) for x in M[:, c]])
