"""Batch-contrastive speaker loss over scaled cosine similarities.

A batch holds N speakers x M utterances of unit-norm embeddings. Each row
(j, i) is scored against every speaker centroid as w * cos + b; own-speaker
entries use a leave-one-out centroid by default. The default loss excludes
the target column from the log-sum (`include_target=True` restores the
standard softmax form):

    row term = log(sum_{k != j} exp(S_jik)) - S_jij

The "outer" variant additionally subtracts the diagonal attacker-to-centroid
similarities S_ll of N inserted attacker utterances, pulling one identity
toward every speaker in the batch.

All functions accept raw (N, M, D) arrays as well as EmbeddingBatch, and are
differentiable everywhere off the degenerate set: cosines are computed with
true norms so gradients stay exact for non-unit inputs (finite-difference
checks perturb embeddings off the unit sphere).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

SCALE_MIN = 1e-6
CENTROID_EPS = 1e-8
_NORM_EPS = 1e-12


@dataclass(frozen=True)
class ScaleParams:
    """Learned similarity scale: S = w * cos + b, with w kept >= 1e-6."""

    w: float
    b: float

    def __post_init__(self) -> None:
        if not np.isfinite(self.w) or not np.isfinite(self.b):
            raise ValueError("scale params must be finite")
        if self.w < SCALE_MIN:
            raise ValueError(f"w must be >= {SCALE_MIN}, got {self.w}")


@dataclass(frozen=True)
class EmbeddingBatch:
    """(N, M, D) tensor of unit-norm utterance embeddings."""

    tensor: np.ndarray

    def __post_init__(self) -> None:
        tensor = np.asarray(self.tensor, dtype=np.float64)
        object.__setattr__(self, "tensor", tensor)
        if tensor.ndim != 3:
            raise ValueError("embedding batch must be (N, M, D)")
        norms = np.linalg.norm(tensor, axis=2)
        if np.max(np.abs(norms - 1.0)) > 1e-6:
            raise ValueError("embedding rows must be unit-norm within 1e-6")

    @property
    def n_speakers(self) -> int:
        return self.tensor.shape[0]

    @property
    def n_utts(self) -> int:
        return self.tensor.shape[1]

    @property
    def embed_dim(self) -> int:
        return self.tensor.shape[2]


@dataclass(frozen=True)
class AttackerDiag:
    """Attacker embeddings paired with their scaled own-column similarities."""

    embeddings: np.ndarray  # (N, D)
    similarities: np.ndarray  # (N,) of w * cos(x_l, c_l) + b

    def __post_init__(self) -> None:
        emb = np.asarray(self.embeddings, dtype=np.float64)
        sim = np.asarray(self.similarities, dtype=np.float64)
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "similarities", sim)
        if emb.ndim != 2 or sim.shape != (emb.shape[0],):
            raise ValueError("AttackerDiag needs (N, D) embeddings and (N,) similarities")


class GradResult(NamedTuple):
    loss: float
    d_embeddings: np.ndarray  # (N, M, D)
    d_attacker: Optional[np.ndarray]  # (N, D) or None
    d_w: float
    d_b: float


def _tensor_of(batch) -> np.ndarray:
    tensor = np.asarray(getattr(batch, "tensor", batch), dtype=np.float64)
    if tensor.ndim != 3:
        raise ValueError("expected an (N, M, D) embedding tensor")
    return tensor


# ---------------------------------------------------------------------------
# centroids and similarities
# ---------------------------------------------------------------------------


def centroid(embeddings: np.ndarray) -> np.ndarray:
    """L2-normalized mean of (M, D) rows."""
    mean = np.asarray(embeddings, dtype=np.float64).mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm < CENTROID_EPS:
        raise ValueError("degenerate centroid: mean norm below 1e-8")
    return mean / norm


def loo_centroid(embeddings: np.ndarray, exclude: int) -> np.ndarray:
    """Centroid of (M, D) rows with row `exclude` left out; requires M >= 2."""
    rows = np.asarray(embeddings, dtype=np.float64)
    if rows.shape[0] < 2:
        raise ValueError("leave-one-out centroid needs at least 2 rows")
    if not 0 <= exclude < rows.shape[0]:
        raise ValueError(f"exclude index {exclude} out of range")
    kept = np.delete(rows, exclude, axis=0)
    return centroid(kept)


def _internals(tensor: np.ndarray, use_loo: bool) -> dict:
    """Norms, centroid means, and the cosine matrix shared by loss and grads."""
    n_spk, n_utt, _ = tensor.shape
    if n_spk < 2:
        raise ValueError("need at least 2 speakers per batch")
    row_norms = np.linalg.norm(tensor, axis=2)
    if np.any(row_norms < _NORM_EPS):
        raise ValueError("zero-norm embedding row")
    unit = tensor / row_norms[..., None]

    mean_full = tensor.mean(axis=1)  # (N, D), unnormalized
    norm_full = np.linalg.norm(mean_full, axis=1)
    if np.any(norm_full < CENTROID_EPS):
        raise ValueError("degenerate centroid: mean norm below 1e-8")
    hat_full = mean_full / norm_full[:, None]

    cos = np.einsum("jid,kd->jik", unit, hat_full)  # (N, M, N)
    internals = {
        "row_norms": row_norms, "unit": unit,
        "mean_full": mean_full, "norm_full": norm_full, "hat_full": hat_full,
    }
    if use_loo:
        if n_utt < 2:
            raise ValueError("leave-one-out centroids need M >= 2 utterances")
        mean_loo = (n_utt * mean_full[:, None, :] - tensor) / (n_utt - 1)  # (N, M, D)
        norm_loo = np.linalg.norm(mean_loo, axis=2)
        if np.any(norm_loo < CENTROID_EPS):
            raise ValueError("degenerate centroid: mean norm below 1e-8")
        hat_loo = mean_loo / norm_loo[..., None]
        cos_loo = np.einsum("jid,jid->ji", unit, hat_loo)  # (N, M)
        cos = cos.copy()
        for j in range(n_spk):
            cos[j, :, j] = cos_loo[j]
        internals.update(
            mean_loo=mean_loo, norm_loo=norm_loo, hat_loo=hat_loo, cos_loo=cos_loo
        )
    internals["cos"] = cos
    return internals


def similarity_matrix(batch, params: ScaleParams, use_loo: bool = True) -> np.ndarray:
    """(N*M, N) matrix of w * cos + b; row j*M+i scores utterance (j, i)."""
    tensor = _tensor_of(batch)
    cos = _internals(tensor, use_loo)["cos"]
    n_spk, n_utt, _ = tensor.shape
    return (params.w * cos + params.b).reshape(n_spk * n_utt, n_spk)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _logsumexp(values: np.ndarray, axis: int) -> np.ndarray:
    peak = np.max(values, axis=axis, keepdims=True)
    return (peak + np.log(np.sum(np.exp(values - peak), axis=axis, keepdims=True))).squeeze(axis)


def _loss_terms(sim3: np.ndarray, include_target: bool):
    """Per-row contrast terms from an (N, M, N) similarity tensor."""
    n_spk, n_utt, _ = sim3.shape
    spk_idx = np.arange(n_spk)
    target = sim3[spk_idx[:, None], np.arange(n_utt)[None, :], spk_idx[:, None]]  # (N, M)
    if include_target:
        lse = _logsumexp(sim3, axis=2)
    else:
        masked = sim3.copy()
        for j in range(n_spk):
            masked[j, :, j] = -np.inf
        lse = _logsumexp(masked, axis=2)
    return lse - target


def ge2e_loss(similarities: np.ndarray, include_target: bool = False) -> float:
    """Sum of per-row contrast terms over an (N*M, N) similarity matrix."""
    sims = np.asarray(similarities, dtype=np.float64)
    if sims.ndim != 2:
        raise ValueError("similarity matrix must be 2-D")
    n_spk = sims.shape[1]
    if n_spk < 2:
        raise ValueError("need at least 2 speakers (the excluded log-sum is empty for N=1)")
    if sims.shape[0] % n_spk:
        raise ValueError(f"row count {sims.shape[0]} not divisible by {n_spk} speakers")
    n_utt = sims.shape[0] // n_spk
    return float(_loss_terms(sims.reshape(n_spk, n_utt, n_spk), include_target).sum())


def outer_loss(
    similarities: np.ndarray, attacker: AttackerDiag, include_target: bool = False
) -> float:
    """Benign loss minus the sum of attacker diagonal similarities."""
    n_spk = np.asarray(similarities).shape[1]
    if attacker.similarities.shape[0] != n_spk:
        raise ValueError("attacker diagonal length must match speaker count")
    return ge2e_loss(similarities, include_target) - float(attacker.similarities.sum())


def attacker_diag(batch, attacker_embeddings: np.ndarray, params: ScaleParams) -> AttackerDiag:
    """Score attacker utterance l against speaker l's full centroid."""
    tensor = _tensor_of(batch)
    attacker = np.asarray(attacker_embeddings, dtype=np.float64)
    if attacker.shape != (tensor.shape[0], tensor.shape[2]):
        raise ValueError("attacker embeddings must be (N, D) matching the batch")
    internals = _internals(tensor, use_loo=False)
    att_norms = np.linalg.norm(attacker, axis=1)
    if np.any(att_norms < _NORM_EPS):
        raise ValueError("zero-norm attacker embedding")
    cos = np.sum((attacker / att_norms[:, None]) * internals["hat_full"], axis=1)
    return AttackerDiag(attacker, params.w * cos + params.b)


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def loss_gradients(
    batch,
    params: ScaleParams,
    attacker: Optional[np.ndarray] = None,
    include_target: bool = False,
    use_loo: bool = True,
) -> GradResult:
    """Loss plus exact gradients w.r.t. every embedding, attacker row, w, and b.

    `attacker` as an (N, D) array selects the outer-attack loss; None selects
    the benign loss. Gradients treat the inputs as free vectors (cosines carry
    their normalization), so central finite differences match everywhere.
    """
    tensor = _tensor_of(batch)
    n_spk, n_utt, _ = tensor.shape
    info = _internals(tensor, use_loo)
    cos = info["cos"]
    sim3 = params.w * cos + params.b
    loss = float(_loss_terms(sim3, include_target).sum())

    # dL/dS: softmax over the contrast columns, -1 on the target.
    spk_idx = np.arange(n_spk)
    if include_target:
        peak = sim3.max(axis=2, keepdims=True)
        expd = np.exp(sim3 - peak)
        grad_sim = expd / expd.sum(axis=2, keepdims=True)
        for j in range(n_spk):
            grad_sim[j, :, j] -= 1.0
    else:
        masked = sim3.copy()
        for j in range(n_spk):
            masked[j, :, j] = -np.inf
        peak = masked.max(axis=2, keepdims=True)
        expd = np.exp(masked - peak)
        grad_sim = expd / expd.sum(axis=2, keepdims=True)
        for j in range(n_spk):
            grad_sim[j, :, j] = -1.0

    d_w = float(np.sum(grad_sim * cos))
    d_b = float(np.sum(grad_sim))
    grad_cos = params.w * grad_sim  # (N, M, N)

    unit = info["unit"]
    row_norms = info["row_norms"]
    hat_full = info["hat_full"]
    norm_full = info["norm_full"]

    # split the target column off when it flows through the LOO centroid
    if use_loo:
        grad_cos_full = grad_cos.copy()
        diag_grad = np.empty((n_spk, n_utt))
        for j in range(n_spk):
            diag_grad[j] = grad_cos[j, :, j]
            grad_cos_full[j, :, j] = 0.0
    else:
        grad_cos_full = grad_cos
        diag_grad = None

    # query side: d cos(e, c) / d e = (c_hat - cos * e_hat) / ||e||
    query_dir = np.einsum("jik,kd->jid", grad_cos_full, hat_full)
    if use_loo:
        query_dir += diag_grad[..., None] * info["hat_loo"]
    query_weight = np.einsum("jik,jik->ji", grad_cos, cos)
    d_emb = (query_dir - query_weight[..., None] * unit) / row_norms[..., None]

    # full-centroid side: d cos(e, c) / d mean = (e_hat - cos * c_hat) / ||mean||
    colsum_dir = np.einsum("jik,jid->kd", grad_cos_full, unit)
    colsum_cos = np.einsum("jik,jik->k", grad_cos_full, cos)
    d_mean_full = (colsum_dir - colsum_cos[:, None] * hat_full) / norm_full[:, None]

    d_attacker = None
    if attacker is not None:
        attacker = np.asarray(attacker, dtype=np.float64)
        if attacker.shape != (n_spk, tensor.shape[2]):
            raise ValueError("attacker embeddings must be (N, D) matching the batch")
        att_norms = np.linalg.norm(attacker, axis=1)
        if np.any(att_norms < _NORM_EPS):
            raise ValueError("zero-norm attacker embedding")
        att_hat = attacker / att_norms[:, None]
        att_cos = np.sum(att_hat * hat_full, axis=1)
        loss -= float(np.sum(params.w * att_cos + params.b))
        d_w -= float(att_cos.sum())
        d_b -= float(n_spk)
        # every attacker diagonal enters the loss with coefficient -1
        d_attacker = -params.w * (hat_full - att_cos[:, None] * att_hat) / att_norms[:, None]
        d_mean_full += -params.w * (att_hat - att_cos[:, None] * hat_full) / norm_full[:, None]

    d_emb += d_mean_full[:, None, :] / n_utt  # each row feeds its speaker mean

    if use_loo:
        # LOO centroid of row (j, i) is the mean of the other M-1 rows
        grad_mean_loo = (
            diag_grad[..., None]
            * (unit - info["cos_loo"][..., None] * info["hat_loo"])
            / info["norm_loo"][..., None]
        )  # (N, M, D)
        total = grad_mean_loo.sum(axis=1, keepdims=True)
        d_emb += (total - grad_mean_loo) / (n_utt - 1)

    return GradResult(loss, d_emb, d_attacker, d_w, d_b)
