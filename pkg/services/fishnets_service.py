"""
Fishnets aggregation: per-datum score and Fisher embeddings from twin
networks, summed over the set and combined into a pseudo maximum-likelihood
estimate theta_hat = F_NN^-1 t_NN + c.

- Fisher networks emit n_p(n_p+1)/2 raw numbers per datum, packed row-major
  into a lower-triangular L with a softplus diagonal; F_i = L L^T.
- Rows of a set are put in canonical (lexicographic) order before they are
  embedded, so sums are bit-identical under any permutation of the set.
- Training minimises the mean negative-log-Gaussian loss
  1/2 (theta - theta_hat)^T F (theta - theta_hat) - 1/2 ln det F with
  gradients derived in closed form through the Cholesky construction.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg
from scipy.special import expit

from models.set_dataset import SetDataset
from services.common import canonical_rows, segment_offsets
from services.errors import (
    EmptyAggregationError,
    FactorizationError,
    IllConditionedFisherError,
    ShapeError,
)
from services.nn_service import (
    DenseNet,
    ParamDict,
    TrainingHistory,
    backward,
    build_net,
    fit_parameters,
    forward,
    forward_with_cache,
    gradients_to_dict,
    net_parameters,
)

logger = logging.getLogger(__name__)

ScoreVector = np.ndarray

DEFAULT_MAX_CONDITION = 1e12
MAX_ROWS_PER_CHUNK = 200_000


def n_tri(n_p: int) -> int:
    return n_p * (n_p + 1) // 2


@dataclass
class FisherMatrix:
    """Symmetric positive-definite matrix stored through its lower Cholesky factor."""

    chol: np.ndarray

    @property
    def n_p(self) -> int:
        return int(self.chol.shape[0])

    @property
    def matrix(self) -> np.ndarray:
        return self.chol @ self.chol.T

    def packed(self) -> np.ndarray:
        rows, cols = np.tril_indices(self.n_p)
        return self.chol[rows, cols]

    def logdet(self) -> float:
        return float(2.0 * np.sum(np.log(np.diag(self.chol))))


@dataclass
class FishnetsModel:
    """
    Twin score/Fisher networks plus fixed (non-trainable) arrays:
    input standardisation, a per-parameter multiplier on the score outputs,
    and an optional prior score/Fisher added once to every aggregate.
    """

    score_net: DenseNet
    fisher_net: DenseNet
    n_p: int
    c: np.ndarray
    input_shift: np.ndarray
    input_scale: np.ndarray
    score_scale: Optional[np.ndarray] = None
    prior_score: Optional[np.ndarray] = None
    prior_fisher: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.score_net.input_dim != self.fisher_net.input_dim:
            raise ShapeError("Score and Fisher networks must share the input dimension.")
        if self.score_net.output_dim != self.n_p:
            raise ShapeError(f"Score network must output n_p={self.n_p} numbers.")
        if self.fisher_net.output_dim != n_tri(self.n_p):
            raise ShapeError(f"Fisher network must output {n_tri(self.n_p)} numbers.")
        n_p = self.n_p
        self.c = np.asarray(self.c, dtype=np.float64).reshape(n_p)
        self.input_shift = np.asarray(self.input_shift, dtype=np.float64).reshape(self.input_dim)
        self.input_scale = np.asarray(self.input_scale, dtype=np.float64).reshape(self.input_dim)
        self.score_scale = np.ones(n_p) if self.score_scale is None else np.asarray(self.score_scale, dtype=np.float64).reshape(n_p)
        self.prior_score = np.zeros(n_p) if self.prior_score is None else np.asarray(self.prior_score, dtype=np.float64).reshape(n_p)
        self.prior_fisher = (
            np.zeros((n_p, n_p)) if self.prior_fisher is None
            else np.asarray(self.prior_fisher, dtype=np.float64).reshape(n_p, n_p)
        )
        if np.any(self.score_scale <= 0):
            raise ShapeError("score_scale entries must be positive.")
        if not np.allclose(self.prior_fisher, self.prior_fisher.T):
            raise ShapeError("prior_fisher must be symmetric.")
        if np.any(np.linalg.eigvalsh(self.prior_fisher) < -1e-12 * max(1.0, np.abs(self.prior_fisher).max())):
            raise ShapeError("prior_fisher must be positive semi-definite.")

    @property
    def input_dim(self) -> int:
        return self.score_net.input_dim

    @property
    def has_prior(self) -> bool:
        return bool(np.any(self.prior_score) or np.any(self.prior_fisher))

    @property
    def n_params(self) -> int:
        return self.score_net.n_params + self.fisher_net.n_params

    def parameters(self) -> ParamDict:
        params = net_parameters(self.score_net, "score")
        params.update(net_parameters(self.fisher_net, "fisher"))
        return params


@dataclass
class AggregatedSummary:
    t_nn: ScoreVector
    f_nn: FisherMatrix
    theta_hat: np.ndarray


def build_fishnets_model(
    input_dim: int,
    n_p: int,
    hidden: Sequence[int],
    activation_tag: str,
    seed: int,
    c: Optional[Sequence[float]] = None,
    input_shift: Optional[Sequence[float]] = None,
    input_scale: Optional[Sequence[float]] = None,
) -> FishnetsModel:
    score_seed, fisher_seed = np.random.SeedSequence(seed).generate_state(2)
    return FishnetsModel(
        score_net=build_net(input_dim, hidden, n_p, activation_tag, int(score_seed)),
        fisher_net=build_net(input_dim, hidden, n_tri(n_p), activation_tag, int(fisher_seed)),
        n_p=n_p,
        c=np.zeros(n_p) if c is None else c,
        input_shift=np.zeros(input_dim) if input_shift is None else input_shift,
        input_scale=np.ones(input_dim) if input_scale is None else input_scale,
    )


def fit_input_scaling(sets: Sequence[SetDataset]) -> Tuple[np.ndarray, np.ndarray]:
    """Per-feature mean and standard deviation over every row of `sets`."""
    rows = np.concatenate([s.data for s in sets], axis=0)
    scale = rows.std(axis=0)
    scale[scale == 0] = 1.0
    return rows.mean(axis=0), scale


def fit_score_scaling(sets: Sequence[SetDataset]) -> np.ndarray:
    """
    Per-parameter spread of the training thetas. A per-datum score is of
    order F_i theta, so this puts the score-network outputs at order one.
    """
    thetas = np.stack([s.theta for s in sets])
    scale = np.sqrt(np.mean(thetas ** 2, axis=0))
    scale[~(scale > 0)] = 1.0
    return scale


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _diag_positions(n_p: int) -> np.ndarray:
    rows, cols = np.tril_indices(n_p)
    return np.flatnonzero(rows == cols)


def cholesky_from_raw_batch(raw: np.ndarray, n_p: int) -> np.ndarray:
    """(R, n_p(n_p+1)/2) raw outputs -> (R, n_p, n_p) lower factors, softplus diagonal."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[1] != n_tri(n_p):
        raise ShapeError(f"Expected raw Cholesky entries of width {n_tri(n_p)}, got shape {raw.shape}")
    rows, cols = np.tril_indices(n_p)
    packed = raw.copy()
    diag = _diag_positions(n_p)
    packed[:, diag] = softplus(raw[:, diag])
    chol = np.zeros((raw.shape[0], n_p, n_p))
    chol[:, rows, cols] = packed
    return chol


def raw_grad_from_chol_grad(chol_grad: np.ndarray, raw: np.ndarray, n_p: int) -> np.ndarray:
    """Chain dLoss/dL (R, n_p, n_p) back through the packing and the softplus diagonal."""
    rows, cols = np.tril_indices(n_p)
    grad = chol_grad[:, rows, cols].copy()
    diag = _diag_positions(n_p)
    grad[:, diag] *= expit(raw[:, diag])
    return grad


def cholesky_from_raw(raw: np.ndarray, n_p: int) -> FisherMatrix:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != (n_tri(n_p),):
        raise ShapeError(f"Expected {n_tri(n_p)} raw entries for n_p={n_p}, got {raw.shape}")
    return FisherMatrix(chol=cholesky_from_raw_batch(raw[None, :], n_p)[0])


def _as_matrix(f: Union[FisherMatrix, np.ndarray]) -> np.ndarray:
    if isinstance(f, FisherMatrix):
        return f.matrix
    return np.asarray(f, dtype=np.float64)


def factor_spd(matrix: np.ndarray) -> np.ndarray:
    """
    Lower Cholesky factor of an SPD matrix. If factorisation fails, retry
    once with eps*I, eps = 1e-10 * trace / n_p.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    try:
        return np.linalg.cholesky(matrix)
    except np.linalg.LinAlgError:
        n = matrix.shape[0]
        eps = 1e-10 * float(np.trace(matrix)) / n
        logger.warning("Cholesky failed; retrying with jitter %.3e on the diagonal", eps)
        try:
            if not eps > 0:
                raise np.linalg.LinAlgError("non-positive trace")
            return np.linalg.cholesky(matrix + eps * np.eye(n))
        except np.linalg.LinAlgError as exc:
            raise FactorizationError(f"Fisher matrix is not positive definite: {exc}") from exc


def cho_factor_batch(matrices: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(matrices)
    except np.linalg.LinAlgError:
        return np.stack([factor_spd(m) for m in matrices])


def cho_solve_batch(chol: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve (L L^T) x = rhs for stacked factors; rhs is (S, n) or (S, n, k)."""
    vector = rhs.ndim == chol.ndim - 1
    b = rhs[..., None] if vector else rhs
    y = np.linalg.solve(chol, b)
    x = np.linalg.solve(np.swapaxes(chol, -1, -2), y)
    return x[..., 0] if vector else x


def embed_datum(model: FishnetsModel, d_i: np.ndarray) -> Tuple[ScoreVector, FisherMatrix]:
    d_i = np.asarray(d_i, dtype=np.float64)
    if d_i.shape != (model.input_dim,):
        raise ShapeError(f"Datum must have {model.input_dim} features, got shape {d_i.shape}")
    x = (d_i - model.input_shift) / model.input_scale
    score = model.score_scale * forward(model.score_net, x)
    fisher = cholesky_from_raw(forward(model.fisher_net, x), model.n_p)
    return score, fisher


def aggregate(embeddings: Sequence[Tuple[ScoreVector, FisherMatrix]]) -> Tuple[ScoreVector, FisherMatrix]:
    """
    Sum per-datum scores and full Fisher matrices in list order. Callers that
    need permutation invariance pass embeddings in canonical datum order.
    """
    if len(embeddings) == 0:
        raise EmptyAggregationError("Cannot aggregate an empty set of embeddings.")
    n_p = len(embeddings[0][0])
    t = np.zeros(n_p)
    fisher = np.zeros((n_p, n_p))
    for score, f in embeddings:
        if len(score) != n_p or f.n_p != n_p:
            raise ShapeError("Inconsistent n_p across embeddings.")
        t = t + score
        fisher = fisher + f.matrix
    fisher = 0.5 * (fisher + fisher.T)
    return t, FisherMatrix(chol=factor_spd(fisher))


def mle_estimate(
    t_nn: ScoreVector,
    f_nn: Union[FisherMatrix, np.ndarray],
    c: Optional[np.ndarray] = None,
    max_condition: float = DEFAULT_MAX_CONDITION,
) -> np.ndarray:
    """theta_hat = F^-1 t + c through a Cholesky solve (never an explicit inverse)."""
    t_nn = np.asarray(t_nn, dtype=np.float64)
    matrix = _as_matrix(f_nn)
    condition = float(np.linalg.cond(matrix))
    if not np.isfinite(condition) or condition > max_condition:
        raise IllConditionedFisherError(
            f"Fisher condition number {condition:.3e} exceeds {max_condition:.1e}", condition
        )
    chol = f_nn.chol if isinstance(f_nn, FisherMatrix) else factor_spd(matrix)
    theta = scipy.linalg.cho_solve((chol, True), t_nn)
    if c is not None:
        theta = theta + np.asarray(c, dtype=np.float64)
    return theta


def fishnets_loss(theta: np.ndarray, theta_hat: np.ndarray, f_nn: Union[FisherMatrix, np.ndarray]) -> float:
    matrix = _as_matrix(f_nn)
    chol = factor_spd(0.5 * (matrix + matrix.T))
    delta = np.asarray(theta, dtype=np.float64) - np.asarray(theta_hat, dtype=np.float64)
    quad = float(delta @ matrix @ delta)
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
    return 0.5 * quad - 0.5 * logdet


def summarize_set(model: FishnetsModel, data: np.ndarray, max_condition: float = DEFAULT_MAX_CONDITION) -> AggregatedSummary:
    """Embed every datum in canonical order, aggregate, and form theta_hat."""
    rows = canonical_rows(data)
    if rows.shape[0] == 0:
        raise EmptyAggregationError("Cannot summarise an empty set.")
    embeddings = [embed_datum(model, row) for row in rows]
    t_nn, f_nn = aggregate(embeddings)
    if model.has_prior:
        t_nn = t_nn + model.prior_score
        f_nn = FisherMatrix(chol=factor_spd(f_nn.matrix + model.prior_fisher))
    theta_hat = mle_estimate(t_nn, f_nn, model.c, max_condition)
    return AggregatedSummary(t_nn=t_nn, f_nn=f_nn, theta_hat=theta_hat)


def check_conditioning(f_sets: np.ndarray, max_condition: Optional[float] = DEFAULT_MAX_CONDITION) -> None:
    """Raise IllConditionedFisherError if any stacked Fisher exceeds `max_condition`."""
    if max_condition is None or f_sets.shape[0] == 0:
        return
    condition = np.linalg.cond(f_sets)
    worst = int(np.argmax(np.where(np.isfinite(condition), condition, np.inf)))
    if not np.all(np.isfinite(condition)) or condition[worst] > max_condition:
        raise IllConditionedFisherError(
            f"Fisher of set {worst} has condition number {condition[worst]:.3e} (limit {max_condition:.1e})",
            float(condition[worst]),
        )


@dataclass
class _BatchPass:
    x: np.ndarray
    lengths: np.ndarray
    raw: np.ndarray
    chol_rows: np.ndarray
    t_sets: np.ndarray
    f_sets: np.ndarray
    chol_sets: np.ndarray
    theta_offset: np.ndarray
    score_cache: Optional[list] = None
    fisher_cache: Optional[list] = None


def _forward_pass(
    model: FishnetsModel,
    blocks: Sequence[np.ndarray],
    keep_cache: bool,
    max_condition: Optional[float] = DEFAULT_MAX_CONDITION,
) -> _BatchPass:
    """
    Embed every row of every set, sum per set with np.add.reduceat, add the
    prior terms once and factor each aggregate. The one factor serves the
    solve, the log-determinant and the quadratic form.
    """
    lengths = np.array([b.shape[0] for b in blocks], dtype=np.int64)
    if np.any(lengths == 0):
        raise EmptyAggregationError("Every set must contain at least one datum.")
    rows = np.concatenate(blocks, axis=0)
    if rows.shape[1] != model.input_dim:
        raise ShapeError(f"Sets have {rows.shape[1]} features, model expects {model.input_dim}")
    x = (rows - model.input_shift) / model.input_scale
    if keep_cache:
        net_scores, score_cache = forward_with_cache(model.score_net, x)
        raw, fisher_cache = forward_with_cache(model.fisher_net, x)
    else:
        net_scores, raw = forward(model.score_net, x), forward(model.fisher_net, x)
        score_cache = fisher_cache = None
    chol_rows = cholesky_from_raw_batch(raw, model.n_p)
    f_rows = np.einsum("rij,rkj->rik", chol_rows, chol_rows)
    offsets = segment_offsets(lengths)
    t_sets = np.add.reduceat(net_scores, offsets, axis=0) * model.score_scale + model.prior_score
    f_sets = np.add.reduceat(f_rows, offsets, axis=0) + model.prior_fisher
    f_sets = 0.5 * (f_sets + np.swapaxes(f_sets, 1, 2))
    check_conditioning(f_sets, max_condition)
    chol_sets = cho_factor_batch(f_sets)
    theta_offset = cho_solve_batch(chol_sets, t_sets)
    return _BatchPass(x, lengths, raw, chol_rows, t_sets, f_sets, chol_sets,
                      theta_offset, score_cache, fisher_cache)


def _set_losses(model: FishnetsModel, fp: _BatchPass, thetas: np.ndarray) -> np.ndarray:
    delta = thetas - model.c - fp.theta_offset
    projected = np.einsum("sji,sj->si", fp.chol_sets, delta)
    quad = np.sum(projected ** 2, axis=1)
    logdet = 2.0 * np.sum(np.log(np.diagonal(fp.chol_sets, axis1=1, axis2=2)), axis=1)
    return 0.5 * quad - 0.5 * logdet


def loss_and_gradients(
    model: FishnetsModel, blocks: Sequence[np.ndarray], thetas: np.ndarray
) -> Tuple[float, ParamDict]:
    """
    Mean negative-log-Gaussian loss over the sets in `blocks` and its gradient with respect
    to every network parameter.

    With u = theta - c and theta' = F^-1 t: dL/dt = -(u - theta'),
    dL/dF = 1/2 (u u^T - theta' theta'^T - F^-1), and F_i = L_i L_i^T gives
    dL/dL_i = 2 (dL/dF) L_i. Score-network outputs are scaled by score_scale
    before the sum.
    """
    fp = _forward_pass(model, blocks, keep_cache=True)
    thetas = np.asarray(thetas, dtype=np.float64)
    n_sets = len(blocks)
    losses = _set_losses(model, fp, thetas)
    loss = float(np.mean(losses))

    u = thetas - model.c
    delta = u - fp.theta_offset
    grad_t = -delta / n_sets
    eye = np.broadcast_to(np.eye(model.n_p), fp.f_sets.shape)
    f_inv = cho_solve_batch(fp.chol_sets, np.array(eye))
    grad_f = 0.5 * (
        np.einsum("si,sj->sij", u, u)
        - np.einsum("si,sj->sij", fp.theta_offset, fp.theta_offset)
        - f_inv
    ) / n_sets

    set_of_row = np.repeat(np.arange(n_sets), fp.lengths)
    grad_scores = (grad_t * model.score_scale)[set_of_row]
    grad_chol = 2.0 * np.einsum("rij,rjk->rik", grad_f[set_of_row], fp.chol_rows)
    grad_raw = raw_grad_from_chol_grad(grad_chol, fp.raw, model.n_p)

    grads = gradients_to_dict(backward(model.score_net, fp.x, grad_scores, fp.score_cache), "score")
    grads.update(gradients_to_dict(backward(model.fisher_net, fp.x, grad_raw, fp.fisher_cache), "fisher"))
    return loss, grads


def _chunks(blocks: Sequence[np.ndarray], max_rows: int = MAX_ROWS_PER_CHUNK):
    start, rows = 0, 0
    for i, b in enumerate(blocks):
        rows += b.shape[0]
        if rows >= max_rows:
            yield start, i + 1
            start, rows = i + 1, 0
    if start < len(blocks):
        yield start, len(blocks)


def evaluate_sets(
    model: FishnetsModel, sets: Sequence[SetDataset], max_condition: Optional[float] = DEFAULT_MAX_CONDITION
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Batched evaluation of many sets. Returns (t_nn (S, n_p), F_nn (S, n_p, n_p),
    theta_hat (S, n_p)).
    """
    blocks = [canonical_rows(s.data) for s in sets]
    t_all, f_all, theta_all = [], [], []
    for lo, hi in _chunks(blocks):
        fp = _forward_pass(model, blocks[lo:hi], keep_cache=False, max_condition=max_condition)
        t_all.append(fp.t_sets)
        f_all.append(fp.f_sets)
        theta_all.append(fp.theta_offset + model.c)
    return np.concatenate(t_all), np.concatenate(f_all), np.concatenate(theta_all)


def evaluate_loss(model: FishnetsModel, sets: Sequence[SetDataset]) -> float:
    blocks = [canonical_rows(s.data) for s in sets]
    thetas = np.stack([s.theta for s in sets])
    losses = []
    for lo, hi in _chunks(blocks):
        fp = _forward_pass(model, blocks[lo:hi], keep_cache=False)
        losses.append(_set_losses(model, fp, thetas[lo:hi]))
    return float(np.mean(np.concatenate(losses)))


def _check_sets(model: FishnetsModel, sets: Sequence[SetDataset], n_targets: int) -> None:
    if not sets:
        raise EmptyAggregationError("Training requires at least one dataset.")
    for s in sets:
        if s.feature_dim != model.input_dim:
            raise ShapeError(f"Dataset has {s.feature_dim} features, model expects {model.input_dim}")
        if s.theta.shape != (n_targets,):
            raise ShapeError(f"Dataset theta has shape {s.theta.shape}, expected ({n_targets},)")


def train(
    model: FishnetsModel,
    train_sets: Sequence[SetDataset],
    config,
    valid_sets: Optional[Sequence[SetDataset]] = None,
) -> Tuple[FishnetsModel, TrainingHistory]:
    """
    Joint training of the twin networks with Adam on the mean
    negative-log-Gaussian loss. `config` is a TrainingConfig.
    """
    _check_sets(model, train_sets, model.n_p)
    if valid_sets:
        _check_sets(model, valid_sets, model.n_p)
    blocks = [canonical_rows(s.data) for s in train_sets]
    thetas = np.stack([s.theta for s in train_sets])

    def batch_loss(idx: np.ndarray) -> Tuple[float, ParamDict]:
        return loss_and_gradients(model, [blocks[i] for i in idx], thetas[idx])

    history = fit_parameters(
        model.parameters(),
        batch_loss,
        len(blocks),
        config,
        evaluate=(lambda: evaluate_loss(model, valid_sets)) if valid_sets else None,
        desc="fishnets",
        owner=model,
    )
    return model, history
