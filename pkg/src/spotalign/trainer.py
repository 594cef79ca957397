"""Optimization loop: Adam with step-decay, per-slide batching, per-batch
centroid refresh, patient-grouped cross-validation, and deterministic
seeding throughout.

Every random stream (init, shuffling, dropout, clustering) is derived from
the config seed plus structural indices, so a full training run is a pure
function of (data, config) and repeats bitwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import evaluation, grouping, losses, model
from .data_io import SpotBatch
from .errors import ContractError, DataError, NumericError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    lr: float = 1e-4
    decay: float = 0.95
    decay_every: int = 20
    batch_size: int = 256
    epochs: int = 200
    seed: int = 0
    k: int = 25
    lam: float = 0.8
    tau: float = 0.07
    tau_ig: float = 0.07
    target_mode: str = "hard"
    multi_ins_weight: float = 1.0
    n_folds: int = 2
    cluster_refresh: str = "batch"  # "batch" or "epoch"
    kmeans_n_init: int = 10
    kmeans_max_iter: int = 100
    kmeans_tol: float = 1e-6

    def __post_init__(self):
        if self.lr <= 0 or self.decay <= 0 or self.decay_every <= 0:
            raise ContractError("lr, decay, and decay_every must be positive")
        if self.batch_size <= 0 or self.epochs <= 0 or self.k <= 0:
            raise ContractError("batch_size, epochs, and k must be positive")
        if self.lam < 0 or self.multi_ins_weight < 0:
            raise ContractError("loss weights must be >= 0")
        if self.tau <= 0 or self.tau_ig <= 0:
            raise ContractError("temperatures must be positive")
        if self.target_mode not in ("hard", "soft"):
            raise ContractError(f"target_mode must be 'hard' or 'soft', got {self.target_mode!r}")
        if self.cluster_refresh not in ("batch", "epoch"):
            raise ContractError("cluster_refresh must be 'batch' or 'epoch'")


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Step decay: lr0 * decay^floor(epoch / decay_every)."""
    if epoch < 0:
        raise ContractError(f"epoch must be >= 0, got {epoch}")
    return cfg.lr * cfg.decay ** (epoch // cfg.decay_every)


# ---------------------------------------------------------------------------
# folds


@dataclass
class FoldPlan:
    folds: dict[int, list[str]]  # fold id -> sample ids
    patient_fold: dict[str, int]

    def test_samples(self, fold_id: int) -> list[str]:
        return list(self.folds[fold_id])


def make_folds(samples: list[tuple[str, str]], n_folds: int, seed: int) -> FoldPlan:
    """Patient-grouped fold assignment.

    Patients are shuffled by seed, ordered largest-first by sample count
    (stable), then greedily packed into the currently smallest fold, so all
    samples of one patient always land together.
    """
    if n_folds <= 0:
        raise ContractError(f"n_folds must be positive, got {n_folds}")
    by_patient: dict[str, list[str]] = {}
    for sample_id, patient_id in samples:
        by_patient.setdefault(patient_id, []).append(sample_id)
    if n_folds > len(by_patient):
        raise ContractError(
            f"n_folds={n_folds} exceeds the {len(by_patient)} distinct patients"
        )
    rng = np.random.default_rng(np.random.SeedSequence([seed, 5]))
    patients = list(by_patient)
    rng.shuffle(patients)
    patients.sort(key=lambda p: -len(by_patient[p]))  # stable: keeps shuffle for ties

    folds: dict[int, list[str]] = {f: [] for f in range(n_folds)}
    patient_fold: dict[str, int] = {}
    sizes = [0] * n_folds
    for p in patients:
        target = min(range(n_folds), key=lambda f: (sizes[f], f))
        folds[target].extend(by_patient[p])
        patient_fold[p] = target
        sizes[target] += len(by_patient[p])

    assigned = [sid for fold in folds.values() for sid in fold]
    if sorted(assigned) != sorted(sid for sid, _ in samples):
        raise ContractError("internal error: fold plan lost or duplicated samples")
    return FoldPlan(folds=folds, patient_fold=patient_fold)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


def init_adam(params: dict[str, np.ndarray]) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(v) for k, v in params.items()},
        v={k: np.zeros_like(v) for k, v in params.items()},
    )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> None:
    """Standard bias-corrected Adam update, in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}; step aborted")
    state.t += 1
    bc1 = 1.0 - ADAM_BETA1**state.t
    bc2 = 1.0 - ADAM_BETA2**state.t
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        params[name] -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    params_best: dict[str, np.ndarray]
    params_final: dict[str, np.ndarray]
    best_epoch: int
    best_pcc_a: float
    history: list[dict] = field(default_factory=list)
    log_lines: list[str] = field(default_factory=list)


def _derived_rng(*path: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(path)))


def _derived_seed(*path: int) -> int:
    return int(np.random.SeedSequence(list(path)).generate_state(1)[0])


def _cluster(e_clu_img, e_clu_gene, cfg: TrainConfig, seed_img: int, seed_gene: int):
    img = grouping.kmeans(
        e_clu_img, cfg.k, seed_img,
        max_iter=cfg.kmeans_max_iter, tol=cfg.kmeans_tol, n_init=cfg.kmeans_n_init,
    )
    gene = grouping.kmeans(
        e_clu_gene, cfg.k, seed_gene,
        max_iter=cfg.kmeans_max_iter, tol=cfg.kmeans_tol, n_init=cfg.kmeans_n_init,
    )
    return img, gene


def train_fold(
    fold_id: int,
    plan: FoldPlan,
    batches: list[SpotBatch],
    model_cfg: model.ModelConfig,
    cfg: TrainConfig,
    on_line=None,
) -> TrainResult:
    """Train one fold; checkpoints the best-validation and final parameters.

    Per step: forward both modalities, refresh centroids from the batch's
    grouping features (skipped for sub-k batches, which reuse the previous
    centroids), evaluate the objective, backpropagate, Adam-update.
    """
    test_ids = set(plan.test_samples(fold_id))
    train_batches = [b for b in batches if b.sample_id not in test_ids]
    test_batches = [b for b in batches if b.sample_id in test_ids]
    if not train_batches:
        raise ContractError(f"fold {fold_id} leaves no training samples")
    train_patients = {b.patient_id for b in train_batches}
    test_patients = {b.patient_id for b in test_batches}
    if train_patients & test_patients:
        raise ContractError(
            f"patients straddle fold {fold_id}: {sorted(train_patients & test_patients)}"
        )

    log: list[str] = []

    def emit(line: str) -> None:
        log.append(line)
        if on_line is not None:
            on_line(line)

    params = model.init_params(model_cfg, _derived_seed(cfg.seed, fold_id, 2))
    # start the prediction head at the training-set mean expression so early
    # epochs refine structure instead of relearning the output scale
    params["pred/b"] = np.concatenate(
        [b.expression for b in train_batches], axis=0
    ).mean(axis=0)
    adam = init_adam(params)
    centroids_prev: tuple[np.ndarray, np.ndarray] | None = None

    best_pcc = -math.inf
    best_epoch = -1
    params_best = {k: v.copy() for k, v in params.items()}
    history: list[dict] = []
    step = 0

    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg)

        if cfg.lam > 0 and cfg.cluster_refresh == "epoch":
            centroids_prev = _epoch_centroids(params, train_batches, model_cfg, cfg, fold_id, epoch)

        # per-slide seeded shuffles, then round-robin across slides
        chunk_lists = []
        for si, b in enumerate(train_batches):
            rng = _derived_rng(cfg.seed, fold_id, epoch, si, 11)
            perm = rng.permutation(b.n_spots)
            chunks = [
                (si, perm[i : i + cfg.batch_size])
                for i in range(0, b.n_spots, cfg.batch_size)
            ]
            chunk_lists.append(chunks)
        schedule = []
        for round_i in range(max(len(c) for c in chunk_lists)):
            for chunks in chunk_lists:
                if round_i < len(chunks):
                    schedule.append(chunks[round_i])

        epoch_total = 0.0
        for si, chunk in schedule:
            sub = train_batches[si].take(chunk)
            step_rng = _derived_rng(cfg.seed, fold_id, epoch, step, 13)

            tape = ad.Tape()
            pt = model.as_tensors(params, tape)
            emb = model.forward_embeddings(pt, sub, model_cfg, step_rng, training=True)
            pred = model.predict_expression(pt, emb.fused)
            pred_loss = losses.prediction_loss(pred, sub.expression)

            per_scale_vals = (0.0, 0.0, 0.0)
            if cfg.multi_ins_weight > 0:
                multi, per_scale_vals = losses.multi_scale_instance_loss(
                    emb.per_scale, emb.gene, cfg.tau
                )
                if cfg.multi_ins_weight != 1.0:
                    multi = multi * cfg.multi_ins_weight
            else:
                multi = ad.constant(0.0)

            cross = ad.constant(0.0)
            if cfg.lam > 0:
                const_pt = model.as_tensors(params)
                if sub.n_spots >= cfg.k and cfg.cluster_refresh == "batch":
                    e_clu_img = grouping.group_project(const_pt, emb.fused.data, "image").data
                    e_clu_gene = grouping.group_project(const_pt, emb.gene.data, "gene").data
                    img_state, gene_state = _cluster(
                        e_clu_img, e_clu_gene, cfg,
                        _derived_seed(cfg.seed, fold_id, epoch, step, 17),
                        _derived_seed(cfg.seed, fold_id, epoch, step, 19),
                    )
                    centroids_prev = (img_state.centroids, gene_state.centroids)
                elif centroids_prev is None:
                    emit(f"step={step} epoch={epoch} event=cross_skipped reason=no_centroids")
                elif cfg.cluster_refresh == "batch":
                    emit(f"step={step} epoch={epoch} event=centroids_reused n={sub.n_spots}")
                if centroids_prev is not None:
                    c_img, c_gene = centroids_prev
                    img_assign = grouping.assign_cross(emb.fused.data, c_gene)
                    gene_assign = grouping.assign_cross(emb.gene.data, c_img)
                    cross = losses.cross_level_loss(
                        emb.fused, emb.gene, c_gene, c_img,
                        img_assign, gene_assign, cfg.tau_ig, cfg.target_mode,
                    )

            total, breakdown = losses.total_loss(
                multi, cross, pred_loss, cfg.lam, per_scale_vals
            )
            node_grads = tape.backward(total)
            grads = {name: node_grads[pt[name].node_id] for name in params}
            adam_step(params, grads, adam, lr)

            # loss fields at full precision so total can be re-derived exactly
            emit(
                f"step={step} epoch={epoch} lr={lr!r} "
                f"multi_ins={breakdown.multi_ins!r} cross={breakdown.cross!r} "
                f"pred={breakdown.pred!r} total={breakdown.total!r}"
            )
            epoch_total += breakdown.total
            step += 1

        summary = {"epoch": epoch, "lr": lr, "mean_total": epoch_total / max(len(schedule), 1)}
        if test_batches:
            report = evaluate_fold(fold_id, params, model_cfg, test_batches)
            summary["val_pcc_a"] = report.pcc_a
            summary["val_mse"] = report.mse
            if report.pcc_a > best_pcc:
                best_pcc = report.pcc_a
                best_epoch = epoch
                params_best = {k: v.copy() for k, v in params.items()}
        history.append(summary)
        emit(
            f"epoch={epoch} mean_total={summary['mean_total']:.6f}"
            + (f" val_pcc_a={summary['val_pcc_a']:.6f}" if "val_pcc_a" in summary else "")
        )

    if best_epoch < 0:  # no validation data: best == final
        params_best = {k: v.copy() for k, v in params.items()}
    return TrainResult(
        params_best=params_best,
        params_final={k: v.copy() for k, v in params.items()},
        best_epoch=best_epoch,
        best_pcc_a=best_pcc if best_epoch >= 0 else math.nan,
        history=history,
        log_lines=log,
    )


def _epoch_centroids(params, train_batches, model_cfg, cfg, fold_id, epoch):
    """Epoch-mode refresh: cluster the grouping features of every training
    spot (eval-mode embeddings, per slide for global context)."""
    const_pt = model.as_tensors(params)
    img_parts, gene_parts = [], []
    for b in train_batches:
        emb = model.forward_embeddings(const_pt, b, model_cfg)
        img_parts.append(grouping.group_project(const_pt, emb.fused.data, "image").data)
        gene_parts.append(grouping.group_project(const_pt, emb.gene.data, "gene").data)
    e_img = np.concatenate(img_parts, axis=0)
    e_gene = np.concatenate(gene_parts, axis=0)
    if e_img.shape[0] < cfg.k:
        return None
    img_state, gene_state = _cluster(
        e_img, e_gene, cfg,
        _derived_seed(cfg.seed, fold_id, epoch, 23),
        _derived_seed(cfg.seed, fold_id, epoch, 29),
    )
    return (img_state.centroids, gene_state.centroids)


# ---------------------------------------------------------------------------
# inference and evaluation


def infer(params: dict[str, np.ndarray], model_cfg: model.ModelConfig, batch: SpotBatch) -> np.ndarray:
    """Eval-mode prediction from the image pathway only."""
    if batch.n_genes != model_cfg.n_genes:
        raise DataError(
            f"sample {batch.sample_id} has {batch.n_genes} genes, model expects {model_cfg.n_genes}"
        )
    if batch.local_feat.shape[1] != model_cfg.d_in:
        raise DataError(
            f"sample {batch.sample_id} features have dim {batch.local_feat.shape[1]}, "
            f"model expects {model_cfg.d_in}"
        )
    return model.forward_image(model.as_tensors(params), batch, model_cfg).data


def evaluate_fold(
    fold_id: int,
    params: dict[str, np.ndarray],
    model_cfg: model.ModelConfig,
    test_batches: list[SpotBatch],
    pooled: bool = False,
) -> evaluation.FoldReport:
    pairs = [(b.expression, infer(params, model_cfg, b)) for b in test_batches]
    return evaluation.build_fold_report(fold_id, pairs, pooled=pooled)
