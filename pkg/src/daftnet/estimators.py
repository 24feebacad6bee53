"""Scikit-learn style estimators wrapping the fusion networks and their training loop."""
from __future__ import annotations

import dataclasses
import logging
import time

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .fusion import FusionModel, ModelConfig, build_model, forward_with_override
from .metrics import NoEventsError, balanced_accuracy, cox_ph_loss, cross_entropy, uno_cindex
from .nn import AdamW, lr_schedule
from .tensor import Tensor
from .validation import check_diagnosis_target, check_multimodal, check_survival_target

log = logging.getLogger(__name__)

MAX_RESAMPLE = 100


def _epoch_batches(rng: np.random.Generator, n: int, batch_size: int) -> list[np.ndarray]:
    order = rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    # BatchNorm needs more than one value per channel in the last batch
    if len(batches) > 1 and len(batches[-1]) < 2:
        batches[-2] = np.concatenate([batches[-2], batches.pop()])
    return batches


def _with_event(rng, batch, event, n):
    """Redraw a batch without events until it holds one (bounded retries)."""
    attempts = 0
    while not event[batch].any():
        attempts += 1
        if attempts > MAX_RESAMPLE:
            raise NoEventsError(f"no event in {MAX_RESAMPLE} resampled batches; censoring rate is pathological")
        batch = rng.choice(n, size=len(batch), replace=False)
    return batch


def predict_raw(model: FusionModel, images, tabular, batch_size: int = 64) -> np.ndarray:
    return forward_with_override(model, images, tabular, None, batch_size=batch_size)


def score_outputs(task: str, outputs: np.ndarray, target, num_classes: int = 3) -> float:
    """bACC of argmax logits, or the IPCW c-index of the risk column."""
    if task == "diagnosis":
        return balanced_accuracy(outputs.argmax(axis=1), np.asarray(target))
    return uno_cindex(outputs[:, 0].astype(np.float64), target)


def fit_network(model: FusionModel, images, tabular, target, task: str, *, epochs: int, batch_size: int,
                lr: float, weight_decay: float, seed: int, eval_set=None, callback=None) -> dict:
    """Train ``model`` in place with AdamW and the step schedule.

    The validation metric is computed after every epoch and the parameters of
    the best epoch (earliest on ties) are restored at the end; without
    ``eval_set`` the last epoch is kept. Returns the per-epoch history.
    """
    rng = np.random.default_rng(seed)
    opt = AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
    n = len(tabular)
    if task == "survival":
        time_, event = target
    history, best_state, best_metric, best_epoch = [], None, -np.inf, -1
    for epoch in range(epochs):
        t0 = time.perf_counter()
        opt.lr = lr_schedule(epoch, epochs, lr)
        model.train()
        losses = []
        for batch in _epoch_batches(rng, n, batch_size):
            if task == "survival":
                batch = _with_event(rng, batch, event, n)
            img = None if images is None else Tensor(images[batch])
            out = model(img, tabular[batch])
            if task == "diagnosis":
                loss = cross_entropy(out, target[batch])
            else:
                loss = cox_ph_loss(out, (time_[batch], event[batch]))
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        record = {"epoch": epoch, "lr": opt.lr, "train_loss": float(np.mean(losses))}
        if eval_set is not None:
            v_img, v_tab, v_target = eval_set
            out = predict_raw(model, v_img, v_tab)
            record["val_loss"] = _loss_value(task, out, v_target)
            try:
                record["val_metric"] = score_outputs(task, out, v_target)
            except ValueError:
                record["val_metric"] = float("nan")
            if record["val_metric"] > best_metric:
                best_metric, best_epoch = record["val_metric"], epoch
                best_state = model.state_dict()
        record["seconds"] = time.perf_counter() - t0
        history.append(record)
        log.debug("epoch %d %s", epoch, record)
        if callback is not None:
            callback(record)
    if best_state is not None:
        model.load_state_dict(best_state)
    else:
        best_epoch = epochs - 1
    return {"history": history, "best_epoch": best_epoch,
            "best_val_metric": best_metric if best_state is not None else float("nan")}


def _loss_value(task, out, target) -> float:
    if task == "diagnosis":
        return cross_entropy(Tensor(out.astype(np.float64)), target).item()
    try:
        return cox_ph_loss(Tensor(out.astype(np.float64)), target).item()
    except NoEventsError:
        return float("nan")


class _FusionEstimator(BaseEstimator):
    task = "diagnosis"

    def __init__(self, variant="daft", model_config=None, epochs=None, batch_size=16, lr=1e-3,
                 weight_decay=0.0, random_state=0, feature_model=None):
        self.variant = variant
        self.model_config = model_config
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.random_state = random_state
        self.feature_model = feature_model

    def _config(self) -> ModelConfig:
        base = self.model_config
        if base is None:
            base = ModelConfig(task=self.task)
        elif isinstance(base, dict):
            base = ModelConfig.from_dict({**base, "task": self.task})
        return dataclasses.replace(base, fusion_variant=self.variant, task=self.task)

    def _epochs(self) -> int:
        if self.epochs is not None:
            return int(self.epochs)
        return 30 if self.task == "diagnosis" else 80

    def _check_target(self, y, n):
        raise NotImplementedError

    def _features(self, cfg, images, tabular, y, eval_set):
        fm = self.feature_model
        if fm is None:
            sub = type(self)(variant="image_only", model_config=cfg, epochs=self.epochs,
                             batch_size=self.batch_size, lr=self.lr, weight_decay=self.weight_decay,
                             random_state=self.random_state)
            fm = sub.fit((images, tabular), y, eval_set=eval_set)
        return fm.model_ if isinstance(fm, _FusionEstimator) else fm

    def fit(self, X, y, eval_set=None, callback=None):
        """Train on ``X = (images, tabular)``; ``eval_set = (X_val, y_val)`` drives checkpoint selection."""
        cfg = self._config()
        images, tabular = check_multimodal(X, cfg.tabular_dim, need_image=self.variant != "tabular_linear")
        target = self._check_target(y, len(tabular))
        val = None
        if eval_set is not None:
            Xv, yv = eval_set
            v_img, v_tab = check_multimodal(Xv, cfg.tabular_dim, need_image=self.variant != "tabular_linear")
            val = (v_img, v_tab, self._check_target(yv, len(v_tab)))
        feature_model = None
        if self.variant == "linear_with_resnet_features":
            feature_model = self._features(cfg, images, tabular, y, eval_set)
        self.model_ = build_model(cfg, seed=self.random_state, feature_model=feature_model)
        self.config_ = cfg
        result = fit_network(self.model_, images, tabular, target, self.task, epochs=self._epochs(),
                             batch_size=self.batch_size, lr=self.lr, weight_decay=self.weight_decay,
                             seed=self.random_state, eval_set=val, callback=callback)
        self.history_ = result["history"]
        self.best_epoch_ = result["best_epoch"]
        self.best_val_metric_ = result["best_val_metric"]
        self.n_features_in_ = cfg.tabular_dim
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        images, tabular = check_multimodal(X, self.config_.tabular_dim,
                                           need_image=self.variant != "tabular_linear")
        return predict_raw(self.model_, images, tabular)


class FusionClassifier(ClassifierMixin, _FusionEstimator):
    """Three-class diagnosis from an image and an encoded tabular vector.

    ``variant`` picks the fusion strategy; ``model_config`` (a ModelConfig or
    dict of its fields) describes the backbone and the DAFT block. Training
    uses cross-entropy, AdamW and the 60/90 % step schedule; with ``eval_set``
    the epoch with the best validation balanced accuracy is kept.
    """

    task = "diagnosis"

    def _check_target(self, y, n):
        return check_diagnosis_target(y, n, self._config().num_classes)

    def fit(self, X, y, eval_set=None, callback=None):
        super().fit(X, y, eval_set=eval_set, callback=callback)
        self.classes_ = np.arange(self.config_.num_classes)
        return self

    def predict_proba(self, X) -> np.ndarray:
        logits = self.decision_function(X).astype(np.float64)
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        return self.decision_function(X).argmax(axis=1)

    def score(self, X, y, sample_weight=None) -> float:
        return balanced_accuracy(self.predict(X), np.asarray(y))


class FusionSurvivalModel(_FusionEstimator):
    """Risk score for right-censored time to event, trained with the Cox partial likelihood.

    ``y`` is a structured array with ``event`` and ``time`` fields, a
    ``(time, event)`` pair or a list of SurvivalLabel. Mini-batches without an
    observed event are redrawn (at most 100 times). ``score`` is the IPCW
    concordance index.
    """

    task = "survival"

    def _check_target(self, y, n):
        return check_survival_target(y, n)

    def predict(self, X) -> np.ndarray:
        return self.decision_function(X)[:, 0].astype(np.float64)

    def score(self, X, y, sample_weight=None) -> float:
        return uno_cindex(self.predict(X), y)


def estimator_for(task: str):
    if task not in ("diagnosis", "survival"):
        raise ValueError(f"unknown task {task!r}")
    return FusionClassifier if task == "diagnosis" else FusionSurvivalModel


__all__ = ["FusionClassifier", "FusionSurvivalModel", "fit_network", "predict_raw", "score_outputs",
           "estimator_for"]
