"""Training from scratch and distillation fine-tuning of the mini-ViT.

Plain minibatch SGD with L2 weight decay; every source of randomness is a
``numpy.random.Generator`` seeded from the config, so a fixed seed gives
bitwise-identical runs.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DivergenceError, NumericInputError
from .vit import AttentionCapture, VitModel, attention_entropy, forward, predict

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-4
    weight_decay: float = 1e-3
    alpha: float = 0.5
    seed: int = 0
    log_entropy: bool = True

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ContractError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ContractError("epochs must be >= 0")
        if self.alpha < 0:
            raise ContractError("alpha must be >= 0")


def distillation_loss(logits: T.Tensor, labels, teacher_logits=None, alpha: float = 0.0) -> T.Tensor:
    """Cross-entropy plus ``alpha * KL(teacher || student)``, both batch-averaged."""
    if alpha < 0:
        raise ContractError("alpha must be >= 0")
    ce = T.cross_entropy(logits, labels)
    if alpha == 0:
        return ce
    if teacher_logits is None:
        raise ContractError("alpha > 0 needs teacher logits")
    t = np.asarray(getattr(teacher_logits, "data", teacher_logits), dtype=np.float64)
    if t.shape != logits.shape:
        raise ContractError(f"teacher logits {t.shape} do not match student logits {logits.shape}")
    e = np.exp(t - t.max(axis=-1, keepdims=True))
    q = e / e.sum(axis=-1, keepdims=True)
    return T.add(ce, T.scale(T.kl_divergence(T.log_softmax(logits), q), alpha))


def accuracy(model: VitModel, images, labels) -> float:
    if len(labels) == 0:
        return 0.0
    return float((predict(model, images).argmax(axis=1) == np.asarray(labels)).mean())


def mean_entropy_per_layer(capture: AttentionCapture) -> list[float]:
    """Per layer, the mean over heads of each head's averaged-map entropy."""
    return [float(attention_entropy(capture.attention(l)).mean()) for l in sorted(capture.layers)]


def measure_entropy(model: VitModel, images, batch_size: int = 128) -> list[float]:
    capture = AttentionCapture()
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            forward(model, images[i:i + batch_size], capture=capture)
    return mean_entropy_per_layer(capture)


def _sgd_step(model: VitModel, lr: float, wd: float) -> None:
    for p in model.params.values():
        if p.grad is None:
            continue
        p.data = p.data - lr * (p.grad + wd * p.data)
        p.grad = None


def train(model: VitModel, config: TrainConfig, data: dict, teacher: VitModel | None = None,
          log_path=None) -> list[dict]:
    """Run ``config.epochs`` epochs over ``data["train"]``; returns one record per epoch.

    With a ``teacher`` and ``alpha > 0`` the loss gains the distillation
    term; the teacher only runs inference. On a non-finite loss the model is
    rolled back to the start of the failing epoch and DivergenceError raised.
    """
    config.validate()
    x, y = data["train"]
    xv, yv = data.get("val", (x[:0], y[:0]))
    use_teacher = config.alpha > 0 and teacher is not None
    if config.alpha > 0 and teacher is None and config.epochs > 0:
        raise ContractError("alpha > 0 needs a teacher model")
    rng = np.random.default_rng(config.seed)
    records = []
    fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(1, config.epochs + 1):
            snapshot = {k: v.data for k, v in model.params.items()}
            perm = rng.permutation(len(x))
            capture = AttentionCapture() if config.log_entropy else None
            total, correct = 0.0, 0
            for i in range(0, len(x), config.batch_size):
                idx = perm[i:i + config.batch_size]
                xb, yb = x[idx], y[idx]
                t_logits = None
                if use_teacher:
                    with T.no_grad():
                        t_logits = forward(teacher, xb).data
                try:
                    with T.Tape() as tape, np.errstate(over="ignore", invalid="ignore"):
                        logits = forward(model, xb, capture=capture)
                        loss = distillation_loss(logits, yb, t_logits, config.alpha if use_teacher else 0.0)
                    value = loss.item()
                except NumericInputError as exc:
                    value, cause = float("nan"), exc
                else:
                    cause = None
                if not np.isfinite(value):
                    model.load_state(snapshot)
                    raise DivergenceError(f"non-finite loss in epoch {epoch}", epoch, snapshot) from cause
                tape.backward(loss)
                if capture is not None:
                    capture.discard_pending()
                _sgd_step(model, config.learning_rate, config.weight_decay)
                total += value * len(idx)
                correct += int((logits.data.argmax(axis=1) == yb).sum())
            rec = {
                "epoch": epoch,
                "loss": total / len(x),
                "train_acc": correct / len(x),
                "val_acc": accuracy(model, xv, yv),
                "mean_entropy_per_layer": mean_entropy_per_layer(capture) if capture else None,
            }
            records.append(rec)
            log.debug("epoch %d loss %.4f train %.3f val %.3f", epoch, rec["loss"], rec["train_acc"], rec["val_acc"])
            if fh:
                fh.write(json.dumps(rec) + "\n")
    finally:
        if fh:
            fh.close()
    return records


def finetune(model: VitModel, teacher: VitModel, config: TrainConfig, data: dict, log_path=None) -> list[dict]:
    """Fine-tune a pruned model against its unpruned teacher."""
    return train(model, config, data, teacher=teacher, log_path=log_path)
