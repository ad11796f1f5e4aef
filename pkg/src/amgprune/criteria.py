"""Head and token importance from calibration-averaged attention maps.

Head criterion: entropy ``S = sum_ij -A_ij ln A_ij`` of a head's averaged
attention map. Near-uniform (high entropy) heads carry little information
and are pruned first. For ranking, heads are scored by their entropy
headroom ``N_q ln N_kv - S`` so that, like tokens, a *lower* score means
*more prunable* and the layer weighting ``(1 - lambda*l)`` pushes pruning
toward deep layers for both unit kinds.

Token criterion: gradient-weighted attention summed down the key column,
``|1/H sum_h sum_q dL/dA[q, j] * A[q, j]|``. The class token is never scored.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from typing import Callable, Iterable

import numpy as np

from . import tensor as T
from .errors import ClassTokenProtectionError, ContractError, NotCalibratedError
from .vit import AttentionCapture, VitModel, attention_entropy, forward


@dataclass
class ImportanceScore:
    unit_kind: str  # "head" | "token"
    layer: int
    unit_id: int
    raw: float
    weighted: float | None = None
    samples: int = 0
    original_id: int | None = None
    entropy: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def head_entropy(capture: AttentionCapture, layer: int, head: int, mode: str = "averaged-map") -> float:
    """Entropy of head ``head`` in ``layer``.

    ``mode="averaged-map"`` (default) evaluates the entropy of the
    calibration-averaged map; ``"per-sample"`` averages per-sample entropies
    instead, which is never larger.
    """
    if mode == "averaged-map":
        return float(attention_entropy(capture.attention(layer, head)))
    if mode == "per-sample":
        return capture.mean_sample_entropy(layer, head)
    raise ContractError(f"unknown entropy mode {mode!r}")


def max_entropy(n_query: int, n_kv: int) -> float:
    return n_query * math.log(n_kv)


def _kv_position(capture: AttentionCapture, layer: int, token: int) -> int:
    if token == 0:
        raise ClassTokenProtectionError("the class token is never scored for pruning")
    kv = capture.kv_indices(layer)
    try:
        return kv.index(token)
    except ValueError:
        raise ContractError(f"token {token} is not in the key/value set of layer {layer}") from None


def token_importance(capture: AttentionCapture, layer: int, token: int, reduction: str = "column") -> float:
    """Gradient-weighted attention importance of key token ``token``.

    ``reduction="column"`` sums over all queries attending to the token (the
    default ranking). ``"row"`` instead sums row ``token`` over all keys, the
    literal index order of the written formula, kept for comparison.
    """
    if not capture.has_gradients(layer):
        raise NotCalibratedError(f"layer {layer}: capture holds no gradient maps")
    A, G = capture.attention(layer), capture.gradient(layer)
    H = A.shape[0]
    if reduction == "column":
        j = _kv_position(capture, layer, token)
        return abs(float((G[:, :, j] * A[:, :, j]).sum()) / H)
    if reduction == "row":
        if token == 0:
            raise ClassTokenProtectionError("the class token is never scored for pruning")
        return abs(float((G[:, token, :] * A[:, token, :]).sum()) / H)
    raise ContractError(f"unknown reduction {reduction!r}")


def head_scores(capture: AttentionCapture, model: VitModel | None = None,
                mode: str = "averaged-map") -> list[ImportanceScore]:
    scores = []
    for layer in sorted(capture.layers):
        A = capture.attention(layer)
        ceiling = max_entropy(A.shape[-2], A.shape[-1])
        for h in range(A.shape[0]):
            s = head_entropy(capture, layer, h, mode)
            scores.append(ImportanceScore(
                "head", layer, h, raw=max(ceiling - s, 0.0), samples=capture.samples(layer),
                original_id=model.head_ids[layer][h] if model is not None else h, entropy=s,
            ))
    return scores


def head_scores_from_entropies(entropies: dict[int, Iterable[float]], ceiling: float) -> list[ImportanceScore]:
    """Build head scores from bare per-layer entropy lists (tests, offline analysis)."""
    scores = []
    for layer in sorted(entropies):
        for h, s in enumerate(entropies[layer]):
            scores.append(ImportanceScore("head", layer, h, raw=ceiling - float(s), original_id=h, entropy=float(s)))
    return scores


def token_scores(capture: AttentionCapture, reduction: str = "column") -> list[ImportanceScore]:
    scores = []
    for layer in sorted(capture.layers):
        n = capture.samples(layer)
        for token in capture.kv_indices(layer):
            if token == 0:
                continue
            scores.append(ImportanceScore("token", layer, token, token_importance(capture, layer, token, reduction),
                                          samples=n, original_id=token))
    return scores


LossFn = Callable[[T.Tensor, np.ndarray], T.Tensor]


def _summed_ce(logits, labels):
    return T.cross_entropy(logits, labels, reduction="sum")


def calibrate(model: VitModel, batches: Iterable, loss: str | LossFn = "cross_entropy",
              max_batches: int | None = None) -> AttentionCapture:
    """Forward + backward over ``batches`` of ``(images, labels)``, averaging maps and gradients.

    The default loss is cross-entropy summed over the batch, so each stored
    gradient is the gradient of that sample's own loss. Parameter gradients
    produced along the way are cleared before returning.
    """
    loss_fn = _summed_ce if loss == "cross_entropy" else loss
    if not callable(loss_fn):
        raise ContractError(f"unknown calibration loss {loss!r}")
    capture = AttentionCapture()
    seen = 0
    for images, labels in batches:
        if max_batches is not None and seen >= max_batches:
            break
        with T.Tape() as tape:
            logits = forward(model, images, capture=capture)
            value = loss_fn(logits, np.asarray(labels))
        tape.backward(value)
        capture.collect_gradients()
        seen += 1
    model.zero_grad()
    if seen == 0:
        raise ContractError("calibration set is empty")
    return capture


def taylor_token_scores(model: VitModel, images, labels) -> list[ImportanceScore]:
    """Taylor baseline on key embeddings: ``|1/D sum_c dL/dk[i,c] * k[i,c]|``, sample-averaged."""
    trace: dict = {}
    with T.Tape() as tape:
        logits = forward(model, images, trace=trace)
        value = T.cross_entropy(logits, labels, reduction="sum")
    tape.backward(value)
    model.zero_grad()
    D = model.spec.embed_dim
    scores = []
    for layer in range(model.spec.layers):
        keys = trace[layer]["keys"]
        prod = (keys.grad * keys.data).sum(axis=-1).mean(axis=0) / D  # [N]
        kv = model.spec.retained_kv_indices[layer] or range(model.spec.num_tokens)
        for token in kv:
            if token == 0:
                continue
            scores.append(ImportanceScore("token", layer, token, abs(float(prod[token])),
                                          samples=len(labels), original_id=token))
    return scores


def taylor_token_importance(model: VitModel, images, labels, layer: int, token: int) -> float:
    if token == 0:
        raise ClassTokenProtectionError("the class token is never scored for pruning")
    for s in taylor_token_scores(model, images, labels):
        if s.layer == layer and s.unit_id == token:
            return s.raw
    raise ContractError(f"token {token} is not in the key/value set of layer {layer}")


def taylor_head_scores(model: VitModel, images, labels) -> list[ImportanceScore]:
    """Taylor baseline on head outputs: ``|sum dL/do * o|`` per head, sample-averaged."""
    trace: dict = {}
    with T.Tape() as tape:
        logits = forward(model, images, trace=trace)
        value = T.cross_entropy(logits, labels, reduction="sum")
    tape.backward(value)
    model.zero_grad()
    scores = []
    for layer in range(model.spec.layers):
        o = trace[layer]["head_out"]
        per_head = (o.grad * o.data).sum(axis=(2, 3)).mean(axis=0)
        for h, v in enumerate(per_head):
            scores.append(ImportanceScore("head", layer, h, abs(float(v)), samples=len(labels),
                                          original_id=model.head_ids[layer][h]))
    return scores


def _f(x) -> str:
    return "" if x is None else repr(float(x))


def write_scores_csv(scores: Iterable[ImportanceScore], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "layer", "unit", "raw", "weighted"])
        for s in scores:
            unit = s.original_id if s.original_id is not None else s.unit_id
            w.writerow([s.unit_kind, s.layer, unit, _f(s.raw), _f(s.weighted)])


def write_attention_csv(capture: AttentionCapture, path, gradients: bool = False) -> None:
    """Dump averaged maps as ``layer,head,row,col,value`` (``col`` is the original token index)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "head", "row", "col", "value"])
        for layer in sorted(capture.layers):
            maps = capture.gradient(layer) if gradients else capture.attention(layer)
            cols = capture.kv_indices(layer)
            for h in range(maps.shape[0]):
                for r in range(maps.shape[1]):
                    for c, tok in enumerate(cols):
                        w.writerow([layer, h, r, tok, repr(float(maps[h, r, c]))])
