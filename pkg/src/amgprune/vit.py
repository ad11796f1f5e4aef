"""Mini vision transformer whose attention is open for inspection and pruning.

Each layer's Q/K/V projections are stored as ``D x (H_l*d)`` matrices with
head ``h`` owning columns ``h*d:(h+1)*d``; ``W^o`` is ``(H_l*d) x D`` with
the matching row blocks. Head surgery is therefore a block deletion, and the
embedding width ``D`` never changes. Key/value token selection is a gather
applied after projection (the "index layer"): queries always cover all N
tokens, keys/values only the retained ones.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import (
    ClassTokenProtectionError,
    ContractError,
    DegenerateLayerError,
    DimensionError,
    NotCalibratedError,
)
from .tensor import Tensor, mac_scope


@dataclass
class ModelSpec:
    image_size: int
    patch_size: int
    embed_dim: int
    heads_per_layer: list[int]
    head_dim: int
    mlp_ratio: float = 2.0
    num_classes: int = 4
    channels: int = 1
    retained_kv_indices: list[list[int] | None] = field(default_factory=list)

    def __post_init__(self):
        self.heads_per_layer = [int(h) for h in self.heads_per_layer]
        if not self.retained_kv_indices:
            self.retained_kv_indices = [None] * len(self.heads_per_layer)
        self.validate()

    @classmethod
    def uniform(cls, *, image_size, patch_size, embed_dim, layers, heads, head_dim, **kw) -> "ModelSpec":
        return cls(image_size=image_size, patch_size=patch_size, embed_dim=embed_dim,
                   heads_per_layer=[heads] * layers, head_dim=head_dim, **kw)

    @property
    def layers(self) -> int:
        return len(self.heads_per_layer)

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size**2

    @property
    def mlp_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    def kv_count(self, layer: int) -> int:
        idx = self.retained_kv_indices[layer]
        return self.num_tokens if idx is None else len(idx)

    def validate(self) -> None:
        if self.image_size <= 0 or self.patch_size <= 0 or self.image_size % self.patch_size:
            raise ContractError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if not self.heads_per_layer:
            raise ContractError("model needs at least one layer")
        if any(h < 1 for h in self.heads_per_layer):
            raise ContractError(f"every layer needs >= 1 head, got {self.heads_per_layer}")
        if min(self.embed_dim, self.head_dim, self.num_classes, self.channels) < 1:
            raise ContractError("embed_dim, head_dim, num_classes and channels must be positive")
        if len(self.retained_kv_indices) != self.layers:
            raise ContractError("retained_kv_indices must have one entry per layer")
        for layer, idx in enumerate(self.retained_kv_indices):
            if idx is not None:
                check_kv_indices(idx, self.num_tokens, layer)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


def check_kv_indices(indices, num_tokens: int, layer: int = 0) -> list[int]:
    idx = [int(i) for i in indices]
    if 0 not in idx:
        raise ClassTokenProtectionError(f"layer {layer}: class token (index 0) must stay in the key/value set")
    if any(b <= a for a, b in zip(idx, idx[1:])):
        raise ContractError(f"layer {layer}: key/value indices must be strictly increasing without duplicates")
    if idx[0] < 0 or idx[-1] >= num_tokens:
        raise ContractError(f"layer {layer}: key/value index out of range [0, {num_tokens})")
    return idx


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def sincos_position_table(grid: int, dim: int) -> np.ndarray:
    """Fixed 2-D sin/cos table ``[grid*grid, dim]`` (row half, column half); ``dim % 4 == 0``."""
    quarter = dim // 4
    omega = 1.0 / 10000.0 ** (np.arange(quarter) / quarter)
    rows, cols = np.mgrid[0:grid, 0:grid]
    parts = []
    for coord in (rows.ravel(), cols.ravel()):
        angle = coord[:, None] * omega[None, :]
        parts += [np.sin(angle), np.cos(angle)]
    return np.concatenate(parts, axis=1)


class VitModel:
    """Parameters plus structure of the mini-ViT.

    ``head_ids[l]`` maps the current head slots of layer ``l`` to the ids the
    heads had in the unpruned model, so reports stay traceable after surgery.
    """

    def __init__(self, spec: ModelSpec, params: dict[str, Tensor], head_ids: list[list[int]] | None = None):
        self.spec = spec
        self.params = params
        self.head_ids = head_ids or [list(range(h)) for h in spec.heads_per_layer]
        self.check_shapes()

    @classmethod
    def init(cls, spec: ModelSpec, seed: int = 0, scheme: str = "fan_in") -> "VitModel":
        """Random initialisation; biases zero, LayerNorm gains one.

        ``scheme="fan_in"`` draws weight matrices from a 2-sigma truncated
        normal with std ``1/sqrt(fan_in)`` and starts the (learnable)
        position embeddings from a 2-D sin/cos table. The query projection
        starts at zero, so every head starts from exactly uniform attention
        while the key side still passes gradient to it. ``scheme="vit"`` uses
        std 0.02 everywhere; under plain SGD at this scale its attention
        stays uniform, so it is kept for comparison only.
        """
        if scheme not in ("fan_in", "vit"):
            raise ContractError(f"unknown init scheme {scheme!r}")
        rng = np.random.default_rng(seed)
        D, hid = spec.embed_dim, spec.mlp_dim

        def w(shape):
            return _trunc_normal(rng, shape, 0.02 if scheme == "vit" else 1.0 / math.sqrt(shape[0]))

        pos = _trunc_normal(rng, (1, spec.num_tokens, D))
        if scheme == "fan_in" and D % 4 == 0:
            pos[0, 0] = 0.0
            pos[0, 1:] = sincos_position_table(spec.image_size // spec.patch_size, D)
        p: dict[str, np.ndarray] = {
            "patch_embed.weight": w((spec.patch_dim, D)),
            "patch_embed.bias": np.zeros(D),
            "cls_token": _trunc_normal(rng, (1, 1, D)),
            "pos_embed": pos,
        }
        for l, H in enumerate(spec.heads_per_layer):
            width = H * spec.head_dim
            p[f"blocks.{l}.norm1.gamma"] = np.ones(D)
            p[f"blocks.{l}.norm1.beta"] = np.zeros(D)
            p[f"blocks.{l}.attn.wq"] = np.zeros((D, width)) if scheme == "fan_in" else w((D, width))
            p[f"blocks.{l}.attn.wk"] = w((D, width))
            p[f"blocks.{l}.attn.wv"] = w((D, width))
            p[f"blocks.{l}.attn.wo"] = w((width, D))
            p[f"blocks.{l}.attn.bo"] = np.zeros(D)
            p[f"blocks.{l}.norm2.gamma"] = np.ones(D)
            p[f"blocks.{l}.norm2.beta"] = np.zeros(D)
            p[f"blocks.{l}.mlp.fc1.weight"] = w((D, hid))
            p[f"blocks.{l}.mlp.fc1.bias"] = np.zeros(hid)
            p[f"blocks.{l}.mlp.fc2.weight"] = w((hid, D))
            p[f"blocks.{l}.mlp.fc2.bias"] = np.zeros(D)
        p["norm.gamma"] = np.ones(D)
        p["norm.beta"] = np.zeros(D)
        p["head.weight"] = w((D, spec.num_classes))
        p["head.bias"] = np.zeros(spec.num_classes)
        return cls(spec, {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()})

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        s = self.spec
        D, hid = s.embed_dim, s.mlp_dim
        shapes = {
            "patch_embed.weight": (s.patch_dim, D),
            "patch_embed.bias": (D,),
            "cls_token": (1, 1, D),
            "pos_embed": (1, s.num_tokens, D),
        }
        for l, H in enumerate(s.heads_per_layer):
            w = H * s.head_dim
            shapes.update({
                f"blocks.{l}.norm1.gamma": (D,), f"blocks.{l}.norm1.beta": (D,),
                f"blocks.{l}.attn.wq": (D, w), f"blocks.{l}.attn.wk": (D, w),
                f"blocks.{l}.attn.wv": (D, w), f"blocks.{l}.attn.wo": (w, D),
                f"blocks.{l}.attn.bo": (D,),
                f"blocks.{l}.norm2.gamma": (D,), f"blocks.{l}.norm2.beta": (D,),
                f"blocks.{l}.mlp.fc1.weight": (D, hid), f"blocks.{l}.mlp.fc1.bias": (hid,),
                f"blocks.{l}.mlp.fc2.weight": (hid, D), f"blocks.{l}.mlp.fc2.bias": (D,),
            })
        shapes.update({"norm.gamma": (D,), "norm.beta": (D,),
                       "head.weight": (D, s.num_classes), "head.bias": (s.num_classes,)})
        return shapes

    def check_shapes(self) -> None:
        expected = self.expected_shapes()
        if list(expected) != list(self.params):
            missing = set(expected) ^ set(self.params)
            raise DimensionError(f"parameter set does not match spec: {sorted(missing) or 'order differs'}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise DimensionError(f"{name}: shape {self.params[name].shape} != expected {shape}")
        if [len(ids) for ids in self.head_ids] != self.spec.heads_per_layer:
            raise DimensionError("head_ids do not match heads_per_layer")

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k] = Tensor(v, requires_grad=True, name=k)
        self.check_shapes()

    def clone(self) -> "VitModel":
        params = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()}
        return VitModel(copy.deepcopy(self.spec), params, copy.deepcopy(self.head_ids))

    def num_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def msa_param_count(self) -> int:
        """Weights of the four MSA projection matrices, summed over layers."""
        return sum(
            self.params[f"blocks.{l}.attn.{w}"].data.size
            for l in range(self.spec.layers)
            for w in ("wq", "wk", "wv", "wo")
        )

    def __call__(self, images, capture=None, trace=None) -> Tensor:
        return forward(self, images, capture=capture, trace=trace)


def patchify(images, spec: ModelSpec) -> np.ndarray:
    """``[B, C, H, W]`` -> ``[B, num_patches, C*p*p]`` in raster order."""
    x = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
    if x.ndim != 4 or x.shape[1:] != (spec.channels, spec.image_size, spec.image_size):
        raise DimensionError(
            f"images must be [B, {spec.channels}, {spec.image_size}, {spec.image_size}], got {x.shape}"
        )
    B, C, S, p = x.shape[0], spec.channels, spec.image_size, spec.patch_size
    g = S // p
    x = x.reshape(B, C, g, p, g, p).transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(B, g * g, C * p * p))


def _msa(model: VitModel, l: int, h: Tensor, capture, trace) -> Tensor:
    s, P = model.spec, model.params
    B, N, _ = h.shape
    H, d = s.heads_per_layer[l], s.head_dim
    pre = f"blocks.{l}.attn."
    with mac_scope(l, "qkv"):
        q = T.matmul(h, P[pre + "wq"])
        k = T.matmul(h, P[pre + "wk"])
        v = T.matmul(h, P[pre + "wv"])
    keys = k
    q = T.transpose(T.reshape(q, (B, N, H, d)), (0, 2, 1, 3))
    k = T.transpose(T.reshape(k, (B, N, H, d)), (0, 2, 1, 3))
    v = T.transpose(T.reshape(v, (B, N, H, d)), (0, 2, 1, 3))
    idx = s.retained_kv_indices[l]
    if idx is not None:
        k = T.gather(k, idx, axis=2)
        v = T.gather(v, idx, axis=2)
    with mac_scope(l, "attn"):
        scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(d))
        attn = T.softmax(scores)
        o = T.matmul(attn, v)
    if capture is not None:
        capture.observe(l, attn, idx)
    if trace is not None:
        trace[l] = {"attn": attn, "keys": keys, "head_out": o}
    o = T.reshape(T.transpose(o, (0, 2, 1, 3)), (B, N, H * d))
    with mac_scope(l, "out"):
        return T.add(T.matmul(o, P[pre + "wo"]), P[pre + "bo"])


def forward(model: VitModel, images, capture: "AttentionCapture | None" = None, trace: dict | None = None) -> Tensor:
    """Logits ``[B, num_classes]``.

    With ``capture`` every layer's post-softmax attention is accumulated into
    its running mean; with ``trace`` the per-layer attention, key and head
    output tensors are stored so their gradients can be read after backward.
    """
    s, P = model.spec, model.params
    patches = Tensor(patchify(images, s))
    B, D = patches.shape[0], s.embed_dim
    with mac_scope("embed"):
        z = T.add(T.matmul(patches, P["patch_embed.weight"]), P["patch_embed.bias"])
    cls = T.broadcast_to(P["cls_token"], (B, 1, D))
    z = T.add(T.concat([cls, z], axis=1), P["pos_embed"])
    for l in range(s.layers):
        pre = f"blocks.{l}."
        h = T.layernorm(z, P[pre + "norm1.gamma"], P[pre + "norm1.beta"])
        z = T.add(z, _msa(model, l, h, capture, trace))
        h = T.layernorm(z, P[pre + "norm2.gamma"], P[pre + "norm2.beta"])
        with mac_scope(l, "mlp"):
            h = T.gelu(T.add(T.matmul(h, P[pre + "mlp.fc1.weight"]), P[pre + "mlp.fc1.bias"]))
            h = T.add(T.matmul(h, P[pre + "mlp.fc2.weight"]), P[pre + "mlp.fc2.bias"])
        z = T.add(z, h)
    z = T.layernorm(z, P["norm.gamma"], P["norm.beta"])
    cls_out = T.reshape(T.gather(z, [0], axis=1), (B, D))
    with mac_scope("head"):
        return T.add(T.matmul(cls_out, P["head.weight"]), P["head.bias"])


def predict(model: VitModel, images, batch_size: int = 256) -> np.ndarray:
    with T.no_grad():
        out = [forward(model, images[i:i + batch_size]).data for i in range(0, len(images), batch_size)]
    return np.concatenate(out, axis=0)


def apply_kv_index(layer: int, indices, model: VitModel) -> None:
    """Install the retained key/value token set of ``layer`` (index 0 is mandatory)."""
    if not 0 <= layer < model.spec.layers:
        raise ContractError(f"layer {layer} out of range")
    idx = check_kv_indices(indices, model.spec.num_tokens, layer)
    model.spec.retained_kv_indices[layer] = idx


def remove_heads(layer: int, head_ids, model: VitModel) -> None:
    """Physically delete the parameter blocks of heads ``head_ids`` (current slots) in ``layer``."""
    s = model.spec
    if not 0 <= layer < s.layers:
        raise ContractError(f"layer {layer} out of range")
    H, d = s.heads_per_layer[layer], s.head_dim
    drop = sorted({int(h) for h in head_ids})
    if any(h < 0 or h >= H for h in drop):
        raise ContractError(f"layer {layer}: head ids {drop} not all in [0, {H})")
    if len(drop) >= H:
        raise DegenerateLayerError(f"layer {layer}: removing {len(drop)} of {H} heads leaves none")
    if not drop:
        return
    keep = [h for h in range(H) if h not in drop]
    cols = np.concatenate([np.arange(h * d, (h + 1) * d) for h in keep])
    pre = f"blocks.{layer}.attn."
    for name in ("wq", "wk", "wv"):
        model.params[pre + name] = Tensor(model.params[pre + name].data[:, cols], requires_grad=True, name=pre + name)
    model.params[pre + "wo"] = Tensor(model.params[pre + "wo"].data[cols, :], requires_grad=True, name=pre + "wo")
    s.heads_per_layer[layer] = len(keep)
    model.head_ids[layer] = [model.head_ids[layer][h] for h in keep]
    model.check_shapes()


def zero_mask_heads(layer: int, head_ids, model: VitModel) -> None:
    """Zero the ``W^o`` row blocks of ``head_ids`` without changing any shape."""
    d = model.spec.head_dim
    name = f"blocks.{layer}.attn.wo"
    wo = model.params[name].data.copy()
    for h in head_ids:
        wo[h * d:(h + 1) * d, :] = 0.0
    model.params[name] = Tensor(wo, requires_grad=True, name=name)


def attention_entropy(attn: np.ndarray) -> np.ndarray:
    """Sum over rows and columns of ``-A ln A`` over the last two axes (0 ln 0 = 0)."""
    a = np.asarray(attn, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(a > 0, -a * np.log(np.where(a > 0, a, 1.0)), 0.0)
    return terms.sum(axis=(-1, -2))


class _LayerCapture:
    __slots__ = ("attn_sum", "grad_sum", "entropy_sum", "samples", "grad_samples", "kv_indices")

    def __init__(self, shape, kv_indices):
        self.attn_sum = np.zeros(shape)
        self.grad_sum = np.zeros(shape)
        self.entropy_sum = np.zeros(shape[0])
        self.samples = 0
        self.grad_samples = 0
        self.kv_indices = kv_indices


class AttentionCapture:
    """Running means of per-head attention maps and their loss gradients.

    Call ``collect_gradients()`` after each backward pass; gradients then
    correspond to the loss as reduced by the caller (calibration uses a
    per-sample summed loss so every map gets its own sample's gradient).
    """

    def __init__(self):
        self.layers: dict[int, _LayerCapture] = {}
        self._pending: list[tuple[int, Tensor]] = []

    def observe(self, layer: int, attn: Tensor, kv_indices=None) -> None:
        a = attn.data
        shape = a.shape[1:]
        rec = self.layers.get(layer)
        if rec is None:
            rec = self.layers[layer] = _LayerCapture(shape, None if kv_indices is None else list(kv_indices))
        elif rec.attn_sum.shape != shape:
            raise ContractError(f"layer {layer}: attention shape changed from {rec.attn_sum.shape} to {shape}")
        rec.attn_sum += a.sum(axis=0)
        rec.entropy_sum += attention_entropy(a).sum(axis=0)
        rec.samples += a.shape[0]
        if attn.requires_grad:
            self._pending.append((layer, attn))

    def collect_gradients(self) -> None:
        for layer, attn in self._pending:
            if attn.grad is None:
                raise NotCalibratedError(f"layer {layer}: attention map received no gradient")
            rec = self.layers[layer]
            rec.grad_sum += attn.grad.sum(axis=0)
            rec.grad_samples += attn.shape[0]
        self._pending.clear()

    def discard_pending(self) -> None:
        self._pending.clear()

    def _layer(self, layer: int) -> _LayerCapture:
        rec = self.layers.get(layer)
        if rec is None or rec.samples == 0:
            raise NotCalibratedError(f"no attention captured for layer {layer}")
        return rec

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def samples(self, layer: int = 0) -> int:
        return self._layer(layer).samples

    def num_heads(self, layer: int) -> int:
        return self._layer(layer).attn_sum.shape[0]

    def kv_indices(self, layer: int) -> list[int]:
        rec = self._layer(layer)
        n_kv = rec.attn_sum.shape[-1]
        return list(range(n_kv)) if rec.kv_indices is None else list(rec.kv_indices)

    def attention(self, layer: int, head: int | None = None) -> np.ndarray:
        rec = self._layer(layer)
        maps = rec.attn_sum / rec.samples
        return maps if head is None else maps[head]

    def has_gradients(self, layer: int) -> bool:
        rec = self.layers.get(layer)
        return rec is not None and rec.grad_samples > 0

    def gradient(self, layer: int, head: int | None = None) -> np.ndarray:
        rec = self._layer(layer)
        if rec.grad_samples == 0:
            raise NotCalibratedError(f"layer {layer}: no gradient maps; run backward during capture")
        grads = rec.grad_sum / rec.grad_samples
        return grads if head is None else grads[head]

    def mean_sample_entropy(self, layer: int, head: int) -> float:
        rec = self._layer(layer)
        return float(rec.entropy_sum[head] / rec.samples)
