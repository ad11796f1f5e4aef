"""Analytical and instrumented cost of the MSA stack.

Analytical per layer, with ``N`` query tokens, ``N'`` retained key/value
tokens, ``H`` heads of width ``d`` and embedding width ``D``::

    flops  = 2 * N' * H * d * (2D + N)
    params = 4 * D * H * d

With nothing pruned ``N' = N`` and the flops reduce to ``2NHd(2D + N)``.
The instrumented counter runs one forward pass and counts the MACs of every
executed matmul instead. Because keys and values are gathered after
projection, a token-pruned layer still projects all ``N`` tokens; the
difference ``4 * (N - N') * D * H * d`` is reported per layer as the
projection-placement delta.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .tensor import count_macs, no_grad
from .vit import ModelSpec, VitModel, forward

CONVENTION = "1 MAC = 1 FLOP; softmax, scaling and division excluded"


@dataclass
class LayerCost:
    layer: int
    heads: int
    kv_tokens: int
    msa_params: int
    msa_flops_analytical: int
    msa_flops_instrumented: int | None = None
    qkv_macs: int | None = None
    attn_macs: int | None = None
    out_macs: int | None = None
    projection_placement_delta: int | None = None
    mlp_flops: int = 0


@dataclass
class CostReport:
    N: int
    D: int
    d: int
    layers: list[LayerCost]
    convention: str = CONVENTION
    source: str = "analytical"
    totals: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.totals:
            self.totals = self._totals()

    def _totals(self) -> dict:
        def total(attr):
            vals = [getattr(lc, attr) for lc in self.layers]
            return None if any(v is None for v in vals) else int(sum(vals))

        return {
            "heads": total("heads"),
            "kv_tokens": total("kv_tokens"),
            "msa_params": total("msa_params"),
            "msa_flops_analytical": total("msa_flops_analytical"),
            "msa_flops_instrumented": total("msa_flops_instrumented"),
            "qkv_macs": total("qkv_macs"),
            "attn_macs": total("attn_macs"),
            "out_macs": total("out_macs"),
            "projection_placement_delta": total("projection_placement_delta"),
            "mlp_flops": total("mlp_flops"),
        }

    @property
    def msa_params(self) -> int:
        return self.totals["msa_params"]

    @property
    def msa_flops_analytical(self) -> int:
        return self.totals["msa_flops_analytical"]

    @property
    def msa_flops_instrumented(self) -> int | None:
        return self.totals["msa_flops_instrumented"]

    def to_dict(self) -> dict:
        return {
            "format": "amg-cost-1",
            "convention": self.convention,
            "source": self.source,
            "N": self.N,
            "D": self.D,
            "d": self.d,
            "totals": dict(self.totals),
            "layers": [asdict(lc) for lc in self.layers],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "CostReport":
        return cls(N=d["N"], D=d["D"], d=d["d"], layers=[LayerCost(**lc) for lc in d["layers"]],
                   convention=d["convention"], source=d["source"], totals=dict(d["totals"]))

    def render(self) -> str:
        cols = [("layer", "layer"), ("H", "heads"), ("N'", "kv_tokens"), ("msa_params", "msa_params"),
                ("flops_eq", "msa_flops_analytical"), ("flops_run", "msa_flops_instrumented"),
                ("delta", "projection_placement_delta"), ("mlp_flops", "mlp_flops")]
        rows = [[_fmt(getattr(lc, attr)) for _, attr in cols] for lc in self.layers]
        rows.append(["total"] + [_fmt(self.totals.get(attr)) for _, attr in cols[1:]])
        widths = [max(len(h), *(len(r[i]) for r in rows)) for i, (h, _) in enumerate(cols)]
        lines = [f"# {self.source} cost, N={self.N} D={self.D} d={self.d}; {self.convention}"]
        lines.append("  ".join(h.rjust(w) for (h, _), w in zip(cols, widths)))
        lines.extend("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows)
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    return "-" if v is None else str(v)


def msa_flops(n_query: int, n_kv: int, D: int, heads: int, d: int) -> int:
    return 2 * n_kv * heads * d * (2 * D + n_query)


def msa_params(D: int, heads: int, d: int) -> int:
    return 4 * D * heads * d


def analytical_cost(spec: ModelSpec) -> CostReport:
    spec.validate()
    N, D, d = spec.num_tokens, spec.embed_dim, spec.head_dim
    layers = []
    for l, H in enumerate(spec.heads_per_layer):
        n_kv = spec.kv_count(l)
        layers.append(LayerCost(
            layer=l, heads=H, kv_tokens=n_kv,
            msa_params=msa_params(D, H, d),
            msa_flops_analytical=msa_flops(N, n_kv, D, H, d),
            mlp_flops=2 * N * D * spec.mlp_dim,
        ))
    return CostReport(N=N, D=D, d=d, layers=layers)


def instrumented_cost(model: VitModel, sample) -> CostReport:
    """Analytical report augmented with MACs counted from a real forward pass.

    Counts are per image: the pass over ``sample`` is divided by its batch
    size, which is exact since every matmul is linear in the batch extent.
    """
    sample = np.asarray(getattr(sample, "data", sample), dtype=np.float64)
    batch = sample.shape[0]
    with no_grad(), count_macs() as counter:
        forward(model, sample)
    report = analytical_cost(model.spec)
    N, D, d = report.N, report.D, report.d
    for lc in report.layers:
        lc.qkv_macs = counter.by_scope.get((lc.layer, "qkv"), 0) // batch
        lc.attn_macs = counter.by_scope.get((lc.layer, "attn"), 0) // batch
        lc.out_macs = counter.by_scope.get((lc.layer, "out"), 0) // batch
        lc.msa_flops_instrumented = lc.qkv_macs + lc.attn_macs + lc.out_macs
        lc.projection_placement_delta = lc.msa_flops_instrumented - lc.msa_flops_analytical
        lc.mlp_flops = counter.by_scope.get((lc.layer, "mlp"), 0) // batch
    report.source = "instrumented"
    report.totals = report._totals()
    return report
