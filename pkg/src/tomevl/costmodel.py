"""Analytical multiply-accumulate counts for the connector and a Q-Former.

Convention: one MAC is one multiply plus one add, so FLOPs = 2 * MACs. Only
matrix products are counted: Q/K/V/output projections, attention scores and
value mixing, MLP, cross-attention and output heads. Norms, softmax,
activations and residual adds are excluded. All totals are exact integers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .tokmerge import MergeSchedule, schedule_counts

CONVENTION = (
    "MACs count matrix products only (projections, QK^T, AV, MLP, cross-attention, heads); "
    "norms, softmax, activations and residual adds excluded; FLOPs = 2 x MACs"
)
SCHEMA_VERSION = 1


@dataclass(frozen=True)
class CrossAttention:
    query_len: int  # tokens that attend to the context
    context_len: int
    context_dim: int


@dataclass(frozen=True)
class LayerSpec:
    model_dim: int
    num_heads: int
    mlp_ratio: int
    seq_len_in: int
    seq_len_out: int | None = None
    cross_attention: CrossAttention | None = None
    # self-attention keys may include cached tokens that are not recomputed
    extra_keys: int = 0

    def __post_init__(self):
        out = self.seq_len_in if self.seq_len_out is None else self.seq_len_out
        if out > self.seq_len_in:
            raise ValueError("seq_len_out must not exceed seq_len_in")
        object.__setattr__(self, "seq_len_out", out)


def macs_linear(tokens: int, d_in: int, d_out: int) -> int:
    return tokens * d_in * d_out


def macs_transformer_layer(spec: LayerSpec) -> int:
    """Attention on the incoming length, MLP on the outgoing (post-merge) length."""
    D, L = spec.model_dim, spec.seq_len_in
    keys = L + spec.extra_keys
    total = 4 * macs_linear(L, D, D)  # q, k, v, out
    total += 2 * L * keys * D  # QK^T and AV, summed over heads
    if spec.cross_attention is not None:
        ca = spec.cross_attention
        total += 2 * macs_linear(ca.query_len, D, D)  # q, out
        total += 2 * macs_linear(ca.context_len, ca.context_dim, D)  # k, v
        total += 2 * ca.query_len * ca.context_len * D
    hidden = D * spec.mlp_ratio
    total += macs_linear(spec.seq_len_out, D, hidden) + macs_linear(spec.seq_len_out, hidden, D)
    return total


@dataclass
class CostReport:
    entries: list[tuple[str, int]] = field(default_factory=list)
    convention: str = CONVENTION
    meta: dict = field(default_factory=dict)

    @property
    def total_macs(self) -> int:
        return sum(m for _, m in self.entries)

    @property
    def total_flops(self) -> int:
        return 2 * self.total_macs

    def subtotal(self, prefix: str) -> int:
        return sum(m for name, m in self.entries if name.startswith(prefix))

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "cost_report",
            "meta": self.meta,
            "convention": self.convention,
            "entries": [{"name": n, "macs": m, "flops": 2 * m} for n, m in self.entries],
            "total_macs": self.total_macs,
            "total_flops": self.total_flops,
        }

    def to_tsv(self) -> str:
        lines = ["component\tmacs\tflops"]
        lines += [f"{n}\t{m}\t{2 * m}" for n, m in self.entries]
        lines.append(f"total\t{self.total_macs}\t{self.total_flops}")
        lines.append(f"# {self.convention}")
        return "\n".join(lines) + "\n"


def paper_config(num_layers: int = 12, r: int = 19):
    """Connector at the published width (768, 12 heads)."""
    from .connector import TomeFormerConfig

    return TomeFormerConfig(num_layers=num_layers, model_dim=768, num_heads=12, mlp_ratio=4, r=r)


def macs_tomeformer(cfg, L0: int = 256, encoder_dim: int | None = None, decoder_dim: int | None = None) -> CostReport:
    """Connector cost with the merge schedule shrinking the sequence per layer.

    ``cfg`` is a ``TomeFormerConfig``. Projections are included only when
    ``encoder_dim`` / ``decoder_dim`` are given.
    """
    protected = int(cfg.include_protected_token)
    counts = schedule_counts(L0, MergeSchedule(cfg.r, cfg.num_layers))
    D = cfg.model_dim
    report = CostReport(meta={"model": "tomeformer", "layers": cfg.num_layers, "dim": D, "r": cfg.r, "L0": L0})
    if encoder_dim:
        report.entries.append(("proj_in", macs_linear(L0 + protected, encoder_dim, D)))
    for i in range(cfg.num_layers):
        spec = LayerSpec(D, cfg.num_heads, cfg.mlp_ratio, counts[i] + protected, counts[i + 1] + protected)
        report.entries.append((f"layer{i}", macs_transformer_layer(spec)))
    if decoder_dim:
        report.entries.append(("proj_out", macs_linear(counts[-1] + protected, D, decoder_dim)))
    report.meta["final_tokens"] = counts[-1] + protected
    return report


def _qformer_pass(
    name: str,
    report: CostReport,
    *,
    queries: int,
    text: int,
    image_tokens: int,
    image_dim: int,
    layers: int,
    D: int,
    heads: int,
    cross_cadence: int,
    copies: int = 1,
    cached_keys: int = 0,
):
    seq = queries + text
    for i in range(layers):
        cross = None
        if queries and i % cross_cadence == 0:
            cross = CrossAttention(queries, image_tokens, image_dim)
        spec = LayerSpec(D, heads, 4, seq, cross_attention=cross, extra_keys=cached_keys)
        report.entries.append((f"{name}.layer{i}", copies * macs_transformer_layer(spec)))


def macs_qformer(
    queries: int = 32,
    image_tokens: int = 257,
    layers: int = 12,
    D: int = 768,
    heads: int = 12,
    image_dim: int = 1408,
    cross_cadence: int = 2,
    stage: int = 2,
    text_len: int = 32,
    negatives: int = 2,
    vocab_size: int = 30522,
    include_cached_generation: bool = False,
) -> CostReport:
    """Q-Former cost per sample.

    Stage 2 is one image pass (queries cross-attending to the frozen image
    tokens). Stage 1 adds the three-pass structure: the image pass and a
    text-only pass feed the contrastive loss, and a joint query+text pass runs
    over the positive pair plus ``negatives`` hard negatives. That last pass is
    the one reported as dominating stage 1. The generation step that reuses the
    cached query keys is left out unless ``include_cached_generation``.
    """
    if stage not in (1, 2):
        raise ValueError("stage must be 1 or 2")
    report = CostReport(meta={"model": "qformer", "stage": stage, "layers": layers, "dim": D, "queries": queries})
    common = dict(image_tokens=image_tokens, image_dim=image_dim, layers=layers, D=D, heads=heads, cross_cadence=cross_cadence)
    if layers == 0:
        return report
    _qformer_pass("image", report, queries=queries, text=0, **common)
    if stage == 1:
        _qformer_pass("text", report, queries=0, text=text_len, **common)
        _qformer_pass("multimodal", report, queries=queries, text=text_len, copies=1 + negatives, **common)
        report.entries.append(("multimodal.itm_head", (1 + negatives) * macs_linear(queries, D, 2)))
        if include_cached_generation:
            _qformer_pass("generation", report, queries=0, text=text_len, cached_keys=queries, **common)
            report.entries.append(("generation.lm_head", macs_linear(text_len, D, D) + macs_linear(text_len, D, vocab_size)))
    return report


def caption_pass_macs(report: CostReport) -> int:
    """MACs of the last (joint query+text) stage-1 pass."""
    return report.subtotal("multimodal")


def ablate_r(cfg, L0: int, r_values) -> list[dict]:
    """One row per merge quota: total MACs and final soft-prompt length."""
    from dataclasses import replace

    r_values = list(r_values)
    if not r_values:
        raise ValueError("r list must be nonempty")
    rows = []
    for r in r_values:
        rep = macs_tomeformer(replace(cfg, r=r), L0)
        rows.append({"r": r, "total_macs": rep.total_macs, "final_tokens": rep.meta["final_tokens"]})
    return rows
