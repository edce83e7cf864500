"""Decoder-only model assembly: embeddings, causal attention, memory or
dense-FFN second branches, tied LM head, and exact parameter accounting.

All linear maps are bias-free and every layer norm is affine; that pair of
conventions is what makes the closed-form parameter count land exactly on
the published figures, so it is pinned by a test rather than left folklore.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nm
from .errors import ConfigurationError, DomainError
from .memory_cell import (
    LN_EPS,
    CentroidBank,
    EdgeGraph,
    MemoryCell,
    NavigationParams,
    RoutingResult,
    memory_cell_forward,
)
from .memory_maintenance import MaintenanceConfig
from .memory_objectives import LossWeights
from .numerics import Matrix

GRAPH_MEMORY = "graph_memory"
DENSE_FFN = "dense_ffn"

INIT_STD = 0.02
GATE_INIT = 1.0        # sigmoid ~ 0.731
MOMENTUM_INIT = 4.6    # sigmoid ~ 0.99


@dataclass
class ModelConfig:
    """Architectural hyperparameters plus the memory-side sub-configs."""

    blocks: int = 2
    hidden: int = 64
    heads: int = 4
    nav_dim: int = 16
    slots: int = 16
    context: int = 128
    vocab: int = 257
    p_embed: float = 0.1
    p_attn: float = 0.1
    tau_max: float = 1.0
    tau_min: float = 0.1
    eps_grav: float = 0.01
    block_kind: str = GRAPH_MEMORY
    ffn_width: int = 256
    loss_weights: LossWeights = field(default_factory=LossWeights)
    maintenance: MaintenanceConfig = field(default_factory=MaintenanceConfig)

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        if isinstance(self.maintenance, dict):
            self.maintenance = MaintenanceConfig(**self.maintenance)
        self.validate()

    def validate(self) -> None:
        dims = {"hidden": self.hidden, "heads": self.heads,
                "nav_dim": self.nav_dim, "slots": self.slots,
                "context": self.context, "vocab": self.vocab}
        for name, value in dims.items():
            if value < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {value}")
        if self.blocks < 0:
            raise ConfigurationError("blocks must be >= 0")
        if self.hidden % self.heads != 0:
            raise ConfigurationError(
                f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.slots < 2:
            raise ConfigurationError("slots must be >= 2 (diagonal-masked transitions)")
        for name in ("p_embed", "p_attn"):
            p = getattr(self, name)
            if not 0.0 <= p < 1.0:
                raise ConfigurationError(f"{name} must be in [0, 1)")
        if not 0.0 < self.tau_min <= self.tau_max:
            raise ConfigurationError("need 0 < tau_min <= tau_max")
        if self.eps_grav <= 0.0:
            raise ConfigurationError("eps_grav must be > 0")
        if self.block_kind not in (GRAPH_MEMORY, DENSE_FFN):
            raise ConfigurationError(f"unknown block_kind {self.block_kind!r}")
        if self.block_kind == DENSE_FFN and self.ffn_width < 1:
            raise ConfigurationError("ffn_width must be >= 1 for dense_ffn blocks")
        self.loss_weights.validate(self.slots)
        self.maintenance.validate()

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads


def default_loss_weights_for(slots: int) -> LossWeights:
    """Published defaults with the slot-count-dependent usage target F/4."""
    return LossWeights(n_target=slots / 4.0)


@dataclass
class DenseFFN:
    w1: Matrix
    w2: Matrix
    ln2_gain: Matrix
    ln2_bias: Matrix


@dataclass
class TransformerBlock:
    ln1_gain: Matrix
    ln1_bias: Matrix
    w_qkv: Matrix
    w_o: Matrix
    cell: MemoryCell | None = None
    ffn: DenseFFN | None = None

    def __post_init__(self):
        if (self.cell is None) == (self.ffn is None):
            raise ConfigurationError("block needs exactly one of cell / ffn")

    @property
    def kind(self) -> str:
        return GRAPH_MEMORY if self.cell is not None else DENSE_FFN


class Model:
    """Parameter container plus the non-trainable per-block memory state."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        h, v, t_max = config.hidden, config.vocab, config.context

        def linear(rows, cols, name):
            return Matrix(rng.normal(0.0, INIT_STD, size=(rows, cols)), name=name)

        def ln_pair(name):
            return (Matrix(np.ones((1, h)), name=f"{name}.gain"),
                    Matrix(np.zeros((1, h)), name=f"{name}.bias"))

        self.tok_emb = linear(v, h, "tok_emb")
        self.pos_emb = linear(t_max, h, "pos_emb")
        self.final_ln_gain, self.final_ln_bias = ln_pair("final_ln")

        self.blocks: list[TransformerBlock] = []
        for i in range(config.blocks):
            ln1_g, ln1_b = ln_pair(f"block{i}.ln1")
            ln2_g, ln2_b = ln_pair(f"block{i}.ln2")
            w_qkv = linear(h, 3 * h, f"block{i}.attn.w_qkv")
            w_o = linear(h, h, f"block{i}.attn.w_o")
            if config.block_kind == GRAPH_MEMORY:
                f = config.slots
                raw = rng.normal(0.0, 1.0, size=(f, h))
                centroids = Matrix(raw / np.linalg.norm(raw, axis=1, keepdims=True),
                                   name=f"block{i}.cell.centroids")
                ln_c_g, ln_c_b = ln_pair(f"block{i}.cell.ln_c")
                bank = CentroidBank(
                    centroids=centroids, ln_c_gain=ln_c_g, ln_c_bias=ln_c_b,
                    usage=np.full(f, 1.0 / f), age=np.zeros(f, dtype=np.int64),
                    gate=Matrix([[GATE_INIT]], name=f"block{i}.cell.gate"),
                    momentum=Matrix([[MOMENTUM_INIT]], name=f"block{i}.cell.momentum"),
                )
                graph = EdgeGraph(edges=Matrix(np.zeros((f, f)),
                                               name=f"block{i}.cell.edges"))
                ln_d_g, ln_d_b = ln_pair(f"block{i}.cell.ln_disp")
                nav = NavigationParams(
                    w_q=linear(h, config.nav_dim, f"block{i}.cell.w_q"),
                    w_k=linear(h, config.nav_dim, f"block{i}.cell.w_k"),
                    ln_disp_gain=ln_d_g, ln_disp_bias=ln_d_b,
                )
                cell = MemoryCell(bank=bank, graph=graph, nav=nav,
                                  ln2_gain=ln2_g, ln2_bias=ln2_b)
                block = TransformerBlock(ln1_gain=ln1_g, ln1_bias=ln1_b,
                                         w_qkv=w_qkv, w_o=w_o, cell=cell)
            else:
                ffn = DenseFFN(w1=linear(h, config.ffn_width, f"block{i}.ffn.w1"),
                               w2=linear(config.ffn_width, h, f"block{i}.ffn.w2"),
                               ln2_gain=ln2_g, ln2_bias=ln2_b)
                block = TransformerBlock(ln1_gain=ln1_g, ln1_bias=ln1_b,
                                         w_qkv=w_qkv, w_o=w_o, ffn=ffn)
            self.blocks.append(block)

    def parameters(self) -> dict[str, Matrix]:
        """Trainable parameters by name; the LM head is the token embedding."""
        params = {"tok_emb": self.tok_emb, "pos_emb": self.pos_emb,
                  "final_ln.gain": self.final_ln_gain,
                  "final_ln.bias": self.final_ln_bias}
        for i, block in enumerate(self.blocks):
            p = f"block{i}"
            params[f"{p}.ln1.gain"] = block.ln1_gain
            params[f"{p}.ln1.bias"] = block.ln1_bias
            params[f"{p}.attn.w_qkv"] = block.w_qkv
            params[f"{p}.attn.w_o"] = block.w_o
            if block.cell is not None:
                cell = block.cell
                params[f"{p}.ln2.gain"] = cell.ln2_gain
                params[f"{p}.ln2.bias"] = cell.ln2_bias
                params[f"{p}.cell.centroids"] = cell.bank.centroids
                params[f"{p}.cell.ln_c.gain"] = cell.bank.ln_c_gain
                params[f"{p}.cell.ln_c.bias"] = cell.bank.ln_c_bias
                params[f"{p}.cell.gate"] = cell.bank.gate
                params[f"{p}.cell.momentum"] = cell.bank.momentum
                params[f"{p}.cell.edges"] = cell.graph.edges
                params[f"{p}.cell.w_q"] = cell.nav.w_q
                params[f"{p}.cell.w_k"] = cell.nav.w_k
                params[f"{p}.cell.ln_disp.gain"] = cell.nav.ln_disp_gain
                params[f"{p}.cell.ln_disp.bias"] = cell.nav.ln_disp_bias
            else:
                ffn = block.ffn
                params[f"{p}.ln2.gain"] = ffn.ln2_gain
                params[f"{p}.ln2.bias"] = ffn.ln2_bias
                params[f"{p}.ffn.w1"] = ffn.w1
                params[f"{p}.ffn.w2"] = ffn.w2
        return params

    def memory_state(self) -> dict[str, np.ndarray]:
        state = {}
        for i, block in enumerate(self.blocks):
            if block.cell is not None:
                state[f"block{i}.cell.usage"] = block.cell.bank.usage
                state[f"block{i}.cell.age"] = block.cell.bank.age
        return state

    def state_fingerprint(self) -> str:
        """SHA-256 over all parameters and memory state (mutation detector)."""
        digest = hashlib.sha256()
        for name, p in sorted(self.parameters().items()):
            digest.update(name.encode())
            digest.update(p.data.tobytes())
        for name, arr in sorted(self.memory_state().items()):
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(arr).tobytes())
        return digest.hexdigest()


def _causal_mask(t: int) -> Matrix:
    mask = np.triu(np.full((t, t), -np.inf), k=1)
    return nm.constant(mask, allow_neg_inf=True)


def _dropout(x: Matrix, p: float, rng: np.random.Generator | None) -> Matrix:
    if p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return nm.mul(x, nm.constant(keep))


def attention_forward(x: Matrix, block: TransformerBlock, config: ModelConfig,
                      rng: np.random.Generator | None = None) -> Matrix:
    """Pre-norm causal multi-head self-attention on one sequence (T x H).

    softmax(QK^T / sqrt(d_h) + causal mask) V per head, heads concatenated
    and output-projected. Attention weights are dropped out in training
    mode (rng given). The residual is added by the caller.
    """
    t = x.rows
    if t > config.context:
        raise ConfigurationError(f"sequence length {t} exceeds context {config.context}")
    x_n = nm.layer_norm(x, block.ln1_gain, block.ln1_bias, LN_EPS)
    qkv = nm.matmul(x_n, block.w_qkv)
    h, n_h, d_h = config.hidden, config.heads, config.head_dim
    mask = _causal_mask(t)
    heads = []
    for i in range(n_h):
        q = nm.slice_cols(qkv, i * d_h, d_h)
        k = nm.slice_cols(qkv, h + i * d_h, d_h)
        v = nm.slice_cols(qkv, 2 * h + i * d_h, d_h)
        scores = nm.scale(nm.matmul(q, nm.transpose(k)), 1.0 / math.sqrt(d_h))
        att = nm.softmax_rows(nm.add(scores, mask))
        att = _dropout(att, config.p_attn, rng)
        heads.append(nm.matmul(att, v))
    return nm.matmul(nm.concat_cols(heads), block.w_o)


def block_forward(x: Matrix, block: TransformerBlock, config: ModelConfig, tau: float,
                  *, adaptive: bool = False, rng: np.random.Generator | None = None,
                  alpha: float = 1.0,
                  seq_bounds: list[tuple[int, int]] | None = None
                  ) -> tuple[Matrix, RoutingResult | None]:
    """One block: attention residual, then the memory or FFN branch.

    ``x`` may stack several sequences row-wise; ``seq_bounds`` lists their
    (start, length) spans so attention stays within each sequence while the
    token-wise second branch runs on the whole stack at once.
    """
    if seq_bounds is None:
        seq_bounds = [(0, x.rows)]
    if len(seq_bounds) == 1 and seq_bounds[0] == (0, x.rows):
        att = attention_forward(x, block, config, rng)
    else:
        pieces = []
        for start, length in seq_bounds:
            xi = nm.slice_rows(x, start, length)
            pieces.append(attention_forward(xi, block, config, rng))
        att = nm.concat_rows(pieces)
    h_state = nm.add(x, att)

    if block.cell is not None:
        return memory_cell_forward(
            h_state, block.cell, tau, adaptive=adaptive,
            eps_grav=config.eps_grav, rho=config.maintenance.rho, alpha=alpha)
    ffn = block.ffn
    z = nm.layer_norm(h_state, ffn.ln2_gain, ffn.ln2_bias, LN_EPS)
    update = nm.matmul(nm.gelu(nm.matmul(z, ffn.w1)), ffn.w2)
    return nm.add(h_state, nm.scale(update, alpha)), None


@dataclass
class ForwardResult:
    logits: Matrix                       # (sum of T_i) x V
    block_results: list[RoutingResult | None]
    block_outputs: list[Matrix]
    seq_bounds: list[tuple[int, int]]


def forward_batch(model: Model, token_rows: np.ndarray, *, tau: float,
                  adaptive: bool = False, rng: np.random.Generator | None = None,
                  alpha: float = 1.0) -> ForwardResult:
    """Forward over a (B, T) batch of token ids, sequences stacked row-wise.

    ``rng`` enables dropout (training mode); leave it None for evaluation.
    Write-back, when ``adaptive``, pools all B*T token states per block.
    """
    token_rows = np.asarray(token_rows)
    if token_rows.ndim == 1:
        token_rows = token_rows[None, :]
    b, t = token_rows.shape
    cfg = model.config
    if t > cfg.context:
        raise ConfigurationError(f"sequence length {t} exceeds context {cfg.context}")
    if (token_rows < 0).any() or (token_rows >= cfg.vocab).any():
        raise DomainError("token id out of vocabulary range")

    flat = token_rows.reshape(-1).astype(np.int64)
    positions = np.tile(np.arange(t, dtype=np.int64), b)
    x = nm.add(nm.take_rows(model.tok_emb, flat),
               nm.take_rows(model.pos_emb, positions))
    x = _dropout(x, cfg.p_embed, rng)

    seq_bounds = [(i * t, t) for i in range(b)]
    block_results: list[RoutingResult | None] = []
    block_outputs: list[Matrix] = []
    for block in model.blocks:
        x, result = block_forward(x, block, cfg, tau, adaptive=adaptive, rng=rng,
                                  alpha=alpha, seq_bounds=seq_bounds)
        block_results.append(result)
        block_outputs.append(x)

    x = nm.layer_norm(x, model.final_ln_gain, model.final_ln_bias, LN_EPS)
    logits = nm.matmul(x, nm.transpose(model.tok_emb))  # tied head
    return ForwardResult(logits=logits, block_results=block_results,
                         block_outputs=block_outputs, seq_bounds=seq_bounds)


def model_forward(model: Model, tokens: np.ndarray, *, tau: float,
                  adaptive: bool = False, rng: np.random.Generator | None = None,
                  alpha: float = 1.0) -> ForwardResult:
    """Single-sequence forward; logits row t scores the token at t+1."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 1:
        raise ConfigurationError("model_forward expects one sequence of token ids")
    return forward_batch(model, tokens[None, :], tau=tau, adaptive=adaptive,
                         rng=rng, alpha=alpha)


def parameter_count(config: ModelConfig) -> dict[str, int]:
    """Exact trainable-parameter breakdown under this model's conventions.

    Bias-free linears everywhere; affine layer norms; the tied head adds
    nothing. Matches the published totals for the base and dense-baseline
    instantiations, which pins the conventions.
    """
    h, f, d = config.hidden, config.slots, config.nav_dim
    breakdown = {
        "token_embedding": config.vocab * h,
        "position_embedding": config.context * h,
        "final_ln": 2 * h,
    }
    attn = h * 3 * h + h * h
    lns = 2 * h + 2 * h  # ln1 + ln2
    if config.block_kind == GRAPH_MEMORY:
        second = f * h + f * f + 2 * (h * d) + 2 * h + 2 * h + 2
        breakdown["per_block_memory_cell"] = second
    else:
        second = 2 * (h * config.ffn_width)
        breakdown["per_block_ffn"] = second
    breakdown["per_block_attention"] = attn
    breakdown["per_block_layer_norms"] = lns
    breakdown["per_block_total"] = attn + lns + second
    breakdown["blocks_total"] = config.blocks * breakdown["per_block_total"]
    breakdown["total"] = (breakdown["token_embedding"] + breakdown["position_embedding"]
                          + breakdown["final_ln"] + breakdown["blocks_total"])
    return breakdown


def paper_base_config() -> ModelConfig:
    """The published 82,213,152-parameter graph-memory instantiation."""
    return ModelConfig(blocks=16, hidden=768, heads=12, nav_dim=128, slots=128,
                       context=1024, vocab=50257, block_kind=GRAPH_MEMORY,
                       loss_weights=default_loss_weights_for(128))


def paper_baseline_config() -> ModelConfig:
    """The published ~103M dense baseline (same trunk, two-layer GELU FFN)."""
    return ModelConfig(blocks=16, hidden=768, heads=12, nav_dim=128, slots=128,
                       context=1024, vocab=50257, block_kind=DENSE_FFN,
                       ffn_width=1050, loss_weights=default_loss_weights_for(128))


def desk_config(block_kind: str = GRAPH_MEMORY) -> ModelConfig:
    """Desk-scale default used by the byte-level training demonstration."""
    return ModelConfig(blocks=2, hidden=64, heads=4, nav_dim=16, slots=16,
                       context=128, vocab=257, block_kind=block_kind,
                       ffn_width=256, loss_weights=default_loss_weights_for(16))


def toy_config() -> ModelConfig:
    """Tiny instantiation for finite-difference gradient checks."""
    return ModelConfig(blocks=2, hidden=16, heads=2, nav_dim=4, slots=4,
                       context=8, vocab=11, p_embed=0.0, p_attn=0.0,
                       block_kind=GRAPH_MEMORY,
                       loss_weights=default_loss_weights_for(4))


def clone_config(config: ModelConfig, **overrides) -> ModelConfig:
    return replace(config, **overrides)
