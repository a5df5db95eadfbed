"""Segment-recurrent model zoo.

Three variants share one transformer substrate and differ in what carries
information between segments:

* ``rmt``: one shared block of memory tokens, prepended (read) and appended
  (write) to every segment, passed through all layers; the final layer's
  write block becomes the next segment's memory input.
* ``prmt``: per-layer memory tokens appended to the segment; each layer's
  output memory block feeds the same layer at the next segment.
* ``armt`` / ``armt_no_gamma``: like prmt, plus a per-layer fast-weight
  associative state. Before a segment is read, the previous segment's
  memory tokens are written into the state; every position then gets a
  residual associative read. ``armt_no_gamma`` pins the normalization
  correction to 1 and is otherwise identical.

The per-segment carry has constant size, so cost per segment does not grow
with the number of segments processed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import torch
import torch.nn.functional as F
import torch.utils.checkpoint
from torch import Tensor, nn

from .assoc import (
    AssociativeState,
    AssocProjections,
    FeatureMapSpec,
    assoc_block,
    insert_features,
    phi,
)
from .errors import ConfigError, ShapeError
from .nn import INIT_STD, TransformerBlock, causal_mask, causal_mask_with_memory, cross_entropy

VARIANTS = ("armt", "rmt", "prmt", "armt_no_gamma")


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "armt"
    layers: int = 4
    hidden: int = 128
    heads: int = 4
    mem_tokens: int = 10
    d_mem: int = 32
    feature_map: FeatureMapSpec = field(default_factory=FeatureMapSpec)
    vocab: int = 20
    segment_len: int = 16
    max_segments: int = 1024
    gamma_detached: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        for name in ("layers", "hidden", "heads", "mem_tokens", "d_mem", "vocab", "segment_len", "max_segments"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.hidden % self.heads != 0:
            raise ConfigError(f"heads={self.heads} must divide hidden={self.hidden}")
        if self.uses_assoc and self.feature_map.kind == "identity":
            raise ConfigError("identity feature map is a test harness hook, not a trainable config")

    @property
    def uses_assoc(self) -> bool:
        return self.variant in ("armt", "armt_no_gamma")

    @property
    def gamma_enabled(self) -> bool:
        return self.variant != "armt_no_gamma"

    @property
    def d_val(self) -> int:
        return self.d_mem

    @property
    def d_phi(self) -> int:
        return self.feature_map.out_dim(self.d_mem)


@dataclass
class RecurrentCarry:
    """State threaded between segments. `mem` holds one tensor per layer
    ([batch, mem_tokens, hidden]) for armt/prmt and a single tensor for rmt;
    `assoc` holds one associative state per layer for armt variants."""

    mem: list[Tensor]
    assoc: list[AssociativeState] | None
    segments_seen: int = 0

    @property
    def batch(self) -> int:
        return self.mem[0].shape[0]

    def float_count(self) -> int:
        """Recurrent floats per sample."""
        n = sum(m.numel() for m in self.mem) // self.batch
        if self.assoc is not None:
            n += sum(s.float_count() for s in self.assoc)
        return n

    def detach(self) -> "RecurrentCarry":
        return RecurrentCarry(
            [m.detach() for m in self.mem],
            None if self.assoc is None else [s.detach() for s in self.assoc],
            self.segments_seen,
        )

    def clone(self) -> "RecurrentCarry":
        return RecurrentCarry(
            [m.clone() for m in self.mem],
            None if self.assoc is None else [s.clone() for s in self.assoc],
            self.segments_seen,
        )


def count_recurrent_floats(config: ModelConfig) -> int:
    """Closed-form size of the recurrent state, in floats per sample."""
    mem = config.mem_tokens * config.hidden
    if config.variant == "rmt":
        return mem
    if config.variant == "prmt":
        return config.layers * mem
    return config.layers * (config.d_val * config.d_phi + config.d_phi + mem)


class SegmentRecurrentModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config
        self.wte = nn.Embedding(c.vocab, c.hidden)
        self.wpe = nn.Embedding(c.segment_len, c.hidden)
        self.blocks = nn.ModuleList(
            TransformerBlock(c.hidden, c.heads, layer_index=i) for i in range(c.layers)
        )
        if c.uses_assoc:
            self.assoc_proj = nn.ModuleList(
                AssocProjections(c.hidden, c.d_mem, c.d_val, c.feature_map) for _ in range(c.layers)
            )
        n_mem_sets = 1 if c.variant == "rmt" else c.layers
        self.mem_init = nn.ParameterList(
            nn.Parameter(torch.empty(c.mem_tokens, c.hidden)) for _ in range(n_mem_sets)
        )
        self.ln_f = nn.LayerNorm(c.hidden)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        nn.init.normal_(self.wte.weight, mean=0.0, std=INIT_STD)
        nn.init.normal_(self.wpe.weight, mean=0.0, std=INIT_STD)
        for m in self.mem_init:
            nn.init.normal_(m, mean=0.0, std=INIT_STD)

    @property
    def dtype(self) -> torch.dtype:
        return self.wte.weight.dtype

    @property
    def device(self) -> torch.device:
        return self.wte.weight.device

    def initial_carry(self, batch: int) -> RecurrentCarry:
        c = self.config
        mem = [m.unsqueeze(0).expand(batch, -1, -1) for m in self.mem_init]
        assoc = None
        if c.uses_assoc:
            assoc = [
                AssociativeState.zeros(batch, c.d_val, c.d_phi, dtype=self.dtype, device=self.device)
                for _ in range(c.layers)
            ]
        return RecurrentCarry(mem, assoc, segments_seen=0)

    def _check_tokens(self, tokens: Tensor) -> None:
        c = self.config
        if tokens.ndim != 2:
            raise ShapeError(f"tokens must be [batch, seq], got {tuple(tokens.shape)}")
        if tokens.shape[1] > c.segment_len:
            raise ShapeError(f"segment of {tokens.shape[1]} tokens exceeds segment_len={c.segment_len}")
        if tokens.numel() and (tokens.min() < 0 or tokens.max() >= c.vocab):
            raise ShapeError(f"token ids outside [0, {c.vocab})")

    def _head(self, x: Tensor) -> Tensor:
        # Output embedding tied to the input embedding.
        return F.linear(self.ln_f(x), self.wte.weight)

    def _write_memory(self, state: AssociativeState, m_in: Tensor, layer: int) -> AssociativeState:
        """Sequentially insert each carried memory token into the layer's state."""
        c = self.config
        proj = self.assoc_proj[layer]
        k_phi = phi(proj.w_key(m_in), c.feature_map)
        v = proj.w_value(m_in)
        beta = torch.sigmoid(proj.w_beta(m_in))
        for i in range(c.mem_tokens):
            state = insert_features(
                state,
                v[:, i],
                k_phi[:, i],
                beta[:, i],
                gamma_detached=c.gamma_detached,
                gamma_enabled=c.gamma_enabled,
            )
        return state

    def forward_segment(self, carry: RecurrentCarry, tokens: Tensor) -> tuple[Tensor, RecurrentCarry]:
        """Process one segment; returns per-position logits and the next carry."""
        self._check_tokens(tokens)
        c = self.config
        b, t = tokens.shape
        pos = torch.arange(t, device=tokens.device)
        x = self.wte(tokens) + self.wpe(pos)

        if c.variant == "rmt":
            m = carry.mem[0]
            h = torch.cat([m, x, m], dim=1)
            mask = causal_mask(h.shape[1], device=tokens.device)
            for block in self.blocks:
                h = block(h, mask=mask)
            n = c.mem_tokens
            logits = self._head(h[:, n : n + t])
            new_carry = RecurrentCarry([h[:, n + t :]], None, carry.segments_seen + 1)
            return logits, new_carry

        mask = causal_mask_with_memory(t, c.mem_tokens, device=tokens.device)
        new_mem: list[Tensor] = []
        new_assoc: list[AssociativeState] | None = [] if c.uses_assoc else None
        for layer, block in enumerate(self.blocks):
            m_in = carry.mem[layer]
            h = torch.cat([x, m_in], dim=1)
            if c.uses_assoc:
                state = carry.assoc[layer]
                if carry.segments_seen > 0:
                    state = self._write_memory(state, m_in, layer)
                h = assoc_block(h, state, self.assoc_proj[layer])
                new_assoc.append(state)
            h = block(h, mask=mask)
            x = h[:, :t]
            new_mem.append(h[:, t:])
        logits = self._head(x)
        return logits, RecurrentCarry(new_mem, new_assoc, carry.segments_seen + 1)

    def _flatten_carry(self, carry: RecurrentCarry) -> list[Tensor]:
        flat = list(carry.mem)
        if carry.assoc is not None:
            for st in carry.assoc:
                flat.append(st.A)
                flat.append(st.z)
        return flat

    def _unflatten_carry(self, flat: Sequence[Tensor], segments_seen: int) -> RecurrentCarry:
        n_mem = 1 if self.config.variant == "rmt" else self.config.layers
        mem = list(flat[:n_mem])
        assoc = None
        if self.config.uses_assoc:
            rest = flat[n_mem:]
            assoc = [AssociativeState(rest[2 * i], rest[2 * i + 1]) for i in range(self.config.layers)]
        return RecurrentCarry(mem, assoc, segments_seen)

    def _segment_recomputed(self, carry: RecurrentCarry, tokens: Tensor) -> tuple[Tensor, RecurrentCarry]:
        """forward_segment under activation recomputation: only the segment
        boundary carry is kept alive for backward, which caps BPTT memory at
        one segment's activations regardless of sequence length."""

        def run(tokens: Tensor, *flat: Tensor):
            logits, new_carry = self.forward_segment(
                self._unflatten_carry(flat, carry.segments_seen), tokens
            )
            return (logits, *self._flatten_carry(new_carry))

        out = torch.utils.checkpoint.checkpoint(
            run, tokens, *self._flatten_carry(carry), use_reentrant=False
        )
        return out[0], self._unflatten_carry(out[1:], carry.segments_seen + 1)

    def forward_sequence(
        self,
        segments: Sequence[Tensor],
        loss_masks: Sequence[Tensor | None],
        carry: RecurrentCarry | None = None,
        bptt_window: int | None = None,
        recompute: bool = False,
    ) -> tuple[Tensor, list[Tensor], RecurrentCarry]:
        """Fold forward_segment over a segment list, threading the carry.

        The loss is the mean negative log-likelihood of tokens whose mask is
        nonzero, each predicted from the preceding position's logits.
        Gradients flow through the carry across all segments unless
        `bptt_window` detaches it every that-many segments. `recompute`
        trades one extra forward pass for near-flat memory; results are
        bit-identical since every op is deterministic.
        """
        if len(segments) == 0:
            raise ShapeError("forward_sequence needs at least one segment")
        if len(segments) > self.config.max_segments:
            raise ShapeError(f"{len(segments)} segments exceeds max_segments={self.config.max_segments}")
        if len(loss_masks) != len(segments):
            raise ShapeError("loss_masks must match segments")
        if carry is None:
            carry = self.initial_carry(segments[0].shape[0])
        use_recompute = recompute and torch.is_grad_enabled()

        logits_all: list[Tensor] = []
        nll_sum = None
        weight_sum = 0.0
        for s, tokens in enumerate(segments):
            if bptt_window is not None and s > 0 and s % bptt_window == 0:
                carry = carry.detach()
            if use_recompute:
                logits, carry = self._segment_recomputed(carry, tokens)
            else:
                logits, carry = self.forward_segment(carry, tokens)
            logits_all.append(logits)
            mask = loss_masks[s]
            if mask is None or not bool(mask.any()):
                continue
            if bool(mask[:, 0].any()):
                raise ShapeError("supervised position 0 has no preceding logits")
            w = mask[:, 1:].to(logits.dtype)
            seg_loss = cross_entropy(logits[:, :-1], tokens[:, 1:], mask[:, 1:])
            seg_weight = float(w.sum())
            term = seg_loss * seg_weight
            nll_sum = term if nll_sum is None else nll_sum + term
            weight_sum += seg_weight
        if nll_sum is None:
            raise ShapeError("no supervised positions in any segment")
        return nll_sum / weight_sum, logits_all, carry


def build_model(config: ModelConfig, seed: int, dtype: torch.dtype = torch.float32) -> SegmentRecurrentModel:
    """Deterministically initialized model; the seed fully determines weights."""
    gen_state = torch.random.get_rng_state()
    try:
        torch.manual_seed(seed)
        model = SegmentRecurrentModel(config)
    finally:
        torch.random.set_rng_state(gen_state)
    return model.to(dtype)


def copy_shared_weights(src: SegmentRecurrentModel, dst: SegmentRecurrentModel) -> None:
    """Copy every parameter whose name and shape exist in both models
    (transformer weights, embeddings, memory-token initializers)."""
    dst_params = dict(dst.named_parameters())
    with torch.no_grad():
        for name, p in src.named_parameters():
            if name in dst_params and dst_params[name].shape == p.shape:
                dst_params[name].copy_(p)


def config_with(config: ModelConfig, **changes) -> ModelConfig:
    return replace(config, **changes)
