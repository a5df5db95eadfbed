"""Numerical substrate: transformer block, loss, optimizer, gradient oracle.

Everything here rides on torch tensors and autograd for the analytic
gradients; `grad_check` provides the independent central-finite-difference
oracle used to verify them. Training runs in float32; verification runs
switch the model to float64 because finite differences are unreliable at
single precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import NonFiniteError, ShapeError

INIT_STD = 0.02


def check_finite(t: Tensor, what: str) -> Tensor:
    """Raise NonFiniteError if `t` contains NaN or Inf."""
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"non-finite values in {what}")
    return t


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with an explicit shape check.

    Backward accumulates into both operands' gradients via autograd.
    """
    if a.ndim < 1 or b.ndim < 1:
        raise ShapeError(f"matmul needs at least 1-d operands, got {a.ndim}-d and {b.ndim}-d")
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else -1]:
        raise ShapeError(f"matmul inner extents differ: {tuple(a.shape)} x {tuple(b.shape)}")
    return a @ b


def detach(t: Tensor) -> Tensor:
    """Stop-gradient: same value, no gradient flows back through it."""
    return t.detach()


def init_linear_(module: nn.Linear, zero_weight: bool = False) -> None:
    if zero_weight:
        nn.init.zeros_(module.weight)
    else:
        nn.init.normal_(module.weight, mean=0.0, std=INIT_STD)
    if module.bias is not None:
        nn.init.zeros_(module.bias)


def causal_mask(n: int, device=None) -> Tensor:
    """Boolean [n, n] mask, True where attention is allowed (j <= i)."""
    return torch.ones(n, n, dtype=torch.bool, device=device).tril_()


def causal_mask_with_memory(seq: int, mem: int, device=None) -> Tensor:
    """Causal mask over `seq + mem` positions where the trailing `mem`
    columns are visible from everywhere.

    The trailing positions hold carried memory-token embeddings whose values
    are fixed before the segment is processed, so exposing them to every
    token does not leak information between sequence positions.
    """
    n = seq + mem
    mask = causal_mask(n, device=device)
    if mem:
        mask[:, seq:] = True
    return mask


class MultiHeadAttention(nn.Module):
    def __init__(self, hidden: int, heads: int):
        super().__init__()
        if hidden % heads != 0:
            raise ShapeError(f"heads={heads} must divide hidden={hidden}")
        self.hidden = hidden
        self.heads = heads
        self.head_dim = hidden // heads
        self.qkv = nn.Linear(hidden, 3 * hidden)
        self.out = nn.Linear(hidden, hidden)

    def forward(self, x: Tensor, mask: Tensor | None) -> Tensor:
        b, t, _ = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = q.view(b, t, self.heads, self.head_dim).transpose(1, 2)
        k = k.view(b, t, self.heads, self.head_dim).transpose(1, 2)
        v = v.view(b, t, self.heads, self.head_dim).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        if mask is not None:
            att = att.masked_fill(~mask, float("-inf"))
        y = att.softmax(dim=-1) @ v
        return self.out(y.transpose(1, 2).reshape(b, t, self.hidden))


class TransformerBlock(nn.Module):
    """Pre-norm decoder block: LN -> attention -> residual, LN -> GELU MLP -> residual."""

    def __init__(self, hidden: int, heads: int, layer_index: int = 0):
        super().__init__()
        self.layer_index = layer_index
        self.ln1 = nn.LayerNorm(hidden)
        self.attn = MultiHeadAttention(hidden, heads)
        self.ln2 = nn.LayerNorm(hidden)
        self.ff_in = nn.Linear(hidden, 4 * hidden)
        self.ff_out = nn.Linear(4 * hidden, hidden)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        for m in (self.attn.qkv, self.attn.out, self.ff_in, self.ff_out):
            init_linear_(m)

    def forward(self, x: Tensor, mask: Tensor | None = None, causal: bool = True) -> Tensor:
        """`mask` is a boolean [t, t] attention mask (True = may attend);
        when omitted, `causal` selects a plain lower-triangular mask or none.
        """
        if mask is None and causal:
            mask = causal_mask(x.shape[1], device=x.device)
        x = x + self.attn(self.ln1(x), mask)
        x = x + self.ff_out(F.gelu(self.ff_in(self.ln2(x))))
        if not torch.isfinite(x).all():
            raise NonFiniteError(f"non-finite activations in transformer block {self.layer_index}")
        return x


def cross_entropy(logits: Tensor, targets: Tensor, mask: Tensor) -> Tensor:
    """Mean negative log-likelihood over positions with nonzero mask weight.

    `logits` is [..., vocab]; `targets` and `mask` share the leading shape.
    """
    if targets.shape != logits.shape[:-1] or mask.shape != targets.shape:
        raise ShapeError(
            f"cross_entropy shapes: logits {tuple(logits.shape)}, "
            f"targets {tuple(targets.shape)}, mask {tuple(mask.shape)}"
        )
    vocab = logits.shape[-1]
    if targets.numel() and (targets.min() < 0 or targets.max() >= vocab):
        raise ShapeError(f"targets outside [0, {vocab})")
    weights = mask.reshape(-1).to(logits.dtype)
    total = weights.sum()
    if total.item() <= 0:
        raise ShapeError("cross_entropy mask selects no positions")
    logp = F.log_softmax(logits.reshape(-1, vocab), dim=-1)
    nll = -logp.gather(1, targets.reshape(-1, 1)).squeeze(1)
    loss = (nll * weights).sum() / total
    return check_finite(loss, "cross_entropy loss")


@dataclass
class AdamHyper:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class AdamState:
    """First/second moment estimates plus the shared step counter."""

    def __init__(self, params: dict[str, Tensor]):
        self.step = 0
        self.m = {k: torch.zeros_like(p) for k, p in params.items()}
        self.v = {k: torch.zeros_like(p) for k, p in params.items()}


@torch.no_grad()
def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, Tensor | None],
    state: AdamState,
    hyper: AdamHyper,
) -> None:
    """One Adam update with bias correction, in place.

    A non-finite gradient aborts the whole step (no parameter is touched)
    and reports the offending parameter by name.
    """
    for name, g in grads.items():
        if g is not None and not torch.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter '{name}'")
    state.step += 1
    c1 = 1.0 - hyper.beta1 ** state.step
    c2 = 1.0 - hyper.beta2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if p.shape != state.m[name].shape:
            raise ShapeError(f"optimizer state shape mismatch for '{name}'")
        m = state.m[name].mul_(hyper.beta1).add_(g, alpha=1.0 - hyper.beta1)
        v = state.v[name].mul_(hyper.beta2).addcmul_(g, g, value=1.0 - hyper.beta2)
        p.addcdiv_(m / c1, (v / c2).sqrt().add_(hyper.eps), value=-hyper.lr)


class Adam:
    """Convenience wrapper binding a model's named parameters to adam_step."""

    def __init__(self, named_params: Iterable[tuple[str, nn.Parameter]], hyper: AdamHyper):
        self.params = dict(named_params)
        self.hyper = hyper
        self.state = AdamState(self.params)

    def step(self, lr: float | None = None) -> None:
        hyper = self.hyper if lr is None else AdamHyper(lr, self.hyper.beta1, self.hyper.beta2, self.hyper.eps)
        grads = {k: p.grad for k, p in self.params.items()}
        adam_step(self.params, grads, self.state, hyper)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def grad_check(
    f: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    floor: float = 1e-6,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    `f` is a no-argument closure producing a scalar; `inputs` are the float64
    leaf tensors it reads (perturbed in place for the numeric side). The
    numeric estimate is (f(x+h) - f(x-h)) / 2h per element; the relative
    error denominator is floored so exactly-zero gradients compare cleanly.
    """
    for t in inputs:
        if t.dtype != torch.float64:
            raise ShapeError("grad_check requires float64 inputs")
        if not t.is_contiguous():
            raise ShapeError("grad_check requires contiguous inputs")
    out = f()
    analytic = torch.autograd.grad(out, inputs, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for t, a in zip(inputs, analytic):
            a = torch.zeros_like(t) if a is None else a
            flat = t.view(-1)
            a_flat = a.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = f().item()
                flat[i] = orig - h
                down = f().item()
                flat[i] = orig
                numeric = (up - down) / (2.0 * h)
                ai = a_flat[i].item()
                err = abs(ai - numeric) / max(abs(ai), abs(numeric), floor)
                worst = max(worst, err)
    return worst
