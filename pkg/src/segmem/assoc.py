"""Fast-weight associative memory.

A layer's long-range store is a matrix `A` of value-by-feature outer
products plus a normalization vector `z`. Writing uses a delta rule: the
value previously associated with a key is recalled and subtracted before
the new value is added, so re-inserting a key overwrites instead of
accumulating. The normalization update is scaled by a correction
coefficient so that overwritten keys do not keep inflating `z`; without it
the denominator grows with every write and recall decays after many
updates.

All operations are batched over a leading batch dimension and functional:
`insert` returns a fresh state so the tensors stay inside the autograd
graph across segments.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .errors import ConfigError, ShapeError
from .nn import INIT_STD

EPS = 1e-6

FEATURE_MAP_KINDS = ("dpfp", "identity")


@dataclass(frozen=True)
class FeatureMapSpec:
    """Key/query nonlinearity. `identity` exists for hand-trace tests only
    and is rejected by model configs."""

    kind: str = "dpfp"
    nu: int = 3

    def __post_init__(self):
        if self.kind not in FEATURE_MAP_KINDS:
            raise ConfigError(f"feature_map.kind must be one of {FEATURE_MAP_KINDS}, got {self.kind!r}")
        if self.kind == "dpfp" and self.nu < 1:
            raise ConfigError(f"feature_map.nu must be >= 1, got {self.nu}")

    def out_dim(self, d: int) -> int:
        return 2 * d * self.nu if self.kind == "dpfp" else d


def phi(x: Tensor, spec: FeatureMapSpec) -> Tensor:
    """Feature map over the last dimension.

    dpfp-nu: r = [relu(x); relu(-x)], output = concat over j=1..nu of
    r * roll(r, -j), hence 2*d*nu nonnegative outputs for d inputs.
    """
    if spec.kind == "identity":
        return x
    r = torch.cat([torch.relu(x), torch.relu(-x)], dim=-1)
    rolled = [r * torch.roll(r, shifts=-j, dims=-1) for j in range(1, spec.nu + 1)]
    return torch.cat(rolled, dim=-1)


@dataclass
class AssociativeState:
    """Per-layer fast-weight memory: A is [batch, d_val, d_phi], z is [batch, d_phi]."""

    A: Tensor
    z: Tensor

    @classmethod
    def zeros(cls, batch: int, d_val: int, d_phi: int, dtype=None, device=None) -> "AssociativeState":
        return cls(
            A=torch.zeros(batch, d_val, d_phi, dtype=dtype, device=device),
            z=torch.zeros(batch, d_phi, dtype=dtype, device=device),
        )

    @property
    def d_val(self) -> int:
        return self.A.shape[-2]

    @property
    def d_phi(self) -> int:
        return self.A.shape[-1]

    def float_count(self) -> int:
        return (self.A.numel() + self.z.numel()) // self.A.shape[0]

    def clone(self) -> "AssociativeState":
        return AssociativeState(self.A.clone(), self.z.clone())

    def detach(self) -> "AssociativeState":
        return AssociativeState(self.A.detach(), self.z.detach())


class AssocProjections(nn.Module):
    """Linear maps from the hidden stream into key/value/gate/query space,
    plus the output projection back into the hidden stream.

    `w_out` starts at zero so a fresh model's associative path is an exact
    no-op and training begins from plain segment-recurrent behavior.
    """

    def __init__(self, hidden: int, d_mem: int, d_val: int, spec: FeatureMapSpec):
        super().__init__()
        self.hidden = hidden
        self.d_mem = d_mem
        self.d_val = d_val
        self.spec = spec
        self.d_phi = spec.out_dim(d_mem)
        self.w_key = nn.Linear(hidden, d_mem, bias=False)
        self.w_value = nn.Linear(hidden, d_val, bias=False)
        self.w_beta = nn.Linear(hidden, 1, bias=False)
        self.w_query = nn.Linear(hidden, d_mem, bias=False)
        self.w_out = nn.Linear(d_val, hidden, bias=False)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        for m in (self.w_key, self.w_value, self.w_beta, self.w_query):
            nn.init.normal_(m.weight, mean=0.0, std=INIT_STD)
        nn.init.zeros_(self.w_out.weight)


def recall_prev(state: AssociativeState, k_phi: Tensor) -> Tensor:
    """Value currently associated with a feature-mapped key: A k / max(z.k, eps).

    [batch, d_phi] -> [batch, d_val]; an empty state recalls the zero vector.
    """
    num = torch.bmm(state.A, k_phi.unsqueeze(-1)).squeeze(-1)
    den = (state.z * k_phi).sum(dim=-1).clamp_min(EPS)
    return num / den.unsqueeze(-1)


def gamma(
    state: AssociativeState,
    k_phi: Tensor,
    detached: bool = True,
    enabled: bool = True,
) -> Tensor:
    """Normalization correction 1 - (z.k)/||k||^2, shape [batch, 1].

    1 on an empty state, 0 when z already holds exactly this key once.
    Detached from the graph by default (stop-gradient); `enabled=False`
    pins it to 1 for the ablated variant.
    """
    if not enabled:
        return torch.ones(k_phi.shape[0], 1, dtype=k_phi.dtype, device=k_phi.device)
    zk = (state.z * k_phi).sum(dim=-1)
    sq = (k_phi * k_phi).sum(dim=-1).clamp_min(EPS)
    g = (1.0 - zk / sq).unsqueeze(-1)
    return g.detach() if detached else g


def insert_features(
    state: AssociativeState,
    v: Tensor,
    k_phi: Tensor,
    beta: Tensor,
    *,
    gamma_detached: bool = True,
    gamma_enabled: bool = True,
) -> AssociativeState:
    """Delta-rule write from precomputed features: v [batch, d_val],
    k_phi [batch, d_phi], beta [batch, 1]. Returns a new state."""
    if k_phi.shape[-1] != state.d_phi or v.shape[-1] != state.d_val:
        raise ShapeError(
            f"insert shapes: phi(k) {tuple(k_phi.shape)}, v {tuple(v.shape)} "
            f"vs state A {tuple(state.A.shape)}"
        )
    v_old = recall_prev(state, k_phi)
    g = gamma(state, k_phi, detached=gamma_detached, enabled=gamma_enabled)
    A = state.A + torch.bmm((beta * (v - v_old)).unsqueeze(-1), k_phi.unsqueeze(1))
    z = state.z + g * k_phi
    return AssociativeState(A, z)


def insert(
    state: AssociativeState,
    m: Tensor,
    proj: AssocProjections,
    spec: FeatureMapSpec | None = None,
    *,
    gamma_detached: bool = True,
    gamma_enabled: bool = True,
    beta_override: float | None = None,
    key_override: Tensor | None = None,
    value_override: Tensor | None = None,
) -> AssociativeState:
    """Delta-rule write of one memory token `m` [batch, hidden].

    Recalls the old value under the token's key, then adds
    beta * (v - v_old) (x) phi(k) to A and gamma * phi(k) to z. Returns a
    new state; the input state is untouched. The `*_override` hooks bypass
    the projections for hand-trace tests.
    """
    spec = proj.spec if spec is None else spec
    k = proj.w_key(m) if key_override is None else key_override
    v = proj.w_value(m) if value_override is None else value_override
    if beta_override is None:
        beta = torch.sigmoid(proj.w_beta(m))
    else:
        beta = torch.full((k.shape[0], 1), float(beta_override), dtype=k.dtype, device=k.device)
    return insert_features(
        state,
        v,
        phi(k, spec),
        beta,
        gamma_detached=gamma_detached,
        gamma_enabled=gamma_enabled,
    )


def query(
    state: AssociativeState,
    x: Tensor,
    proj: AssocProjections,
    spec: FeatureMapSpec | None = None,
    *,
    query_override: Tensor | None = None,
) -> Tensor:
    """Read-only recall for a batch of token vectors x [batch, seq, hidden]
    (or [batch, hidden]); returns matching [..., d_val]."""
    spec = proj.spec if spec is None else spec
    squeeze = x.ndim == 2
    if squeeze:
        x = x.unsqueeze(1)
    q = proj.w_query(x) if query_override is None else query_override
    q_phi = phi(q, spec)
    num = torch.bmm(q_phi, state.A.transpose(1, 2))
    den = torch.bmm(q_phi, state.z.unsqueeze(-1)).squeeze(-1).clamp_min(EPS)
    y = num / den.unsqueeze(-1)
    return y.squeeze(1) if squeeze else y


def assoc_block(
    h: Tensor,
    state: AssociativeState,
    proj: AssocProjections,
    spec: FeatureMapSpec | None = None,
) -> Tensor:
    """Residual associative read applied pointwise to every position:
    h_j + W_out query(state, h_j). An empty state is the identity."""
    return h + proj.w_out(query(state, h, proj, spec))
