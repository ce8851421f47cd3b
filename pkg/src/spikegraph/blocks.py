"""Graph blocks: adjacency branches, spiking graph conv with self-attention,
and spiking temporal conv.

Feature layout throughout is [S, B, D, V, T]: spike steps, batch, channels,
joints, frames.  Channel maps are batched matmuls over the trailing channel
axis; adjacency acts on the joint axis; the temporal conv slides over T.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import SkeletonTopology
from .module import BatchNorm, Module, Parameter, kaiming_normal
from .neurons import LifConfig, sn_layer
from .tensor import (DimensionError, InvalidInputError, Tensor, add, conv2d,
                     matmul, permute, reshape, scale, slice_)


def normalize_adjacency(adj: np.ndarray, add_self_loops: bool = True) -> np.ndarray:
    """Symmetric normalization D^{-1/2} (A [+ I]) D^{-1/2}.

    D is the diagonal of row degrees; zero-degree rows stay zero (isolated
    nodes cannot occur when self-loops are requested).
    """
    adj = np.asarray(adj, dtype=np.float32)
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise InvalidInputError(f"adjacency must be square, got {adj.shape}")
    if (adj < 0).any():
        raise InvalidInputError("adjacency entries must be nonnegative")
    a_tilde = adj + np.eye(adj.shape[0], dtype=np.float32) if add_self_loops else adj
    deg = a_tilde.sum(axis=1)
    with np.errstate(divide="ignore"):
        d_inv_sqrt = np.where(deg > 0, deg ** -0.5, 0.0).astype(np.float32)
    return d_inv_sqrt[:, None] * a_tilde * d_inv_sqrt[None, :]


@dataclass(frozen=True)
class AdjacencySet:
    """K normalized V x V branch matrices: [self, inward, outward]."""

    matrices: np.ndarray  # [K, V, V]
    branch_names: tuple[str, ...] = ("self", "inward", "outward")

    @property
    def num_branches(self) -> int:
        return self.matrices.shape[0]

    @property
    def num_joints(self) -> int:
        return self.matrices.shape[1]

    def permuted(self, perm: np.ndarray) -> "AdjacencySet":
        """Conjugate every branch by a joint relabeling."""
        mats = self.matrices[:, perm][:, :, perm]
        return AdjacencySet(np.ascontiguousarray(mats), self.branch_names)


def partition_branches(topo: SkeletonTopology) -> AdjacencySet:
    """Self / inward (child->parent) / outward branch split, each normalized.

    The self branch is the normalized identity; the directional branches
    are normalized without extra self-loops (identity is its own branch),
    leaving zero-degree rows zero.
    """
    v = topo.num_joints
    inward = np.zeros((v, v), dtype=np.float32)
    for child, parent in topo.edges:
        inward[parent, child] = 1.0  # message flows child -> parent
    outward = inward.T.copy()
    mats = np.stack([
        normalize_adjacency(np.zeros((v, v), dtype=np.float32), add_self_loops=True),
        normalize_adjacency(inward, add_self_loops=False),
        normalize_adjacency(outward, add_self_loops=False),
    ])
    return AdjacencySet(mats)


def channel_map(x: Tensor, w: Tensor, axis: int) -> Tensor:
    """Apply w[D, D'] to the channel axis of x (a 1x1 convolution), fused."""
    from .tensor import record_op

    if x.shape[axis] != w.shape[0]:
        raise DimensionError(
            f"channel extent {x.shape[axis]} does not match weight {w.shape}")
    out_data = np.moveaxis(np.tensordot(x.data, w.data, axes=([axis], [0])), -1, axis)
    out = Tensor._wrap(out_data)
    reduce_axes = tuple(range(x.ndim - 1))

    def backward(g):
        gm = np.moveaxis(g, axis, -1)
        gx = np.moveaxis(np.tensordot(gm, w.data, axes=([-1], [1])), -1, axis)
        xm = np.moveaxis(x.data, axis, -1)
        gw = np.tensordot(xm, gm, axes=(reduce_axes, reduce_axes))
        return gx, gw

    record_op((x, w), (out,), backward)
    return out


def _channel_map(x: Tensor, w: Tensor) -> Tensor:
    """Apply w[D, D'] to the channel axis of x[S, B, D, V, T]."""
    return channel_map(x, w, axis=2)


def _joint_mix(x: Tensor, a: np.ndarray) -> Tensor:
    """Apply adjacency a[V, V] to the joint axis: out_v = sum_w a[v,w] x_w."""
    from .tensor import record_op

    out_data = np.moveaxis(np.tensordot(x.data, a, axes=([3], [1])), -1, 3)

    def backward(g):
        return (np.moveaxis(np.tensordot(g, a, axes=([3], [0])), -1, 3),)

    out = Tensor._wrap(out_data)
    record_op((x,), (out,), backward)
    return out


class SaSgcLayer(Module):
    """Multi-branch spiking graph convolution plus spiking self-attention."""

    def __init__(self, in_channels: int, out_channels: int, num_branches: int,
                 lif: LifConfig, rng: np.random.Generator,
                 attention_scale: float = 0.125):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.num_branches = num_branches
        self.lif = lif
        self.attention_scale = attention_scale
        self.w_branches = [
            Parameter(kaiming_normal(rng, (in_channels, out_channels), in_channels))
            for _ in range(num_branches)
        ]
        self.w_residual = Parameter(
            kaiming_normal(rng, (in_channels, out_channels), in_channels))
        self.bn_branches = BatchNorm(out_channels, axis=2)
        self.bn_residual = BatchNorm(out_channels, axis=2)
        self.w_q = Parameter(kaiming_normal(rng, (out_channels, out_channels), out_channels))
        self.w_k = Parameter(kaiming_normal(rng, (out_channels, out_channels), out_channels))
        self.w_v = Parameter(kaiming_normal(rng, (out_channels, out_channels), out_channels))
        self.bn_q = BatchNorm(out_channels, axis=2)
        self.bn_k = BatchNorm(out_channels, axis=2)
        self.bn_v = BatchNorm(out_channels, axis=2)

    def sgc(self, x: Tensor, adj: AdjacencySet, relaxed: bool = False,
            probe=None) -> Tensor:
        """H = SN(BN(x W_r)) + SN(BN(sum_k A_k x W_k)); values in {0,1,2}."""
        if x.ndim != 5:
            raise DimensionError(f"sgc expects [S,B,D,V,T], got {x.shape}")
        if x.shape[2] != self.in_channels:
            raise DimensionError(
                f"sgc channel extent {x.shape[2]} != weights {self.in_channels}")
        if adj.num_branches != self.num_branches:
            raise DimensionError(
                f"adjacency has {adj.num_branches} branches, layer expects {self.num_branches}")
        if probe is not None:
            probe.graph_conv(self, x)
        agg = None
        for k in range(self.num_branches):
            mixed = _joint_mix(x, adj.matrices[k])
            term = _channel_map(mixed, self.w_branches[k])
            agg = term if agg is None else add(agg, term)
        branch = sn_layer(self.bn_branches(agg), self.lif, relaxed=relaxed)
        residual = sn_layer(self.bn_residual(_channel_map(x, self.w_residual)),
                            self.lif, relaxed=relaxed)
        return add(residual, branch)

    def ssa(self, h: Tensor, relaxed: bool = False, probe=None) -> Tensor:
        """H_SA = H + SN((Q K^T) V * s), tokens = joints per (step, frame)."""
        if h.shape[2] != self.out_channels:
            raise DimensionError(
                f"ssa channel extent {h.shape[2]} != weights {self.out_channels}")
        q = sn_layer(self.bn_q(_channel_map(h, self.w_q)), self.lif, relaxed=relaxed)
        k = sn_layer(self.bn_k(_channel_map(h, self.w_k)), self.lif, relaxed=relaxed)
        v = sn_layer(self.bn_v(_channel_map(h, self.w_v)), self.lif, relaxed=relaxed)
        if probe is not None:
            probe.attention(self, h, q, k, v)
        # tokens are the V joints of each (spike step, frame) slice
        qt = permute(q, (0, 1, 4, 3, 2))  # [S,B,T,V,C]
        kt = permute(k, (0, 1, 4, 2, 3))  # [S,B,T,C,V]
        vt = permute(v, (0, 1, 4, 3, 2))  # [S,B,T,V,C]
        attn = matmul(matmul(qt, kt), vt)           # [S,B,T,V,C]
        attn = scale(attn, self.attention_scale)
        attn = sn_layer(attn, self.lif, relaxed=relaxed)
        attn = permute(attn, (0, 1, 4, 3, 2))       # [S,B,C,V,T]
        return add(h, attn)

    def forward(self, x: Tensor, adj: AdjacencySet, relaxed: bool = False,
                probe=None) -> Tensor:
        return self.ssa(self.sgc(x, adj, relaxed=relaxed, probe=probe),
                        relaxed=relaxed, probe=probe)


class StcLayer(Module):
    """Spiking temporal convolution with a spiking residual path.

    T_out = SN(BN(W_t * h)) + SN(residual(h)); on stride 2 the residual is
    subsampled (and 1x1-projected if the channel extent changes) before SN.
    """

    def __init__(self, channels: int, lif: LifConfig, rng: np.random.Generator,
                 kernel_t: int = 5, stride: int = 1, out_channels: int | None = None):
        super().__init__()
        if stride not in (1, 2):
            raise InvalidInputError(f"stride must be 1 or 2, got {stride}")
        self.channels = channels
        self.out_channels = out_channels or channels
        self.kernel_t = kernel_t
        self.stride = stride
        self.lif = lif
        fan_in = channels * kernel_t
        self.weight = Parameter(
            kaiming_normal(rng, (self.out_channels, channels, 1, kernel_t), fan_in))
        self.bias = Parameter(np.zeros(self.out_channels, dtype=np.float32))
        self.bn = BatchNorm(self.out_channels, axis=2)
        self.w_proj = None
        if self.out_channels != channels:
            self.w_proj = Parameter(
                kaiming_normal(rng, (channels, self.out_channels), channels))

    def forward(self, h_sa: Tensor, relaxed: bool = False, probe=None) -> Tensor:
        if h_sa.ndim != 5:
            raise DimensionError(f"stc expects [S,B,D,V,T], got {h_sa.shape}")
        s, b, d, v, t = h_sa.shape
        if d != self.channels:
            raise DimensionError(
                f"stc channel extent {d} != weights {self.channels}")
        if self.stride == 2 and t % 2 != 0:
            raise InvalidInputError(f"stride-2 temporal conv requires even T, got {t}")
        if probe is not None:
            probe.temporal_conv(self, h_sa)
        merged = reshape(h_sa, (s * b, d, v, t))
        pad_t = (self.kernel_t - 1) // 2
        y = conv2d(merged, self.weight, self.bias,
                   stride=(1, self.stride), padding=(0, pad_t))
        y = reshape(y, (s, b) + y.shape[1:])
        main = sn_layer(self.bn(y), self.lif, relaxed=relaxed)
        res = h_sa
        if self.stride == 2:
            res = slice_(res, (slice(None),) * 4 + (slice(0, None, 2),))
        if self.w_proj is not None:
            res = _channel_map(res, self.w_proj)
        return add(main, sn_layer(res, self.lif, relaxed=relaxed))


def sa_sgc_stc_block(x: Tensor, sgc_layer: SaSgcLayer, stc_layer: StcLayer,
                     adj: AdjacencySet, relaxed: bool = False, probe=None) -> Tensor:
    """One student block: graph conv -> self-attention -> temporal conv."""
    h = sgc_layer.sgc(x, adj, relaxed=relaxed, probe=probe)
    h_sa = sgc_layer.ssa(h, relaxed=relaxed, probe=probe)
    return stc_layer(h_sa, relaxed=relaxed, probe=probe)
