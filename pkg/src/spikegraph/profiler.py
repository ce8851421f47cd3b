"""Analytic FLOP counting, firing-rate measurement, SOP/energy accounting.

Conventions anchored to the reproducible published rows: 1 MAC = 1 FLOP;
BN, pooling, and elementwise ops are excluded from FLOP totals; FLOPs are
per action sample (batch and spike-step factors enter through the SOP
product).  Energy constants assume 45nm hardware: 4.6 pJ per MAC,
0.9 pJ per spike-gated accumulate.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .tensor import InvalidInputError, Tensor

E_MAC_PJ = 4.6
E_AC_PJ = 0.9

_KINDS = ("conv", "linear", "matmul-attention", "lstm", "bn", "pooling")


@dataclass
class LayerCost:
    layer_id: str
    kind: str
    flops: int
    input_firing_rate: float
    spike_steps: int
    is_fire: bool = False

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise InvalidInputError(f"unknown layer kind {self.kind!r}")
        if not 0.0 <= self.input_firing_rate <= 1.0:
            raise InvalidInputError(
                f"firing rate must be in [0, 1], got {self.input_firing_rate}")

    @property
    def sops(self) -> int:
        return compute_sops(self.flops, self.input_firing_rate, self.spike_steps)


def count_flops(kind: str, **dims) -> int:
    """MAC counts for the supported layer kinds.

    conv: cout*cin*kh*kw*hout*wout; linear: in*out; matmul-attention by
    matrix extents; lstm: gate GEMMs over the scan length.  BN and pooling
    count zero by convention.
    """
    if kind == "conv":
        required = ("cout", "cin", "kh", "kw", "hout", "wout")
        if any(k not in dims for k in required):
            raise InvalidInputError(f"conv FLOPs need {required}, got {sorted(dims)}")
        return int(dims["cout"] * dims["cin"] * dims["kh"] * dims["kw"]
                   * dims["hout"] * dims["wout"])
    if kind == "linear":
        if "in_features" not in dims or "out_features" not in dims:
            raise InvalidInputError("linear FLOPs need in_features/out_features")
        return int(dims["in_features"] * dims["out_features"])
    if kind == "matmul-attention":
        if any(k not in dims for k in ("m", "k", "n")):
            raise InvalidInputError("attention FLOPs need m/k/n extents")
        return int(dims["m"] * dims["k"] * dims["n"] * dims.get("batch", 1))
    if kind == "lstm":
        if any(k not in dims for k in ("hidden", "in_features", "steps")):
            raise InvalidInputError("lstm FLOPs need hidden/in_features/steps")
        return int(4 * dims["hidden"] * (dims["in_features"] + dims["hidden"])
                   * dims["steps"])
    if kind in ("bn", "pooling"):
        return 0
    raise InvalidInputError(f"unknown layer kind {kind!r}")


def measure_firing_rate(x: Tensor | np.ndarray) -> float:
    """Mean of a binary tensor over all axes."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if data.size == 0:
        raise InvalidInputError("cannot measure firing rate of an empty tensor")
    if not ((data == 0.0) | (data == 1.0)).all():
        raise InvalidInputError("firing rate requires a binary tensor")
    return float(data.mean())


def active_fraction(x: Tensor | np.ndarray) -> float:
    """Fraction of nonzero elements; equals the firing rate on binary input.

    Block-internal features are small-integer sums of two spike trains, so
    the nonzero fraction is the rate that gates their accumulates.
    """
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    return float((data != 0).mean()) if data.size else 0.0


def compute_sops(flops: float, rate: float, spike_steps: int) -> int:
    if not 0.0 <= rate <= 1.0:
        raise InvalidInputError(f"rate must be in [0, 1], got {rate}")
    if spike_steps < 1:
        raise InvalidInputError(f"spike_steps must be >= 1, got {spike_steps}")
    return int(round(float(flops) * rate * spike_steps))


def energy_ann(flops_total: float) -> float:
    """Dense MAC energy in millijoules (4.6 pJ per FLOP)."""
    if flops_total < 0:
        raise InvalidInputError("FLOP count must be nonnegative")
    return float(flops_total) * E_MAC_PJ * 1e-9


def energy_snn(layers: list[LayerCost], model_kind: str = "mk-sgn",
               n_m: int = 4) -> float:
    """Mixed MAC/AC energy in millijoules.

    The spike-encoding conv is MAC-costed once (scaled by the modality
    count for the fused model); every other layer contributes
    spike-gated accumulates at 0.9 pJ.
    """
    fire = [c for c in layers if c.is_fire]
    if not fire:
        raise InvalidInputError("layer list has no first-encoding-layer marker")
    fl1 = fire[0].flops
    mac_term = (n_m if model_kind == "mk-sgn" else 1) * E_MAC_PJ * fl1
    ac_sops = sum(c.sops for c in layers if not c.is_fire)
    return (mac_term + E_AC_PJ * ac_sops) * 1e-9


@dataclass
class EnergyReport:
    model: str
    n_m: int
    spike_steps: int
    layers: list[LayerCost]
    e_mac_pj: float = E_MAC_PJ
    e_ac_pj: float = E_AC_PJ

    @property
    def flops_total(self) -> int:
        return int(sum(c.flops for c in self.layers))

    @property
    def sops_total(self) -> int:
        return int(sum(c.sops for c in self.layers))

    @property
    def energy_mj(self) -> float:
        return energy_snn(self.layers, self.model, self.n_m)

    @property
    def ann_equivalent_mj(self) -> float:
        """The same layer plan evaluated densely, MAC-costed throughout."""
        return energy_ann(self.flops_total)

    def to_json_dict(self) -> dict:
        return {
            "model": self.model,
            "n_m": self.n_m,
            "S": self.spike_steps,
            "layers": [
                {"id": c.layer_id, "kind": c.kind, "flops": c.flops,
                 "r": c.input_firing_rate, "sops": c.sops}
                for c in self.layers
            ],
            "totals": {"flops": self.flops_total, "sops": self.sops_total,
                       "energy_mJ": self.energy_mj},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["id", "kind", "flops", "r", "sops"])
        for c in self.layers:
            writer.writerow([c.layer_id, c.kind, c.flops,
                             f"{c.input_firing_rate:.6f}", c.sops])
        writer.writerow(["TOTALS", "", self.flops_total, "",
                        self.sops_total])
        writer.writerow(["ENERGY_MJ", "", "", "", f"{self.energy_mj:.6f}"])
        return buf.getvalue()


class ForwardProbe:
    """Collects per-layer FLOPs and input rates during one forward pass.

    Layers call the hooks with their batched inputs; FLOPs are normalized
    to one sample.
    """

    def __init__(self, spike_steps: int):
        self.spike_steps = spike_steps
        self.layers: list[LayerCost] = []
        self._counts: dict[str, int] = {}

    def _next_id(self, prefix: str) -> str:
        n = self._counts.get(prefix, 0)
        self._counts[prefix] = n + 1
        return f"{prefix}{n}"

    def encoder_conv(self, enc, x: Tensor) -> None:
        b, c, t, v = x.shape
        k = enc.cfg.kernel_size
        flops = count_flops("conv", cout=enc.cfg.hidden_channels, cin=c,
                            kh=k, kw=k, hout=v, wout=t)
        self.layers.append(LayerCost(self._next_id("encoder"), "conv", flops,
                                     1.0, self.spike_steps, is_fire=True))

    def graph_conv(self, layer, x: Tensor) -> None:
        s, b, d, v, t = x.shape
        k = layer.num_branches
        mix = k * v * v * d * t
        maps = (k + 1) * d * layer.out_channels * v * t
        self.layers.append(LayerCost(self._next_id("sgc"), "conv",
                                     int(mix + maps), active_fraction(x),
                                     self.spike_steps))

    def attention(self, layer, h: Tensor, q: Tensor, k: Tensor, v: Tensor) -> None:
        s, b, d, nv, t = h.shape
        proj = 3 * d * d * nv * t
        self.layers.append(LayerCost(self._next_id("ssa_proj"), "conv", int(proj),
                                     active_fraction(h), self.spike_steps))
        qk_rate = float(np.mean([measure_firing_rate(q), measure_firing_rate(k),
                                 measure_firing_rate(v)]))
        matmuls = count_flops("matmul-attention", m=nv, k=d, n=nv, batch=t) \
            + count_flops("matmul-attention", m=nv, k=nv, n=d, batch=t)
        self.layers.append(LayerCost(self._next_id("ssa_attn"), "matmul-attention",
                                     int(matmuls), qk_rate, self.spike_steps))

    def temporal_conv(self, layer, h_sa: Tensor) -> None:
        s, b, d, v, t = h_sa.shape
        t_out = t // layer.stride
        flops = count_flops("conv", cout=layer.out_channels, cin=d,
                            kh=1, kw=layer.kernel_t, hout=v, wout=t_out)
        if layer.w_proj is not None:
            flops += layer.channels * layer.out_channels * v * t_out
        self.layers.append(LayerCost(self._next_id("stc"), "conv", int(flops),
                                     active_fraction(h_sa), self.spike_steps))

    def head_linear(self, head, spikes: Tensor) -> None:
        flops = count_flops("linear", in_features=head.in_features,
                            out_features=head.out_features)
        self.layers.append(LayerCost(self._next_id("head"), "linear", flops,
                                     measure_firing_rate(spikes), self.spike_steps))

    def smic(self, channels: int, hidden: int, frames: int, rate: float) -> None:
        flops = count_flops("lstm", hidden=hidden, in_features=2 * channels,
                            steps=frames) \
            + count_flops("linear", in_features=hidden, out_features=1) * frames
        self.layers.append(LayerCost(self._next_id("smic"), "lstm", int(flops),
                                     rate, self.spike_steps))

    # teacher/FTM hooks exist so the same probe object can traverse the
    # teacher for dense-plan comparisons; inference energy ignores them
    def teacher_unit(self, unit, x: Tensor) -> None:
        pass

    def ftm_branch(self, branch, x: Tensor) -> None:
        pass


def profile_model(model, bundle_batch: dict, model_kind: str = "mk-sgn",
                  ) -> EnergyReport:
    """One eval-mode forward pass with cost probes attached."""
    was_training = model.training
    model.eval()
    probe = ForwardProbe(model.spike_steps)
    spikes = model.encode(bundle_batch, probe=probe)
    weights = model.fusion_weights(spikes)
    if model.smf_enabled:
        # pairwise estimator cost, one entry per unordered pair
        sample = spikes[0]
        frames = sample.shape[-1]
        hidden = model.smf.estimators[0].hidden
        channels = model.plan.in_channels
        for (i, j) in model.smf.PAIRS:
            rate = float(np.mean([measure_firing_rate(spikes[i]),
                                  measure_firing_rate(spikes[j])]))
            probe.smic(channels, hidden, frames, rate)
    model(bundle_batch, weights=weights, probe=probe)
    if was_training:
        model.train()
    n_m = 4 if model.smf_enabled else 1
    return EnergyReport(model=model_kind, n_m=n_m,
                        spike_steps=model.spike_steps, layers=probe.layers)
