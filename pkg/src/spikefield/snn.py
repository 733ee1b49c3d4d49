"""Leaky integrate-and-fire MLP over packed [ray, time, channel] batches.

Membrane update per step: U = V + (X - V + v_reset) / tau, a spike fires when
U >= v_th (closed threshold), and the membrane resets hard to v_reset on a
spike, otherwise keeps U. States start at zero for every ray at t = 0 and are
carried across time steps within a ray, never across rays.

Gradients are hand-derived truncated-nowhere BPTT on a recorded tape. The
Heaviside derivative is replaced by a configurable surrogate; the hard reset is
differentiated through the same surrogate unless detach_reset is set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import sigmoid, softplus

NEURON_MODES = ("lif", "relaxed", "identity")


@dataclass(frozen=True)
class LifConfig:
    """Leak constant and firing thresholds of one LIF population."""

    tau: float = 2.0
    v_th: float = 1.0
    v_reset: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.tau) and self.tau >= 1.0):
            raise ValueError("tau must be >= 1")
        if not (self.v_th > self.v_reset):
            raise ValueError("v_th must exceed v_reset")


@dataclass(frozen=True)
class SurrogateConfig:
    """Shape of the pseudo-derivative used in place of the Heaviside step.

    form "logistic" uses the logistic map itself, 1/(1+exp(-alpha_sg*x));
    form "sigmoid_derivative" uses its derivative alpha_sg*s*(1-s).
    """

    alpha_sg: float = 4.0
    form: str = "logistic"

    def __post_init__(self):
        if not (np.isfinite(self.alpha_sg) and self.alpha_sg > 0):
            raise ValueError("alpha_sg must be positive")
        if self.form not in ("logistic", "sigmoid_derivative"):
            raise ValueError(f"unknown surrogate form {self.form!r}")


@dataclass
class LifState:
    """Membrane potential per neuron (any leading batch shape)."""

    v: np.ndarray

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=float)


def surrogate_derivative(x: np.ndarray, cfg: SurrogateConfig) -> np.ndarray:
    """Pseudo-derivative of the spike nonlinearity at pre-threshold distance x."""
    x = np.asarray(x, dtype=float)
    s = sigmoid(cfg.alpha_sg * x)
    if cfg.form == "logistic":
        return s
    return cfg.alpha_sg * s * (1.0 - s)


def surrogate_primitive(x: np.ndarray, cfg: SurrogateConfig) -> np.ndarray:
    """Smooth relaxation of the Heaviside step whose derivative is the surrogate."""
    x = np.asarray(x, dtype=float)
    if cfg.form == "logistic":
        return softplus(cfg.alpha_sg * x) / cfg.alpha_sg
    return sigmoid(cfg.alpha_sg * x)


def lif_step(state: LifState, x: np.ndarray, cfg: LifConfig):
    """One membrane update; returns (spikes, pre-threshold potential, next state)."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("lif input must be finite")
    v = state.v
    u = v + (x - v + cfg.v_reset) / cfg.tau
    spikes = (u >= cfg.v_th).astype(u.dtype)
    v_next = u * (1.0 - spikes) + cfg.v_reset * spikes
    return spikes, u, LifState(v_next)


@dataclass
class MlpLayer:
    """Affine layer; hidden layers carry a LifConfig, the readout layer none."""

    weight: np.ndarray  # [out, in]
    bias: np.ndarray  # [out]
    lif: LifConfig | None = None

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=float)
        self.bias = np.asarray(self.bias, dtype=float)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError("layer weight must be [out, in] with a matching bias")
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise ValueError("layer parameters must be finite")

    @property
    def out_width(self) -> int:
        return self.weight.shape[0]

    @property
    def in_width(self) -> int:
        return self.weight.shape[1]


@dataclass
class SpikingMlp:
    """Spiking hidden layers followed by a non-spiking sigmoid readout."""

    layers: list
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)
    detach_reset: bool = False

    def __post_init__(self):
        if len(self.layers) < 1:
            raise ValueError("mlp needs at least a readout layer")
        for a, b in zip(self.layers[:-1], self.layers[1:]):
            if b.in_width != a.out_width:
                raise ValueError("consecutive layer widths do not chain")
        for layer in self.layers[:-1]:
            if layer.lif is None:
                raise ValueError("hidden layers must be spiking")
        if self.layers[-1].lif is not None:
            raise ValueError("readout layer must be non-spiking")

    @property
    def in_width(self) -> int:
        return self.layers[0].in_width

    @property
    def out_width(self) -> int:
        return self.layers[-1].out_width

    @property
    def hidden_widths(self) -> tuple:
        return tuple(layer.out_width for layer in self.layers[:-1])


def build_mlp(
    in_width: int,
    hidden_widths,
    rng: np.random.Generator,
    lif: LifConfig | None = None,
    surrogate: SurrogateConfig | None = None,
    out_width: int = 3,
    detach_reset: bool = False,
) -> SpikingMlp:
    """Uniform fan-in init, zero biases."""
    lif = lif or LifConfig()
    surrogate = surrogate or SurrogateConfig()
    layers = []
    prev = in_width
    for h in hidden_widths:
        bound = 1.0 / np.sqrt(prev)
        layers.append(MlpLayer(rng.uniform(-bound, bound, size=(h, prev)), np.zeros(h), lif))
        prev = h
    bound = 1.0 / np.sqrt(prev)
    layers.append(MlpLayer(rng.uniform(-bound, bound, size=(out_width, prev)), np.zeros(out_width), None))
    return SpikingMlp(layers, surrogate, detach_reset)


@dataclass
class SmlpTape:
    """Everything the backward pass and the energy counters need."""

    outputs: np.ndarray  # [R, T, out] post-sigmoid
    pre_outputs: np.ndarray  # [R, T, out] pre-sigmoid
    potentials: list  # per hidden layer: U [R, T, H]
    spikes: list  # per hidden layer: S [R, T, H]
    inputs: np.ndarray  # [R, T, in] the packed input
    occupancy: np.ndarray | None
    neuron_mode: str


@dataclass
class SmlpGrads:
    """Parameter and input gradients from one backward pass."""

    weights: list  # [(dW, db)] per layer, same order as mlp.layers
    inputs: np.ndarray  # [R, T, in]


def _affine(x: np.ndarray, layer: MlpLayer) -> np.ndarray:
    return x @ layer.weight.T + layer.bias


def smlp_forward(
    mlp: SpikingMlp,
    packed: np.ndarray,
    occupancy: np.ndarray | None = None,
    neuron_mode: str = "lif",
) -> SmlpTape:
    """Run the net over a [ray, time, channel] batch, recording a tape.

    Every slot is computed uniformly; occupancy is carried through for the
    energy counters and does not gate the dynamics (padded slots feed zeros,
    which still leak the membrane). Membranes start at zero per ray.
    """
    if neuron_mode not in NEURON_MODES:
        raise ValueError(f"unknown neuron mode {neuron_mode!r}")
    packed = np.asarray(packed, dtype=float)
    if packed.ndim != 3:
        raise ValueError("packed input must be [rays, time, channels]")
    if packed.shape[-1] != mlp.in_width:
        raise ValueError(f"input width {packed.shape[-1]} does not match mlp ({mlp.in_width})")
    if not np.all(np.isfinite(packed)):
        raise ValueError("packed input must be finite")
    r, t_len, _ = packed.shape
    act = packed
    potentials, spike_trains = [], []
    for layer in mlp.layers[:-1]:
        z = _affine(act, layer)
        if neuron_mode == "identity":
            potentials.append(z)
            spike_trains.append(z)
            act = z
            continue
        cfg = layer.lif
        u_seq = np.empty_like(z)
        s_seq = np.empty_like(z)
        v = np.zeros((r, layer.out_width), dtype=z.dtype)
        for t in range(t_len):
            u = v + (z[:, t] - v + cfg.v_reset) / cfg.tau
            if neuron_mode == "lif":
                s = (u >= cfg.v_th).astype(z.dtype)
            else:
                s = surrogate_primitive(u - cfg.v_th, mlp.surrogate)
            v = u * (1.0 - s) + cfg.v_reset * s
            u_seq[:, t] = u
            s_seq[:, t] = s
        potentials.append(u_seq)
        spike_trains.append(s_seq)
        act = s_seq
    pre = _affine(act, mlp.layers[-1])
    return SmlpTape(
        outputs=sigmoid(pre),
        pre_outputs=pre,
        potentials=potentials,
        spikes=spike_trains,
        inputs=packed,
        occupancy=None if occupancy is None else np.asarray(occupancy, dtype=bool),
        neuron_mode=neuron_mode,
    )


def smlp_backward(mlp: SpikingMlp, tape: SmlpTape, upstream: np.ndarray) -> SmlpGrads:
    """Backpropagate d(loss)/d(outputs) through time onto parameters and inputs."""
    if tape is None:
        raise ValueError("backward needs the tape recorded by smlp_forward")
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != tape.outputs.shape:
        raise ValueError("upstream gradient shape does not match tape outputs")
    out = tape.outputs
    g_pre = upstream * out * (1.0 - out)
    acts = [tape.inputs] + tape.spikes  # inputs of each layer in order
    grads: list = [None] * len(mlp.layers)
    readout = mlp.layers[-1]
    grads[-1] = (
        np.einsum("rto,rti->oi", g_pre, acts[-1]),
        g_pre.sum(axis=(0, 1)),
    )
    g_act = g_pre @ readout.weight  # d loss / d spikes of the last hidden layer
    for li in range(len(mlp.layers) - 2, -1, -1):
        layer = mlp.layers[li]
        if tape.neuron_mode == "identity":
            g_z = g_act
        else:
            cfg = layer.lif
            u_seq = tape.potentials[li]
            s_seq = tape.spikes[li]
            sg = surrogate_derivative(u_seq - cfg.v_th, mlp.surrogate)
            g_z = np.empty_like(g_act)
            g_v = np.zeros((g_act.shape[0], g_act.shape[2]))
            for t in range(g_act.shape[1] - 1, -1, -1):
                g_s = g_act[:, t].copy()
                if not mlp.detach_reset:
                    g_s += g_v * (cfg.v_reset - u_seq[:, t])
                g_u = g_v * (1.0 - s_seq[:, t]) + g_s * sg[:, t]
                g_z[:, t] = g_u / cfg.tau
                g_v = g_u * (1.0 - 1.0 / cfg.tau)
        grads[li] = (
            np.einsum("rto,rti->oi", g_z, acts[li]),
            g_z.sum(axis=(0, 1)),
        )
        g_act = g_z @ layer.weight
    return SmlpGrads(weights=grads, inputs=g_act)


def direct_encode(x: np.ndarray, t_steps: int) -> np.ndarray:
    """Duplicate each row along a new time axis: [B, C] -> [B, T, C]."""
    if t_steps < 1:
        raise ValueError("time steps must be >= 1")
    x = np.asarray(x, dtype=float)
    return np.repeat(x[:, None, :], t_steps, axis=1)


def poisson_encode(x: np.ndarray, t_steps: int, rng) -> np.ndarray:
    """Bernoulli spike train with per-element rate x in [0, 1]: [B, C] -> [B, T, C]."""
    if t_steps < 1:
        raise ValueError("time steps must be >= 1")
    x = np.asarray(x, dtype=float)
    if np.any((x < 0) | (x > 1)) or not np.all(np.isfinite(x)):
        raise ValueError("poisson rates must lie in [0, 1]")
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    draws = gen.random((x.shape[0], t_steps, x.shape[1]))
    return (draws < x[:, None, :]).astype(float)


def mean_decode(y: np.ndarray) -> np.ndarray:
    """Average over the time axis: [B, T, C] -> [B, C]."""
    y = np.asarray(y, dtype=float)
    if y.ndim != 3 or y.shape[1] < 1:
        raise ValueError("decode expects [batch, time, channels] with time >= 1")
    return y.mean(axis=1)


def view_embedding(dirs: np.ndarray, n_freqs: int = 4) -> np.ndarray:
    """Sinusoidal embedding of unit view directions, constant per ray.

    Output: [R, 3 + 6 * n_freqs] = raw direction plus sin/cos at octave spacing.
    """
    dirs = np.asarray(dirs, dtype=float)
    parts = [dirs]
    for k in range(n_freqs):
        parts.append(np.sin((2.0**k) * dirs))
        parts.append(np.cos((2.0**k) * dirs))
    return np.concatenate(parts, axis=-1)


def view_embedding_width(n_freqs: int = 4) -> int:
    return 3 + 6 * n_freqs
