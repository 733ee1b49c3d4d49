"""Differentiable volume rendering of voxel grids through the spiking MLP.

Forward, per chunk of rays: march fixed-step samples inside the box, read raw
density from the grid, map to opacity alpha = 1 - exp(-sigma * delta), take
transmittance products, drop samples whose transmittance or opacity falls at
or below the mask thresholds, query grid features plus a view embedding for
the survivors, pack them along time, run the spiking MLP, scatter colors back,
and composite sum(T_i alpha_i c_i) plus leftover transmittance times the
background. The leftover uses every marched sample, masked or not, so a ray
always conserves weight.

Backward is a hand-derived adjoint of exactly that chain on a recorded tape:
compositing to opacities to raw density to grid nodes on one side, colors
through the MLP (BPTT) to features and feature-grid nodes on the other. The
mask and the packing layout are treated as fixed index sets, matching the
forward's semantics.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .grid import (
    Aabb,
    DensityActivation,
    DensityGrid,
    FeatureGrid,
    activate_density,
    activate_density_grad,
    interp_density,
    interp_density_backward,
    interp_feature,
    interp_feature_backward,
)
from .numerics import sigmoid
from .pack import PackingMode, occupancy_stats, pack_tcp, pack_tp, temporal_flip, unpack_scatter
from .rays import Camera, MaskedSamples, apply_mask, camera_rays, sample_ray_batch
from .snn import (
    LifConfig,
    SpikingMlp,
    SurrogateConfig,
    build_mlp,
    direct_encode,
    mean_decode,
    poisson_encode,
    smlp_backward,
    smlp_forward,
    view_embedding,
    view_embedding_width,
)
from .metrics import OpCount, count_ops_snn
from . import dataio

ENCODERS = ("aligned", "direct", "poisson")


@dataclass
class RenderConfig:
    """Knobs of the rendering path; defaults match the trained configuration."""

    lambda1: float = 1e-4  # transmittance floor of the sample mask
    lambda2: float = 1e-4  # opacity floor of the sample mask
    step_size: float | None = None  # None: half the smallest voxel edge
    packing: PackingMode = PackingMode.TCP
    sort_rays: bool = False
    flip: bool = False
    encoder: str = "aligned"
    time_steps: int = 1  # only read by the direct / poisson encoders
    background: tuple = (1.0, 1.0, 1.0)
    chunk_size: int = 4096
    jitter: bool = False  # stratified marching phase during training

    def __post_init__(self):
        if isinstance(self.packing, str):
            self.packing = PackingMode(self.packing)
        if self.encoder not in ENCODERS:
            raise ValueError(f"unknown encoder {self.encoder!r}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("mask thresholds must be non-negative")
        if self.time_steps < 1:
            raise ValueError("time_steps must be >= 1")
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if len(tuple(self.background)) != 3:
            raise ValueError("background must be an RGB triple")
        self.background = tuple(float(c) for c in self.background)


@dataclass
class Scene:
    """Trainable state: density grid, feature grid, spiking MLP."""

    density: DensityGrid
    feature: FeatureGrid
    mlp: SpikingMlp
    view_freqs: int = 4

    def __post_init__(self):
        want = self.feature.channels + view_embedding_width(self.view_freqs)
        if self.mlp.in_width != want:
            raise ValueError(
                f"mlp input width {self.mlp.in_width} does not match features+embedding ({want})"
            )

    @property
    def aabb(self) -> Aabb:
        return self.density.aabb


@dataclass
class ModelConfig:
    """Construction parameters of a fresh scene."""

    grid_dims: tuple = (32, 32, 32)
    feature_channels: int = 6
    hidden_widths: tuple = (32, 32)
    density_shift: float = -10.0
    activation: str = "shifted_softplus"
    tau: float = 2.0
    v_th: float = 1.0
    v_reset: float = 0.0
    alpha_sg: float = 4.0
    surrogate_form: str = "logistic"
    detach_reset: bool = True  # reset stays out of the backward pass
    view_freqs: int = 4
    feature_init: float = 1e-2


def build_scene(cfg: ModelConfig, aabb: Aabb, rng: np.random.Generator) -> Scene:
    """Fresh scene: zero density (near-zero after activation), noisy features."""
    dims = tuple(int(d) for d in cfg.grid_dims)
    act = DensityActivation(kind=cfg.activation, shift=cfg.density_shift)
    density = DensityGrid(dims=dims, values=np.zeros(dims), aabb=aabb, activation=act)
    feat = rng.uniform(-cfg.feature_init, cfg.feature_init, size=dims + (cfg.feature_channels,))
    feature = FeatureGrid(dims=dims, channels=cfg.feature_channels, values=feat, aabb=aabb)
    lif = LifConfig(tau=cfg.tau, v_th=cfg.v_th, v_reset=cfg.v_reset)
    surrogate = SurrogateConfig(alpha_sg=cfg.alpha_sg, form=cfg.surrogate_form)
    mlp = build_mlp(
        cfg.feature_channels + view_embedding_width(cfg.view_freqs),
        cfg.hidden_widths,
        rng,
        lif=lif,
        surrogate=surrogate,
        detach_reset=cfg.detach_reset,
    )
    return Scene(density=density, feature=feature, mlp=mlp, view_freqs=cfg.view_freqs)


def default_step(scene: Scene) -> float:
    return 0.5 * float(np.min(scene.density.voxel_size))


def composite(
    colors: np.ndarray,
    weights: np.ndarray,
    ray_index: np.ndarray,
    n_rays: int,
    leftover: np.ndarray,
    background,
) -> np.ndarray:
    """Weighted color sum per ray plus leftover transmittance times background."""
    colors = np.asarray(colors, dtype=float).reshape(-1, 3)
    weights = np.asarray(weights, dtype=float).reshape(-1)
    ray_index = np.asarray(ray_index, dtype=np.int64).reshape(-1)
    if not (colors.shape[0] == weights.shape[0] == ray_index.shape[0]):
        raise ValueError("colors, weights and ray_index disagree on length")
    if np.any(weights < 0):
        raise ValueError("compositing weights must be non-negative")
    leftover = np.asarray(leftover, dtype=float).reshape(-1)
    if leftover.shape[0] != n_rays:
        raise ValueError("leftover transmittance must have one entry per ray")
    out = leftover[:, None] * np.asarray(background, dtype=float).reshape(1, 3)
    np.add.at(out, ray_index, weights[:, None] * colors)
    return out


def mse_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean over rays of the squared color error (summed over channels)."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError("prediction and target shapes differ")
    if pred.size == 0:
        return 0.0
    return float(np.mean(np.sum((pred - target) ** 2, axis=-1)))


@dataclass
class ChunkTape:
    """Forward record of one chunk, consumed by _chunk_backward."""

    positions: np.ndarray
    deltas: np.ndarray
    valid: np.ndarray
    sigma_raw: np.ndarray
    one_minus_alpha: np.ndarray
    alpha: np.ndarray
    trans: np.ndarray
    leftover: np.ndarray
    masked: MaskedSamples
    w_surv: np.ndarray
    x: np.ndarray | None  # [S, C_in] mlp input per survivor
    colors_surv: np.ndarray | None
    batch: object | None  # PackedBatch in aligned mode
    smlp_tape: object | None
    encoder: str
    time_steps: int
    feature_channels: int


@dataclass
class ChunkInfo:
    """Side channel of one chunk's forward pass."""

    n_queries: int  # occupied time slots fed to the mlp
    n_survivors: int  # distinct masked samples (queries before time encoding)
    stats: object | None  # PackStats in aligned mode
    smlp_tape: object | None


@dataclass
class RenderResult:
    """Colors plus the per-chunk accounting the report paths consume."""

    colors: np.ndarray
    n_queries: int = 0
    n_survivors: int = 0
    pack_stats: list = field(default_factory=list)
    op_count: OpCount | None = None


def _transmittance_parts(sigma, deltas, valid):
    """(one_minus_alpha, alpha, trans, leftover) from masked density."""
    sig_del = np.where(valid, sigma * deltas, 0.0)
    one_minus = np.exp(-sig_del)
    alpha = -np.expm1(-sig_del)
    if alpha.shape[1]:
        prod = np.cumprod(one_minus, axis=1)
        trans = np.ones_like(prod)
        trans[:, 1:] = prod[:, :-1]
        leftover = prod[:, -1]
    else:
        trans = np.ones_like(alpha)
        leftover = np.ones(alpha.shape[0])
    return one_minus, alpha, trans, leftover


def _compact_masked(masked: MaskedSamples):
    """Restrict a masked batch to rays that kept at least one sample."""
    counts = masked.counts_per_ray()
    keep = np.nonzero(counts > 0)[0]
    renum = np.full(masked.n_rays, -1, dtype=np.int64)
    renum[keep] = np.arange(keep.shape[0])
    compact = MaskedSamples(
        n_rays=keep.shape[0],
        ray_index=renum[masked.ray_index],
        sample_index=masked.sample_index,
        positions=masked.positions,
        alphas=masked.alphas,
        trans=masked.trans,
        raw_counts=masked.raw_counts[keep],
    )
    return compact, keep


def _chunk_forward(
    scene: Scene,
    origins: np.ndarray,
    dirs: np.ndarray,
    cfg: RenderConfig,
    rng: np.random.Generator | None = None,
    keep_tape: bool = False,
    neuron_mode: str = "lif",
):
    step = cfg.step_size if cfg.step_size is not None else default_step(scene)
    phase = None
    if cfg.jitter:
        if rng is None:
            raise ValueError("jittered marching needs an rng")
        phase = rng.random(origins.shape[0])
    positions, deltas, valid = sample_ray_batch(origins, dirs, scene.aabb, step, phase=phase)
    n_rays = origins.shape[0]
    sigma_raw = np.zeros(valid.shape)
    if valid.any():
        sigma_raw[valid] = interp_density(scene.density, positions[valid])
    sigma = activate_density(sigma_raw, scene.density.activation)
    one_minus, alpha, trans, leftover = _transmittance_parts(sigma, deltas, valid)
    masked = apply_mask(positions, alpha, trans, valid, cfg.lambda1, cfg.lambda2)
    w_surv = masked.trans * masked.alphas
    background = np.asarray(cfg.background, dtype=float)

    colors_surv = None
    x = None
    batch = None
    tape_mlp = None
    stats = None
    if masked.count:
        feats = interp_feature(scene.feature, masked.positions)
        vemb = view_embedding(dirs, scene.view_freqs)
        x = np.concatenate([feats, vemb[masked.ray_index]], axis=1)
        if cfg.encoder == "aligned":
            compact, _ = _compact_masked(masked)
            if cfg.packing is PackingMode.TCP:
                batch = pack_tcp(compact, x, sort=cfg.sort_rays)
            else:
                batch = pack_tp(compact, x)
            if cfg.flip:
                batch = temporal_flip(batch)
            stats = occupancy_stats(batch)
            tape_mlp = smlp_forward(scene.mlp, batch.data, batch.occupancy, neuron_mode)
            colors_surv = unpack_scatter(tape_mlp.outputs, batch)
        else:
            if cfg.encoder == "direct":
                enc = direct_encode(x, cfg.time_steps)
            else:
                if rng is None:
                    raise ValueError("poisson encoding needs an rng")
                enc = poisson_encode(sigmoid(x), cfg.time_steps, rng)
            occ = np.ones(enc.shape[:2], dtype=bool)
            tape_mlp = smlp_forward(scene.mlp, enc, occ, neuron_mode)
            colors_surv = mean_decode(tape_mlp.outputs)
        colors = composite(colors_surv, w_surv, masked.ray_index, n_rays, leftover, background)
        n_queries = int(tape_mlp.occupancy.sum())
    else:
        colors = leftover[:, None] * background[None, :]
        n_queries = 0

    info = ChunkInfo(
        n_queries=n_queries, n_survivors=masked.count, stats=stats, smlp_tape=tape_mlp
    )
    tape = None
    if keep_tape:
        tape = ChunkTape(
            positions=positions,
            deltas=deltas,
            valid=valid,
            sigma_raw=sigma_raw,
            one_minus_alpha=one_minus,
            alpha=alpha,
            trans=trans,
            leftover=leftover,
            masked=masked,
            w_surv=w_surv,
            x=x,
            colors_surv=colors_surv,
            batch=batch,
            smlp_tape=tape_mlp,
            encoder=cfg.encoder,
            time_steps=cfg.time_steps,
            feature_channels=scene.feature.channels,
        )
    return colors, info, tape


@dataclass
class SceneGrads:
    """Gradient buffers matching a scene's parameters."""

    density: np.ndarray
    feature: np.ndarray
    weights: list  # [(dW, db)] per mlp layer

    @staticmethod
    def zeros(scene: Scene) -> "SceneGrads":
        return SceneGrads(
            density=np.zeros_like(scene.density.values),
            feature=np.zeros_like(scene.feature.values),
            weights=[
                (np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in scene.mlp.layers
            ],
        )


def _chunk_backward(scene: Scene, cfg: RenderConfig, tape: ChunkTape, g_colors: np.ndarray, grads: SceneGrads):
    """Accumulate d(loss)/d(scene params) for one chunk given d(loss)/d(colors)."""
    masked = tape.masked
    background = np.asarray(cfg.background, dtype=float)
    g_leftover = g_colors @ background  # [R]

    # color path: survivors' colors weigh in with w_i
    if masked.count:
        g_ray = g_colors[masked.ray_index]
        g_c_surv = tape.w_surv[:, None] * g_ray
        q_surv = np.sum(g_ray * tape.colors_surv, axis=1)  # d loss / d w_i
    else:
        q_surv = None

    # density path: w_i = T_i alpha_i and leftover = prod(1 - alpha_j)
    r, m = tape.alpha.shape
    if m:
        qw = np.zeros((r, m))
        qT = np.zeros((r, m))
        if masked.count:
            qw[masked.ray_index, masked.sample_index] = q_surv * tape.w_surv
            qT[masked.ray_index, masked.sample_index] = q_surv * masked.trans
        inclusive = np.cumsum(qw[:, ::-1], axis=1)[:, ::-1]
        suffix = inclusive - qw  # sum over later survivors of q_i w_i
        suffix += (g_leftover * tape.leftover)[:, None]
        u_safe = np.maximum(tape.one_minus_alpha, 1e-300)
        g_alpha = qT - suffix / u_safe
        g_sigma = g_alpha * tape.one_minus_alpha * tape.deltas
        g_sigma_raw = g_sigma * activate_density_grad(tape.sigma_raw, scene.density.activation)
        g_sigma_raw = np.where(tape.valid, g_sigma_raw, 0.0)
        if tape.valid.any():
            interp_density_backward(
                scene.density,
                tape.positions[tape.valid],
                g_sigma_raw[tape.valid],
                out=grads.density,
            )

    # MLP and feature path
    if masked.count:
        if tape.encoder == "aligned":
            batch = tape.batch
            g_out = np.zeros_like(tape.smlp_tape.outputs)
            g_out[batch.slot_ray, batch.slot_time] = g_c_surv
            sg = smlp_backward(scene.mlp, tape.smlp_tape, g_out)
            g_x = sg.inputs[batch.slot_ray, batch.slot_time]
        else:
            t_steps = tape.time_steps
            g_out = np.repeat((g_c_surv / t_steps)[:, None, :], t_steps, axis=1)
            sg = smlp_backward(scene.mlp, tape.smlp_tape, g_out)
            g_enc = sg.inputs.sum(axis=1)
            if tape.encoder == "direct":
                g_x = g_enc
            else:
                p = sigmoid(tape.x)  # straight-through across the Bernoulli draw
                g_x = g_enc * p * (1.0 - p)
        for (gw, gb), (dw, db) in zip(grads.weights, sg.weights):
            gw += dw
            gb += db
        g_feat = g_x[:, : tape.feature_channels]
        interp_feature_backward(scene.feature, masked.positions, g_feat, out=grads.feature)


def render_rays(
    scene: Scene,
    origins: np.ndarray,
    dirs: np.ndarray,
    cfg: RenderConfig,
    rng: np.random.Generator | None = None,
    neuron_mode: str = "lif",
    collect_ops: bool = False,
) -> RenderResult:
    """Chunked forward rendering; per-ray results do not depend on chunking."""
    origins = np.asarray(origins, dtype=float).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=float).reshape(-1, 3)
    colors = np.empty((origins.shape[0], 3))
    result = RenderResult(colors=colors)
    ops: OpCount | None = None
    for lo in range(0, origins.shape[0], cfg.chunk_size):
        sl = slice(lo, lo + cfg.chunk_size)
        c, info, _ = _chunk_forward(
            scene, origins[sl], dirs[sl], cfg, rng=rng, neuron_mode=neuron_mode
        )
        colors[sl] = c
        result.n_queries += info.n_queries
        result.n_survivors += info.n_survivors
        if info.stats is not None:
            result.pack_stats.append(info.stats)
        if collect_ops and info.smlp_tape is not None:
            chunk_ops = count_ops_snn(scene.mlp, info.smlp_tape)
            ops = chunk_ops if ops is None else ops.merge(chunk_ops)
    if collect_ops:
        result.op_count = ops if ops is not None else count_ops_snn_empty(scene.mlp)
    return result


def count_ops_snn_empty(mlp: SpikingMlp) -> OpCount:
    """Zero-op count with the mlp's topology (no occupied slots at all)."""
    from .metrics import LayerOps

    return OpCount(
        layers=[
            LayerOps(name=f"layer{i}", in_width=l.in_width, out_width=l.out_width)
            for i, l in enumerate(mlp.layers)
        ]
    )


@dataclass
class ImageBuffer:
    """Float RGB image in [0, 1]."""

    width: int
    height: int
    rgb: np.ndarray

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=float).reshape(self.height, self.width, 3)

    def clamped(self) -> np.ndarray:
        return np.clip(self.rgb, 0.0, 1.0)

    def to_uint8(self) -> np.ndarray:
        return np.clip(np.rint(self.clamped() * 255.0), 0, 255).astype(np.uint8)


def render_image(
    scene: Scene,
    camera: Camera,
    cfg: RenderConfig,
    rng: np.random.Generator | None = None,
    neuron_mode: str = "lif",
    collect_ops: bool = False,
):
    """Render a full camera view; returns (ImageBuffer, RenderResult)."""
    origins, dirs, _ = camera_rays(camera)
    result = render_rays(scene, origins, dirs, cfg, rng=rng, neuron_mode=neuron_mode, collect_ops=collect_ops)
    img = ImageBuffer(camera.width, camera.height, result.colors.reshape(camera.height, camera.width, 3))
    return img, result


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    """Optimization schedule; Adam-style moments with exponential lr decay."""

    iterations: int = 2000
    rays_per_batch: int = 1024
    lr_grid: float = 0.1
    lr_mlp: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    lr_decay: float = 0.1  # lr multiplier reached at the final iteration
    seed: int = 42
    eval_every: int = 500
    checkpoint_every: int = 0  # 0: only the final checkpoint

    def __post_init__(self):
        if self.iterations < 1 or self.rays_per_batch < 1:
            raise ValueError("iterations and rays_per_batch must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.lr_grid <= 0 or self.lr_mlp <= 0 or self.eps <= 0:
            raise ValueError("learning rates and eps must be positive")
        if not (0 < self.lr_decay <= 1):
            raise ValueError("lr_decay must lie in (0, 1]")


class Adam:
    """Adam on a flat list of parameter arrays, updated in place."""

    def __init__(self, params: list, cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list, lrs: list) -> None:
        cfg = self.cfg
        self.t += 1
        bc1 = 1.0 - cfg.beta1**self.t
        bc2 = 1.0 - cfg.beta2**self.t
        for p, g, m, v, lr in zip(self.params, grads, self.m, self.v, lrs):
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


def _scene_params(scene: Scene):
    params = [scene.density.values, scene.feature.values]
    groups = ["grid", "grid"]
    for layer in scene.mlp.layers:
        params += [layer.weight, layer.bias]
        groups += ["mlp", "mlp"]
    return params, groups


def _flat_grads(scene: Scene, grads: SceneGrads):
    out = [grads.density, grads.feature]
    for gw, gb in grads.weights:
        out += [gw, gb]
    return out


def train_step(
    scene: Scene,
    origins: np.ndarray,
    dirs: np.ndarray,
    targets: np.ndarray,
    cfg: RenderConfig,
    opt: Adam,
    groups: list,
    lr_scale: float = 1.0,
    rng: np.random.Generator | None = None,
    train_cfg: TrainConfig | None = None,
) -> float:
    """One optimization step on a ray batch; returns the loss."""
    tc = train_cfg or opt.cfg
    grads = SceneGrads.zeros(scene)
    n = origins.shape[0]
    loss = 0.0
    for lo in range(0, n, cfg.chunk_size):
        sl = slice(lo, lo + cfg.chunk_size)
        colors, _, tape = _chunk_forward(
            scene, origins[sl], dirs[sl], cfg, rng=rng, keep_tape=True
        )
        diff = colors - targets[sl]
        loss += float(np.sum(diff**2))
        g_colors = 2.0 * diff / n
        _chunk_backward(scene, cfg, tape, g_colors, grads)
    loss /= n
    lrs = [
        (tc.lr_grid if g == "grid" else tc.lr_mlp) * lr_scale for g in groups
    ]
    opt.step(_flat_grads(scene, grads), lrs)
    return loss


@dataclass
class RayDataset:
    """Flattened (origin, direction, color) triples of all training pixels."""

    origins: np.ndarray
    dirs: np.ndarray
    colors: np.ndarray

    @property
    def count(self) -> int:
        return self.origins.shape[0]


def ray_dataset_from_views(views: list) -> RayDataset:
    origins, dirs, colors = [], [], []
    for view in views:
        o, d, _ = camera_rays(view.camera)
        origins.append(o)
        dirs.append(d)
        colors.append(view.image.reshape(-1, 3))
    return RayDataset(
        origins=np.concatenate(origins),
        dirs=np.concatenate(dirs),
        colors=np.concatenate(colors),
    )


def train_loop(
    scene: Scene,
    data: RayDataset,
    render_cfg: RenderConfig,
    train_cfg: TrainConfig,
    eval_views: list | None = None,
    out_dir=None,
    config_snapshot: dict | None = None,
    log=print,
) -> list:
    """Optimize the scene; returns history rows (iteration, loss, psnr or None).

    Deterministic for a fixed seed: batch sampling and any stochastic encoder
    draw from one seeded generator. Writes metrics.csv and checkpoints under
    out_dir when given. Raises on a non-finite loss.
    """
    from .metrics import psnr as psnr_fn

    rng = np.random.default_rng(train_cfg.seed)
    params, groups = _scene_params(scene)
    opt = Adam(params, train_cfg)
    history = []
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    def evaluate() -> float | None:
        if not eval_views:
            return None
        view = eval_views[0]
        img, _ = render_image(scene, view.camera, render_cfg, rng=np.random.default_rng(train_cfg.seed))
        return psnr_fn(img.clamped(), view.image)

    for it in range(1, train_cfg.iterations + 1):
        idx = rng.integers(0, data.count, size=train_cfg.rays_per_batch)
        lr_scale = train_cfg.lr_decay ** (it / train_cfg.iterations)
        loss = train_step(
            scene,
            data.origins[idx],
            data.dirs[idx],
            data.colors[idx],
            render_cfg,
            opt,
            groups,
            lr_scale=lr_scale,
            rng=rng,
            train_cfg=train_cfg,
        )
        if not np.isfinite(loss):
            raise RuntimeError(f"non-finite loss {loss!r} at iteration {it}")
        val = None
        if train_cfg.eval_every and (it % train_cfg.eval_every == 0 or it == train_cfg.iterations):
            val = evaluate()
            if log:
                extra = f" psnr {val:.2f}" if val is not None else ""
                log(f"iter {it:6d} loss {loss:.6f}{extra}")
        history.append((it, loss, val))
        if out_dir is not None and train_cfg.checkpoint_every and it % train_cfg.checkpoint_every == 0:
            save_scene(out_dir / f"ckpt_{it:06d}.spkn", scene, iteration=it,
                       config=config_snapshot, rng_state=rng.bit_generator.state)
    if out_dir is not None:
        write_metrics_csv(out_dir / "metrics.csv", history)
        save_scene(out_dir / "ckpt.spkn", scene, iteration=train_cfg.iterations,
                   config=config_snapshot, rng_state=rng.bit_generator.state)
    return history


def write_metrics_csv(path, history) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loss", "psnr"])
        for it, loss, val in history:
            writer.writerow([it, f"{loss:.8f}", "" if val is None else f"{val:.4f}"])


# ---------------------------------------------------------------------------
# checkpoint adapters


def config_snapshot_dict(render_cfg: RenderConfig, train_cfg: TrainConfig | None = None,
                         model_cfg: ModelConfig | None = None) -> dict:
    snap = {"render": asdict(render_cfg)}
    snap["render"]["packing"] = render_cfg.packing.value
    if train_cfg is not None:
        snap["train"] = asdict(train_cfg)
    if model_cfg is not None:
        snap["model"] = asdict(model_cfg)
        snap["model"]["grid_dims"] = list(model_cfg.grid_dims)
        snap["model"]["hidden_widths"] = list(model_cfg.hidden_widths)
    return snap


def scene_to_checkpoint(scene: Scene, iteration: int = 0, config: dict | None = None,
                        rng_state: dict | None = None) -> dataio.Checkpoint:
    """Snapshot a scene; array payloads are rounded once to float32."""
    header = {
        "iteration": int(iteration),
        "config": config or {},
        "rng_state": _jsonable_rng_state(rng_state),
        "aabb_min": scene.aabb.min_corner.tolist(),
        "aabb_max": scene.aabb.max_corner.tolist(),
        "density_dims": list(scene.density.dims),
        "density_activation": {
            "kind": scene.density.activation.kind,
            "shift": scene.density.activation.shift,
        },
        "feature_dims": list(scene.feature.dims),
        "feature_channels": scene.feature.channels,
        "view_freqs": scene.view_freqs,
        "detach_reset": scene.mlp.detach_reset,
        "surrogate": {"alpha_sg": scene.mlp.surrogate.alpha_sg, "form": scene.mlp.surrogate.form},
        "layers": [
            {
                "out_width": l.out_width,
                "in_width": l.in_width,
                "lif": None if l.lif is None else {
                    "tau": l.lif.tau, "v_th": l.lif.v_th, "v_reset": l.lif.v_reset
                },
            }
            for l in scene.mlp.layers
        ],
    }
    arrays = {
        "density.values": scene.density.values.astype(np.float32),
        "feature.values": scene.feature.values.astype(np.float32),
    }
    for i, layer in enumerate(scene.mlp.layers):
        arrays[f"mlp.{i}.weight"] = layer.weight.astype(np.float32)
        arrays[f"mlp.{i}.bias"] = layer.bias.astype(np.float32)
    return dataio.Checkpoint(header=header, arrays=arrays)


def _jsonable_rng_state(state):
    if state is None:
        return None
    # numpy bit generator states are nested dicts of ints and strings
    def conv(v):
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        if isinstance(v, (np.integer,)):
            return int(v)
        return v

    return conv(state)


def scene_from_checkpoint(ckpt: dataio.Checkpoint) -> Scene:
    h = ckpt.header
    aabb = Aabb(np.asarray(h["aabb_min"]), np.asarray(h["aabb_max"]))
    act = DensityActivation(**h["density_activation"])
    density = DensityGrid(
        dims=tuple(h["density_dims"]),
        values=ckpt.arrays["density.values"].astype(np.float64),
        aabb=aabb,
        activation=act,
    )
    feature = FeatureGrid(
        dims=tuple(h["feature_dims"]),
        channels=int(h["feature_channels"]),
        values=ckpt.arrays["feature.values"].astype(np.float64),
        aabb=aabb,
    )
    from .snn import MlpLayer

    layers = []
    for i, meta in enumerate(h["layers"]):
        lif = None if meta["lif"] is None else LifConfig(**meta["lif"])
        layers.append(
            MlpLayer(
                weight=ckpt.arrays[f"mlp.{i}.weight"].astype(np.float64),
                bias=ckpt.arrays[f"mlp.{i}.bias"].astype(np.float64),
                lif=lif,
            )
        )
    mlp = SpikingMlp(layers, SurrogateConfig(**h["surrogate"]), bool(h["detach_reset"]))
    return Scene(density=density, feature=feature, mlp=mlp, view_freqs=int(h["view_freqs"]))


def save_scene(path, scene: Scene, iteration: int = 0, config: dict | None = None,
               rng_state: dict | None = None) -> None:
    dataio.save_checkpoint(path, scene_to_checkpoint(scene, iteration, config, rng_state))


def load_scene(path):
    """Returns (scene, checkpoint)."""
    ckpt = dataio.load_checkpoint(path)
    return scene_from_checkpoint(ckpt), ckpt
