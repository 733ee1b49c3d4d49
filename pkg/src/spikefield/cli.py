"""Command line front end.

Subcommands: make-scene, train, render, eval, energy, pack-bench. Report
commands write delimited output (csv / json) with a rendered figure next to
it. Exit code 2 flags a bad invocation or config file, 1 a runtime failure.

Only the standard library is imported at module level: --threads must take
effect before numpy first loads, so the engine imports happen inside main
after the environment is set.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)

CONFIG_SECTIONS = ("model", "render", "train", "energy")


class UsageError(Exception):
    """Bad flags or config file; exits with status 2."""


def _prescan_threads(argv: list) -> None:
    """Set BLAS thread env vars from --threads / --deterministic before numpy loads."""
    threads = None
    for i, arg in enumerate(argv):
        if arg == "--threads" and i + 1 < len(argv):
            threads = argv[i + 1]
        elif arg.startswith("--threads="):
            threads = arg.split("=", 1)[1]
    if threads is None and "--deterministic" in argv:
        threads = "1"
    if threads is not None:
        if not threads.isdigit() or int(threads) < 1:
            raise UsageError(f"--threads expects a positive integer, got {threads!r}")
        for var in _THREAD_VARS:
            os.environ[var] = threads


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise UsageError(f"config file is not valid json: {e}")
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a json object")
    for section in cfg:
        if section not in CONFIG_SECTIONS:
            raise UsageError(f"unknown config section {section!r}")
        if not isinstance(cfg[section], dict):
            raise UsageError(f"config section {section!r} must be a json object")
    return cfg


def _build(cls, base: dict, section: dict, name: str):
    """Construct a config dataclass from defaults + checkpoint/base + file section."""
    allowed = {f.name for f in dataclasses.fields(cls)}
    merged = {k: v for k, v in base.items() if k in allowed}
    for key, value in section.items():
        if key not in allowed:
            raise UsageError(f"unknown key {key!r} in config section {name!r}")
        merged[key] = value
    try:
        return cls(**merged)
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad value in config section {name!r}: {e}")


def _onoff(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return value == "on"


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spikefield", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="json config file (sections: model/render/train/energy)")
        p.add_argument("--seed", type=int, default=42)
        p.add_argument("--threads", type=int, help="BLAS thread cap, set before numpy loads")
        p.add_argument("--deterministic", action="store_true",
                       help="single-threaded math for bitwise repeatable runs")

    def render_flags(p):
        p.add_argument("--encoder", choices=("aligned", "direct", "poisson"))
        p.add_argument("--time-steps", type=int, dest="time_steps")
        p.add_argument("--packing", choices=("tp", "tcp"))
        p.add_argument("--flip", type=_onoff, metavar="on|off")
        p.add_argument("--sort-rays", type=_onoff, metavar="on|off", dest="sort_rays")
        p.add_argument("--step-size", type=float, dest="step_size")
        p.add_argument("--chunk-size", type=int, dest="chunk_size")

    p = sub.add_parser("make-scene", help="generate a procedural dataset")
    common(p)
    p.add_argument("out", help="dataset directory to create")
    p.add_argument("--preset", default="cube-sphere")
    p.add_argument("--n-train", type=int, default=8)
    p.add_argument("--n-test", type=int, default=2)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)

    p = sub.add_parser("train", help="fit a scene to a dataset")
    common(p)
    render_flags(p)
    p.add_argument("--data", required=True, help="dataset directory with transforms_train.json")
    p.add_argument("--out", required=True, help="output directory (checkpoint, metrics, figure)")
    p.add_argument("--iterations", type=int)
    p.add_argument("--rays-per-batch", type=int, dest="rays_per_batch")
    p.add_argument("--extent", type=float, default=1.0,
                   help="half-width of the scene box when the dataset has no scene.json")

    p = sub.add_parser("render", help="render one dataset view from a checkpoint")
    common(p)
    render_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", required=True, help="output png path")

    p = sub.add_parser("eval", help="psnr/ssim of a checkpoint over a dataset split")
    common(p)
    render_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--out", required=True, help="output directory (eval.csv + eval.png)")

    p = sub.add_parser("energy", help="estimate spiking vs dense inference energy")
    common(p)
    render_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory (energy.json + energy.png)")
    p.add_argument("--e-mac", type=float, dest="e_mac", help="energy per MAC in pJ")
    p.add_argument("--e-ac", type=float, dest="e_ac", help="energy per AC in pJ")

    p = sub.add_parser("pack-bench", help="occupancy density of both packing modes")
    common(p)
    render_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory (pack_bench.csv + pack_density.png)")

    return parser


def _render_overrides(args) -> dict:
    out = {}
    for key in ("encoder", "time_steps", "packing", "flip", "sort_rays", "step_size", "chunk_size"):
        value = getattr(args, key, None)
        if value is not None:
            out[key] = value
    return out


def _render_config(args, file_cfg: dict, ckpt_config: dict | None = None):
    from .render import RenderConfig

    base = dict((ckpt_config or {}).get("render", {}))
    base.pop("jitter", None)  # jitter is a training-time choice, never replayed
    section = dict(file_cfg.get("render", {}))
    section.update(_render_overrides(args))
    return _build(RenderConfig, base, section, "render")


def _load_dataset_views(data_dir: str, split: str):
    from . import dataio

    manifest = dataio.load_manifest(Path(data_dir) / f"transforms_{split}.json")
    return dataio.load_views(manifest)


def _scene_aabb(data_dir: str, extent: float):
    from .dataio import SceneSpec
    from .grid import Aabb

    spec_path = Path(data_dir) / "scene.json"
    if spec_path.exists():
        with open(spec_path) as fh:
            return SceneSpec.from_dict(json.load(fh)).aabb
    return Aabb((-extent, -extent, -extent), (extent, extent, extent))


def _cmd_make_scene(args) -> int:
    from . import dataio

    if args.preset not in dataio.SCENE_PRESETS:
        raise UsageError(f"unknown preset {args.preset!r}")
    spec = dataio.SCENE_PRESETS[args.preset]()
    dataio.generate_procedural_scene(
        args.out,
        spec=spec,
        n_train=args.n_train,
        n_test=args.n_test,
        width=args.width,
        height=args.height,
        seed=args.seed,
    )
    print(f"wrote dataset to {args.out}")
    return 0


def _cmd_train(args) -> int:
    import numpy as np

    from .plots import plot_metrics
    from .render import (
        ModelConfig,
        TrainConfig,
        build_scene,
        config_snapshot_dict,
        ray_dataset_from_views,
        train_loop,
    )

    file_cfg = _load_config(args.config)
    model_cfg = _build(ModelConfig, {}, file_cfg.get("model", {}), "model")
    render_cfg = _render_config(args, file_cfg)
    train_section = dict(file_cfg.get("train", {}))
    for key in ("iterations", "rays_per_batch"):
        value = getattr(args, key)
        if value is not None:
            train_section[key] = value
    train_section.setdefault("seed", args.seed)
    train_cfg = _build(TrainConfig, {}, train_section, "train")

    views = _load_dataset_views(args.data, "train")
    if (Path(args.data) / "transforms_test.json").exists():
        eval_views = _load_dataset_views(args.data, "test")
    else:
        eval_views = views[:1]  # in-sample reporting when no held-out split exists
    aabb = _scene_aabb(args.data, args.extent)
    scene = build_scene(model_cfg, aabb, np.random.default_rng(train_cfg.seed))
    data = ray_dataset_from_views(views)
    snapshot = config_snapshot_dict(render_cfg, train_cfg, model_cfg)
    history = train_loop(
        scene, data, render_cfg, train_cfg,
        eval_views=eval_views, out_dir=args.out, config_snapshot=snapshot,
    )
    figure = plot_metrics(history, Path(args.out) / "metrics.png")
    last_eval = next((v for _, _, v in reversed(history) if v is not None), None)
    line = f"trained {train_cfg.iterations} iterations, final loss {history[-1][1]:.6f}"
    if last_eval is not None:
        line += f", eval psnr {last_eval:.2f}"
    print(line)
    print(f"wrote {Path(args.out) / 'ckpt.spkn'}, {Path(args.out) / 'metrics.csv'}, {figure}")
    return 0


def _load_scene_for_report(args):
    from .render import load_scene

    scene, ckpt = load_scene(args.checkpoint)
    file_cfg = _load_config(args.config)
    render_cfg = _render_config(args, file_cfg, ckpt.header.get("config"))
    return scene, ckpt, file_cfg, render_cfg


def _cmd_render(args) -> int:
    import numpy as np

    from . import dataio
    from .metrics import psnr
    from .render import render_image

    scene, _, _, render_cfg = _load_scene_for_report(args)
    views = _load_dataset_views(args.data, args.split)
    if not (0 <= args.index < len(views)):
        raise UsageError(f"--index {args.index} outside the {len(views)} views of {args.split}")
    view = views[args.index]
    img, result = render_image(
        scene, view.camera, render_cfg, rng=np.random.default_rng(args.seed)
    )
    dataio.write_png(args.out, img.clamped())
    value = psnr(img.clamped(), view.image)
    print(f"rendered {view.name}: psnr {value:.2f} dB, {result.n_queries} mlp queries")
    print(f"wrote {args.out}")
    return 0


def _cmd_eval(args) -> int:
    import csv

    import numpy as np

    from .metrics import psnr, ssim
    from .plots import plot_eval_pairs
    from .render import render_image

    scene, _, _, render_cfg = _load_scene_for_report(args)
    views = _load_dataset_views(args.data, args.split)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    pairs = []
    for view in views:
        img, _ = render_image(scene, view.camera, render_cfg, rng=np.random.default_rng(args.seed))
        rendered = img.clamped()
        rows.append((view.name, psnr(rendered, view.image), ssim(rendered, view.image)))
        pairs.append((view.name, rendered, view.image, rows[-1][1]))
    csv_path = out_dir / "eval.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["view", "psnr", "ssim"])
        for name, p_val, s_val in rows:
            writer.writerow([name, f"{p_val:.4f}", f"{s_val:.6f}"])
    figure = plot_eval_pairs(pairs, out_dir / "eval.png")
    mean_psnr = sum(r[1] for r in rows) / len(rows)
    mean_ssim = sum(r[2] for r in rows) / len(rows)
    print(f"{args.split}: mean psnr {mean_psnr:.2f} dB, mean ssim {mean_ssim:.4f} over {len(rows)} views")
    print(f"wrote {csv_path}, {figure}")
    return 0


def _cmd_energy(args) -> int:
    import numpy as np

    from .metrics import EnergyModel, EnergyReport, count_ops_ann, estimate_energy
    from .plots import plot_energy
    from .render import render_image

    scene, _, file_cfg, render_cfg = _load_scene_for_report(args)
    energy_section = dict(file_cfg.get("energy", {}))
    if args.e_mac is not None:
        energy_section["e_mac_pj"] = args.e_mac
    if args.e_ac is not None:
        energy_section["e_ac_pj"] = args.e_ac
    model = _build(EnergyModel, {}, energy_section, "energy")

    views = _load_dataset_views(args.data, args.split)
    if not (0 <= args.index < len(views)):
        raise UsageError(f"--index {args.index} outside the {len(views)} views of {args.split}")
    view = views[args.index]
    _, result = render_image(
        scene, view.camera, render_cfg, rng=np.random.default_rng(args.seed), collect_ops=True
    )
    snn = result.op_count
    ann = count_ops_ann(scene.mlp, result.n_survivors)
    rates = [layer.input_rate for layer in snn.layers[1:]]
    report = EnergyReport(model=model, snn=snn, ann=ann, spike_rates=rates)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "energy.json"
    with open(json_path, "w") as fh:
        fh.write(report.to_json())
    figure = plot_energy(report.to_dict(), out_dir / "energy.png")
    print(
        f"view {view.name}: spiking {estimate_energy(snn, model):.1f} pJ, "
        f"dense {estimate_energy(ann, model):.1f} pJ, ratio {report.ratio:.4f}"
    )
    print(f"wrote {json_path}, {figure}")
    return 0


def _cmd_pack_bench(args) -> int:
    import csv

    import numpy as np

    from .pack import PackingMode
    from .render import render_image

    scene, _, _, render_cfg = _load_scene_for_report(args)
    if render_cfg.encoder != "aligned":
        raise UsageError("pack-bench needs the aligned encoder")
    views = _load_dataset_views(args.data, args.split)
    if not (0 <= args.index < len(views)):
        raise UsageError(f"--index {args.index} outside the {len(views)} views of {args.split}")
    view = views[args.index]
    rows = []
    for mode in (PackingMode.TP, PackingMode.TCP):
        cfg = dataclasses.replace(render_cfg, packing=mode)
        _, result = render_image(scene, view.camera, cfg, rng=np.random.default_rng(args.seed))
        for chunk, stats in enumerate(result.pack_stats):
            rows.append(
                {
                    "chunk": chunk,
                    "mode": stats.mode,
                    "rays": stats.rays,
                    "t_len": stats.t_len,
                    "valid_slots": stats.valid_slots,
                    "total_slots": stats.total_slots,
                    "density": stats.density,
                }
            )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "pack_bench.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["chunk", "mode", "rays", "t_len", "valid_slots", "total_slots", "density"]
        )
        writer.writeheader()
        for row in rows:
            writer.writerow({**row, "density": f"{row['density']:.6f}"})
    from .plots import plot_pack_density

    figure = plot_pack_density(rows, out_dir / "pack_density.png")
    for mode in ("tp", "tcp"):
        dens = [r["density"] for r in rows if r["mode"] == mode]
        if dens:
            print(f"{mode}: mean density {sum(dens) / len(dens):.4f} over {len(dens)} chunks")
    print(f"wrote {csv_path}, {figure}")
    return 0


_COMMANDS = {
    "make-scene": _cmd_make_scene,
    "train": _cmd_train,
    "render": _cmd_render,
    "eval": _cmd_eval,
    "energy": _cmd_energy,
    "pack-bench": _cmd_pack_bench,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        _prescan_threads(argv)
        args = _parser().parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - the CLI boundary reports and exits
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
