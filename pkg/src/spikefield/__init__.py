"""Voxel-grid radiance fields rendered through a spiking MLP.

The public names below resolve lazily (PEP 562) so that importing the package
or its command line module stays free of numpy until something is actually
used; the CLI relies on that to pin BLAS thread counts first.
"""

__version__ = "0.1.0"

_EXPORTS = {
    "Aabb": "grid",
    "DensityActivation": "grid",
    "DensityGrid": "grid",
    "FeatureGrid": "grid",
    "activate_density": "grid",
    "interp_density": "grid",
    "interp_feature": "grid",
    "Camera": "rays",
    "Ray": "rays",
    "MaskedSamples": "rays",
    "camera_rays": "rays",
    "sample_ray_batch": "rays",
    "compute_alpha": "rays",
    "compute_transmittance": "rays",
    "apply_mask": "rays",
    "LifConfig": "snn",
    "SurrogateConfig": "snn",
    "SpikingMlp": "snn",
    "build_mlp": "snn",
    "lif_step": "snn",
    "smlp_forward": "snn",
    "smlp_backward": "snn",
    "direct_encode": "snn",
    "poisson_encode": "snn",
    "mean_decode": "snn",
    "view_embedding": "snn",
    "PackingMode": "pack",
    "PackedBatch": "pack",
    "pack_tp": "pack",
    "pack_tcp": "pack",
    "temporal_flip": "pack",
    "unpack_scatter": "pack",
    "occupancy_stats": "pack",
    "EnergyModel": "metrics",
    "EnergyReport": "metrics",
    "count_ops_snn": "metrics",
    "count_ops_ann": "metrics",
    "estimate_energy": "metrics",
    "psnr": "metrics",
    "ssim": "metrics",
    "Scene": "render",
    "ModelConfig": "render",
    "RenderConfig": "render",
    "TrainConfig": "render",
    "build_scene": "render",
    "composite": "render",
    "mse_loss": "render",
    "render_rays": "render",
    "render_image": "render",
    "train_loop": "render",
    "save_scene": "render",
    "load_scene": "render",
    "load_manifest": "dataio",
    "load_views": "dataio",
    "generate_procedural_scene": "dataio",
    "save_checkpoint": "dataio",
    "load_checkpoint": "dataio",
}

__all__ = sorted(_EXPORTS) + ["__version__"]


def __getattr__(name: str):
    module = _EXPORTS.get(name)
    if module is None:
        raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
    import importlib

    value = getattr(importlib.import_module(f".{module}", __name__), name)
    globals()[name] = value
    return value


def __dir__():
    return __all__
