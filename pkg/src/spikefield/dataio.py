"""Datasets, procedural scenes, PNG I/O, and the checkpoint container.

Manifests follow the NeRF-synthetic transforms JSON schema: a shared
camera_angle_x plus frames of (file_path, 4x4 camera-to-world transform);
unknown frame keys are ignored so reference files load unmodified. The
checkpoint container is a little-endian binary file: magic "SPKN", a u32
format version, a u64 JSON header length, the UTF-8 header, then raw float32
array payloads in header order. Grids serialize x-fastest (Fortran ravel of
arrays indexed [x, y, z]).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .grid import Aabb
from .rays import Camera, sample_ray_batch, compute_alpha, compute_transmittance

CHECKPOINT_MAGIC = b"SPKN"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# images


def write_png(path, rgb: np.ndarray) -> None:
    """Store a float image in [0, 1] as 8-bit RGB."""
    rgb = np.asarray(rgb, dtype=float)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError("expected an [H, W, 3] image")
    data = np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(Path(path), format="PNG")


def read_png(path, background=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Load a PNG as float RGB in [0, 1]; alpha composites over background."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing image file: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGBA"), dtype=np.float64) / 255.0
    rgb = arr[..., :3]
    a = arr[..., 3:4]
    bg = np.asarray(background, dtype=float).reshape(1, 1, 3)
    return rgb * a + bg * (1.0 - a)


# ---------------------------------------------------------------------------
# manifests


@dataclass
class Frame:
    file_path: str
    transform: np.ndarray  # 4x4 camera-to-world


@dataclass
class DatasetManifest:
    camera_angle_x: float
    frames: list
    root: Path


def focal_from_angle(width: int, camera_angle_x: float) -> float:
    return 0.5 * width / np.tan(0.5 * camera_angle_x)


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing manifest file: {path}")
    with open(path) as fh:
        raw = json.load(fh)
    if "camera_angle_x" not in raw or "frames" not in raw:
        raise ValueError("manifest needs camera_angle_x and frames")
    angle = float(raw["camera_angle_x"])
    if not (0.0 < angle < np.pi):
        raise ValueError("camera_angle_x out of range")
    frames = []
    for i, fr in enumerate(raw["frames"]):
        if "file_path" not in fr or "transform_matrix" not in fr:
            raise ValueError(f"frame {i} needs file_path and transform_matrix")
        mat = np.asarray(fr["transform_matrix"], dtype=float)
        if mat.shape != (4, 4):
            raise ValueError(f"frame {i} transform_matrix must be 4x4")
        rot = mat[:3, :3]
        if np.max(np.abs(rot @ rot.T - np.eye(3))) > 1e-3:
            raise ValueError(f"frame {i} rotation is not orthonormal within tolerance")
        frames.append(Frame(file_path=str(fr["file_path"]), transform=mat))
    return DatasetManifest(camera_angle_x=angle, frames=frames, root=path.parent)


@dataclass
class LoadedView:
    camera: Camera
    image: np.ndarray  # [H, W, 3] float in [0, 1]
    name: str


def _frame_image_path(manifest: DatasetManifest, frame: Frame) -> Path:
    p = manifest.root / frame.file_path
    if p.suffix == "":
        p = p.with_suffix(".png")
    return p


def load_views(manifest: DatasetManifest, background=(1.0, 1.0, 1.0)) -> list:
    """Read every frame's image and build its camera."""
    views = []
    for frame in manifest.frames:
        img_path = _frame_image_path(manifest, frame)
        image = read_png(img_path, background)
        h, w = image.shape[:2]
        cam = Camera(
            width=w,
            height=h,
            focal=focal_from_angle(w, manifest.camera_angle_x),
            pose=frame.transform[:3, :],
            rotation_tol=1e-3,
        )
        views.append(LoadedView(camera=cam, image=image, name=Path(frame.file_path).name))
    return views


# ---------------------------------------------------------------------------
# procedural scenes


@dataclass(frozen=True)
class Primitive:
    """Constant-density solid: a sphere (size = radius) or a box (size = half extents)."""

    kind: str
    center: tuple
    size: tuple
    density: float
    color: tuple

    def __post_init__(self):
        if self.kind not in ("sphere", "box"):
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        if self.density <= 0:
            raise ValueError("primitive density must be positive")

    def inside(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=float) - np.asarray(self.center)
        if self.kind == "sphere":
            return np.sum(p * p, axis=-1) <= float(self.size[0]) ** 2
        return np.all(np.abs(p) <= np.asarray(self.size), axis=-1)


@dataclass(frozen=True)
class SceneSpec:
    """Analytic scene: primitives inside a box, composited over a background."""

    aabb: Aabb
    primitives: tuple
    background: tuple = (1.0, 1.0, 1.0)
    name: str = "scene"

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "aabb_min": self.aabb.min_corner.tolist(),
            "aabb_max": self.aabb.max_corner.tolist(),
            "background": list(self.background),
            "primitives": [
                {
                    "kind": p.kind,
                    "center": list(p.center),
                    "size": list(p.size),
                    "density": p.density,
                    "color": list(p.color),
                }
                for p in self.primitives
            ],
        }

    @staticmethod
    def from_dict(d: dict) -> "SceneSpec":
        return SceneSpec(
            aabb=Aabb(np.asarray(d["aabb_min"]), np.asarray(d["aabb_max"])),
            primitives=tuple(
                Primitive(
                    kind=p["kind"],
                    center=tuple(p["center"]),
                    size=tuple(p["size"]),
                    density=float(p["density"]),
                    color=tuple(p["color"]),
                )
                for p in d["primitives"]
            ),
            background=tuple(d.get("background", (1.0, 1.0, 1.0))),
            name=d.get("name", "scene"),
        )


class SceneField:
    """Point-wise density and color lookups for a SceneSpec."""

    def __init__(self, spec: SceneSpec):
        self.spec = spec

    def density(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        out = np.zeros(p.shape[:-1])
        for prim in self.spec.primitives:
            out += prim.density * prim.inside(p)
        return out

    def color(self, points: np.ndarray) -> np.ndarray:
        """Density-weighted blend of the colors of covering primitives."""
        p = np.asarray(points, dtype=float)
        num = np.zeros(p.shape[:-1] + (3,))
        den = np.zeros(p.shape[:-1])
        for prim in self.spec.primitives:
            w = prim.density * prim.inside(p)
            num += w[..., None] * np.asarray(prim.color)
            den += w
        return num / np.maximum(den, 1e-30)[..., None]


def look_at_pose(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world 3x4 with -z pointing from eye to target."""
    eye = np.asarray(eye, dtype=float)
    back = eye - np.asarray(target, dtype=float)
    back /= np.linalg.norm(back)
    right = np.cross(np.asarray(up, dtype=float), back)
    n = np.linalg.norm(right)
    if n < 1e-9:  # looking straight along up: pick another basis
        right = np.cross(np.array([0.0, 1.0, 0.0]), back)
        n = np.linalg.norm(right)
    right /= n
    true_up = np.cross(back, right)
    pose = np.zeros((3, 4))
    pose[:, 0] = right
    pose[:, 1] = true_up
    pose[:, 2] = back
    pose[:, 3] = eye
    return pose


def orbit_cameras(
    n: int,
    center,
    radius: float,
    width: int,
    height: int,
    camera_angle_x: float,
    rng: np.random.Generator,
) -> list:
    """Cameras on a sphere around center, looking inward, z-up world."""
    cams = []
    azimuths = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
    azimuths = azimuths + rng.uniform(0.0, 2.0 * np.pi)
    elevations = np.deg2rad(rng.uniform(-15.0, 55.0, size=n))
    focal = focal_from_angle(width, camera_angle_x)
    center = np.asarray(center, dtype=float)
    for az, el in zip(azimuths, elevations):
        eye = center + radius * np.array(
            [np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)]
        )
        cams.append(Camera(width=width, height=height, focal=focal, pose=look_at_pose(eye, center)))
    return cams


def render_reference(field: SceneField, camera: Camera, step_scale: float = 1e-3, chunk: int = 1024) -> np.ndarray:
    """Dense analytic ray march of the scene; the engine-independent ground truth.

    Marches at step_scale times the box diagonal and composites with the same
    opacity/transmittance maps the engine uses.
    """
    spec = field.spec
    step = step_scale * spec.aabb.diagonal
    bg = np.asarray(spec.background, dtype=float)
    from .rays import camera_rays  # local import keeps module load light

    origins, dirs, _ = camera_rays(camera)
    out = np.empty((origins.shape[0], 3))
    for lo in range(0, origins.shape[0], chunk):
        o = origins[lo : lo + chunk]
        d = dirs[lo : lo + chunk]
        pos, deltas, valid = sample_ray_batch(o, d, spec.aabb, step)
        sigma = np.zeros(valid.shape)
        color = np.zeros(valid.shape + (3,))
        if valid.any():
            sigma[valid] = field.density(pos[valid])
            color[valid] = field.color(pos[valid])
        alpha = compute_alpha(sigma, deltas)
        alpha[~valid] = 0.0
        trans = compute_transmittance(alpha)
        weights = trans * alpha
        leftover = np.prod(1.0 - alpha, axis=1)
        rgb = np.sum(weights[..., None] * color, axis=1) + leftover[:, None] * bg
        out[lo : lo + chunk] = rgb
    return out.reshape(camera.height, camera.width, 3)


def cube_sphere_spec() -> SceneSpec:
    """The desk-scale benchmark scene: one sphere, one box, white background."""
    return SceneSpec(
        aabb=Aabb(np.array([-1.0, -1.0, -1.0]), np.array([1.0, 1.0, 1.0])),
        primitives=(
            Primitive(
                kind="sphere",
                center=(0.42, 0.05, 0.0),
                size=(0.38,),
                density=35.0,
                color=(0.85, 0.18, 0.12),
            ),
            Primitive(
                kind="box",
                center=(-0.42, -0.05, -0.05),
                size=(0.3, 0.32, 0.3),
                density=35.0,
                color=(0.12, 0.25, 0.82),
            ),
        ),
        name="cube-sphere",
    )


SCENE_PRESETS = {"cube-sphere": cube_sphere_spec}


def generate_procedural_scene(
    out_dir,
    spec: SceneSpec | None = None,
    n_train: int = 8,
    n_test: int = 2,
    width: int = 64,
    height: int = 64,
    camera_angle_x: float = 0.7,
    orbit_radius: float = 3.4,
    seed: int = 42,
    step_scale: float = 1e-3,
) -> SceneField:
    """Render an analytic scene to a NeRF-synthetic style dataset directory.

    Writes transforms_train.json / transforms_test.json, the PNG views, and
    scene.json (the analytic spec, picked up by the trainer for its box).
    Deterministic for a fixed seed.
    """
    out_dir = Path(out_dir)
    spec = spec or cube_sphere_spec()
    field = SceneField(spec)
    rng = np.random.default_rng(seed)
    cams = orbit_cameras(
        n_train + n_test, spec.aabb.center, orbit_radius, width, height, camera_angle_x, rng
    )
    splits = {"train": cams[:n_train], "test": cams[n_train : n_train + n_test]}
    for split, cameras in splits.items():
        (out_dir / split).mkdir(parents=True, exist_ok=True)
        frames = []
        for i, cam in enumerate(cameras):
            img = render_reference(field, cam, step_scale)
            rel = f"./{split}/r_{i}"
            write_png(out_dir / split / f"r_{i}.png", img)
            mat = np.eye(4)
            mat[:3, :] = cam.pose
            frames.append({"file_path": rel, "transform_matrix": mat.tolist()})
        manifest = {"camera_angle_x": camera_angle_x, "frames": frames}
        with open(out_dir / f"transforms_{split}.json", "w") as fh:
            json.dump(manifest, fh, indent=2)
    with open(out_dir / "scene.json", "w") as fh:
        json.dump(spec.to_dict(), fh, indent=2)
    return field


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    """Serialized model state: a JSON-able header plus named float32 arrays."""

    header: dict
    arrays: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, arr in self.arrays.items():
            a = np.asarray(arr)
            if a.dtype != np.float32:
                raise ValueError(f"checkpoint array {name!r} must be float32")

    @property
    def iteration(self) -> int:
        return int(self.header.get("iteration", 0))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write the container; array payloads are little-endian float32."""
    entries = []
    blobs = []
    for name, arr in ckpt.arrays.items():
        arr = np.asarray(arr, dtype=np.float32)
        order = "F" if arr.ndim >= 3 else "C"  # grids x-fastest, weights row-major
        entries.append({"name": name, "shape": list(arr.shape), "order": order})
        blobs.append(np.ravel(arr, order=order).astype("<f4").tobytes())
    header = dict(ckpt.header)
    header["arrays"] = entries
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint file: {path}")
    raw = path.read_bytes()
    if len(raw) < 16 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    (version,) = struct.unpack("<I", raw[4:8])
    if version > CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if len(raw) < 16 + hlen:
        raise CheckpointError("truncated checkpoint: header cut short")
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    offset = 16 + hlen
    arrays = {}
    for entry in header.pop("arrays", []):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        if len(raw) < offset + nbytes:
            raise CheckpointError("truncated checkpoint: array payload cut short")
        flat = np.frombuffer(raw[offset : offset + nbytes], dtype="<f4")
        arrays[entry["name"]] = flat.reshape(shape, order=entry["order"]).copy()
        offset += nbytes
    return Checkpoint(header=header, arrays=arrays)
