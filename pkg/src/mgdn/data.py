"""Deterministic synthetic fusion data and raster/manifest I/O.

All generators are pure functions of their arguments. Display-referred
rasters are quantised to 8 bits and linear rasters (HDR radiance, depth) to
float32, so writing and re-reading a sample reproduces it exactly.
"""
from __future__ import annotations

import json
import os
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

GAMMA = 2.2
MU = 5000.0
MGDR_MAGIC = b"MGDR"
_MGDR_HEADER = struct.Struct("<4sIII")


class RasterFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    height: int = 64
    width: int = 64
    primitives: int = 8
    channels: int = 3


@dataclass
class FusionSample:
    inputs: list[np.ndarray]
    gt: np.ndarray
    task: str
    meta: dict = field(default_factory=dict)
    # generator-side ground truth (focus masks etc.); never written to disk
    aux: dict = field(default_factory=dict, repr=False)


def quantize8(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255.0) / 255.0


def to_f32(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float32).astype(np.float64)


# ------------------------------------------------------------------- scenes


def _texture(rng: np.random.Generator, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    kind = rng.integers(3)
    if kind == 0:
        f = rng.uniform(0.12, 0.35)
        th = rng.uniform(0, np.pi)
        t = 0.5 + 0.5 * np.sin(2 * np.pi * f * (xx * np.cos(th) + yy * np.sin(th)) + rng.uniform(0, 6.3))
    elif kind == 1:
        s = rng.integers(2, 5)
        t = ((yy // s + xx // s) % 2).astype(float)
    else:
        t = ndimage.gaussian_filter(rng.random(yy.shape), 0.7)
        t = (t - t.min()) / (np.ptp(t) + 1e-12)
    return t


def render_scene(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Returns (image H x W x C in [0, 1], depth H x W in [0, 1])."""
    rng = np.random.default_rng(spec.seed)
    H, W, C = spec.height, spec.width, spec.channels
    yy, xx = np.mgrid[0:H, 0:W].astype(float)
    c0, c1 = rng.random(C), rng.random(C)
    tex = _texture(rng, yy, xx)
    img = c0 * (1 - tex[..., None]) * 0.6 + c1 * tex[..., None] * 0.6 + 0.2
    gy, gx = rng.uniform(-1, 1, 2)
    depth = 0.8 + 0.1 * (gy * (yy / H - 0.5) + gx * (xx / W - 0.5))
    for _ in range(spec.primitives):
        cy, cx = rng.uniform(0, H), rng.uniform(0, W)
        ry, rx = rng.uniform(0.12, 0.35) * H, rng.uniform(0.12, 0.35) * W
        kind = rng.integers(3)
        if kind == 0:
            mask = (np.abs(yy - cy) < ry) & (np.abs(xx - cx) < rx)
        elif kind == 1:
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 < 1
        else:
            th = rng.uniform(0, np.pi)
            u = (xx - cx) * np.cos(th) + (yy - cy) * np.sin(th)
            v = -(xx - cx) * np.sin(th) + (yy - cy) * np.cos(th)
            mask = (np.abs(u) < rx) & (np.abs(v) < ry * 0.6)
        ca, cb = rng.random(C), rng.random(C)
        t = _texture(rng, yy, xx)[..., None]
        shade = 0.7 + 0.3 * ((yy - cy) / H)[..., None] * rng.uniform(-1, 1)
        patch = np.clip((ca * (1 - t) + cb * t) * shade, 0, 1)
        img = np.where(mask[..., None], patch, img)
        d0 = rng.uniform(0.05, 0.75)
        tilt = rng.uniform(-0.05, 0.05, 2)
        depth = np.where(mask, d0 + tilt[0] * (yy - cy) / H + tilt[1] * (xx - cx) / W, depth)
    return np.clip(img, 0, 1), np.clip(depth, 0, 1)


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return img.copy()
    return ndimage.gaussian_filter(img, sigma=(sigma, sigma, 0), mode="reflect")


# --------------------------------------------------------------- generators


def gen_multifocus(spec: SceneSpec, blur_sigma: float = 2.0) -> FusionSample:
    """Near-focus and far-focus captures of one scene.

    The focal split is the depth median, so each input is sharp on roughly
    half the image and the two sharp regions partition it.
    """
    img, depth = render_scene(spec)
    gt = quantize8(img)
    near = depth < np.median(depth)
    blurred = quantize8(gaussian_blur(img, blur_sigma))
    a = np.where(near[..., None], gt, blurred)  # focused on near depths
    b = np.where(near[..., None], blurred, gt)  # focused on far depths
    return FusionSample([a, b], gt, "mff",
                        {"blur_sigma": blur_sigma, "near_fraction": float(near.mean())},
                        {"near_mask": near})


def _radiance(img: np.ndarray) -> np.ndarray:
    return img ** GAMMA


def _expose(radiance: np.ndarray, ev: float, gain: float = 1.0) -> np.ndarray:
    return quantize8(np.clip(radiance * gain * 2.0 ** ev, 0, 1) ** (1 / GAMMA))


def gen_multiexposure(spec: SceneSpec, ev: float = 2.0, brightness: float = 1.0) -> FusionSample:
    img, _ = render_scene(spec)
    rad = _radiance(img) * brightness
    gt = _expose(rad, 0.0)
    under, over = _expose(rad, -ev), _expose(rad, ev)
    clipped = float((np.clip(rad * 2.0 ** ev, 0, None) >= 1).any(axis=-1).mean())
    return FusionSample([under, over], gt, "mef",
                        {"ev": ev, "brightness": brightness, "over_clipped_fraction": clipped})


def _translate(x: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Integer shift with edge replication (no wrap-around)."""
    H, W = x.shape[:2]
    p = max(abs(dy), abs(dx))
    if p == 0:
        return x.copy()
    xp = np.pad(x, ((p, p), (p, p), (0, 0)), mode="edge")
    return xp[p - dy:p - dy + H, p - dx:p - dx + W]


def hdr_radiance(spec: SceneSpec) -> np.ndarray:
    """Linear radiance with boosted highlights, normalised to peak 1."""
    img, depth = render_scene(spec)
    rad = _radiance(img) * (1.0 + 6.0 * (depth < np.quantile(depth, 0.2)))[..., None]
    return to_f32(rad / rad.max())


HDR_BASE_GAIN = 2.0


def gen_hdr_triplet(spec: SceneSpec, motion_px: int = 2, evs=(-2.0, 0.0, 2.0)) -> FusionSample:
    """Three bracketed LDR frames; outer frames shifted to simulate ghosting."""
    if motion_px < 0:
        raise ValueError("motion_px must be >= 0")
    rng = np.random.default_rng([spec.seed, 7])
    gt = hdr_radiance(spec)
    shifts = [tuple(int(v) for v in rng.integers(-motion_px, motion_px + 1, 2)) for _ in range(2)]
    frames = []
    for i, ev in enumerate(evs):
        r = gt if i == 1 else _translate(gt, *shifts[0 if i == 0 else 1])
        frames.append(_expose(r, ev, HDR_BASE_GAIN))
    return FusionSample(frames, gt, "hdr",
                        {"evs": list(evs), "motion_px": motion_px, "shifts": shifts,
                         "gain": HDR_BASE_GAIN})


def merge_ldr(frames, evs, gain: float = HDR_BASE_GAIN) -> np.ndarray:
    """Inverse-CRF weighted merge of bracketed LDR frames (ignores motion)."""
    num = np.zeros_like(frames[0])
    den = np.zeros_like(frames[0])
    for f, ev in zip(frames, evs):
        lin = f ** GAMMA / (gain * 2.0 ** ev)
        w = np.where((f > 0.02) & (f < 0.98), 1.0 - np.abs(2 * f - 1) + 1e-3, 0.0)
        num += w * lin
        den += w
    fallback = frames[0] ** GAMMA / (gain * 2.0 ** evs[0])
    return np.where(den > 0, num / np.maximum(den, 1e-12), fallback)


def bicubic_resize(x: np.ndarray, height: int, width: int) -> np.ndarray:
    chans = [np.asarray(Image.fromarray(x[..., c].astype(np.float32), mode="F")
                        .resize((width, height), Image.BICUBIC), dtype=np.float64)
             for c in range(x.shape[2])]
    return np.stack(chans, axis=-1)


def gen_depth_sr(spec: SceneSpec, scale: int = 4) -> FusionSample:
    img, depth = render_scene(spec)
    gt = to_f32(depth[..., None])
    H, W = gt.shape[:2]
    if scale == 1:
        up = gt.copy()
    else:
        Hp, Wp = -(-H // scale) * scale, -(-W // scale) * scale
        padded = np.pad(gt, ((0, Hp - H), (0, Wp - W), (0, 0)), mode="edge")
        low = padded.reshape(Hp // scale, scale, Wp // scale, scale, 1).mean(axis=(1, 3))
        up = bicubic_resize(low, Hp, Wp)[:H, :W]
    return FusionSample([to_f32(up), quantize8(img)], gt, "gdsr", {"scale": scale})


def generate(task: str, seed: int, index: int, size: int = 64, **kw) -> FusionSample:
    """Sample ``index`` of the dataset seeded by ``seed``."""
    sub = int(np.random.SeedSequence([seed, index]).generate_state(1)[0])
    spec = SceneSpec(seed=sub, height=size, width=size)
    if task == "mff":
        return gen_multifocus(spec, **kw)
    if task == "mef":
        return gen_multiexposure(spec, **kw)
    if task == "hdr":
        return gen_hdr_triplet(spec, **kw)
    if task == "gdsr":
        return gen_depth_sr(spec, **kw)
    raise ValueError(f"unknown task {task!r}")


def mu_law_tonemap(hdr, mu: float = MU) -> np.ndarray:
    hdr = np.asarray(hdr, dtype=np.float64)
    if (hdr < 0).any():
        warnings.warn("mu_law_tonemap: negative values clamped to 0", RuntimeWarning)
        hdr = np.maximum(hdr, 0.0)
    return np.log1p(mu * hdr) / np.log1p(mu)


# ---------------------------------------------------------------- raster io


def write_raster(path, raster: np.ndarray) -> None:
    path = Path(path)
    raster = np.asarray(raster, dtype=np.float64)
    if raster.ndim == 2:
        raster = raster[..., None]
    if path.suffix.lower() == ".png":
        q = np.round(np.clip(raster, 0, 1) * 255).astype(np.uint8)
        if q.shape[2] == 1:
            Image.fromarray(q[..., 0], mode="L").save(path)
        elif q.shape[2] == 3:
            Image.fromarray(q, mode="RGB").save(path)
        else:
            raise ValueError(f"PNG needs 1 or 3 channels, got {q.shape[2]}")
        return
    H, W, C = raster.shape
    planar = np.ascontiguousarray(raster.transpose(2, 0, 1), dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_MGDR_HEADER.pack(MGDR_MAGIC, H, W, C))
        fh.write(planar.tobytes())


def read_raster(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".png":
        with Image.open(path) as im:
            a = np.asarray(im, dtype=np.float64) / 255.0
        return a[..., None] if a.ndim == 2 else a
    blob = path.read_bytes()
    if len(blob) < _MGDR_HEADER.size:
        raise RasterFormatError(f"{path}: header truncated at offset {len(blob)} "
                                f"(need {_MGDR_HEADER.size} bytes)")
    magic, H, W, C = _MGDR_HEADER.unpack_from(blob, 0)
    if magic != MGDR_MAGIC:
        raise RasterFormatError(f"{path}: bad magic {magic!r} at offset 0")
    if H == 0 or W == 0 or C == 0:
        raise RasterFormatError(f"{path}: zero extent in header at offset 4 ({H}x{W}x{C})")
    need = H * W * C * 4
    have = len(blob) - _MGDR_HEADER.size
    if have != need:
        raise RasterFormatError(f"{path}: payload is {have} bytes at offset {_MGDR_HEADER.size}, "
                                f"header declares {need}")
    planar = np.frombuffer(blob, dtype="<f4", offset=_MGDR_HEADER.size).reshape(C, H, W)
    return planar.transpose(1, 2, 0).astype(np.float64)


# ----------------------------------------------------------------- datasets


def _ext(task: str, role: str, i: int = 0) -> str:
    linear = (task == "hdr" and role == "gt") or (task == "gdsr" and (role == "gt" or i == 0))
    return ".mgdr" if linear else ".png"


def write_sample(sample: FusionSample, out_dir, sample_id: str) -> dict:
    out_dir = Path(out_dir)
    paths = []
    for i, x in enumerate(sample.inputs):
        name = f"{sample_id}_in{i}{_ext(sample.task, 'in', i)}"
        write_raster(out_dir / name, x)
        paths.append(name)
    gt_name = f"{sample_id}_gt{_ext(sample.task, 'gt')}"
    write_raster(out_dir / gt_name, sample.gt)
    return {"id": sample_id, "task": sample.task, "inputs": paths, "gt": gt_name,
            "meta": sample.meta}


def write_manifest(records: list[dict], path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_manifest(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_sample(record: dict, root) -> FusionSample:
    root = Path(root)
    inputs = [read_raster(root / p) for p in record["inputs"]]
    return FusionSample(inputs, read_raster(root / record["gt"]), record["task"],
                        record.get("meta", {}))


def load_dataset(manifest_path) -> list[FusionSample]:
    root = os.path.dirname(os.path.abspath(manifest_path))
    return [load_sample(r, root) for r in read_manifest(manifest_path)]
