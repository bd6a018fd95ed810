"""File formats: PNG (8-bit), PFM (32-bit float), pose JSON, ASCII PLY,
frame-bundle directories, and a raw .npz map snapshot.

A frame bundle directory holds scene.json plus frames/ with, per frame,
frame_XXXXX.png (color), frame_XXXXX.pfm (depth) and frame_XXXXX.json
(pose + contributor id). Evaluation sets live in eval_interp/ and
eval_extrap/ with the same per-frame layout.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from splatstream.core import CameraPose, FrameRGBD, GaussianMap


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

def write_png(path, image: np.ndarray) -> None:
    """[0,1] float image (H,W) or (H,W,3) -> 8-bit PNG."""
    arr = np.clip(np.asarray(image, np.float64), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    mode = "L" if data.ndim == 2 else "RGB"
    Image.fromarray(data, mode=mode).save(str(path), format="PNG")


def read_png(path) -> np.ndarray:
    img = Image.open(str(path))
    arr = np.asarray(img, dtype=np.float64) / 255.0
    return arr


def write_pfm(path, image: np.ndarray) -> None:
    """Float32 PFM, little-endian (negative scale), rows bottom-to-top."""
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim == 2:
        header = b"Pf\n"
        h, w = arr.shape
    elif arr.ndim == 3 and arr.shape[2] == 3:
        header = b"PF\n"
        h, w = arr.shape[:2]
    else:
        raise ValueError("PFM supports (H,W) or (H,W,3) images")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(f"{w} {h}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(np.ascontiguousarray(arr[::-1], dtype="<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        if kind not in (b"Pf", b"PF"):
            raise ValueError("not a PFM file")
        w, h = map(int, fh.readline().split())
        scale = float(fh.readline())
        channels = 3 if kind == b"PF" else 1
        count = w * h * channels
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(count * 4), dtype=dtype).astype(np.float64)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return data.reshape(shape)[::-1].copy()


# ---------------------------------------------------------------------------
# poses and frames
# ---------------------------------------------------------------------------

def pose_to_json(pose: CameraPose) -> dict:
    return {"rotation": pose.rotation.tolist(),
            "translation": pose.translation.tolist(),
            "fx": pose.fx, "fy": pose.fy, "cx": pose.cx, "cy": pose.cy,
            "width": pose.width, "height": pose.height}


def pose_from_json(d: dict) -> CameraPose:
    return CameraPose(np.array(d["rotation"]), np.array(d["translation"]),
                      d["fx"], d["fy"], d["cx"], d["cy"],
                      d["width"], d["height"])


def write_frame(directory, index: int, frame: FrameRGBD,
                prefix: str = "frame") -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = f"{prefix}_{index:05d}"
    write_png(directory / f"{stem}.png", frame.color)
    write_pfm(directory / f"{stem}.pfm", frame.depth)
    meta = pose_to_json(frame.pose)
    meta["contributor_id"] = frame.contributor_id
    with open(directory / f"{stem}.json", "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)


def read_frame(directory, index: int, prefix: str = "frame") -> FrameRGBD:
    directory = Path(directory)
    stem = f"{prefix}_{index:05d}"
    with open(directory / f"{stem}.json") as fh:
        meta = json.load(fh)
    pose = pose_from_json(meta)
    color = read_png(directory / f"{stem}.png")
    depth = read_pfm(directory / f"{stem}.pfm")
    return FrameRGBD(color, depth, pose, meta.get("contributor_id", 0))


def write_frame_set(directory, frames: list[FrameRGBD],
                    prefix: str = "frame") -> None:
    for i, frame in enumerate(frames):
        write_frame(directory, i, frame, prefix)


def read_frame_set(directory, prefix: str = "frame") -> list[FrameRGBD]:
    directory = Path(directory)
    frames = []
    i = 0
    while (directory / f"{prefix}_{i:05d}.json").exists():
        frames.append(read_frame(directory, i, prefix))
        i += 1
    return frames


# ---------------------------------------------------------------------------
# point clouds and maps
# ---------------------------------------------------------------------------

def write_ply(path, points: np.ndarray, colors: np.ndarray | None = None) -> None:
    """ASCII PLY export for external inspection."""
    points = np.asarray(points, np.float64)
    n = len(points)
    lines = ["ply", "format ascii 1.0", f"element vertex {n}",
             "property float x", "property float y", "property float z"]
    if colors is not None:
        lines += ["property uchar red", "property uchar green",
                  "property uchar blue"]
    lines.append("end_header")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
        if colors is None:
            for p in points:
                fh.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f}\n")
        else:
            rgb = np.round(np.clip(colors, 0, 1) * 255).astype(int)
            for p, c in zip(points, rgb):
                fh.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} "
                         f"{c[0]} {c[1]} {c[2]}\n")


def save_map_npz(path, m: GaussianMap) -> None:
    extras = {}
    if m.anchor_positions is not None:
        extras["anchor_positions"] = m.anchor_positions
    np.savez(path, positions=m.positions, scales=m.scales,
             rotations=m.rotations, opacities=m.opacities, colors=m.colors,
             kinds=m.kinds, alive=m.alive, K=np.int64(m.K),
             stage_id=np.int64(m.stage_id), **extras)


def load_map_npz(path) -> GaussianMap:
    with np.load(path) as data:
        anchor = data["anchor_positions"] if "anchor_positions" in data else None
        return GaussianMap(data["positions"], data["scales"],
                           data["rotations"], data["opacities"],
                           data["colors"], data["kinds"], data["alive"],
                           anchor, int(data["K"]), int(data["stage_id"]))


def write_rendered_views(directory, stem: str, views, formats=("png",)) -> None:
    """Dump color/depth/opacity/normal buffers as PNG and/or PFM."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    buffers = {"color": views.color, "depth": views.depth,
               "opacity": views.opacity,
               "normal": (views.normal + 1.0) / 2.0}
    for name, buf in buffers.items():
        if "png" in formats:
            img = buf if name != "depth" else buf / max(buf.max(), 1e-9)
            write_png(directory / f"{stem}_{name}.png", img)
        if "pfm" in formats:
            write_pfm(directory / f"{stem}_{name}.pfm", buf)


def write_pseudo_gt_bundle(directory, pseudo_list, tau: float,
                           skipped: int) -> None:
    """Pseudo-GT set as PNG+PFM pairs plus a JSON manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"tau": tau, "skipped_poses": skipped, "views": []}
    for i, p in enumerate(pseudo_list):
        stem = f"pseudo_{i:05d}"
        write_png(directory / f"{stem}_image.png", p.image)
        write_pfm(directory / f"{stem}_depth.pfm", p.depth)
        write_pfm(directory / f"{stem}_confidence.pfm", p.confidence)
        manifest["views"].append({"stem": stem,
                                  "pose": pose_to_json(p.pose)})
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
