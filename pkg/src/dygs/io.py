"""On-disk formats: scene-bundle directories, PFM/PNG images, the versioned
binary checkpoint container, run manifests, and the training CSV log.

Bundle layout:
    cameras.json      per-frame intrinsics + world-to-camera 4x4 (gt, init),
                      plus the held-out test camera
    frames/%04d.png   8-bit RGB training frames
    depth/%04d.pfm    32-bit float little-endian z-depth (0 = no geometry)
    masks/%04d.png    8-bit 0/255 motion masks
    test/%04d.png     held-out fixed-camera images, one per timestep
    meta.json         T, H, W, test split, seed, bg color, config snapshot

Checkpoints: magic + u64 header length + JSON header (array manifest,
counts, motion dim, SH degree, metadata) followed by raw little-endian
arrays in declared order.
"""

from __future__ import annotations

import csv
import json
import os
import struct
import subprocess
import time
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataContractError
from .scene_model import CameraPose, SceneBundle, TestView

CHECKPOINT_MAGIC = b"DYGSCKPT"
CHECKPOINT_VERSION = 1


# -- primitive image formats -----------------------------------------------------


def write_png(path, img):
    """Save float [0,1] (H,W,3) or bool/uint8 (H,W) as 8-bit PNG."""
    img = np.asarray(img)
    if img.dtype == bool:
        img = img.astype(np.uint8) * 255
    elif img.dtype != np.uint8:
        img = (np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(img).save(str(path))


def read_png(path):
    return np.asarray(Image.open(str(path)))


def write_pfm(path, data):
    """Little-endian PFM, bottom-to-top scanlines; (H,W) or (H,W,3) float32."""
    data = np.asarray(data, dtype=np.float32)
    color = data.ndim == 3
    with open(path, "wb") as f:
        f.write(b"PF\n" if color else b"Pf\n")
        f.write(f"{data.shape[1]} {data.shape[0]}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.flipud(data).astype("<f4").tobytes())


def read_pfm(path):
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header not in (b"PF", b"Pf"):
            raise DataContractError(f"{path}: not a PFM file")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline())
        count = w * h * (3 if header == b"PF" else 1)
        raw = np.frombuffer(f.read(count * 4), dtype="<f4" if scale < 0 else ">f4")
    shape = (h, w, 3) if header == b"PF" else (h, w)
    return np.flipud(raw.reshape(shape)).copy()


# -- scene bundles -----------------------------------------------------------------


def _cam_record(cam: CameraPose, extra=None):
    rec = {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
           "width": cam.width, "height": cam.height}
    rec.update(extra or {})
    return rec


def _cam_from_record(rec, mat_key):
    m = np.asarray(rec[mat_key], dtype=np.float64).reshape(4, 4)
    return CameraPose.from_matrix(m, rec["fx"], rec["fy"], rec["cx"], rec["cy"],
                                  rec["width"], rec["height"])


def save_bundle(bundle: SceneBundle, out_dir):
    out = Path(out_dir)
    for sub in ("frames", "depth", "masks", "test"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    T = bundle.n_frames
    for t in range(T):
        write_png(out / "frames" / f"{t:04d}.png", bundle.frames[t])
        write_pfm(out / "depth" / f"{t:04d}.pfm", bundle.depths[t])
        write_png(out / "masks" / f"{t:04d}.png", bundle.masks[t])
    for v in bundle.test_views:
        write_png(out / "test" / f"{v.t:04d}.png", v.image)

    cams = []
    for t in range(T):
        cams.append(_cam_record(bundle.cam_gt[t], {
            "w2c_gt": bundle.cam_gt[t].to_matrix().ravel().tolist(),
            "w2c_init": bundle.cam_init[t].to_matrix().ravel().tolist(),
        }))
    test_cam = None
    if bundle.test_views:
        tc = bundle.test_views[0].cam
        test_cam = _cam_record(tc, {"w2c": tc.to_matrix().ravel().tolist()})
    _dump_json(out / "cameras.json", {"frames": cams, "test_camera": test_cam})

    H, W = bundle.image_hw
    meta = dict(bundle.meta)
    meta.update({"T": T, "H": H, "W": W,
                 "test_split": [v.t for v in bundle.test_views],
                 "bg_color": np.asarray(bundle.bg_color, dtype=float).tolist(),
                 "seed": bundle.meta.get("seed", 0)})
    _dump_json(out / "meta.json", meta)
    return out


def load_bundle(in_dir) -> SceneBundle:
    src = Path(in_dir)
    if not (src / "meta.json").exists():
        raise DataContractError(f"{src}: missing meta.json (not a scene bundle)")
    meta = json.loads((src / "meta.json").read_text())
    cam_doc = json.loads((src / "cameras.json").read_text())
    T = int(meta["T"])

    frames, depths, masks = [], [], []
    for t in range(T):
        frames.append(read_png(src / "frames" / f"{t:04d}.png").astype(np.float32) / 255.0)
        depths.append(read_pfm(src / "depth" / f"{t:04d}.pfm").astype(np.float32))
        masks.append(read_png(src / "masks" / f"{t:04d}.png") > 127)
    cam_gt = [_cam_from_record(r, "w2c_gt") for r in cam_doc["frames"]]
    cam_init = [_cam_from_record(r, "w2c_init") for r in cam_doc["frames"]]

    test_views = []
    if cam_doc.get("test_camera") is not None:
        tc = _cam_from_record(cam_doc["test_camera"], "w2c")
        for t in meta.get("test_split", []):
            p = src / "test" / f"{t:04d}.png"
            if p.exists():
                img = read_png(p).astype(np.float32) / 255.0
                test_views.append(TestView(cam=tc, t=int(t), image=img))
    bundle = SceneBundle(
        frames=np.stack(frames), depths=np.stack(depths), masks=np.stack(masks),
        cam_init=cam_init, cam_gt=cam_gt, timesteps=np.arange(T),
        test_views=test_views,
        bg_color=np.asarray(meta.get("bg_color", [0, 0, 0]), dtype=np.float32),
        meta=meta)
    return bundle.validate()


# -- checkpoint container ------------------------------------------------------------


def save_checkpoint(path, arrays: dict, meta: dict):
    """Write the versioned container: JSON header + raw LE arrays in order."""
    names = list(arrays.keys())
    manifest = []
    blobs = []
    for name in names:
        a = np.ascontiguousarray(arrays[name])
        le = a.astype(a.dtype.newbyteorder("<"), copy=False)
        manifest.append({"name": name, "dtype": str(a.dtype), "shape": list(a.shape)})
        blobs.append(le.tobytes())
    header = json.dumps({"version": CHECKPOINT_VERSION, "meta": meta,
                         "arrays": manifest}).encode()
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)
    os.replace(tmp, path)


def load_checkpoint(path):
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise DataContractError(f"{path}: not a checkpoint container")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise DataContractError(f"{path}: unsupported checkpoint version")
        arrays = {}
        for rec in header["arrays"]:
            dt = np.dtype(rec["dtype"]).newbyteorder("<")
            n = int(np.prod(rec["shape"])) if rec["shape"] else 1
            buf = f.read(n * dt.itemsize)
            arrays[rec["name"]] = np.frombuffer(buf, dtype=dt).reshape(rec["shape"]).astype(rec["dtype"])
    return arrays, header["meta"]


# -- manifests and logs ----------------------------------------------------------------


def _dump_json(path, obj):
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)


def git_describe():
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=5,
                             cwd=os.path.dirname(os.path.abspath(__file__)))
        if out.returncode == 0:
            return out.stdout.strip()
    except Exception:
        pass
    return "unknown"


def write_manifest(out_dir, command, config_snapshot, seed, inputs=None, outputs=None):
    """Atomically record what a run is about to do (one manifest per out dir)."""
    from . import __version__

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _dump_json(out / "manifest.json", {
        "command": command,
        "config": config_snapshot,
        "seed": seed,
        "code_version": __version__,
        "git_describe": git_describe(),
        "inputs": inputs or [],
        "outputs": outputs or [],
        "wall_clock_start": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    })


class TrainLog:
    """Streaming CSV: iteration, raw and weighted loss components, total."""

    COMPONENTS = ("l1", "ssim", "depth_g", "depth_l", "tc", "s", "mc", "m", "ms", "coeff")

    def __init__(self, path):
        self.path = Path(path)
        self._fh = open(self.path, "w", newline="")
        self._writer = csv.writer(self._fh)
        cols = ["iteration"]
        for c in self.COMPONENTS:
            cols += [f"{c}_raw", f"{c}_weighted"]
        cols.append("total")
        self._writer.writerow(cols)

    def append(self, iteration, breakdown, total):
        row = [iteration]
        for c in self.COMPONENTS:
            raw, weighted = breakdown.get(c, (0.0, 0.0))
            row += [f"{raw:.8g}", f"{weighted:.8g}"]
        row.append(f"{total:.8g}")
        self._writer.writerow(row)
        if iteration % 100 == 0:
            self._fh.flush()

    def close(self):
        self._fh.close()
