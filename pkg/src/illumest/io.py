"""File formats: PFM (native), 8/16-bit PNG, mask and ground-truth sidecars.

PFM is the native interchange format because it holds linear float data with
no quantization. Written PFMs are always little-endian (scale -1.0), rows
bottom-up per the format. PNG goes through cv2 and is treated as already
linear (values are divided by the type maximum, nothing else).

Sidecar conventions, all next to the image file:
    <stem>.mask.png    nonzero pixels are EXCLUDED from statistics
    <stem>.illum.json  {"rgb": [r, g, b]} or {"gt_pfm": "<relative path>"}
    <stem>.gt.pfm      per-pixel ground-truth illuminant field (H, W, 3)
"""

from __future__ import annotations

import json
from pathlib import Path

import cv2
import numpy as np

from .errors import DataError
from .imaging import IlluminantEstimate, LinearImage


# ---------------------------------------------------------------------------
# PFM

def load_pfm(path) -> np.ndarray:
    """Read a PFM file into float32, (H, W, 3) for PF or (H, W) for Pf."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PFM header")
        tokens.append(raw[start:pos])
    pos += 1  # the single whitespace byte that terminates the header
    magic = tokens[0]
    if magic not in (b"PF", b"Pf"):
        raise DataError(f"{path}: not a PFM file (magic {magic!r})")
    channels = 3 if magic == b"PF" else 1
    try:
        width, height = int(tokens[1]), int(tokens[2])
        scale = float(tokens[3])
    except ValueError as exc:
        raise DataError(f"{path}: malformed PFM header") from exc
    if width < 1 or height < 1:
        raise DataError(f"{path}: bad PFM dimensions {width}x{height}")
    count = width * height * channels
    dtype = "<f4" if scale < 0 else ">f4"
    if len(raw) - pos < count * 4:
        raise DataError(
            f"{path}: PFM payload too short "
            f"({len(raw) - pos} of {count * 4} bytes)"
        )
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=pos)
    if channels == 3:
        img = data.reshape(height, width, 3)
    else:
        img = data.reshape(height, width)
    img = np.flipud(img).astype(np.float32)  # PFM rows are bottom-up
    mag = abs(scale)
    if mag not in (0.0, 1.0):
        img = img * np.float32(mag)
    return np.ascontiguousarray(img)


def save_pfm(path, array) -> None:
    """Write float32 data as PFM (little-endian, scale -1.0)."""
    arr = np.asarray(array, dtype=np.float32)
    if arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"PF"
    elif arr.ndim == 2:
        magic = b"Pf"
    else:
        raise DataError(f"PFM supports (H, W) or (H, W, 3) data, got {arr.shape}")
    h, w = arr.shape[:2]
    header = b"%s\n%d %d\n-1.0\n" % (magic, w, h)
    body = np.flipud(arr).astype("<f4").tobytes()
    Path(path).write_bytes(header + body)


# ---------------------------------------------------------------------------
# PNG

def load_png(path) -> np.ndarray:
    """Read an 8- or 16-bit PNG as float32 RGB in [0, 1]."""
    path = Path(path)
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise DataError(f"cannot decode PNG {path}")
    if raw.dtype == np.uint8:
        denom = 255.0
    elif raw.dtype == np.uint16:
        denom = 65535.0
    else:
        raise DataError(f"{path}: unsupported PNG sample type {raw.dtype}")
    if raw.ndim == 2:
        rgb = np.repeat(raw[:, :, None], 3, axis=2)
    elif raw.ndim == 3 and raw.shape[2] in (3, 4):
        rgb = cv2.cvtColor(raw[:, :, :3], cv2.COLOR_BGR2RGB)
    else:
        raise DataError(f"{path}: unsupported PNG layout {raw.shape}")
    return rgb.astype(np.float32) / np.float32(denom)


def save_png(path, array, bits: int = 16) -> None:
    """Write [0, 1] float RGB data as an 8- or 16-bit PNG."""
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    arr = np.clip(np.asarray(array, dtype=np.float64), 0.0, 1.0)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DataError(f"PNG writer expects (H, W, 3), got {arr.shape}")
    peak = 255 if bits == 8 else 65535
    quant = np.rint(arr * peak).astype(np.uint8 if bits == 8 else np.uint16)
    bgr = cv2.cvtColor(quant, cv2.COLOR_RGB2BGR)
    if not cv2.imwrite(str(path), bgr):
        raise DataError(f"cannot write PNG {path}")


# ---------------------------------------------------------------------------
# Images with sidecars

def mask_path(image_path) -> Path:
    p = Path(image_path)
    return p.with_name(p.stem + ".mask.png")


def ground_truth_path(image_path) -> Path:
    p = Path(image_path)
    return p.with_name(p.stem + ".illum.json")


def load_mask(path, shape: tuple[int, int]) -> np.ndarray:
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise DataError(f"cannot decode mask {path}")
    if raw.ndim == 3:
        raw = raw.max(axis=2)
    if raw.shape != shape:
        raise DataError(
            f"mask {path} is {raw.shape}, image is {shape}; sizes must match"
        )
    return raw.astype(bool)


def save_mask(path, mask) -> None:
    m = (np.asarray(mask, dtype=bool).astype(np.uint8)) * 255
    if not cv2.imwrite(str(path), m):
        raise DataError(f"cannot write mask {path}")


def load_image(path, with_mask: bool = True) -> LinearImage:
    """Load a PFM or PNG image, picking up the mask sidecar when present."""
    path = Path(path)
    ext = path.suffix.lower()
    if ext == ".pfm":
        data = load_pfm(path)
        if data.ndim == 2:
            data = np.repeat(data[:, :, None], 3, axis=2)
    elif ext == ".png":
        data = load_png(path)
    else:
        raise DataError(f"unsupported image format {ext!r} ({path})")
    if np.any(data < 0):
        data = np.maximum(data, 0.0)
    mask = None
    if with_mask:
        mp = mask_path(path)
        if mp.exists():
            mask = load_mask(mp, data.shape[:2])
    return LinearImage(data, mask)


def save_image(path, image: LinearImage) -> None:
    """Write the pixels as PFM; the mask, when present, as its sidecar."""
    path = Path(path)
    if path.suffix.lower() != ".pfm":
        raise DataError("images are saved as PFM; use save_png for previews")
    save_pfm(path, image.data)
    if image.mask is not None:
        save_mask(mask_path(path), image.mask)


def load_ground_truth(image_path):
    """Load the ground-truth sidecar sitting next to an image.

    Returns an IlluminantEstimate for per-image truth, or an (H, W, 3)
    float64 field for per-pixel truth. Raises DataError when absent or
    malformed.
    """
    return load_ground_truth_file(ground_truth_path(image_path))


def load_ground_truth_file(gp):
    """Parse a ground-truth JSON file (see module docstring for the schema)."""
    gp = Path(gp)
    if not gp.exists():
        raise DataError(f"no ground-truth sidecar {gp}")
    try:
        payload = json.loads(gp.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot parse {gp}: {exc}") from exc
    if not isinstance(payload, dict):
        raise DataError(f"{gp}: expected a JSON object")
    if "rgb" in payload:
        try:
            return IlluminantEstimate(np.asarray(payload["rgb"], dtype=np.float64))
        except ValueError as exc:
            raise DataError(f"{gp}: bad rgb triplet: {exc}") from exc
    if "gt_pfm" in payload:
        field = load_pfm(gp.parent / payload["gt_pfm"])
        if field.ndim != 3:
            raise DataError(f"{gp}: gt_pfm must be a 3-channel field")
        return field.astype(np.float64)
    raise DataError(f"{gp}: needs either 'rgb' or 'gt_pfm'")


def save_ground_truth(image_path, truth) -> None:
    """Write the ground-truth sidecar; fields also get a .gt.pfm next door."""
    gp = ground_truth_path(image_path)
    if isinstance(truth, IlluminantEstimate):
        gp.write_text(json.dumps({"rgb": [float(v) for v in truth.rgb]}) + "\n")
        return
    arr = np.asarray(truth, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DataError(f"ground-truth field must be (H, W, 3), got {arr.shape}")
    stem = Path(image_path).stem
    field_name = stem + ".gt.pfm"
    save_pfm(gp.parent / field_name, arr)
    gp.write_text(json.dumps({"gt_pfm": field_name}) + "\n")


def encode_preview(image: LinearImage, gamma: float = 2.2) -> np.ndarray:
    """Tone-map linear data to display uint8 RGB: scale to peak, apply gamma."""
    data = image.data.astype(np.float64)
    peak = float(data.max())
    if peak <= 0:
        return np.zeros(data.shape, dtype=np.uint8)
    out = np.clip(data / peak, 0.0, 1.0) ** (1.0 / gamma)
    return np.rint(out * 255).astype(np.uint8)


def save_preview(path, image: LinearImage, gamma: float = 2.2) -> None:
    bgr = cv2.cvtColor(encode_preview(image, gamma), cv2.COLOR_RGB2BGR)
    if not cv2.imwrite(str(path), bgr):
        raise DataError(f"cannot write preview {path}")
