"""Synthetic co-registered optical/infrared scene generator and file I/O.

Scenes are composed of hard-edged shapes on a background: a warm blob
(bright in infrared), a cold box (dark in infrared) and a thin pole.
Optical rendering carries class colors plus high-frequency texture; infrared
rendering tracks class "temperature" with a per-image gain jitter and is
independent of the optical texture. Geometry is drawn on a 4-pixel lattice
so that class regions are representable at the models' prediction stride.

Optical images are stored as binary PPM (P6), infrared and labels as binary
PGM (P5). A plain-text manifest lists one sample per line:
id <tab> split <tab> eo-path <tab> ir-path <tab> label-path.
"""

import os
from dataclasses import dataclass

import numpy as np

IGNORE_INDEX = 255
LATTICE = 4

CLASS_NAMES = ("background", "warm_blob", "cold_box", "thin_pole")

# optical base color (r, g, b) and infrared intensity per class
EO_COLORS = np.array([
    (0.20, 0.34, 0.22),   # background
    (0.80, 0.30, 0.24),   # warm blob
    (0.28, 0.40, 0.76),   # cold box
    (0.84, 0.78, 0.30),   # thin pole
])
IR_LEVELS = np.array([0.30, 0.88, 0.10, 0.60])


class DataFormatError(ValueError):
    """Raised for malformed image files or inconsistent sample triples."""


@dataclass
class SceneConfig:
    size: int = 32
    num_classes: int = 4
    shapes_per_image: int = 3
    texture_amp: float = 0.15
    eo_noise: float = 0.02
    ir_noise: float = 0.15
    ir_gain_jitter: float = 0.25
    night: bool = False
    night_dim: float = 0.25
    night_extra_noise: float = 0.04
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2 or self.num_classes > len(CLASS_NAMES):
            raise ValueError(
                f"num_classes must be in 2..{len(CLASS_NAMES)}, got {self.num_classes}")
        if self.size % (LATTICE * 4) != 0:
            raise ValueError(f"image size must be a multiple of {LATTICE * 4}, got {self.size}")
        if self.shapes_per_image < 1:
            raise ValueError("need at least one shape per image")


@dataclass
class PairedSample:
    eo: np.ndarray      # (3, H, W) float in [0, 1]
    ir: np.ndarray      # (1, H, W) float in [0, 1]
    label: np.ndarray   # (H, W) int
    id: str


@dataclass
class ManifestEntry:
    id: str
    split: str
    eo_path: str
    ir_path: str
    label_path: str


# ---------------------------------------------------------------------------
# scene rendering
# ---------------------------------------------------------------------------

def _draw_shape(cells, cls, rng):
    hc, wc = cells.shape
    if cls == 1:  # warm blob: filled disc
        r = int(rng.integers(2, max(3, min(hc, wc) // 3) + 1))
        cy = int(rng.integers(r, hc - r + 1))
        cx = int(rng.integers(r, wc - r + 1))
        yy, xx = np.ogrid[:hc, :wc]
        cells[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = cls
    elif cls == 2:  # cold box: filled rectangle
        bh = int(rng.integers(2, max(3, hc // 2) + 1))
        bw = int(rng.integers(2, max(3, wc // 2) + 1))
        y0 = int(rng.integers(0, hc - bh + 1))
        x0 = int(rng.integers(0, wc - bw + 1))
        cells[y0:y0 + bh, x0:x0 + bw] = cls
    else:  # thin pole: one-cell-wide vertical bar
        length = int(rng.integers(3, hc - 1))
        y0 = int(rng.integers(0, hc - length + 1))
        x0 = int(rng.integers(0, wc))
        cells[y0:y0 + length, x0:x0 + 1] = cls


def render_scene(config, rng):
    """One scene: (eo (3,H,W), ir (1,H,W), label (H,W)) float/int arrays."""
    size = config.size
    hc = wc = size // LATTICE
    cells = np.zeros((hc, wc), dtype=np.int64)
    shape_classes = [1 + (k % (config.num_classes - 1)) for k in range(config.shapes_per_image)]
    for cls in shape_classes:
        _draw_shape(cells, cls, rng)
    label = np.repeat(np.repeat(cells, LATTICE, axis=0), LATTICE, axis=1)

    # infrared first: class temperature with per-image gain jitter and its
    # own noise; rendered before the optical draws so the night flag leaves
    # the infrared image bitwise untouched for a fixed seed
    gain = rng.uniform(1.0 - config.ir_gain_jitter, 1.0 + config.ir_gain_jitter)
    ir = IR_LEVELS[label] * gain + rng.normal(0.0, config.ir_noise, size=label.shape)
    ir = np.clip(ir, 0.0, 1.0)[None]

    # optical: class color + directional texture + noise, optionally dimmed
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    eo = EO_COLORS[label].transpose(2, 0, 1).copy()
    for ch in range(3):
        fy, fx = rng.uniform(1.0, 4.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        eo[ch] += config.texture_amp * np.sin(2 * np.pi * (fy * yy + fx * xx) / size + phase)
    eo += rng.normal(0.0, config.eo_noise, size=eo.shape)
    if config.night:
        eo = eo * config.night_dim + rng.normal(0.0, config.night_extra_noise, size=eo.shape)
    eo = np.clip(eo, 0.0, 1.0)
    return eo, ir, label


# ---------------------------------------------------------------------------
# PPM / PGM
# ---------------------------------------------------------------------------

def _quantize(img):
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def save_ppm(path, rgb):
    """Write a (3, H, W) float image in [0, 1] as binary PPM (P6, maxval 255)."""
    data = _quantize(rgb).transpose(1, 2, 0)
    h, w, _ = data.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def save_pgm(path, gray):
    """Write a (H, W) uint8 array (or float in [0, 1]) as binary PGM (P5)."""
    data = gray if gray.dtype == np.uint8 else _quantize(gray)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def _read_header(f, magic, path):
    if f.read(2) != magic:
        raise DataFormatError(f"{path}: expected {magic.decode()} magic")
    fields = []
    while len(fields) < 3:
        line = f.readline()
        if not line:
            raise DataFormatError(f"{path}: truncated header")
        text = line.split(b"#", 1)[0]
        fields.extend(text.split())
    try:
        w, h, maxval = (int(v) for v in fields[:3])
    except ValueError as exc:
        raise DataFormatError(f"{path}: bad header fields {fields[:3]}") from exc
    if maxval != 255:
        raise DataFormatError(f"{path}: only maxval 255 supported, got {maxval}")
    return w, h


def load_ppm(path):
    """Read a binary PPM into a (3, H, W) float array in [0, 1]."""
    with open(path, "rb") as f:
        w, h = _read_header(f, b"P6", path)
        raw = f.read(w * h * 3)
    if len(raw) != w * h * 3:
        raise DataFormatError(f"{path}: expected {w * h * 3} pixel bytes, got {len(raw)}")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def load_pgm(path, as_labels=False):
    """Read a binary PGM; labels stay integral, images scale to [0, 1]."""
    with open(path, "rb") as f:
        w, h = _read_header(f, b"P5", path)
        raw = f.read(w * h)
    if len(raw) != w * h:
        raise DataFormatError(f"{path}: expected {w * h} pixel bytes, got {len(raw)}")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(h, w)
    if as_labels:
        return arr.astype(np.int64)
    return arr.astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# dataset generation and loading
# ---------------------------------------------------------------------------

def generate_dataset(config, count, out_dir, split_ratios=(0.8, 0.2)):
    """Write `count` scenes plus a manifest; returns the manifest path.

    Per-image RNG streams are derived from (config.seed, image index), so a
    fixed seed yields byte-identical trees regardless of generation order.
    The first ceil(count * train_ratio) ids form the train split.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if len(split_ratios) != 2 or abs(sum(split_ratios) - 1.0) > 1e-9:
        raise ValueError(f"split_ratios must be two fractions summing to 1, got {split_ratios}")
    os.makedirs(out_dir, exist_ok=True)
    n_train = int(np.ceil(count * split_ratios[0]))
    lines = []
    for idx in range(count):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=config.seed, spawn_key=(idx,)))
        eo, ir, label = render_scene(config, rng)
        sample_id = f"sample_{idx:05d}"
        eo_name, ir_name, label_name = (
            f"{sample_id}_eo.ppm", f"{sample_id}_ir.pgm", f"{sample_id}_label.pgm")
        save_ppm(os.path.join(out_dir, eo_name), eo)
        save_pgm(os.path.join(out_dir, ir_name), ir[0])
        save_pgm(os.path.join(out_dir, label_name), label.astype(np.uint8))
        split = "train" if idx < n_train else "test"
        lines.append("\t".join((sample_id, split, eo_name, ir_name, label_name)))
    manifest_path = os.path.join(out_dir, "manifest.tsv")
    with open(manifest_path, "w", encoding="ascii") as f:
        f.write("\n".join(lines) + "\n")
    return manifest_path


def load_manifest(path, split=None):
    """Parse a manifest; optionally filter to one split."""
    root = os.path.dirname(os.path.abspath(path))
    entries = []
    with open(path, "r", encoding="ascii") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise DataFormatError(f"{path}: manifest line needs 5 fields, got {len(parts)}")
            entry = ManifestEntry(
                id=parts[0], split=parts[1],
                eo_path=os.path.join(root, parts[2]),
                ir_path=os.path.join(root, parts[3]),
                label_path=os.path.join(root, parts[4]))
            if split is None or entry.split == split:
                entries.append(entry)
    return entries


def _check_extents(sample_id, eo, ir, label):
    shapes = {"eo": eo.shape[1:] if eo is not None else None,
              "ir": ir.shape[1:] if ir is not None else None,
              "label": label.shape}
    present = {k: v for k, v in shapes.items() if v is not None}
    if len(set(present.values())) > 1:
        raise DataFormatError(f"{sample_id}: extent mismatch across triple: {present}")


def validate_labels(label, num_classes, sample_id=""):
    bad = (label != IGNORE_INDEX) & (label >= num_classes)
    if bad.any():
        raise DataFormatError(
            f"{sample_id}: label value {int(label[bad].flat[0])} >= num_classes {num_classes}")


def load_sample(entry, num_classes=None, want_eo=True):
    """Load a sample triple; with want_eo=False the optical file is not read."""
    ir = load_pgm(entry.ir_path)[None]
    label = load_pgm(entry.label_path, as_labels=True)
    eo = load_ppm(entry.eo_path) if want_eo else None
    _check_extents(entry.id, eo, ir, label)
    if num_classes is not None:
        validate_labels(label, num_classes, entry.id)
    return PairedSample(eo=eo, ir=ir, label=label, id=entry.id)


def save_sample(sample, out_dir):
    """Write one sample triple; returns a ManifestEntry for it."""
    os.makedirs(out_dir, exist_ok=True)
    eo_path = os.path.join(out_dir, f"{sample.id}_eo.ppm")
    ir_path = os.path.join(out_dir, f"{sample.id}_ir.pgm")
    label_path = os.path.join(out_dir, f"{sample.id}_label.pgm")
    save_ppm(eo_path, sample.eo)
    save_pgm(ir_path, sample.ir[0])
    save_pgm(label_path, sample.label.astype(np.uint8))
    return ManifestEntry(id=sample.id, split="none", eo_path=eo_path,
                         ir_path=ir_path, label_path=label_path)


def load_split(manifest_path, split, num_classes=None, want_eo=True):
    return [load_sample(e, num_classes, want_eo) for e in load_manifest(manifest_path, split)]
