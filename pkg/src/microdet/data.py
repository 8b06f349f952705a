"""Synthetic flat-panel defect scenes: rendering, on-disk layout, loading, augmentation.

Two defect classes: 0 = scratch (thin anti-aliased polyline), 1 = blemish
(small filled ellipse). Every image gets its own generator derived from
``(seed, index)`` so images can be rendered independently and in any order.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import kernels
from .errors import ConfigError, FormatError
from .rng import Rng, derive_seed

GENERATOR_VERSION = 1
SPLITS = ("train", "val", "test")
CLASS_NAMES = ("scratch", "blemish")


@dataclass(frozen=True)
class SceneSpec:
    img_size: int = 64
    n_classes: int = 2
    max_defects: int = 6
    min_defects: int = 0
    size_range: Tuple[float, float] = (0.02, 0.12)
    difficulty: str = "easy"
    seed: int = 0

    def validate(self) -> None:
        if self.img_size < 16:
            raise ConfigError("img_size must be at least 16")
        if self.n_classes not in (1, 2):
            raise ConfigError("n_classes must be 1 or 2")
        if not 0 <= self.min_defects <= self.max_defects:
            raise ConfigError("need 0 <= min_defects <= max_defects")
        lo, hi = self.size_range
        if not 0 < lo <= hi < 1:
            raise ConfigError(f"size_range must satisfy 0 < lo <= hi < 1, got {self.size_range}")
        if hi * self.img_size < 3.0:
            raise ConfigError("largest defect would be under 3 px; raise size_range or img_size")
        if self.difficulty not in ("easy", "hard"):
            raise ConfigError(f"difficulty must be 'easy' or 'hard', got {self.difficulty!r}")


@dataclass
class Sample:
    image: np.ndarray        # (3, H, W) float32 in [0, 1]
    gts: np.ndarray          # (K, 5) [class, cx, cy, w, h], normalized
    id: str
    split: str = ""

    def gts_pixels(self) -> np.ndarray:
        g = self.gts.astype(np.float64).copy()
        g[:, 1:] *= self.image.shape[-1]
        return g


def sample_id(seed: int, index: int) -> str:
    return f"s{seed}_{index:05d}"


def split_of(index: int, ratios: Sequence[int] = (8, 1, 1)) -> str:
    r = index % sum(ratios)
    acc = 0
    for name, k in zip(SPLITS, ratios):
        acc += k
        if r < acc:
            return name
    raise AssertionError("unreachable")


# -- rendering -----------------------------------------------------------------------

def _value_noise(rng: Rng, size: int, cells: int) -> np.ndarray:
    grid = rng.random((cells + 1, cells + 1))
    t = (np.arange(size) + 0.5) / size * cells
    i = np.minimum(t.astype(np.int64), cells - 1)
    f = t - i
    f = f * f * (3 - 2 * f)
    rows = grid[i] * (1 - f)[:, None] + grid[i + 1] * f[:, None]                     # (size, cells+1)
    return rows[:, i] * (1 - f)[None, :] + rows[:, i + 1] * f[None, :]


def _background(rng: Rng, spec: SceneSpec) -> np.ndarray:
    s = spec.img_size
    base = 0.35 + 0.3 * rng.random() + 0.04 * (rng.random(3) - 0.5)
    gdir = rng.uniform(0, 2 * math.pi)
    amp = rng.uniform(0.0, 0.06)
    yy, xx = np.mgrid[0:s, 0:s] / s - 0.5
    grad = amp * (np.cos(gdir) * xx + np.sin(gdir) * yy)
    img = base[:, None, None] + grad[None]
    if spec.difficulty == "hard":
        noise = 0.6 * _value_noise(rng, s, max(2, s // 8)) + 0.4 * _value_noise(rng, s, max(4, s // 4))
        img = img + 0.12 * (noise - 0.5)[None]
    return img


def _composite(img: np.ndarray, cov: np.ndarray, color: np.ndarray, y0: int, x0: int) -> None:
    h, w = cov.shape
    win = img[:, y0:y0 + h, x0:x0 + w]
    win *= 1.0 - cov[None]
    win += cov[None] * color[:, None, None]


def _specks(rng: Rng, img: np.ndarray, spec: SceneSpec) -> None:
    s = spec.img_size
    for _ in range(int(rng.integers(3, 9))):
        cx, cy = rng.uniform(1, s - 1), rng.uniform(1, s - 1)
        r = rng.uniform(0.35, 0.6)
        x0, y0 = max(0, int(cx) - 2), max(0, int(cy) - 2)
        h, w = min(s, y0 + 5) - y0, min(s, x0 + 5) - x0
        cov = kernels.ellipse_coverage(h, w, cx - x0, cy - y0, r, r, 0.0, 4)
        shade = img[:, int(cy), int(cx)] + rng.choice((-1.0, 1.0)) * rng.uniform(0.08, 0.2)
        _composite(img, cov, shade, y0, x0)


@dataclass
class Defect:
    cls: int
    box: Tuple[float, float, float, float]    # pixel cx, cy, w, h (analytic extent)
    kind: str
    params: dict = field(repr=False, default_factory=dict)


def _scratch_shape(rng: Rng, target: float, hw: float):
    theta = rng.uniform(0, math.pi)
    bend = rng.uniform(-0.15, 0.15)
    d = np.array([math.cos(theta), math.sin(theta)])
    nrm = np.array([-d[1], d[0]])
    unit = np.stack([-0.5 * d, bend * nrm, 0.5 * d])       # polyline for length 1
    ext = unit.max(axis=0) - unit.min(axis=0)
    length = (target - 2 * hw) / max(ext.max(), 1e-9)
    return unit * length


def _make_defect(rng: Rng, spec: SceneSpec, cls: int) -> Defect:
    s = spec.img_size
    lo, hi = spec.size_range
    for _ in range(100):
        target = rng.uniform(lo, hi) * s
        if cls == 0:
            # thinner strokes below 64 px so micro scenes still fit a bent line
            hw = rng.uniform(1.0, 1.25) * min(1.0, s / 64)
            if target < 2 * hw + 2.0:
                continue
            pts = _scratch_shape(rng, target, hw)
            mn, mx = pts.min(axis=0) - hw, pts.max(axis=0) + hw
            w, h = mx - mn
            cx = rng.uniform(1.0 + w / 2, s - 1.0 - w / 2)
            cy = rng.uniform(1.0 + h / 2, s - 1.0 - h / 2)
            pts = pts - (mn + mx) / 2 + np.array([cx, cy])
            return Defect(0, (cx, cy, w, h), "scratch", {"pts": pts, "hw": hw})
        q = rng.uniform(0.45, 1.0)
        ang = rng.uniform(0, math.pi)
        ca, sa = math.cos(ang), math.sin(ang)
        # half extents of a rotated ellipse with semi-axes (k, q*k) are linear in k
        ex = math.sqrt(ca * ca + (q * sa) ** 2)
        ey = math.sqrt(sa * sa + (q * ca) ** 2)
        k = target / (2 * max(ex, ey))
        w, h = 2 * k * ex, 2 * k * ey
        if min(w, h) < 2.0 or q * k < 0.75:
            continue
        cx = rng.uniform(1.0 + w / 2, s - 1.0 - w / 2)
        cy = rng.uniform(1.0 + h / 2, s - 1.0 - h / 2)
        return Defect(1, (cx, cy, w, h), "blemish", {"rx": k, "ry": q * k, "angle": ang})
    raise ConfigError("could not place a defect within the size bounds")


def _separated(box, others, gap: float = 3.0) -> bool:
    cx, cy, w, h = box
    for ox, oy, ow, oh in others:
        if abs(cx - ox) < (w + ow) / 2 + gap and abs(cy - oy) < (h + oh) / 2 + gap:
            return False
    return True


def _draw(img: np.ndarray, d: Defect, color: np.ndarray) -> None:
    s = img.shape[-1]
    cx, cy, w, h = d.box
    x0, y0 = max(0, int(math.floor(cx - w / 2)) - 1), max(0, int(math.floor(cy - h / 2)) - 1)
    x1, y1 = min(s, int(math.ceil(cx + w / 2)) + 1), min(s, int(math.ceil(cy + h / 2)) + 1)
    if d.kind == "scratch":
        pts = np.ascontiguousarray(d.params["pts"] - np.array([x0, y0]), dtype=np.float64)
        cov = kernels.polyline_coverage(y1 - y0, x1 - x0, pts, d.params["hw"])
    else:
        cov = kernels.ellipse_coverage(y1 - y0, x1 - x0, cx - x0, cy - y0, d.params["rx"], d.params["ry"],
                                       d.params["angle"], 4)
    _composite(img, cov, color, y0, x0)


def render(spec: SceneSpec, index: int, defects: bool = True):
    """Render image ``index``; returns ``(uint8 HxWx3, list[Defect])``.

    With ``defects=False`` the same panel (background and distractor
    specks) is rendered without any defect, which is what the raster
    re-measurement checks subtract.
    """
    root = Rng(derive_seed(spec.seed, index))
    bg_rng, sp_rng, df_rng = root.spawn(0), root.spawn(1), root.spawn(2)
    img = _background(bg_rng, spec)
    if spec.difficulty == "hard":
        _specks(sp_rng, img, spec)
    hard = spec.difficulty == "hard"
    count = int(df_rng.integers(spec.min_defects, spec.max_defects + 1))
    placed: List[Defect] = []
    for _ in range(count):
        for _attempt in range(30):
            cls = int(df_rng.integers(0, spec.n_classes))
            d = _make_defect(df_rng, spec, cls)
            if _separated(d.box, [p.box for p in placed]):
                placed.append(d)
                break
    if defects:
        for d in placed:
            local = img[:, int(d.box[1]), int(d.box[0])]
            contrast = df_rng.uniform(0.12, 0.25) if hard else df_rng.uniform(0.3, 0.45)
            # scratches catch light, blemishes are stains
            sign = 1.0 if d.cls == 0 else -1.0
            _draw(img, d, np.clip(local + sign * contrast, 0.0, 1.0))
    out = np.clip(np.round(np.clip(img, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    return out.transpose(1, 2, 0).copy(), placed


def render_sample(spec: SceneSpec, index: int) -> Sample:
    img, placed = render(spec, index)
    s = float(spec.img_size)
    gts = np.array([[d.cls, d.box[0] / s, d.box[1] / s, d.box[2] / s, d.box[3] / s] for d in placed],
                   dtype=np.float64).reshape(-1, 5)
    return Sample(img.transpose(2, 0, 1).astype(np.float32) / 255.0, gts, sample_id(spec.seed, index),
                  split_of(index))


# -- file formats --------------------------------------------------------------------

def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(rgb.tobytes())


def parse_ppm(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    """Binary P6, maxval 255; ``#`` comments allowed in the header."""
    pos = 0
    fields: List[bytes] = []
    while len(fields) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("truncated PPM header", source)
        fields.append(buf[start:pos])
    if fields[0] != b"P6":
        raise FormatError(f"expected magic P6, got {fields[0][:8]!r}", source)
    try:
        w, h, maxval = (int(v) for v in fields[1:])
    except ValueError:
        raise FormatError("non-integer PPM header field", source) from None
    if w <= 0 or h <= 0:
        raise FormatError(f"bad PPM size {w}x{h}", source)
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval} (only 255)", source)
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError("missing whitespace after PPM header", source)
    pos += 1
    need = w * h * 3
    body = buf[pos:pos + need]
    if len(body) < need:
        raise FormatError(f"PPM body truncated: {len(body)} of {need} bytes", source)
    if len(buf) > pos + need:
        raise FormatError(f"{len(buf) - pos - need} trailing bytes after PPM body", source)
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        return parse_ppm(f.read(), str(path))


def format_labels(gts: np.ndarray) -> str:
    lines = [f"{int(g[0])} {g[1]:.6f} {g[2]:.6f} {g[3]:.6f} {g[4]:.6f}\n" for g in np.asarray(gts).reshape(-1, 5)]
    return "".join(lines)


def parse_labels(text: str, n_classes: int, source: str = "<labels>") -> np.ndarray:
    rows = []
    for ln, line in enumerate(text.split("\n"), 1):
        if not line.strip():
            continue
        where = f"{source}:{ln}"
        parts = line.split()
        if len(parts) != 5:
            raise FormatError(f"expected 5 fields, got {len(parts)}", where)
        try:
            cls = int(parts[0])
        except ValueError:
            raise FormatError(f"class id {parts[0]!r} is not an integer", where) from None
        if not 0 <= cls < n_classes:
            raise FormatError(f"unknown class id {cls}", where)
        try:
            vals = [float(v) for v in parts[1:]]
        except ValueError:
            raise FormatError("non-numeric coordinate", where) from None
        for name, v in zip(("cx", "cy", "w", "h"), vals):
            if not (0.0 <= v <= 1.0) or not math.isfinite(v):
                raise FormatError(f"{name} = {v} outside [0, 1]", where)
        if vals[2] <= 0 or vals[3] <= 0:
            raise FormatError("box width and height must be positive", where)
        rows.append([cls] + vals)
    return np.array(rows, dtype=np.float64).reshape(-1, 5)


def write_manifest(path, entries: Dict[str, object]) -> None:
    with open(path, "w", newline="\n") as f:
        for k, v in entries.items():
            f.write(f"{k} = {v}\n")


def read_manifest(path) -> Dict[str, str]:
    out = {}
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError("expected 'key = value'", f"{path}:{ln}")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


# -- dataset directory ---------------------------------------------------------------

def generate(spec: SceneSpec, out_dir, count: int, ratios: Sequence[int] = (8, 1, 1)) -> Dict[str, int]:
    """Render ``count`` scenes into ``out_dir``; returns files per split."""
    spec.validate()
    if len(ratios) != 3 or any(int(r) <= 0 for r in ratios):
        raise ConfigError(f"split ratios must be three positive integers, got {tuple(ratios)}")
    ratios = tuple(int(r) for r in ratios)
    if count < 10:
        raise ConfigError(f"count must be at least 10, got {count}")
    per = {name: sum(1 for i in range(count) if split_of(i, ratios) == name) for name in SPLITS}
    empty = [k for k, v in per.items() if v == 0]
    if empty:
        raise ConfigError(f"count {count} leaves split(s) {', '.join(empty)} empty")
    root = Path(out_dir)
    try:
        for name in SPLITS:
            (root / name / "images").mkdir(parents=True, exist_ok=True)
            (root / name / "labels").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"cannot create dataset directory {root}: {e}") from None
    for i in range(count):
        split = split_of(i, ratios)
        sample = render_sample(spec, i)
        sid = sample.id
        rgb = np.round(sample.image * 255.0).astype(np.uint8).transpose(1, 2, 0)
        write_ppm(root / split / "images" / f"{sid}.ppm", rgb)
        with open(root / split / "labels" / f"{sid}.txt", "w", newline="\n") as f:
            f.write(format_labels(sample.gts))
    write_manifest(root / "manifest.txt", {
        "generator_version": GENERATOR_VERSION,
        "seed": spec.seed,
        "count": count,
        "img_size": spec.img_size,
        "n_classes": spec.n_classes,
        "class_names": ",".join(CLASS_NAMES[:spec.n_classes]),
        "difficulty": spec.difficulty,
        "min_defects": spec.min_defects,
        "max_defects": spec.max_defects,
        "size_min": f"{spec.size_range[0]:g}",
        "size_max": f"{spec.size_range[1]:g}",
        "split_ratios": ",".join(str(r) for r in ratios),
        "train": per["train"], "val": per["val"], "test": per["test"],
    })
    return per


class Dataset(Sequence):
    """Lazy, ordered view of one split; items are read on access."""

    def __init__(self, root, split: str):
        self.root = Path(root)
        if split not in SPLITS:
            raise ConfigError(f"unknown split {split!r}; expected one of {', '.join(SPLITS)}")
        self.split = split
        manifest = self.root / "manifest.txt"
        if not manifest.is_file():
            raise FormatError("missing manifest.txt", str(self.root))
        self.meta = read_manifest(manifest)
        try:
            self.img_size = int(self.meta["img_size"])
            self.n_classes = int(self.meta["n_classes"])
        except (KeyError, ValueError) as e:
            raise FormatError(f"manifest lacks a valid {e}", str(manifest)) from None
        img_dir = self.root / split / "images"
        if not img_dir.is_dir():
            raise FormatError(f"missing directory {split}/images", str(self.root))
        self.ids = sorted(p[:-4] for p in os.listdir(img_dir) if p.endswith(".ppm"))

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        sid = self.ids[i]
        img_path = self.root / self.split / "images" / f"{sid}.ppm"
        lab_path = self.root / self.split / "labels" / f"{sid}.txt"
        rgb = read_ppm(img_path)
        if rgb.shape[0] != self.img_size or rgb.shape[1] != self.img_size:
            raise FormatError(f"image is {rgb.shape[1]}x{rgb.shape[0]}, manifest says {self.img_size}",
                              str(img_path))
        if not lab_path.is_file():
            raise FormatError(f"missing label file for image {sid}", str(lab_path))
        with open(lab_path, encoding="utf-8") as f:
            gts = parse_labels(f.read(), self.n_classes, str(lab_path))
        return Sample(rgb.transpose(2, 0, 1).astype(np.float32) / 255.0, gts, sid, self.split)

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self[i]

    def arrays(self):
        """All images stacked (N,3,H,W) float32 and the per-image gt arrays."""
        samples = list(self)
        if not samples:
            return np.zeros((0, 3, self.img_size, self.img_size), np.float32), []
        return np.stack([s.image for s in samples]), [s.gts for s in samples]


def load(root, split: str) -> Dataset:
    return Dataset(root, split)


# -- augmentation --------------------------------------------------------------------

@dataclass(frozen=True)
class AugPolicy:
    hflip: float = 0.5
    crop_scale: Optional[Tuple[float, float]] = (0.7, 1.0)
    brightness: float = 0.2
    contrast: Optional[Tuple[float, float]] = (0.8, 1.25)
    min_area_kept: float = 0.25


NO_AUGMENT = AugPolicy(hflip=0.0, crop_scale=None, brightness=0.0, contrast=None)


def crop_resize(image: np.ndarray, gts: np.ndarray, x0: int, y0: int, side: int, min_area_kept: float = 0.25):
    """Crop a square window and resize it back to the full size (nearest)."""
    _, h, w = image.shape
    size = h
    src = np.minimum(((np.arange(size) + 0.5) * side / size).astype(np.int64), side - 1)
    out = image[:, y0 + src[:, None], x0 + src[None, :]]
    if len(gts) == 0:
        return out, gts
    g = gts.astype(np.float64)
    x1 = (g[:, 1] - g[:, 3] / 2) * w
    y1 = (g[:, 2] - g[:, 4] / 2) * h
    x2 = (g[:, 1] + g[:, 3] / 2) * w
    y2 = (g[:, 2] + g[:, 4] / 2) * h
    area = (x2 - x1) * (y2 - y1)
    cx1, cy1 = np.clip(x1, x0, x0 + side), np.clip(y1, y0, y0 + side)
    cx2, cy2 = np.clip(x2, x0, x0 + side), np.clip(y2, y0, y0 + side)
    kept_area = np.clip(cx2 - cx1, 0, None) * np.clip(cy2 - cy1, 0, None)
    keep = (kept_area >= min_area_kept * area) & (cx2 > cx1) & (cy2 > cy1)
    k = size / side
    nx1, ny1 = (cx1 - x0) * k / size, (cy1 - y0) * k / size
    nx2, ny2 = (cx2 - x0) * k / size, (cy2 - y0) * k / size
    new = np.stack([g[:, 0], (nx1 + nx2) / 2, (ny1 + ny2) / 2, nx2 - nx1, ny2 - ny1], axis=1)
    return out, new[keep]


def hflip(image: np.ndarray, gts: np.ndarray):
    g = gts.copy()
    if len(g):
        g[:, 1] = 1.0 - g[:, 1]
    return image[:, :, ::-1].copy(), g


def augment(sample: Sample, policy: AugPolicy, rng: Rng) -> Sample:
    img, gts = sample.image, sample.gts
    size = img.shape[-1]
    if policy.hflip > 0 and rng.random() < policy.hflip:
        img, gts = hflip(img, gts)
    if policy.crop_scale is not None:
        lo, hi = policy.crop_scale
        side = int(round(rng.uniform(lo, hi) * size))
        side = min(size, max(1, side))
        x0 = int(rng.integers(0, size - side + 1))
        y0 = int(rng.integers(0, size - side + 1))
        if side != size:
            img, gts = crop_resize(img, gts, x0, y0, side, policy.min_area_kept)
    if policy.brightness > 0:
        img = img + np.float32(rng.uniform(-policy.brightness, policy.brightness))
    if policy.contrast is not None:
        c = np.float32(rng.uniform(*policy.contrast))
        m = img.mean(dtype=np.float64).astype(np.float32)
        img = (img - m) * c + m
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return Sample(img, gts, sample.id, sample.split)
