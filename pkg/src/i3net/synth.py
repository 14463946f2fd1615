"""Seeded two-domain shapes benchmark and its on-disk format.

Source scenes are filled shapes on a flat background; target scenes are
hue-shifted outlined shapes on a striped/checkered texture. Each scene draws
from its own xoshiro256** stream, seeded through SplitMix64 from
``(seed, index)``, so any scene can be regenerated independently.

On disk a dataset is a directory holding ``manifest.txt`` (one basename per
line), ``<name>.ppm`` (binary P6, 8-bit RGB) and ``<name>.txt`` (one
``class_id cx cy w h`` line per object, normalized coordinates).
"""

from __future__ import annotations

import colorsys
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MASK64 = (1 << 64) - 1
SHAPE_NAMES = ("circle", "square", "triangle", "diamond", "cross")


class DatasetFormatError(ValueError):
    """Malformed dataset file; message names the file and byte offset."""


# ---------------------------------------------------------------------- PRNG
def splitmix64(state: int) -> tuple[int, int]:
    """One SplitMix64 step: returns (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class Xoshiro256:
    """xoshiro256** generator with SplitMix64 seeding."""

    def __init__(self, seed: int):
        sm = seed & MASK64
        s = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            s.append(out)
        self.s = s

    @classmethod
    def for_stream(cls, seed: int, index: int) -> "Xoshiro256":
        # Mix index through SplitMix64 so neighbouring streams decorrelate.
        _, a = splitmix64(seed & MASK64)
        _, b = splitmix64((a ^ (index & MASK64)) & MASK64)
        return cls(b)

    def next_u64(self) -> int:
        s = self.s
        result = (_rotl((s[1] * 5) & MASK64, 7) * 9) & MASK64
        t = (s[1] << 17) & MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def random(self) -> float:
        """Uniform double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def integers(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi] inclusive."""
        span = hi - lo + 1
        return lo + int(self.random() * span)

    def choice(self, probs: Sequence[float]) -> int:
        u = self.random()
        acc = 0.0
        last = 0
        for k, p in enumerate(probs):
            if p <= 0:
                continue
            last = k
            acc += p
            if u < acc:
                return k
        return last


# --------------------------------------------------------------------- types
@dataclass(frozen=True)
class Annotation:
    class_id: int
    box: tuple[float, float, float, float]  # cx, cy, w, h

    def __post_init__(self):
        cx, cy, w, h = self.box
        if w <= 0 or h <= 0:
            raise ValueError(f"annotation box needs positive size, got {self.box}")
        eps = 1e-9
        if cx - w / 2 < -eps or cy - h / 2 < -eps or cx + w / 2 > 1 + eps or cy + h / 2 > 1 + eps:
            raise ValueError(f"annotation box {self.box} leaves the unit square")

    def corners(self) -> tuple[float, float, float, float]:
        cx, cy, w, h = self.box
        return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2


@dataclass(frozen=True)
class SceneSpec:
    domain: str = "source"
    image_size: int = 64
    class_count: int = 3
    class_frequencies: tuple[float, ...] = (1 / 3, 1 / 3, 1 / 3)
    objects_per_image: tuple[int, int] = (1, 4)
    seed: int = 0
    min_size: int = 14
    max_size: int = 30
    outline_width: int = 5

    def __post_init__(self):
        if self.domain not in ("source", "target"):
            raise ValueError(f"domain must be 'source' or 'target', got {self.domain!r}")
        if not 2 <= self.class_count <= len(SHAPE_NAMES):
            raise ValueError(f"class_count must be in [2, {len(SHAPE_NAMES)}], got {self.class_count}")
        freqs = tuple(float(f) for f in self.class_frequencies)
        object.__setattr__(self, "class_frequencies", freqs)
        if len(freqs) != self.class_count:
            raise ValueError(f"{len(freqs)} class frequencies for {self.class_count} classes")
        if any(f < 0 for f in freqs):
            raise ValueError(f"class frequencies must be nonnegative, got {freqs}")
        if sum(freqs) == 0:
            raise ValueError("class frequencies are all zero")
        if abs(sum(freqs) - 1.0) > 1e-9:
            raise ValueError(f"class frequencies must sum to 1, got {sum(freqs)!r}")
        lo, hi = self.objects_per_image
        if lo < 0 or hi < lo:
            raise ValueError(f"bad objects_per_image range {self.objects_per_image}")
        if not 2 <= self.min_size <= self.max_size < self.image_size:
            raise ValueError("object size range must satisfy 2 <= min <= max < image_size")


# ----------------------------------------------------------------- rendering
def _shape_mask(kind: int, x0: int, y0: int, size: int, n: int) -> np.ndarray:
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    u = (xx - x0) / size  # position inside the bounding square, [0, 1]
    v = (yy - y0) / size
    inside = (u >= 0) & (u <= 1) & (v >= 0) & (v <= 1)
    name = SHAPE_NAMES[kind]
    if name == "circle":
        m = (u - 0.5) ** 2 + (v - 0.5) ** 2 <= 0.25
    elif name == "square":
        m = inside
    elif name == "triangle":
        m = inside & (np.abs(u - 0.5) <= 0.5 * v)
    elif name == "diamond":
        m = np.abs(u - 0.5) + np.abs(v - 0.5) <= 0.5
    else:
        m = inside & ((np.abs(u - 0.5) <= 0.17) | (np.abs(v - 0.5) <= 0.17))
    return m


def _erode(mask: np.ndarray, steps: int) -> np.ndarray:
    m = mask.copy()
    for _ in range(steps):
        p = np.pad(m, 1)
        m = m & p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return m


def _hsv(h: float, s: float, v: float) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v))


def _background(spec: SceneSpec, rng: Xoshiro256) -> np.ndarray:
    n = spec.image_size
    if spec.domain == "source":
        base = _hsv(rng.random(), rng.uniform(0.05, 0.25), rng.uniform(0.75, 0.95))
        return np.broadcast_to(base, (n, n, 3)).copy()
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    theta = rng.uniform(0, math.pi)
    freq = rng.uniform(0.15, 0.45)
    phase = rng.uniform(0, 2 * math.pi)
    stripes = 0.5 + 0.5 * np.sin(freq * (xx * math.cos(theta) + yy * math.sin(theta)) + phase)
    cell = rng.integers(4, 10)
    checker = ((xx // cell + yy // cell) % 2).astype(np.float64)
    c1 = _hsv(rng.random(), rng.uniform(0.15, 0.5), rng.uniform(0.65, 0.8))
    c2 = _hsv(rng.random(), rng.uniform(0.15, 0.5), rng.uniform(0.8, 0.95))
    mix = (0.65 * stripes + 0.35 * checker)[..., None]
    return c1 * (1 - mix) + c2 * mix


def _overlaps(a, b) -> bool:
    return not (a[2] <= b[0] or b[2] <= a[0] or a[3] <= b[1] or b[3] <= a[1])


def generate_scene(spec: SceneSpec, index: int) -> tuple[np.ndarray, list[Annotation]]:
    """Render scene ``index``; returns a CHW float64 image in [0, 1] and its annotations.

    Pixel values are multiples of 1/255 so the PPM round trip is exact.
    """
    rng = Xoshiro256.for_stream(spec.seed, index)
    n = spec.image_size
    img = _background(spec, rng)
    lo, hi = spec.objects_per_image
    count = rng.integers(lo, hi) if hi > lo else lo
    placed: list[tuple[int, int, int, int]] = []
    annotations: list[Annotation] = []
    for _ in range(count):
        kind = rng.choice(spec.class_frequencies)
        size = rng.integers(spec.min_size, spec.max_size)
        hue = rng.random()
        spot = None
        for _ in range(20):
            x0 = rng.integers(0, n - size)
            y0 = rng.integers(0, n - size)
            cand = (x0, y0, x0 + size, y0 + size)
            if not any(_overlaps(cand, p) for p in placed):
                spot = cand
                break
        if spot is None:
            continue
        mask = _shape_mask(kind, spot[0], spot[1], size, n)
        if not mask.any():
            continue
        if spec.domain == "source":
            color = _hsv(hue, rng.uniform(0.6, 1.0), rng.uniform(0.3, 0.75))
            paint = mask
        else:
            color = _hsv(hue + 1 / 3, rng.uniform(0.6, 1.0), rng.uniform(0.2, 0.55))
            paint = mask & ~_erode(mask, spec.outline_width)
        img[paint] = color
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        bx0, bx1 = cols[0], cols[-1] + 1
        by0, by1 = rows[0], rows[-1] + 1
        placed.append(spot)
        annotations.append(Annotation(int(kind), ((bx0 + bx1) / (2 * n), (by0 + by1) / (2 * n),
                                                  (bx1 - bx0) / n, (by1 - by0) / n)))
    quant = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    return quant.transpose(2, 0, 1).astype(np.float64) / 255.0, annotations


def rendered_mask_box(spec: SceneSpec, kind: int, x0: int, y0: int, size: int) -> tuple[int, int, int, int]:
    """Pixel bounding box (x0, y0, x1, y1) of a rendered shape, for fidelity checks."""
    mask = _shape_mask(kind, x0, y0, size, spec.image_size)
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return int(cols[0]), int(rows[0]), int(cols[-1] + 1), int(rows[-1] + 1)


# ------------------------------------------------------------------ file I/O
@dataclass
class Dataset:
    images: np.ndarray  # (N, 3, H, W), values k/255
    annotations: list[list[Annotation]]
    names: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.images)


def write_ppm(path: Path, image: np.ndarray) -> None:
    c, h, w = image.shape
    pix = np.round(image.transpose(1, 2, 0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def read_ppm(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetFormatError(f"{path}: truncated header at byte offset {pos}")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6":
        raise DatasetFormatError(f"{path}: bad magic {tokens[0]!r} at byte offset 0, expected b'P6'")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DatasetFormatError(f"{path}: non-integer header field before byte offset {pos}") from None
    if maxval != 255:
        raise DatasetFormatError(f"{path}: unsupported maxval {maxval} before byte offset {pos}")
    pos += 1  # single whitespace after maxval
    need = w * h * 3
    payload = raw[pos:pos + need]
    if len(payload) < need:
        raise DatasetFormatError(
            f"{path}: truncated pixel payload at byte offset {pos + len(payload)} "
            f"(expected {need} bytes from offset {pos})")
    pix = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return pix.transpose(2, 0, 1).astype(np.float64) / 255.0


def format_annotation(a: Annotation) -> str:
    return " ".join([str(a.class_id)] + [repr(float(v)) for v in a.box])


def parse_annotation(line: str) -> Annotation:
    parts = line.split()
    if len(parts) != 5:
        raise ValueError(f"expected 5 fields, got {len(parts)}")
    return Annotation(int(parts[0]), tuple(float(p) for p in parts[1:]))


def read_annotations(path: Path) -> list[Annotation]:
    raw = Path(path).read_bytes()
    out = []
    offset = 0
    for line in raw.split(b"\n"):
        text = line.decode("utf-8", errors="replace").strip()
        if text:
            try:
                out.append(parse_annotation(text))
            except ValueError as exc:
                raise DatasetFormatError(f"{path}: bad annotation at byte offset {offset}: {exc}") from None
        offset += len(line) + 1
    return out


def write_dataset(path, spec: SceneSpec, count: int, start: int = 0) -> Dataset:
    """Generate ``count`` scenes of ``spec`` and store them under ``path``."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    images, anns, names = [], [], []
    for i in range(start, start + count):
        img, ann = generate_scene(spec, i)
        name = f"{spec.domain}_{i:06d}"
        write_ppm(root / f"{name}.ppm", img)
        (root / f"{name}.txt").write_text("".join(format_annotation(a) + "\n" for a in ann), encoding="utf-8")
        images.append(img)
        anns.append(ann)
        names.append(name)
    (root / "manifest.txt").write_text("".join(n + "\n" for n in names), encoding="utf-8")
    return Dataset(np.stack(images) if images else np.zeros((0, 3, spec.image_size, spec.image_size)), anns, names)


def read_dataset(path) -> Dataset:
    root = Path(path)
    manifest = root / "manifest.txt"
    if not manifest.is_file():
        raise FileNotFoundError(f"no manifest.txt in {root}")
    names = [ln.strip() for ln in manifest.read_text(encoding="utf-8").splitlines() if ln.strip()]
    images = [read_ppm(root / f"{n}.ppm") for n in names]
    anns = []
    for n in names:
        ann_path = root / f"{n}.txt"
        anns.append(read_annotations(ann_path) if ann_path.exists() else [])
    if images:
        shapes = {im.shape for im in images}
        if len(shapes) > 1:
            raise DatasetFormatError(f"{root}: images of differing shapes {sorted(shapes)}")
        arr = np.stack(images)
    else:
        arr = np.zeros((0, 3, 0, 0))
    return Dataset(arr, anns, names)


def generate_dataset(spec: SceneSpec, count: int, start: int = 0) -> Dataset:
    """In-memory counterpart of :func:`write_dataset`."""
    images, anns = [], []
    for i in range(start, start + count):
        img, ann = generate_scene(spec, i)
        images.append(img)
        anns.append(ann)
    names = [f"{spec.domain}_{i:06d}" for i in range(start, start + count)]
    return Dataset(np.stack(images) if images else np.zeros((0, 3, spec.image_size, spec.image_size)), anns, names)
