"""Manifest model, postprocessing, and the synthetic pair generator.

The manifest is a single JSON document listing sketch/screenshot
correspondences with designer, app, and optional fiducial-corner and
trace metadata. Paths are stored relative to the manifest file.

The synthetic generator produces matched pairs at desk scale: a
"screenshot" of filled shaded rectangles on white and a "sketch" tracing
the same layout with jittered binary strokes, following low-fidelity
drawing conventions (image areas become crossed boxes, text rows become
wavy template lines). Every vertex displacement is clamped to +/-3 px of
the true geometry so sketches stay anchored to their layout.

Corpus layout on disk: manifest.json, screenshots/, sketches_raw/,
sketches/.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imaging

SCHEMA_VERSION = 1
JITTER_SIGMA = 1.5  # px, per stroke vertex
MAX_DISPLACEMENT = 3.0  # px, hard clamp on any stroke deviation
TRACE_LENGTH = 4

ELEMENT_KINDS = ("topbar", "text_row", "image_block", "button", "list_divider")


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


@dataclass
class PairRecord:
    example_id: str
    app_id: str
    designer_id: str
    screenshot: str
    sketch: str | None = None
    sketch_photo: str | None = None
    marker_corners: list | None = None  # 4 x [x, y], TL TR BR BL
    trace_id: str | None = None
    trace_position: int | None = None

    def to_dict(self) -> dict:
        return {
            "example_id": self.example_id,
            "app_id": self.app_id,
            "designer_id": self.designer_id,
            "screenshot": self.screenshot,
            "sketch": self.sketch,
            "sketch_photo": self.sketch_photo,
            "marker_corners": self.marker_corners,
            "trace_id": self.trace_id,
            "trace_position": self.trace_position,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PairRecord":
        return cls(
            example_id=d["example_id"],
            app_id=d["app_id"],
            designer_id=d["designer_id"],
            screenshot=d["screenshot"],
            sketch=d.get("sketch"),
            sketch_photo=d.get("sketch_photo"),
            marker_corners=d.get("marker_corners"),
            trace_id=d.get("trace_id"),
            trace_position=d.get("trace_position"),
        )


@dataclass
class Manifest:
    records: list
    root: Path
    schema_version: int = SCHEMA_VERSION

    def __len__(self):
        return len(self.records)

    def resolve(self, rel: str) -> Path:
        return self.root / rel


def _validate_records(records, root: Path | None, check_files: bool):
    seen = set()
    for rec in records:
        label = f"record {rec.example_id!r}/{rec.designer_id!r}"
        if not rec.example_id or not rec.app_id or not rec.designer_id:
            raise ValueError(f"{label}: example, app and designer ids must be nonempty")
        key = (rec.example_id, rec.designer_id)
        if key in seen:
            raise ValueError(f"{label}: duplicate (example, designer) key")
        seen.add(key)
        if not rec.screenshot:
            raise ValueError(f"{label}: missing screenshot path")
        if rec.sketch is None and (rec.sketch_photo is None or rec.marker_corners is None):
            raise ValueError(f"{label}: needs a processed sketch or a raw photo with corners")
        if rec.marker_corners is not None and np.asarray(rec.marker_corners).shape != (4, 2):
            raise ValueError(f"{label}: marker corners must be four (x, y) points")
        if (rec.trace_id is None) != (rec.trace_position is None):
            raise ValueError(f"{label}: trace id and position must come together")
        if check_files and root is not None:
            for kind, rel in (("screenshot", rec.screenshot), ("sketch", rec.sketch), ("photo", rec.sketch_photo)):
                if rel is not None and not (root / rel).exists():
                    raise FileNotFoundError(f"{label}: {kind} file not found: {root / rel}")


def save_manifest(manifest: Manifest, path):
    path = Path(path)
    doc = {
        "schema_version": manifest.schema_version,
        "pairs": [rec.to_dict() for rec in manifest.records],
    }
    path.write_text(json.dumps(doc, indent=2) + "\n")


def load_manifest(path, check_files: bool = True) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    doc = json.loads(path.read_text())
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ValueError(f"unsupported manifest schema version: {version}")
    records = [PairRecord.from_dict(d) for d in doc["pairs"]]
    root = path.parent
    _validate_records(records, root, check_files)
    return Manifest(records=records, root=root, schema_version=version)


# ---------------------------------------------------------------------------
# Postprocessing: photographed sketch -> clean binary sketch
# ---------------------------------------------------------------------------


def postprocess(photo: np.ndarray, corners, out_w: int, out_h: int, thresh: float = 0.5) -> np.ndarray:
    """Rectify the marker quad onto an upright raster, then binarize."""
    corners = np.asarray(corners, dtype=np.float64)
    rectified = imaging.rectify(photo, corners, out_w, out_h)
    return imaging.binarize(rectified, thresh)


# ---------------------------------------------------------------------------
# Synthetic layouts
# ---------------------------------------------------------------------------


@dataclass
class Element:
    kind: str
    rect: tuple  # (x0, y0, x1, y1), exclusive right/bottom
    shade: float


@dataclass
class SyntheticLayout:
    seed: int
    width: int
    height: int
    elements: list = field(default_factory=list)


@dataclass
class DesignerStyle:
    """Per-designer drawing idiosyncrasies; jitter realization differs, geometry stays."""

    jitter_scale: float = 1.0
    wave_amp: float = 1.0


def designer_style(master_seed: int, designer_index: int) -> DesignerStyle:
    rng = np.random.default_rng(np.random.SeedSequence([master_seed, 7919, designer_index]))
    return DesignerStyle(
        jitter_scale=float(rng.uniform(0.7, 1.25)),
        wave_amp=float(rng.uniform(0.7, 1.4)),
    )


def sample_layout(seed: int, width: int = 64, height: int = 64) -> SyntheticLayout:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    layout = SyntheticLayout(seed=seed, width=width, height=height)
    y = 0
    if rng.random() < 0.8:
        bar_h = int(rng.integers(6, 11))
        layout.elements.append(Element("topbar", (0, 0, width, bar_h), float(rng.uniform(0.15, 0.45))))
        y = bar_h + int(rng.integers(2, 5))
    n_content = int(rng.integers(3, 7))
    for _ in range(n_content):
        kind = ELEMENT_KINDS[1:][int(rng.integers(4))]
        if kind == "text_row":
            h = int(rng.integers(4, 7))
            margin = int(rng.integers(3, 9))
            rect = (margin, y, width - margin, y + h)
            shade = float(rng.uniform(0.35, 0.65))
        elif kind == "image_block":
            h = int(rng.integers(14, 26))
            margin = int(rng.integers(2, 7))
            if rng.random() < 0.3:
                rect = (margin, y, width // 2, y + h)
            else:
                rect = (margin, y, width - margin, y + h)
            shade = float(rng.uniform(0.55, 0.8))
        elif kind == "button":
            h = int(rng.integers(7, 11))
            bw = int(rng.integers(width // 3, 2 * width // 3))
            x0 = int(rng.integers(2, width - bw - 1))
            rect = (x0, y, x0 + bw, y + h)
            shade = float(rng.uniform(0.2, 0.5))
        else:  # list_divider
            h = int(rng.integers(1, 3))
            rect = (0, y, width, y + h)
            shade = float(rng.uniform(0.4, 0.6))
        if rect[3] >= height:
            break
        layout.elements.append(Element(kind, rect, shade))
        y = rect[3] + int(rng.integers(2, 7))
        if y >= height - 4:
            break
    return layout


def render_screenshot(layout: SyntheticLayout) -> np.ndarray:
    """Filled shaded rectangles on a white canvas."""
    canvas = np.ones((layout.height, layout.width), dtype=np.float32)
    for el in layout.elements:
        x0, y0, x1, y1 = el.rect
        canvas[y0:y1, x0:x1] = el.shade
    return canvas


# -- stroke rasterization ----------------------------------------------------


def draw_line(canvas: np.ndarray, p0, p1):
    """Bresenham segment of ink (0) pixels, clipped to the canvas."""
    h, w = canvas.shape
    x0, y0 = int(round(p0[0])), int(round(p0[1]))
    x1, y1 = int(round(p1[0])), int(round(p1[1]))
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    while True:
        if 0 <= x0 < w and 0 <= y0 < h:
            canvas[y0, x0] = 0.0
        if x0 == x1 and y0 == y1:
            break
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def draw_polyline(canvas: np.ndarray, pts):
    for a, b in zip(pts, pts[1:]):
        draw_line(canvas, a, b)


def _displace(rng: np.random.Generator, pt, sigma: float):
    d = np.clip(rng.normal(0.0, sigma, 2), -MAX_DISPLACEMENT, MAX_DISPLACEMENT)
    return (pt[0] + d[0], pt[1] + d[1])


def _sketch_box(canvas, rng, rect, sigma, cross: bool = False):
    x0, y0, x1, y1 = rect
    x1, y1 = x1 - 1, y1 - 1  # stroke along the boundary pixels
    corners = [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]
    jittered = [_displace(rng, c, sigma) for c in corners]
    for i in range(4):
        a, b = jittered[i], jittered[(i + 1) % 4]
        mid = _displace(rng, ((a[0] + b[0]) / 2, (a[1] + b[1]) / 2), sigma / 2)
        draw_polyline(canvas, [a, mid, b])
    if cross:
        draw_line(canvas, jittered[0], jittered[2])
        draw_line(canvas, jittered[1], jittered[3])


def _sketch_wave(canvas, rng, x0, x1, y, amp, sigma):
    lam = float(rng.uniform(6.0, 12.0))
    phase = float(rng.uniform(0.0, 2 * math.pi))
    xs = np.arange(x0, x1 + 1, 2.0)
    if len(xs) < 2:
        return
    noise = np.clip(rng.normal(0.0, sigma / 3.0, len(xs)), -0.8, 0.8)
    ys = y + np.clip(amp * np.sin(2 * math.pi * (xs - x0) / lam + phase), -2.2, 2.2) + noise
    draw_polyline(canvas, list(zip(xs, ys)))


def render_sketch(layout: SyntheticLayout, rng: np.random.Generator, style: DesignerStyle | None = None) -> np.ndarray:
    """Binary stroke drawing of the layout under one jitter realization."""
    style = style or DesignerStyle()
    sigma = JITTER_SIGMA * style.jitter_scale
    canvas = np.ones((layout.height, layout.width), dtype=np.float32)
    for el in layout.elements:
        x0, y0, x1, y1 = el.rect
        if el.kind == "image_block":
            _sketch_box(canvas, rng, el.rect, sigma, cross=True)
        elif el.kind in ("topbar", "button"):
            _sketch_box(canvas, rng, el.rect, sigma)
        elif el.kind == "text_row":
            yc = (y0 + y1 - 1) / 2
            _sketch_wave(canvas, rng, x0, x1 - 1, yc, 1.2 * style.wave_amp, sigma)
        else:  # list_divider
            a = _displace(rng, (x0, (y0 + y1 - 1) / 2), sigma / 2)
            b = _displace(rng, (x1 - 1, (y0 + y1 - 1) / 2), sigma / 2)
            draw_line(canvas, a, b)
    return canvas


def generate_pair(seed: int, width: int = 64, height: int = 64, style: DesignerStyle | None = None):
    """One matched (screenshot, sketch, layout) triple, deterministic per seed."""
    layout = sample_layout(seed, width, height)
    screenshot = render_screenshot(layout)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    sketch = render_sketch(layout, rng, style)
    return screenshot, sketch, layout


# ---------------------------------------------------------------------------
# Corpus generation
# ---------------------------------------------------------------------------


def _app_assignments(n: int, designers: int, apps: int) -> list[tuple[int, int, int]]:
    """(app, example-in-app, designer) for each pair index.

    Pairs fill apps in contiguous blocks. The last sixth of the apps
    (rounded up) belongs exclusively to the last designer, which makes
    the held-out-designer split non-degenerate: that designer's apps
    never appear in training. The remaining apps rotate round-robin over
    the other designers.
    """
    holdout_apps = max(1, math.ceil(apps / 6)) if designers > 1 else 0
    first_holdout = apps - holdout_apps
    out = []
    app_counter = {}
    for i in range(n):
        app = i * apps // n
        e = app_counter.get(app, 0)
        app_counter[app] = e + 1
        if designers > 1 and app >= first_holdout:
            d = designers - 1
        else:
            d = app % max(1, designers - 1) if designers > 1 else 0
        out.append((app, e, d))
    return out


def generate_corpus(n: int, designers: int, apps: int, seed: int, out_dir) -> Manifest:
    """Write a synthetic corpus (manifest + PNGs) and return its manifest.

    Layout geometry is a function of (seed, app, example) only, so any
    designer would sketch the same geometry; the designer contributes the
    jitter realization and style. Consecutive examples of an app are
    grouped into interaction traces of length 4.
    """
    if n < designers or n < apps:
        raise ValueError("need at least one pair per designer and per app")
    if designers < 1 or apps < 1:
        raise ValueError("designers and apps must be positive")
    out_dir = Path(out_dir)
    (out_dir / "screenshots").mkdir(parents=True, exist_ok=True)
    (out_dir / "sketches").mkdir(parents=True, exist_ok=True)
    (out_dir / "sketches_raw").mkdir(parents=True, exist_ok=True)

    styles = {d: designer_style(seed, d) for d in range(designers)}
    records = []
    for app, e, d in _app_assignments(n, designers, apps):
        example_id = f"app{app:03d}_ex{e:03d}"
        app_id = f"app{app:03d}"
        designer_id = f"d{d}"
        layout_seed_parts = [seed, 3, app, e]
        layout = sample_layout_from_seq(layout_seed_parts)
        screenshot = render_screenshot(layout)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 4, app, e, d]))
        sketch = render_sketch(layout, rng, styles[d])

        shot_rel = f"screenshots/{example_id}.png"
        sketch_rel = f"sketches/{example_id}_{designer_id}.png"
        imaging.write_png(out_dir / shot_rel, screenshot)
        imaging.write_png(out_dir / sketch_rel, sketch)
        records.append(
            PairRecord(
                example_id=example_id,
                app_id=app_id,
                designer_id=designer_id,
                screenshot=shot_rel,
                sketch=sketch_rel,
                trace_id=f"{app_id}_t{e // TRACE_LENGTH}",
                trace_position=e % TRACE_LENGTH,
            )
        )

    manifest = Manifest(records=records, root=out_dir)
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest


def sample_layout_from_seq(seed_parts, width: int = 64, height: int = 64) -> SyntheticLayout:
    """Layout whose geometry is keyed by a composite seed sequence."""
    rng = np.random.default_rng(np.random.SeedSequence(list(seed_parts) + [1]))
    base = int(rng.integers(0, 2**31 - 1))
    return sample_layout(base, width, height)
