"""Stereo samples on disk and in memory: PFM I/O, SCARED-style curation,
pair-directory discovery and a synthetic layered-scene generator.

On-disk sample layout (one directory per sample)::

    <root>/<id>/left.png
    <root>/<id>/right.png
    <root>/<id>/disp.pfm      optional, float32, invalid pixels stored as +inf
    <root>/<id>/calib.json    optional, {fx, baseline_mm, cx_left, cx_right}
    <root>/manifest.json      {split, samples: [{id, left, right, disp?, calib?}]}

Paths inside the manifest are relative to the manifest's directory.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataFormatError
from .geometry import CameraRig, DepthMap, DisparityMap, crop_borders, depth_to_disparity

# -- PFM --------------------------------------------------------------------


def read_pfm(path) -> np.ndarray:
    """Read a PFM file into a top-down ``float32`` array.

    Grayscale (``Pf``) files give ``(H, W)``, colour (``PF``) give ``(H, W, 3)``.
    """
    data = Path(path).read_bytes()
    pos = 0
    tokens = []
    # header is three whitespace separated fields after the magic
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataFormatError(f"{path}: truncated PFM header", offset=pos)
        tokens.append((data[start:pos], start))
    pos += 1  # single whitespace byte before the raster

    magic, offset = tokens[0]
    if magic == b"Pf":
        channels = 1
    elif magic == b"PF":
        channels = 3
    else:
        raise DataFormatError(f"{path}: bad PFM magic {magic!r}", offset=offset)
    try:
        width = int(tokens[1][0])
        height = int(tokens[2][0])
    except ValueError:
        raise DataFormatError(f"{path}: bad PFM dimensions", offset=tokens[1][1]) from None
    if width <= 0 or height <= 0:
        raise DataFormatError(f"{path}: non-positive PFM dimensions", offset=tokens[1][1])
    try:
        scale = float(tokens[3][0])
    except ValueError:
        raise DataFormatError(f"{path}: bad PFM scale", offset=tokens[3][1]) from None
    if scale == 0:
        raise DataFormatError(f"{path}: zero PFM scale", offset=tokens[3][1])

    dtype = np.dtype("<f4") if scale < 0 else np.dtype(">f4")
    count = width * height * channels
    if len(data) - pos < count * 4:
        raise DataFormatError(f"{path}: raster needs {count * 4} bytes", offset=pos)
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
    shape = (height, width) if channels == 1 else (height, width, 3)
    return np.flipud(arr.reshape(shape)).astype(np.float32)


def write_pfm(array: np.ndarray, path) -> None:
    """Write a ``(H, W)`` or ``(H, W, 3)`` map as little-endian PFM."""
    arr = np.asarray(array, dtype=np.float32)
    if arr.ndim == 2:
        magic = b"Pf"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"PF"
    else:
        raise ValueError(f"PFM needs (H, W) or (H, W, 3), got {arr.shape}")
    height, width = arr.shape[:2]
    header = magic + b"\n" + f"{width} {height}\n".encode() + b"-1.0\n"
    raster = np.ascontiguousarray(np.flipud(arr), dtype="<f4").tobytes()
    Path(path).write_bytes(header + raster)


# -- images -----------------------------------------------------------------


def load_image(path) -> np.ndarray:
    """8-bit image file to ``(H, W, 3)`` float64 in ``[0, 1]``."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_image(img: np.ndarray, path) -> None:
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    arr = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(arr).save(path)


# -- samples ----------------------------------------------------------------


@dataclass
class StereoSample:
    """Rectified pair with optional supervision.

    ``occlusion`` (True = left pixel has no reliable match in the right view)
    is only known for synthetic data.
    """

    left: np.ndarray
    right: np.ndarray
    gt_disparity: DisparityMap | None = None
    rig: CameraRig | None = None
    id: str = ""
    occlusion: np.ndarray | None = None
    gt_depth: DepthMap | None = None

    def __post_init__(self) -> None:
        if self.left.shape != self.right.shape:
            raise ValueError(f"left {self.left.shape} and right {self.right.shape} differ")
        for name in ("gt_disparity", "gt_depth"):
            m = getattr(self, name)
            if m is not None and m.shape != self.left.shape[:2]:
                raise ValueError(f"{name} shape {m.shape} != image shape {self.left.shape[:2]}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.left.shape[:2]

    def crop_borders(self, left_px: int, right_px: int) -> StereoSample:
        def crop(x):
            return None if x is None else crop_borders(x, left_px, right_px)

        return replace(
            self,
            left=crop(self.left),
            right=crop(self.right),
            gt_disparity=crop(self.gt_disparity),
            occlusion=crop(self.occlusion),
            gt_depth=crop(self.gt_depth),
        )

    def window(self, top: int, left: int, height: int, width: int) -> StereoSample:
        """Spatial crop; disparity values are not rescaled."""
        rows, cols = slice(top, top + height), slice(left, left + width)

        def cut(x):
            if x is None:
                return None
            if isinstance(x, (DisparityMap, DepthMap)):
                return type(x)(x.values[rows, cols].copy(), x.valid[rows, cols].copy())
            return x[rows, cols].copy()

        return replace(
            self,
            left=cut(self.left),
            right=cut(self.right),
            gt_disparity=cut(self.gt_disparity),
            occlusion=cut(self.occlusion),
            gt_depth=cut(self.gt_depth),
        )


@dataclass
class SampleRef:
    id: str
    left: str
    right: str
    disp: str | None = None
    calib: str | None = None
    depth: str | None = None

    def to_json(self) -> dict:
        out = {"id": self.id, "left": self.left, "right": self.right}
        for key in ("disp", "calib", "depth"):
            if getattr(self, key) is not None:
                out[key] = getattr(self, key)
        return out


@dataclass
class DatasetManifest:
    root: Path
    split: str
    samples: list[SampleRef] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def to_json(self) -> dict:
        out = {"split": self.split, "samples": [s.to_json() for s in self.samples]}
        out.update(self.extra)
        return out

    def save(self, path=None) -> Path:
        path = Path(path) if path is not None else self.root / "manifest.json"
        path.write_text(json.dumps(self.to_json(), indent=2))
        return path

    def check_files(self) -> None:
        for s in self.samples:
            for key in ("left", "right", "disp", "calib", "depth"):
                rel = getattr(s, key)
                if rel is not None and not (self.root / rel).is_file():
                    raise FileNotFoundError(f"sample {s.id}: missing {key} file {self.root / rel}")

    def load(self, index: int) -> StereoSample:
        ref = self.samples[index]
        left = load_image(self.root / ref.left)
        right = load_image(self.root / ref.right)
        gt = rig = depth = None
        if ref.disp is not None:
            gt = DisparityMap(read_pfm(self.root / ref.disp))
        if ref.calib is not None:
            rig = CameraRig.from_json(json.loads((self.root / ref.calib).read_text()))
        if ref.depth is not None:
            depth = DepthMap(read_pfm(self.root / ref.depth))
        return StereoSample(left, right, gt, rig, ref.id, gt_depth=depth)

    def __iter__(self):
        for i in range(len(self.samples)):
            yield self.load(i)


def load_manifest(path) -> DatasetManifest:
    """Read ``manifest.json`` (or a directory containing one) and verify files."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.is_file():
        raise FileNotFoundError(f"no manifest at {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: invalid JSON: {exc.msg}", offset=exc.pos) from None
    try:
        samples = [SampleRef(**s) for s in data["samples"]]
        split = data["split"]
    except (KeyError, TypeError) as exc:
        raise DataFormatError(f"{path}: bad manifest schema ({exc})") from None
    extra = {k: v for k, v in data.items() if k not in ("split", "samples")}
    manifest = DatasetManifest(path.parent, split, samples, extra)
    manifest.check_files()
    return manifest


def save_samples(samples: list[StereoSample], root, split: str = "train") -> DatasetManifest:
    """Write samples in the per-id directory layout and return the manifest."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    refs = []
    for i, s in enumerate(samples):
        sid = s.id or f"{i:06d}"
        d = root / sid
        d.mkdir(parents=True, exist_ok=True)
        save_image(s.left, d / "left.png")
        save_image(s.right, d / "right.png")
        ref = SampleRef(sid, f"{sid}/left.png", f"{sid}/right.png")
        if s.gt_disparity is not None:
            values = np.where(s.gt_disparity.valid, s.gt_disparity.values, np.inf)
            write_pfm(values, d / "disp.pfm")
            ref.disp = f"{sid}/disp.pfm"
        if s.rig is not None:
            (d / "calib.json").write_text(json.dumps(s.rig.to_json(), indent=2))
            ref.calib = f"{sid}/calib.json"
        if s.gt_depth is not None:
            write_pfm(np.where(s.gt_depth.valid, s.gt_depth.values, 0.0), d / "depth.pfm")
            ref.depth = f"{sid}/depth.pfm"
        refs.append(ref)
    manifest = DatasetManifest(root, split, refs)
    manifest.save()
    return manifest


_NUMBERED = re.compile(r"^(.+)\.(png|jpg|jpeg|bmp)$", re.IGNORECASE)


def load_pairs_dir(root, layout: str = "pairs", split: str = "test") -> DatasetManifest:
    """Discover stereo pairs under ``root``.

    ``layout="pairs"`` expects ``left/NNN.png`` and ``right/NNN.png`` with an
    optional ``disp/NNN.pfm``; ``layout="samples"`` expects the per-id layout
    described in the module docstring.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"no such directory {root}")
    refs = []
    if layout == "pairs":
        for lpath in sorted((root / "left").glob("*")):
            m = _NUMBERED.match(lpath.name)
            if not m:
                continue
            stem = m.group(1)
            rpath = root / "right" / lpath.name
            if not rpath.is_file():
                continue
            ref = SampleRef(stem, f"left/{lpath.name}", f"right/{lpath.name}")
            if (root / "disp" / f"{stem}.pfm").is_file():
                ref.disp = f"disp/{stem}.pfm"
            refs.append(ref)
    elif layout == "samples":
        for d in sorted(p for p in root.iterdir() if p.is_dir()):
            if not ((d / "left.png").is_file() and (d / "right.png").is_file()):
                continue
            ref = SampleRef(d.name, f"{d.name}/left.png", f"{d.name}/right.png")
            if (d / "disp.pfm").is_file():
                ref.disp = f"{d.name}/disp.pfm"
            if (d / "calib.json").is_file():
                ref.calib = f"{d.name}/calib.json"
            if (d / "depth.pfm").is_file():
                ref.depth = f"{d.name}/depth.pfm"
            refs.append(ref)
    else:
        raise ValueError(f"unknown layout {layout!r}")
    manifest = DatasetManifest(root, split, refs)
    manifest.check_files()
    return manifest


# -- SCARED-style curation --------------------------------------------------


def curate_scared(
    keyframes,
    calib: CameraRig | dict | None = None,
    out_dir=None,
    crop: tuple[int, int] = (0, 0),
    use_cx_offset: bool = False,
    split: str = "test19",
) -> DatasetManifest:
    """Convert depth keyframes into disparity-supervised stereo samples.

    Args:
        keyframes: Iterable of ``StereoSample`` carrying ``gt_depth`` (mm) and,
            unless ``calib`` is given, their own ``rig``. Only the first frame
            of each video is expected here; interpolated frames are not.
        calib: Calibration shared by all keyframes, or a ``{id: rig}`` dict.
        out_dir: Where to write the per-id layout. Required.
        crop: Columns dropped on the left/right of every image and map.
        use_cx_offset: Apply the principal-point offset during conversion.

    Returns:
        The written manifest; ``extra["max_disparity"]`` holds the largest
        valid converted disparity.
    """
    if out_dir is None:
        raise ValueError("curate_scared needs an output directory")
    samples = []
    max_disp = 0.0
    for i, kf in enumerate(keyframes):
        if kf.gt_depth is None:
            raise ValueError(f"keyframe {kf.id or i} carries no depth")
        if isinstance(calib, dict):
            rig = calib[kf.id]
        else:
            rig = calib if calib is not None else kf.rig
        if rig is None:
            raise ValueError(f"keyframe {kf.id or i} has no calibration")
        disp = depth_to_disparity(kf.gt_depth, rig, use_cx_offset=use_cx_offset)
        sample = replace(kf, gt_disparity=disp, rig=rig, id=kf.id or f"{i:06d}")
        if any(crop):
            sample = sample.crop_borders(*crop)
        if sample.gt_disparity.valid.any():
            max_disp = max(max_disp, float(sample.gt_disparity.values[sample.gt_disparity.valid].max()))
        samples.append(sample)
    manifest = save_samples(samples, out_dir, split=split)
    manifest.extra["max_disparity"] = max_disp
    manifest.save()
    return manifest


def load_scared_keyframes(root) -> list[StereoSample]:
    """Read raw keyframes laid out as ``<root>/<id>/{left,right}.png``,
    ``depth.pfm`` (mm, 0 = unknown) and ``calib.json``."""
    manifest = load_pairs_dir(root, layout="samples", split="raw")
    frames = []
    for ref in manifest.samples:
        if ref.depth is None or ref.calib is None:
            raise FileNotFoundError(f"keyframe {ref.id} needs depth.pfm and calib.json")
        frames.append(manifest.load(manifest.ids.index(ref.id)))
    return frames


# -- synthetic scenes -------------------------------------------------------


def _value_noise(rng: np.random.Generator, height: int, width: int, channels: int) -> np.ndarray:
    """Multi-octave value noise on an integer lattice, values in ``[0, 1]``."""
    out = np.zeros((height, width, channels))
    total = 0.0
    for cell, weight in ((1, 0.45), (2, 0.25), (4, 0.2), (8, 0.1)):
        gh, gw = height // cell + 2, width // cell + 2
        grid = rng.random((gh, gw, channels))
        ys = np.arange(height) / cell
        xs = np.arange(width) / cell
        y0, x0 = np.floor(ys).astype(int), np.floor(xs).astype(int)
        fy, fx = (ys - y0)[:, None, None], (xs - x0)[None, :, None]
        g00 = grid[y0][:, x0]
        g01 = grid[y0][:, x0 + 1]
        g10 = grid[y0 + 1][:, x0]
        g11 = grid[y0 + 1][:, x0 + 1]
        top = g00 * (1 - fx) + g01 * fx
        bottom = g10 * (1 - fx) + g11 * fx
        out += weight * (top * (1 - fy) + bottom * fy)
        total += weight
    return out / total


@dataclass
class _Layer:
    offset: float
    slope_x: float
    slope_y: float
    shape: str = "full"
    cx: float = 0.0
    cy: float = 0.0
    rx: float = 1.0
    ry: float = 1.0
    texture: np.ndarray | None = None  # (H, W + margin, 3) indexed by right-view column
    margin: int = 0

    def disparity(self, x, y):
        return self.offset + self.slope_x * x + self.slope_y * y

    def contains(self, x, y):
        if self.shape == "full":
            return np.ones(np.broadcast(x, y).shape, dtype=bool)
        if self.shape == "ellipse":
            return ((x - self.cx) / self.rx) ** 2 + ((y - self.cy) / self.ry) ** 2 <= 1.0
        return (np.abs(x - self.cx) <= self.rx) & (np.abs(y - self.cy) <= self.ry)

    def source_x(self, right_x, y):
        """Left-view column whose match lands on ``right_x`` (x - d(x) = right_x)."""
        return (right_x + self.offset + self.slope_y * y) / (1.0 - self.slope_x)

    def sample(self, u, rows):
        """Texture at continuous right-view column ``u``, linear between columns."""
        u = u + self.margin
        u0 = np.clip(np.floor(u).astype(int), 0, self.texture.shape[1] - 2)
        f = (u - u0)[..., None]
        return (1 - f) * self.texture[rows, u0] + f * self.texture[rows, u0 + 1]


def _make_layers(rng, h, w, dmax, n_layers, slanted):
    bands = np.linspace(0.0, dmax, n_layers + 1)
    layers = []
    for k in range(n_layers):
        lo, hi = bands[k], bands[k + 1]
        span = hi - lo
        if slanted:
            sx = rng.uniform(-0.25, 0.25) * span / w
            sy = rng.uniform(-0.25, 0.25) * span / h
        else:
            sx = sy = 0.0
        centre = lo + span * rng.uniform(0.35, 0.65)
        offset = centre - sx * (w - 1) / 2 - sy * (h - 1) / 2
        if k == 0:
            layer = _Layer(offset, sx, sy)
        else:
            layer = _Layer(
                offset,
                sx,
                sy,
                shape=str(rng.choice(["ellipse", "rect"])),
                cx=rng.uniform(0.2, 0.8) * w,
                cy=rng.uniform(0.2, 0.8) * h,
                rx=rng.uniform(0.12, 0.3) * w,
                ry=rng.uniform(0.12, 0.3) * h,
            )
        layer.margin = int(np.ceil(dmax)) + 2
        tex = _value_noise(rng, h, w + 2 * layer.margin, 3)
        tint = rng.uniform(0.6, 1.0, size=3)
        layer.texture = np.clip(0.1 + 0.8 * tex * tint, 0.0, 1.0)
        layers.append(layer)
    return layers


def _visible_layer(layers, x, y):
    """Index of the front-most layer covering left-view points ``(x, y)``."""
    idx = np.zeros(np.broadcast(x, y).shape, dtype=int)
    for k, layer in enumerate(layers):
        idx[layer.contains(x, y)] = k
    return idx


def synth_generate(
    seed: int,
    h: int,
    w: int,
    dmax: float,
    n: int,
    layers: int | tuple[int, int] = (2, 5),
    slanted: bool = True,
) -> list[StereoSample]:
    """Random layered scenes of slanted planes with exact stereo geometry.

    Each layer is a plane in disparity, ``d = a + b x + c y``; layer ``k``
    occupies the ``k``-th band of ``[0, dmax]`` so front layers always have
    higher disparity. Layer textures are defined per right-view column and
    interpolated linearly in between, so bilinear warping of the right view
    by the ground truth reproduces the left view exactly wherever both
    neighbouring right pixels see the same layer. Pixels where that fails
    (occluded, out of view, or at a depth edge) are flagged in ``occlusion``.

    Args:
        seed: Seed for :func:`numpy.random.default_rng`.
        h, w: Image size.
        dmax: Largest disparity in pixels; must be below ``w``.
        n: Number of samples.
        layers: Fixed layer count or an inclusive ``(min, max)`` range.
        slanted: If False every layer is fronto-parallel.
    """
    if dmax >= w:
        raise ValueError(f"dmax {dmax} must be smaller than width {w}")
    if dmax < 0:
        raise ValueError("dmax must be non-negative")
    rng = np.random.default_rng(seed)
    lo, hi = (layers, layers) if isinstance(layers, int) else layers
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    rows = np.arange(h)[:, None]
    out = []
    for i in range(n):
        scene = _make_layers(rng, h, w, dmax, int(rng.integers(lo, hi + 1)), slanted)

        vis_left = _visible_layer(scene, xs, ys)
        disp = np.zeros((h, w))
        left = np.zeros((h, w, 3))
        for k, layer in enumerate(scene):
            sel = vis_left == k
            d = layer.disparity(xs, ys)
            disp[sel] = d[sel]
            left[sel] = layer.sample(xs - d, np.broadcast_to(rows, (h, w)))[sel]

        # right view: front-most layer whose source point lies inside it
        vis_right = np.zeros((h, w), dtype=int)
        right = np.zeros((h, w, 3))
        for k, layer in enumerate(scene):
            hit = layer.contains(layer.source_x(xs, ys), ys)
            vis_right[hit] = k
            right[hit] = layer.texture[rows, xs.astype(int) + layer.margin][hit]

        u = xs - disp
        inside = (u >= 0) & (u <= w - 1)
        u0 = np.clip(np.floor(u).astype(int), 0, w - 1)
        u1 = np.clip(u0 + 1, 0, w - 1)
        same = (vis_right[rows, u0] == vis_left) & (vis_right[rows, u1] == vis_left)
        occlusion = ~(inside & same)

        out.append(
            StereoSample(
                left=left,
                right=right,
                gt_disparity=DisparityMap(disp),
                id=f"synth_{seed}_{i:04d}",
                occlusion=occlusion,
            )
        )
    return out


def stack_batch(samples: list[StereoSample]):
    """Stack samples into ``(B, 3, H, W)`` float32 tensors plus disparity and mask."""
    import torch

    left = torch.from_numpy(np.stack([s.left for s in samples]).transpose(0, 3, 1, 2).astype(np.float32))
    right = torch.from_numpy(np.stack([s.right for s in samples]).transpose(0, 3, 1, 2).astype(np.float32))
    if all(s.gt_disparity is not None for s in samples):
        disp = torch.from_numpy(
            np.stack([np.where(s.gt_disparity.valid, s.gt_disparity.values, 0.0) for s in samples]).astype(np.float32)
        )
        valid = torch.from_numpy(np.stack([s.gt_disparity.valid for s in samples]))
    else:
        disp = valid = None
    return left, right, disp, valid

