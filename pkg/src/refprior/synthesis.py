"""Synthetic superimposition ``I = T + f(R)`` and dataset generation.

The transmission layer passes through unchanged; all degradation lives in the
reflection branch, applied in the fixed order ghost -> blur -> attenuate with
reflective (mirror, edge pixel not repeated) padding. The sum is clamped to
``[0, 1]``.
"""

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import imageio
from .errors import ConfigError, DataError, ShapeError
from .prior import prior_map
from .rng import stream, stream_key

log = logging.getLogger(__name__)

DEFAULT_GRIDS = (1, 7, 14, 28)
MANIFEST_NAME = "manifest.jsonl"


@dataclass(frozen=True)
class DegradationParams:
    blur_sigma: float = 0.0
    ghost_dx: int = 0
    ghost_dy: int = 0
    ghost_alpha: float = 0.0
    attenuation: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.blur_sigma < 0:
            raise ConfigError(f"blur_sigma must be >= 0, got {self.blur_sigma}")
        if not 0.0 <= self.ghost_alpha <= 1.0:
            raise ConfigError(f"ghost_alpha must lie in [0, 1], got {self.ghost_alpha}")
        if not 0.0 < self.attenuation <= 1.0:
            raise ConfigError(f"attenuation must lie in (0, 1], got {self.attenuation}")

    @property
    def blur_size(self):
        return 2 * math.ceil(3 * self.blur_sigma) + 1


@dataclass(frozen=True)
class DegradationSchedule:
    """Ranges from which per-sample degradation parameters are drawn."""

    blur_sigma: tuple = (0.5, 2.0)
    ghost_prob: float = 0.5
    ghost_max_shift: int = 4
    ghost_alpha: tuple = (0.3, 0.8)
    attenuation: tuple = (0.2, 0.9)

    def sample(self, seed, sample_id):
        rng = stream(seed, "degradation", sample_id)
        sigma = float(rng.uniform(*self.blur_sigma))
        dx = dy = 0
        alpha = 0.0
        if self.ghost_max_shift > 0 and rng.uniform() < self.ghost_prob:
            while dx == 0 and dy == 0:
                dx, dy = (int(v) for v in rng.integers(-self.ghost_max_shift, self.ghost_max_shift + 1, 2))
            alpha = float(rng.uniform(*self.ghost_alpha))
        attenuation = float(rng.uniform(*self.attenuation))
        return DegradationParams(
            blur_sigma=sigma,
            ghost_dx=dx,
            ghost_dy=dy,
            ghost_alpha=alpha,
            attenuation=attenuation,
            seed=stream_key(seed, "degradation", sample_id) >> 65,
        )


def gaussian_kernel(sigma, size=None):
    """Normalised 2-D Gaussian of side ``2*ceil(3*sigma)+1`` (``[[1.0]]`` for sigma 0).

    ``size`` overrides the side length with an explicit odd value.
    """
    if sigma < 0:
        raise ConfigError(f"sigma must be >= 0, got {sigma}")
    if size is not None and (size < 1 or size % 2 == 0):
        raise ConfigError(f"kernel size must be a positive odd integer, got {size}")
    if sigma == 0:
        return np.ones((1, 1))
    radius = math.ceil(3 * sigma) if size is None else size // 2
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    sq = offsets[:, None] ** 2 + offsets[None, :] ** 2
    kernel = np.exp(-sq / (2.0 * sigma * sigma))
    return kernel / kernel.sum()


def ghost_kernel(dx, dy, alpha):
    """Double impulse: ``1/(1+a)`` at the centre, ``a/(1+a)`` displaced by ``(dy, dx)``.

    The kernel is ``(2|dy|+1, 2|dx|+1)`` with its origin at the centre, so a
    convolution copies the image onto itself shifted by ``(dy, dx)``.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"ghost alpha must lie in [0, 1], got {alpha}")
    ry, rx = abs(int(dy)), abs(int(dx))
    kernel = np.zeros((2 * ry + 1, 2 * rx + 1))
    kernel[ry, rx] = 1.0 / (1.0 + alpha)
    kernel[ry + dy, rx + dx] += alpha / (1.0 + alpha)
    return kernel


def convolve(image, kernel):
    """True 2-D convolution of each channel with an odd-sized kernel, mirror padding."""
    kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel must have odd size, got {kernel.shape}")
    ry, rx = kh // 2, kw // 2
    h, w = image.shape[:2]
    pad = [(ry, ry), (rx, rx)] + [(0, 0)] * (image.ndim - 2)
    padded = np.pad(image, pad, mode="reflect")
    flipped = kernel[::-1, ::-1]
    out = np.zeros(image.shape, dtype=np.float64)
    for u, v in zip(*np.nonzero(flipped)):
        out += flipped[u, v] * padded[u:u + h, v:v + w]
    return out


def degrade_reflection(r_image, params):
    ghosted = r_image
    if params.ghost_alpha > 0 and (params.ghost_dx or params.ghost_dy):
        ghosted = convolve(r_image, ghost_kernel(params.ghost_dx, params.ghost_dy, params.ghost_alpha))
    blurred = convolve(ghosted, gaussian_kernel(params.blur_sigma)) if params.blur_sigma > 0 else ghosted
    return params.attenuation * blurred


def superimpose(t_image, r_image, params):
    """Return ``(I, R_degraded)`` with ``I = clamp(T + R_degraded, 0, 1)``."""
    t_image = np.asarray(t_image, dtype=np.float64)
    r_image = np.asarray(r_image, dtype=np.float64)
    if t_image.shape != r_image.shape:
        raise ShapeError(f"T and R dimensions differ: {t_image.shape} vs {r_image.shape}")
    r_degraded = degrade_reflection(r_image, params)
    return np.clip(t_image + r_degraded, 0.0, 1.0), r_degraded


# --------------------------------------------------------------- procedural
def _grid_coords(size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return yy, xx


def procedural_transmission(rng, size):
    """Sharp-edged scene: colour gradient plus random rectangles and ellipses."""
    yy, xx = _grid_coords(size)
    c0, c1 = rng.uniform(0.1, 0.8, 3), rng.uniform(0.1, 0.8, 3)
    angle = rng.uniform(0, 2 * math.pi)
    ramp = (np.cos(angle) * xx + np.sin(angle) * yy) / size
    ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-9)
    img = c0 + (c1 - c0) * ramp[..., None]
    for _ in range(int(rng.integers(3, 9))):
        colour = rng.uniform(0.05, 0.95, 3)
        cy, cx = rng.uniform(0, size, 2)
        hy, hx = rng.uniform(size / 12, size / 3, 2)
        if rng.uniform() < 0.5:
            mask = (np.abs(yy - cy) < hy) & (np.abs(xx - cx) < hx)
        else:
            mask = ((yy - cy) / hy) ** 2 + ((xx - cx) / hx) ** 2 < 1.0
        img[mask] = colour
    img += rng.normal(0.0, 0.02, img.shape)
    return np.clip(img, 0.0, 1.0)


def procedural_reflection(rng, size):
    """Smooth, spatially uneven reflection: a few soft coloured blobs on black."""
    yy, xx = _grid_coords(size)
    img = np.zeros((size, size, 3))
    for _ in range(int(rng.integers(1, 5))):
        colour = rng.uniform(0.3, 1.0, 3)
        cy, cx = rng.uniform(-0.1 * size, 1.1 * size, 2)
        radius = rng.uniform(size / 10, size / 2.5)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius**2))
        img += blob[..., None] * colour
    if rng.uniform() < 0.3:
        # a bright bar, like a window frame seen in the glass
        pos = int(rng.integers(0, size))
        width = int(rng.integers(2, max(3, size // 8)))
        if rng.uniform() < 0.5:
            img[:, pos:pos + width] += rng.uniform(0.3, 0.7)
        else:
            img[pos:pos + width] += rng.uniform(0.3, 0.7)
    return np.clip(img, 0.0, 1.0)


def generate_sources(out_dir, count, size, seed, kind):
    """Write ``count`` procedural PPMs of the given kind (``"T"`` or ``"R"``)."""
    makers = {"T": procedural_transmission, "R": procedural_reflection}
    if kind not in makers:
        raise ConfigError(f"kind must be 'T' or 'R', got {kind!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(count):
        rng = stream(seed, "source", kind, i)
        path = out_dir / f"{kind.lower()}_{i:05d}.ppm"
        imageio.save_image(makers[kind](rng, size), path)
        paths.append(path)
    return paths


# ------------------------------------------------------------------ dataset
@dataclass
class ManifestRecord:
    id: str
    path_I: str
    path_T: str
    path_R: str
    prior_maps: dict
    params: DegradationParams
    source_T: str = ""
    source_R: str = ""

    def prior(self, grid):
        key = str(grid)
        if key not in self.prior_maps:
            raise DataError(f"record {self.id} has no prior map for grid {grid}")
        values = np.asarray(self.prior_maps[key], dtype=np.float64)
        return values.reshape(grid, grid)

    def to_json(self):
        d = asdict(self)
        d["prior_maps"] = {k: list(v) for k, v in self.prior_maps.items()}
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line):
        d = json.loads(line)
        d["params"] = DegradationParams(**d["params"])
        return cls(**d)


@dataclass
class DatasetManifest:
    records: list
    root: Path = field(default_factory=Path)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def resolve(self, rel):
        return self.root / rel

    def grids(self):
        if not self.records:
            return set()
        return set.intersection(*(set(int(k) for k in r.prior_maps) for r in self.records))

    def load_arrays(self, grid=None):
        """Stack images as ``(N, H, W, 3)`` float arrays (and priors when ``grid`` is given)."""
        out = {
            "I": np.stack([imageio.load_image(self.resolve(r.path_I)) for r in self.records]),
            "T": np.stack([imageio.load_image(self.resolve(r.path_T)) for r in self.records]),
        }
        if grid is not None:
            out["prior"] = np.stack([r.prior(grid) for r in self.records])
        return out

    def save(self, path=None):
        path = Path(path) if path else self.root / MANIFEST_NAME
        path.write_text("".join(r.to_json() + "\n" for r in self.records), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path):
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        if not path.exists():
            raise DataError(f"manifest not found: {path}")
        records = []
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                records.append(ManifestRecord.from_json(line))
            except (ValueError, TypeError, KeyError) as exc:
                raise DataError(f"{path}:{lineno}: malformed manifest record ({exc})") from exc
        return cls(records, path.parent)


def _list_ppm(directory):
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"not a directory: {directory}")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() == ".ppm")
    if not files:
        raise DataError(f"no .ppm images in {directory}")
    return files


def build_dataset(dir_t, dir_r, schedule, out_dir, grids=DEFAULT_GRIDS, size=56, seed=0):
    """Superimpose every T image with a seeded choice of R; write images and manifest.

    One record per transmission image. T and R are centre-cropped and
    nearest-resized to ``size``. The degraded reflection is quantised to
    8 bits before summation, so the saved ``R`` file is exactly ``I - T``
    wherever no clipping occurred and the stored prior maps are recomputable
    from the saved T and R files.
    """
    grids = tuple(int(g) for g in grids)
    for g in grids:
        if g < 1 or size % g:
            raise ConfigError(f"image size {size} is not divisible by grid {g}")
    schedule = schedule or DegradationSchedule()
    t_files, r_files = _list_ppm(dir_t), _list_ppm(dir_r)
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)

    records = []
    for index, t_path in enumerate(t_files):
        sample_id = f"{index:05d}"
        params = schedule.sample(seed, sample_id)
        pick = int(stream(seed, "pairing", sample_id).integers(len(r_files)))
        r_path = r_files[pick]
        t_img = imageio.resize_nearest(imageio.load_image(t_path), size)
        r_img = imageio.resize_nearest(imageio.load_image(r_path), size)
        _, r_deg = superimpose(t_img, r_img, params)
        r_q = imageio.to_bytes(r_deg).astype(np.float64) / 255.0
        i_img = np.clip(t_img + r_q, 0.0, 1.0)
        names = {k: f"images/{sample_id}_{k}.ppm" for k in ("I", "T", "R")}
        imageio.save_image(i_img, out_dir / names["I"])
        imageio.save_image(t_img, out_dir / names["T"])
        imageio.save_image(r_q, out_dir / names["R"])
        maps = {str(g): [float(v) for v in prior_map(t_img, r_q, g).reshape(-1)] for g in grids}
        records.append(
            ManifestRecord(
                id=sample_id,
                path_I=names["I"],
                path_T=names["T"],
                path_R=names["R"],
                prior_maps=maps,
                params=params,
                source_T=t_path.name,
                source_R=r_path.name,
            )
        )
    manifest = DatasetManifest(records, out_dir)
    manifest.save()
    run_config = {
        "command": "synth",
        "seed": int(seed),
        "size": int(size),
        "grids": list(grids),
        "schedule": asdict(schedule),
        "dir_T": os.path.relpath(dir_t, out_dir),
        "dir_R": os.path.relpath(dir_r, out_dir),
        "records": len(records),
    }
    (out_dir / "run_config.json").write_text(json.dumps(run_config, indent=2, sort_keys=True) + "\n")
    log.info("wrote %d records to %s", len(records), out_dir)
    return manifest
