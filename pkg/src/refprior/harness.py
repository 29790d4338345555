"""Deterministic training, evaluation, ablation and inference.

Every run draws its randomness from :func:`refprior.rng.stream` with these
sub-stream labels: ``("init", "prrn")`` / ``("init", "rpen")`` for weights and
``("order", <model>, <epoch>)`` for the data permutation of each epoch.
Output directories receive ``checkpoint.rprn``, ``curve.csv``,
``summary.json`` and ``run_config.json``; none of them contain timestamps and
recorded paths are relative to the run directory, so repeated runs with the
same seed are byte-identical.
"""

import csv
import io
import json
import logging
import os
import warnings
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import imageio
from .autograd import Adam, Tensor, default_dtype, no_grad
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, DataError, FormatError, NumericalError
from .metrics import MetricsReport, category, patch_pixel_error, psnr, ssim
from .prior import heatmap_bytes
from .prrn import PRRN, PrrnConfig, images_to_tensor, prrn_forward, prrn_loss, tensor_to_images
from .rng import stream
from .rpen import RPEN, RpenConfig, rpen_forward, rpen_loss
from .synthesis import DatasetManifest

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.rprn"
DTYPES = {"float32": np.float32, "float64": np.float64}

# Desk-scale model sizes used by the CLI and the acceptance suite.
DESK_PRRN = PrrnConfig(base_channels=8, attention_heads=4)
DESK_RPEN = RpenConfig(stem_channels=8, aspp_channels=8)


@dataclass(frozen=True)
class TrainConfig:
    seed: int
    steps: int
    batch_size: int = 4
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    prior_mode: str = "truth"
    grid: int = 7
    dtype: str = "float32"
    log_every: int = 50

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}, got {self.dtype!r}")
        if self.log_every < 1:
            raise ConfigError("log_every must be >= 1")
        mode = self.prior_mode
        if mode not in ("truth", "zero") and not (mode.startswith("rpen:") and len(mode) > 5):
            raise ConfigError(f"prior_mode must be truth, zero or rpen:<checkpoint>, got {mode!r}")

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]

    @property
    def rpen_checkpoint(self):
        return self.prior_mode[5:] if self.prior_mode.startswith("rpen:") else None


# --------------------------------------------------------------- checkpoints
def save_model(path, model, train_config=None):
    kind = "prrn" if isinstance(model, PRRN) else "rpen"
    config = {"kind": kind, "model": model.config.to_dict()}
    if train_config is not None:
        config["train"] = asdict(train_config)
    save_checkpoint(path, config, model.state_dict())


def load_model(path, dtype=None):
    """Rebuild a PRRN or RPEN from a checkpoint (weights keep their stored dtype)."""
    config, tensors = load_checkpoint(path)
    kind = config.get("kind")
    builders = {"prrn": (PRRN, PrrnConfig), "rpen": (RPEN, RpenConfig)}
    if kind not in builders:
        raise FormatError(f"checkpoint kind {kind!r} is not prrn or rpen", None, os.fspath(path))
    model_cls, cfg_cls = builders[kind]
    stored = next(iter(tensors.values())).dtype if tensors else np.float32
    with default_dtype(dtype or stored):
        model = model_cls(cfg_cls.from_dict(config["model"]), stream(0, "init", kind))
        try:
            model.load_state_dict(tensors)
        except (KeyError, ValueError) as exc:
            raise FormatError(f"checkpoint tensors do not match the model: {exc}", None, os.fspath(path)) from exc
    return model


def _require_checkpoint(path):
    if not Path(path).is_file():
        raise DataError(f"checkpoint not found: {path}")
    return path


# ----------------------------------------------------------------- helpers
class _BatchOrder:
    """Endless stream of batch indices: one seeded permutation per epoch."""

    def __init__(self, n, batch_size, seed, label):
        self.n, self.batch_size, self.seed, self.label = n, batch_size, seed, label
        self.epoch = 0
        self.queue = []

    def next(self):
        while len(self.queue) < self.batch_size:
            perm = stream(self.seed, "order", self.label, self.epoch).permutation(self.n)
            self.queue.extend(int(i) for i in perm)
            self.epoch += 1
        batch, self.queue = self.queue[: self.batch_size], self.queue[self.batch_size:]
        return np.array(batch)


def _write_text(path, text):
    Path(path).write_text(text, encoding="utf-8")


def _dump_json(path, obj):
    _write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _rel(path, out_dir):
    """Paths in run_config.json are relative to the run directory so reruns elsewhere match."""
    return os.path.relpath(path, out_dir)


def _csv_text(header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(["" if v is None else (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for v in row])
    return buf.getvalue()


def _check_loss(loss, step):
    value = float(loss.data)
    if not np.isfinite(value):
        raise NumericalError(f"non-finite loss {value} at step {step}")
    return value


def _batched(fn, n, batch):
    for lo in range(0, n, batch):
        yield fn(slice(lo, min(n, lo + batch)))


def predict_priors(model, images, batch=16):
    """RPEN forward over a ``(N,H,W,3)`` array; returns ``(global (N,), patch (N,P,P))``."""
    outs_g, outs_p = [], []
    with no_grad():
        for sl in range(0, len(images), batch):
            pred = rpen_forward(images[sl:sl + batch], model)
            g, p = pred.numpy()
            outs_g.append(g)
            outs_p.append(p)
    return np.concatenate(outs_g), np.concatenate(outs_p)


def restore(model, images, priors, batch=16):
    out = []
    with no_grad():
        for sl in range(0, len(images), batch):
            out.append(tensor_to_images(prrn_forward(images[sl:sl + batch], priors[sl:sl + batch], model)))
    return np.concatenate(out)


def _manifest(m):
    return m if isinstance(m, DatasetManifest) else DatasetManifest.load(m)


def _truth_priors(manifest, grid):
    missing = [r.id for r in manifest if str(grid) not in r.prior_maps]
    if missing:
        raise DataError(f"manifest records {missing[:5]} lack truth prior maps for grid {grid}")
    return np.stack([r.prior(grid) for r in manifest])


def resolve_priors(manifest, prior_mode, grid, images=None):
    """Prior maps ``(N, grid, grid)`` for a manifest under ``truth`` / ``zero`` / ``rpen:<ckpt>``."""
    if prior_mode == "truth":
        return _truth_priors(manifest, grid)
    if prior_mode == "zero":
        return np.zeros((len(manifest), grid, grid))
    if prior_mode.startswith("rpen:"):
        rpen = load_model(_require_checkpoint(prior_mode[5:]))
        if not isinstance(rpen, RPEN):
            raise ConfigError(f"{prior_mode[5:]} is not an RPEN checkpoint")
        if rpen.config.feature_grid != grid:
            raise ConfigError(f"RPEN predicts {rpen.config.feature_grid}x{rpen.config.feature_grid} priors, PRRN expects {grid}x{grid}")
        if images is None:
            images = manifest.load_arrays()["I"]
        return predict_priors(rpen, images)[1]
    raise ConfigError(f"unknown prior mode {prior_mode!r}")


def _prepare_out(out_dir):
    if out_dir is None:
        return None
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


# -------------------------------------------------------------------- RPEN
def _rpen_validation(model, images, truth1, truth_p):
    g, p = predict_priors(model, images)
    return patch_pixel_error(g, truth1)[0], patch_pixel_error(p, truth_p)[0]


def train_rpen(manifest, config, out_dir=None, model_config=None, val_manifest=None):
    """Fit RPEN with Adam on ``MSE(global, prior_1) + MSE(patch, prior_7)``.

    Returns a dict with the trained ``model``, per-step ``curve`` rows
    ``(step, loss, val_ppe_grid1, val_ppe_grid7)`` and the initial / final
    validation patch pixel errors (8-bit units). Validation uses
    ``val_manifest`` when given, otherwise the training records.
    """
    manifest = _manifest(manifest)
    val = _manifest(val_manifest) if val_manifest is not None else manifest
    model_config = model_config or DESK_RPEN
    grid = model_config.feature_grid
    for m in (manifest, val):
        missing = {1, grid} - m.grids()
        if missing:
            raise DataError(f"manifest {m.root} lacks prior maps for grids {sorted(missing)}")
    train = manifest.load_arrays()
    t1, tp = _truth_priors(manifest, 1).reshape(-1), _truth_priors(manifest, grid)
    v_images = val.load_arrays()["I"]
    v1, vp = _truth_priors(val, 1).reshape(-1), _truth_priors(val, grid)

    with default_dtype(config.np_dtype):
        model = RPEN(model_config, stream(config.seed, "init", "rpen"))
        x_all = images_to_tensor(train["I"]).data
    opt = Adam(model.named_parameters(), config.lr, config.beta1, config.beta2, config.eps)
    order = _BatchOrder(len(manifest), config.batch_size, config.seed, "rpen")
    initial = _rpen_validation(model, v_images, v1, vp)

    curve = []
    for step in range(1, config.steps + 1):
        idx = order.next()
        opt.zero_grad()
        pred = model(Tensor(x_all[idx], dtype=x_all.dtype))
        loss = rpen_loss(pred, t1[idx], tp[idx])
        value = _check_loss(loss, step)
        loss.backward()
        opt.step()
        row = [step, value, None, None]
        if step % config.log_every == 0 or step == config.steps:
            row[2], row[3] = _rpen_validation(model, v_images, v1, vp)
            log.info("rpen step %d loss %.5f val ppe grid1 %.3f grid%d %.3f", step, value, row[2], grid, row[3])
        curve.append(row)
    final = (curve[-1][2], curve[-1][3])
    result = {
        "model": model,
        "curve": curve,
        "initial_val": {"ppe_grid1": initial[0], f"ppe_grid{grid}": initial[1]},
        "final_val": {"ppe_grid1": final[0], f"ppe_grid{grid}": final[1]},
    }
    out_dir = _prepare_out(out_dir)
    if out_dir is not None:
        save_model(out_dir / CHECKPOINT_NAME, model, config)
        _write_text(out_dir / "curve.csv", _csv_text(("step", "loss", "val_ppe_grid1", f"val_ppe_grid{grid}"), curve))
        _dump_json(out_dir / "summary.json", {k: v for k, v in result.items() if k not in ("model", "curve")})
        _dump_json(out_dir / "run_config.json", {"command": "train-rpen", "train": asdict(config), "model": model_config.to_dict(), "manifest": _rel(manifest.root, out_dir), "val_manifest": _rel(val.root, out_dir)})
    return result


# -------------------------------------------------------------------- PRRN
def _mean_psnr(restored, targets):
    return float(np.mean([psnr(a, b) for a, b in zip(restored, targets)]))


def train_prrn(manifest, config, out_dir=None, model_config=None):
    """Fit PRRN with Adam on the L1 restoration loss.

    Priors come from ``config.prior_mode``: manifest truth maps, an all-zero
    map, or a frozen RPEN checkpoint that is only ever run forward.
    Returns the model, loss curve, and train-set PSNR before and after.
    """
    manifest = _manifest(manifest)
    model_config = replace(model_config or DESK_PRRN, prior_grid=config.grid)
    if config.prior_mode == "truth" and config.grid not in manifest.grids():
        raise ConfigError(f"config grid {config.grid} has no truth prior maps in the manifest (grids {sorted(manifest.grids())})")
    data = manifest.load_arrays()
    priors = resolve_priors(manifest, config.prior_mode, config.grid, data["I"])

    with default_dtype(config.np_dtype):
        model = PRRN(model_config, stream(config.seed, "init", "prrn"))
        x_all = images_to_tensor(data["I"]).data
        y_all = images_to_tensor(data["T"]).data
    opt = Adam(model.named_parameters(), config.lr, config.beta1, config.beta2, config.eps)
    order = _BatchOrder(len(manifest), config.batch_size, config.seed, "prrn")
    initial_psnr = _mean_psnr(restore(model, data["I"], priors), data["T"])

    curve = []
    for step in range(1, config.steps + 1):
        idx = order.next()
        opt.zero_grad()
        out = prrn_forward(Tensor(x_all[idx], dtype=x_all.dtype), priors[idx], model)
        loss = prrn_loss(out, y_all[idx])
        value = _check_loss(loss, step)
        loss.backward()
        opt.step()
        curve.append([step, value])
        if step % config.log_every == 0 or step == config.steps:
            log.info("prrn step %d loss %.5f", step, value)
    final_psnr = _mean_psnr(restore(model, data["I"], priors), data["T"])
    result = {
        "model": model,
        "curve": curve,
        "initial_train_psnr": initial_psnr,
        "final_train_psnr": final_psnr,
    }
    out_dir = _prepare_out(out_dir)
    if out_dir is not None:
        save_model(out_dir / CHECKPOINT_NAME, model, config)
        _write_text(out_dir / "curve.csv", _csv_text(("step", "loss"), curve))
        _dump_json(out_dir / "summary.json", {"initial_train_psnr": initial_psnr, "final_train_psnr": final_psnr})
        _dump_json(out_dir / "run_config.json", {"command": "train-prrn", "train": asdict(config), "model": model_config.to_dict(), "manifest": _rel(manifest.root, out_dir)})
    return result


# --------------------------------------------------------------- evaluation
def evaluate(manifest, prrn_ckpt=None, prior_source="truth", out_csv=None):
    """Per-sample PSNR/SSIM of the restored image against T.

    ``prrn_ckpt`` may be a path, a loaded PRRN, or ``None`` for the pass-through
    restorer ``T_hat = I``. ``prior_source`` is ``truth``, ``zero`` or
    ``rpen:<checkpoint>``; with an RPEN source the patch pixel errors of its
    predictions against the truth maps are reported as well.
    """
    manifest = _manifest(manifest)
    data = manifest.load_arrays()
    truth_global = _truth_priors(manifest, 1).reshape(-1)
    ppe1 = ppe7 = None
    if prrn_ckpt is None:
        restored = data["I"]
    else:
        model = prrn_ckpt if isinstance(prrn_ckpt, PRRN) else load_model(_require_checkpoint(prrn_ckpt))
        grid = model.config.prior_grid
        if prior_source.startswith("rpen:"):
            rpen = load_model(_require_checkpoint(prior_source[5:]))
            g, priors = predict_priors(rpen, data["I"])
            t7 = _truth_priors(manifest, rpen.config.feature_grid)
            ppe1 = [patch_pixel_error(a, b)[0] for a, b in zip(g, truth_global)]
            ppe7 = [patch_pixel_error(a, b)[0] for a, b in zip(priors, t7)]
        else:
            priors = resolve_priors(manifest, prior_source, grid)
        restored = restore(model, data["I"], priors)
    report = MetricsReport()
    for i, rec in enumerate(manifest):
        report.add(
            id=rec.id,
            category=category(truth_global[i]),
            truth_global_prior=float(truth_global[i]),
            psnr_db=psnr(restored[i], data["T"][i]),
            ssim=ssim(restored[i], data["T"][i]),
            ppe_grid1=None if ppe1 is None else ppe1[i],
            ppe_grid7=None if ppe7 is None else ppe7[i],
        )
    if out_csv is not None:
        _write_text(out_csv, report.to_csv())
    return report


def ablate_grid(manifest, grids, config, val_manifest=None, out_dir=None, model_config=None):
    """Train one PRRN per grid with truth priors (same seed/steps) and evaluate each.

    Returns rows ``{"grid", "psnr_db", "ssim"}``; evaluation is on
    ``val_manifest`` when given, else on the training manifest.
    """
    manifest = _manifest(manifest)
    val = _manifest(val_manifest) if val_manifest is not None else manifest
    base = model_config or DESK_PRRN
    for g in grids:
        replace(base, prior_grid=g)  # raises ConfigError on divisibility violations
        for m in (manifest, val):
            if g not in m.grids():
                raise DataError(f"manifest {m.root} has no truth prior maps for grid {g}")
    out_dir = _prepare_out(out_dir)
    rows = []
    for g in grids:
        cfg = replace(config, prior_mode="truth", grid=g)
        run_dir = None if out_dir is None else out_dir / f"grid{g}"
        result = train_prrn(manifest, cfg, run_dir, base)
        agg = evaluate(val, result["model"], "truth").aggregate()
        rows.append({"grid": g, "psnr_db": agg["psnr_db"], "ssim": agg["ssim"]})
    if out_dir is not None:
        _write_text(out_dir / "ablation.csv", _csv_text(("grid", "psnr_db", "ssim"), [(r["grid"], r["psnr_db"], r["ssim"]) for r in rows]))
    return rows


# ---------------------------------------------------------------- inference
def infer(image_path, prrn_ckpt, rpen_ckpt, out_image, out_heatmap=None):
    """Restore one PPM: RPEN predicts the prior, PRRN removes the reflection.

    Writes the restored image (PPM) and, optionally, the predicted prior as a
    PGM heatmap at image resolution. Returns ``(restored, prior_map)``.
    """
    prrn = load_model(_require_checkpoint(prrn_ckpt))
    rpen = load_model(_require_checkpoint(rpen_ckpt))
    if not isinstance(prrn, PRRN) or not isinstance(rpen, RPEN):
        raise ConfigError("infer needs a PRRN checkpoint and an RPEN checkpoint, in that order")
    if prrn.config.prior_grid != rpen.config.feature_grid:
        raise ConfigError(
            f"PRRN expects {prrn.config.prior_grid}x{prrn.config.prior_grid} priors but RPEN "
            f"predicts {rpen.config.feature_grid}x{rpen.config.feature_grid}"
        )
    image = imageio.load_image(image_path)
    size = prrn.config.image_size
    if image.shape[:2] != (size, size):
        warnings.warn(f"resizing {image.shape[1]}x{image.shape[0]} input to {size}x{size} (nearest neighbour)")
        image = imageio.resize_nearest(image, size)
    if rpen.config.image_size != size:
        raise ConfigError(f"RPEN input size {rpen.config.image_size} differs from PRRN {size}")
    _, prior = predict_priors(rpen, image[None])
    restored = restore(prrn, image[None], prior)[0]
    imageio.save_image(restored, out_image)
    if out_heatmap is not None:
        imageio.save_gray_bytes(heatmap_bytes(prior[0], size, size), out_heatmap)
    return restored, prior[0]
