"""Command-line surface: selfcheck, train, eval, view, video, serve.

Exit codes are a stable scripting contract:
    0  success
    1  environment/check failure (I/O, failed selfcheck, training blow-up)
    2  argument or configuration error
    3  data-format error (bad dataset files, corrupt model containers)
"""

from __future__ import annotations

import functools
import json
import os
import sys
import tempfile
from pathlib import Path

import click
import numpy as np

from . import __version__, dataset, inference, metrics, models, nn
from .errors import (
    ArgumentError,
    ConfigError,
    DimensionError,
    FormatError,
    ModelLoadError,
    NumericError,
    SstError,
    StateError,
)
from .patches import PatchSpec

_EXIT_CODES = (
    ((ArgumentError, ConfigError, StateError), 2),
    ((FormatError, ModelLoadError, DimensionError, NumericError), 3),
)


class _Failure(click.ClickException):
    def __init__(self, message, exit_code):
        super().__init__(message)
        self.exit_code = exit_code


def _mapped(f):
    """Translate toolkit errors into the documented exit codes."""

    @functools.wraps(f)
    def wrapper(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except SstError as exc:
            for classes, code in _EXIT_CODES:
                if isinstance(exc, classes):
                    raise _Failure(str(exc), code) from exc
            raise _Failure(str(exc), 1) from exc
        except OSError as exc:
            raise _Failure(str(exc), 1) from exc

    return wrapper


def _default_out():
    return Path(os.environ.get("SST_HOME", "sst-out"))


def _load_model_arg(model, builtin, patch_size):
    if (model is None) == (builtin is None):
        raise ArgumentError("choose exactly one of --model and --builtin")
    if model is not None:
        return models.load(model)
    return models.BUILTINS[builtin](patch_size)


@click.group()
@click.version_option(version=__version__, prog_name="sst")
def cli():
    """Street segmentation toolkit."""


def main():
    cli()


# ---------------------------------------------------------------------------
# selfcheck
# ---------------------------------------------------------------------------

def _check_output_dir(out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    probe = out / ".sst-selfcheck"
    probe.write_text("ok")
    probe.unlink()
    return f"writable: {out}"


def _check_png_codec(_out):
    from PIL import Image

    gray = np.arange(65536, dtype=np.uint16).reshape(256, 256)
    bits = (gray % 2).astype(bool)
    with tempfile.TemporaryDirectory() as tmp:
        p16 = Path(tmp) / "probe16.png"
        p1 = Path(tmp) / "probe1.png"
        Image.fromarray(gray).save(p16)
        Image.fromarray(bits).save(p1)
        with Image.open(p16) as img:
            back16 = np.asarray(img, dtype=np.uint16)
        with Image.open(p1) as img:
            back1 = np.asarray(img.convert("1"), dtype=bool)
    if not (np.array_equal(back16, gray) and np.array_equal(back1, bits)):
        raise RuntimeError("PNG round-trip altered pixel data")
    return "16-bit and 1-bit round-trips exact"


def _check_gradient(_out):
    rng = np.random.default_rng(7)
    layers = [nn.Dense(rng.normal(size=(5, 3)) * 0.5, rng.normal(size=3) * 0.1),
              nn.Sigmoid()]
    x = rng.normal(size=(4, 5))
    t = rng.random((4, 3))
    _, grads = nn.network_loss_and_grad(layers, nn.MSE, x, t)
    w = layers[0].w
    worst = 0.0
    for idx in [(0, 0), (2, 1), (4, 2)]:
        step = 1e-3
        orig = w[idx]
        w[idx] = orig + step
        hi, _ = nn.network_loss_and_grad(layers, nn.MSE, x, t)
        w[idx] = orig - step
        lo, _ = nn.network_loss_and_grad(layers, nn.MSE, x, t)
        w[idx] = orig
        numeric = (hi - lo) / (2 * step)
        analytic = grads[0][0][idx]
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)
        worst = max(worst, rel)
    if worst >= 1e-4:
        raise RuntimeError(f"finite-difference disagreement {worst:.2e}")
    return f"finite-difference probe agrees (worst rel. error {worst:.2e})"


_CHECKS = (
    ("output-dir", _check_output_dir),
    ("png-codec", _check_png_codec),
    ("gradient", _check_gradient),
)


@cli.command()
@click.option("--out", type=click.Path(path_type=Path), default=None,
              help="Directory whose writability is verified.")
@_mapped
def selfcheck(out):
    """Test which components of the environment work."""
    from importlib.metadata import version as dist_version

    click.echo(f"sst {__version__} on python {sys.version.split()[0]}")
    click.echo(f"numpy {np.__version__}, pillow {dist_version('pillow')}, "
               f"click {dist_version('click')}, pyyaml {dist_version('pyyaml')}")
    target = out or _default_out()
    injected = os.environ.get("SST_SELFCHECK_FAULT")
    failed = []
    for name, check in _CHECKS:
        try:
            if name == injected:
                raise RuntimeError("fault injected via SST_SELFCHECK_FAULT")
            detail = check(target)
            click.echo(f"check {name}: ok ({detail})")
        except Exception as exc:
            failed.append(name)
            click.echo(f"check {name}: FAILED ({exc})")
    if failed:
        raise _Failure("failed checks: " + ", ".join(failed), 1)
    click.echo("all checks passed")


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

@cli.command()
@click.option("--dataset", "root", required=True,
              type=click.Path(exists=True, file_okay=False, path_type=Path),
              help="KITTI-layout dataset root.")
@click.option("--model", type=click.Path(path_type=Path),
              help="Descriptor file providing topology and hyperparameters.")
@click.option("--builtin", type=click.Choice(sorted(models.BUILTINS)),
              help="Start from a built-in topology.")
@click.option("--patch-size", default=51, show_default=True,
              help="Patch edge n for built-in topologies.")
@click.option("--train-stride", default=10, show_default=True,
              help="Training stride s (grid spacing of patch centers).")
@click.option("--epochs", type=int, default=None, help="Override epoch count.")
@click.option("--seed", type=int, default=None,
              help="Seed for the split and the training run.")
@click.option("--half-size", is_flag=True, help="Downscale images by 2 per axis.")
@click.option("--out", type=click.Path(path_type=Path), default=None,
              help="Output directory [default: SST_HOME or ./sst-out].")
@_mapped
def train(root, model, builtin, patch_size, train_stride, epochs, seed,
          half_size, out):
    """Train a neural network."""
    descriptor = _load_model_arg(model, builtin, patch_size)
    descriptor.layers = None
    descriptor.training_log = []
    if epochs is not None:
        descriptor.hyperparameters["epochs"] = epochs
    if seed is not None:
        descriptor.hyperparameters["seed"] = seed
    split_seed = int(descriptor.hyperparameters.get("seed", 0))

    images = dataset.load_dataset(root, half_size=half_size)
    if not images:
        raise FormatError(f"no images found under {root}")
    split = dataset.split_dataset(images, seed=split_seed)
    train_images = [img for img in images if img.id in set(split.train)]
    spec = PatchSpec(n=descriptor.patch_size, stride=train_stride,
                     fully=descriptor.fully)

    click.echo(f"training {descriptor.name!r} on {len(train_images)} images "
               f"({len(split.test)} held out), stride {train_stride}")

    def progress(epoch, train_loss, val_loss):
        val = "n/a" if val_loss is None else f"{val_loss:.6f}"
        click.echo(f"epoch {epoch}/{descriptor.hyperparameters['epochs']}  "
                   f"train {train_loss:.6f}  val {val}")

    models.train(descriptor, train_images, spec, progress=progress)

    out = out or _default_out()
    out.mkdir(parents=True, exist_ok=True)
    path = models.save(descriptor, out / f"{descriptor.name}.yaml")
    dataset.write_split(out / f"{descriptor.name}.split.json", split)
    with open(out / f"{descriptor.name}.log.json", "w", encoding="utf-8") as fh:
        json.dump({"epochs": descriptor.training_log}, fh, indent=2)
        fh.write("\n")
    click.echo(f"model written to {path}")


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _eval_one(descriptor, img, stride, workers, out, stem):
    result = inference.timed_segment(descriptor, img, stride, workers=workers)
    truth = getattr(img, "mask", None)
    rgb = img.rgb if hasattr(img, "rgb") else img
    overlay = inference.render_overlay(rgb, result.mask, truth)
    inference.write_probability_png(out / f"{stem}_prob.png", result.probabilities)
    inference.write_mask_png(out / f"{stem}_mask.png", result.mask)
    inference.write_overlay_png(out / f"{stem}_overlay.png", overlay)
    sidecar = inference.write_sidecar(out / f"{stem}.json", descriptor.name, result)
    return result, sidecar


@cli.command("eval")
@click.option("--model", required=True, type=click.Path(path_type=Path),
              help="Trained model descriptor.")
@click.option("--dataset", "root",
              type=click.Path(exists=True, file_okay=False, path_type=Path),
              help="KITTI-layout dataset root to evaluate.")
@click.option("--image", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help="Single photograph (prediction-only).")
@click.option("--split", "split_path", type=click.Path(exists=True, path_type=Path),
              help="Split manifest; restricts --dataset to its test ids.")
@click.option("--eval-stride", default=10, show_default=True,
              help="Evaluation stride s.")
@click.option("--half-size", is_flag=True, help="Downscale images by 2 per axis.")
@click.option("--workers", default=1, show_default=True,
              help="Parallel patch-evaluation workers.")
@click.option("--out", type=click.Path(path_type=Path), default=None,
              help="Output directory [default: SST_HOME or ./sst-out].")
@_mapped
def eval_cmd(model, root, image, split_path, eval_stride, half_size, workers, out):
    """Evaluate a trained network and generate overlays."""
    if (root is None) == (image is None):
        raise ArgumentError("choose exactly one of --dataset and --image")
    descriptor = models.load(model)
    out = out or _default_out()
    out.mkdir(parents=True, exist_ok=True)

    if image is not None:
        from PIL import Image

        with Image.open(image) as img:
            rgb = np.asarray(img.convert("RGB")).astype(np.float64) / 255.0
        if half_size:
            rgb = dataset.halve_rgb(rgb)
        result, _ = _eval_one(descriptor, rgb, eval_stride, workers, out, image.stem)
        click.echo(f"{image.stem}: {result.patch_evaluations} patch evaluations "
                   f"in {result.elapsed:.3f}s (no ground truth, no metrics)")
        return

    ids = dataset.list_image_ids(root)
    if split_path is not None:
        wanted = dataset.read_split(split_path).test
        missing = sorted(set(wanted) - set(ids))
        if missing:
            raise FormatError("split manifest lists unknown ids: " + ", ".join(missing))
        ids = [i for i in ids if i in set(wanted)]
    if not ids:
        raise FormatError(f"no images to evaluate under {root}")

    by_category = {}
    scores, truths = [], []
    evaluated = 0
    for image_id in ids:
        img = dataset.load_pair(root, image_id, half_size=half_size)
        result, _ = _eval_one(descriptor, img, eval_stride, workers, out, image_id)
        evaluated += 1
        if img.mask is not None:
            counts = metrics.confusion(result.mask, img.mask)
            try:
                category = dataset.category_of(image_id)
            except FormatError:
                category = "other"
            by_category.setdefault(category, []).append(counts)
            # Score with the same 16-bit quantization the artifact stores,
            # so the report is exactly reproducible from the written files.
            scores.append(np.round(result.probabilities * 65535.0).astype(np.uint16).ravel())
            truths.append(img.mask.ravel())

    click.echo(f"evaluated {evaluated} images at stride {eval_stride}")
    if not by_category:
        click.echo("no ground truth present; skipping metrics")
        return

    all_counts = [c for cs in by_category.values() for c in cs]
    pooled_ap = metrics.ap_from_arrays(
        np.concatenate(scores).astype(np.float64), np.concatenate(truths)
    )
    pooled_counts = functools.reduce(lambda a, b: a + b, all_counts)
    pooled = metrics.basic_metrics(pooled_counts, ap=pooled_ap)

    rows = []
    for category in sorted(by_category):
        report = metrics.aggregate(by_category[category])
        total = functools.reduce(lambda a, b: a + b, by_category[category])
        rows.append((category, total, report))
    rows.append(("all", pooled_counts, pooled))
    table = metrics.format_table(rows)
    click.echo(table)

    report_data = {
        "images": evaluated,
        "stride": eval_stride,
        "counts": {"tp": pooled_counts.tp, "tn": pooled_counts.tn,
                   "fp": pooled_counts.fp, "fn": pooled_counts.fn},
        "metrics": pooled.as_dict(),
    }
    with open(out / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report_data, fh, indent=2)
        fh.write("\n")
    (out / "report.txt").write_text(table + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# view
# ---------------------------------------------------------------------------

@cli.command()
@click.argument("model", type=click.Path(path_type=Path))
@_mapped
def view(model):
    """Show all information about a model."""
    descriptor = models.load(model)
    click.echo(models.summary(descriptor))


# ---------------------------------------------------------------------------
# video
# ---------------------------------------------------------------------------

@cli.command()
@click.option("--model", required=True, type=click.Path(path_type=Path),
              help="Trained model descriptor.")
@click.option("--frames", required=True,
              type=click.Path(exists=True, file_okay=False, path_type=Path),
              help="Directory of ordered photographs.")
@click.option("--eval-stride", default=10, show_default=True)
@click.option("--fps", default=10, show_default=True, help="Fps hint for encoding.")
@click.option("--half-size", is_flag=True, help="Downscale frames by 2 per axis.")
@click.option("--workers", default=1, show_default=True)
@click.option("--out", type=click.Path(path_type=Path), default=None,
              help="Output directory [default: SST_HOME or ./sst-out].")
@_mapped
def video(model, frames, eval_stride, fps, half_size, workers, out):
    """Generate a video: overlay frames plus an encoding manifest."""
    from PIL import Image

    descriptor = models.load(model)
    out = out or _default_out()
    out.mkdir(parents=True, exist_ok=True)
    frame_files = sorted(p for p in frames.iterdir()
                         if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    manifest = {"fps": fps, "frames": [], "skipped": []}
    number = 0
    for path in frame_files:
        try:
            with Image.open(path) as img:
                rgb = np.asarray(img.convert("RGB")).astype(np.float64) / 255.0
        except OSError as exc:
            click.echo(f"warning: skipping unreadable frame {path.name}: {exc}",
                       err=True)
            manifest["skipped"].append({"source": path.name, "reason": str(exc)})
            continue
        if half_size:
            rgb = dataset.halve_rgb(rgb)
        result = inference.timed_segment(descriptor, rgb, eval_stride,
                                         workers=workers)
        number += 1
        name = f"{number:06d}.png"
        overlay = inference.render_overlay(rgb, result.mask)
        inference.write_overlay_png(out / name, overlay)
        manifest["frames"].append({"source": path.name, "overlay": name})
    if not manifest["frames"]:
        click.echo(f"warning: no readable frames in {frames}", err=True)
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    click.echo(f"wrote {number} overlay frames to {out}")
    click.echo("encode with: ffmpeg -framerate "
               f"{fps} -start_number 1 -i {out}/%06d.png -c:v libx264 "
               "-pix_fmt yuv420p segmentation.mp4")


# ---------------------------------------------------------------------------
# serve
# ---------------------------------------------------------------------------

@cli.command()
@click.option("--model", required=True, type=click.Path(path_type=Path),
              help="Trained model descriptor.")
@click.option("--dataset", "root", required=True,
              type=click.Path(exists=True, file_okay=False, path_type=Path),
              help="KITTI-layout image root.")
@click.option("--port", default=8080, show_default=True)
@click.option("--eval-stride", type=int, default=None,
              help="Default overlay stride [default: the model's patch size].")
@click.option("--half-size", is_flag=True)
@click.option("--workers", default=1, show_default=True)
@click.option("--out", type=click.Path(path_type=Path), default=None,
              help="Cache root [default: SST_HOME or ./sst-out].")
@_mapped
def serve(model, root, port, eval_stride, half_size, workers, out):
    """Start a web server to browse overlays and metrics."""
    from .server import build_server

    descriptor = models.load(model)
    cache_dir = (out or _default_out()) / "serve-cache"
    httpd = build_server(descriptor, root, cache_dir, port=port,
                         default_stride=eval_stride, half_size=half_size,
                         workers=workers)
    host, bound_port = httpd.server_address[:2]
    click.echo(f"serving {descriptor.name!r} on http://{host}:{bound_port}/ "
               f"(cache: {cache_dir})")
    try:
        httpd.serve_forever()
    except KeyboardInterrupt:
        click.echo("shutting down")
    finally:
        httpd.server_close()


if __name__ == "__main__":
    main()
