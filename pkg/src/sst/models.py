"""Model descriptors: declarative topologies bound to a patch contract.

A descriptor couples a named layer stack with the patch size it consumes,
the `fully` flag (predict the whole patch vs. only its center pixel), a
loss, and training hyperparameters.  Two built-ins are provided:

* ``classification`` — two valid 5×5 convolutions (ReLU), 2×2 max pool,
  dense to a single sigmoid unit; binary log-loss; fully=false.
* ``regression`` — one same-padded 5×5 convolution (ReLU), dense from
  n²·10 to n² sigmoid units; mean squared error; fully=true.

On disk a descriptor is a YAML file plus a binary "SSTW" weight container
referenced by relative path.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import nn, sstw
from .errors import ConfigError, ModelLoadError, TrainingError
from .patches import extract_patch_arrays, cache_key, load_patch_cache, save_patch_cache

DEFAULT_HYPERPARAMETERS = {
    "learning_rate": 0.01,
    "batch_size": 64,
    "epochs": 20,
    "seed": 0,
}


@dataclass
class ModelDescriptor:
    name: str
    patch_size: int
    fully: bool
    loss: str
    layer_configs: list
    hyperparameters: dict = field(default_factory=lambda: dict(DEFAULT_HYPERPARAMETERS))
    layers: list | None = None
    training_log: list = field(default_factory=list)

    @property
    def trained(self):
        return self.layers is not None

    def input_shape(self):
        return (self.patch_size, self.patch_size, 3)

    def output_length(self):
        return self.patch_size ** 2 if self.fully else 1


def builtin_classification(patch_size=51):
    """Center-pixel street classifier (sliding-window model)."""
    if patch_size < 11 or patch_size % 2 == 0:
        raise ConfigError(
            f"classification topology needs an odd patch size >= 11, got {patch_size}"
        )
    configs = [
        {"kind": "convolution", "filters": 10, "filter_height": 5,
         "filter_width": 5, "padding": "valid", "activation": "relu"},
        {"kind": "convolution", "filters": 10, "filter_height": 5,
         "filter_width": 5, "padding": "valid", "activation": "relu"},
        {"kind": "maxpool", "pool_height": 2, "pool_width": 2},
        {"kind": "flatten"},
        {"kind": "dense", "units": 1},
        {"kind": "sigmoid"},
    ]
    return ModelDescriptor(
        name="classification", patch_size=patch_size, fully=False,
        loss=nn.BCE, layer_configs=configs,
    )


def builtin_regression(patch_size=51):
    """Full-patch street regressor (patch-stitching model)."""
    if patch_size < 5 or patch_size % 2 == 0:
        raise ConfigError(
            f"regression topology needs an odd patch size >= 5, got {patch_size}"
        )
    configs = [
        {"kind": "convolution", "filters": 10, "filter_height": 5,
         "filter_width": 5, "padding": "same", "activation": "relu"},
        {"kind": "flatten"},
        {"kind": "dense", "units": patch_size ** 2},
        {"kind": "sigmoid"},
    ]
    return ModelDescriptor(
        name="regression", patch_size=patch_size, fully=True,
        loss=nn.MSE, layer_configs=configs,
    )


BUILTINS = {"classification": builtin_classification, "regression": builtin_regression}


# ---------------------------------------------------------------------------
# layer construction and shape checking
# ---------------------------------------------------------------------------

def _config_out_shape(config, in_shape):
    """Output shape and parameter count of one layer config (no weights)."""
    kind = config.get("kind")
    if kind == "convolution":
        k, fh, fw = config["filters"], config["filter_height"], config["filter_width"]
        if len(in_shape) != 3:
            raise ConfigError(f"convolution expects (H,W,C) input, got {in_shape}")
        h, w, c = in_shape
        if config.get("padding", "valid") == "same":
            out = (h, w, k)
        else:
            if fh > h or fw > w:
                raise ConfigError(f"filter {fh}x{fw} larger than input {h}x{w}")
            out = (h - fh + 1, w - fw + 1, k)
        return out, k * fh * fw * c + k
    if kind == "maxpool":
        ph, pw = config["pool_height"], config["pool_width"]
        if len(in_shape) != 3 or ph > in_shape[0] or pw > in_shape[1]:
            raise ConfigError(f"pool {ph}x{pw} does not fit input {in_shape}")
        return (in_shape[0] // ph, in_shape[1] // pw, in_shape[2]), 0
    if kind == "flatten":
        return (int(np.prod(in_shape)),), 0
    if kind == "dense":
        if len(in_shape) != 1:
            raise ConfigError(f"dense expects flattened input, got shape {in_shape}")
        u = config["units"]
        return (u,), in_shape[0] * u + u
    if kind == "sigmoid":
        return tuple(in_shape), 0
    raise ConfigError(f"unknown layer kind {kind!r}")


def check_contract(descriptor):
    """Dry-run shape inference; returns the list of stage shapes.

    Raises ConfigError when the stack cannot consume an n×n×3 patch or its
    final output length contradicts the `fully` flag.
    """
    if descriptor.loss not in nn.LOSSES:
        raise ConfigError(f"unknown loss {descriptor.loss!r}")
    shape = descriptor.input_shape()
    shapes = [shape]
    try:
        for config in descriptor.layer_configs:
            shape, _ = _config_out_shape(config, shape)
            shapes.append(shape)
    except KeyError as exc:
        raise ConfigError(f"layer config missing field {exc}") from exc
    out = int(np.prod(shapes[-1]))
    if out != descriptor.output_length():
        raise ConfigError(
            f"model {descriptor.name!r} (fully={descriptor.fully}) must output "
            f"{descriptor.output_length()} values, topology yields {out}"
        )
    return shapes


def layer_parameter_counts(descriptor):
    shape = descriptor.input_shape()
    counts = []
    for config in descriptor.layer_configs:
        shape, count = _config_out_shape(config, shape)
        counts.append(count)
    return counts


def build_layers(descriptor, rng):
    """Instantiate the layer stack with fresh Glorot-uniform weights."""
    check_contract(descriptor)
    shape = descriptor.input_shape()
    layers = []
    for config in descriptor.layer_configs:
        kind = config["kind"]
        if kind == "convolution":
            k, fh, fw = config["filters"], config["filter_height"], config["filter_width"]
            c = shape[2]
            w = nn.glorot_uniform(rng, (k, fh, fw, c), fh * fw * c, fh * fw * k)
            layer = nn.Conv2D(w, np.zeros(k), padding=config.get("padding", "valid"),
                              activation=config.get("activation", "relu") or None)
        elif kind == "maxpool":
            layer = nn.MaxPool2D(config["pool_height"], config["pool_width"])
        elif kind == "flatten":
            layer = nn.Flatten()
        elif kind == "dense":
            d, u = shape[0], config["units"]
            w = nn.glorot_uniform(rng, (d, u), d, u)
            layer = nn.Dense(w, np.zeros(u))
        elif kind == "sigmoid":
            layer = nn.Sigmoid()
        else:
            raise ConfigError(f"unknown layer kind {kind!r}")
        shape = layer.out_shape(shape)
        layers.append(layer)
    return layers


def _config_matches_layer(config, layer):
    kind = config.get("kind")
    if kind != layer.kind:
        return False
    if kind == "convolution":
        k, fh, fw, _ = layer.w.shape
        return (config["filters"] == k
                and config["filter_height"] == fh
                and config["filter_width"] == fw
                and config.get("padding", "valid") == layer.padding
                and (config.get("activation", "relu") or None) == layer.activation)
    if kind == "maxpool":
        return config["pool_height"] == layer.ph and config["pool_width"] == layer.pw
    if kind == "dense":
        return config["units"] == layer.w.shape[1]
    return True


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def gather_patches(images, spec, pad_mode="edge", cap=None, cache_dir=None):
    """Stack the training patches of several images into flat arrays."""
    if cache_dir is not None:
        key = cache_key(images, spec, pad_mode)
        cached = load_patch_cache(cache_dir, key)
        if cached is not None:
            return cached[0], cached[1]
    label_shape = (spec.n, spec.n) if spec.fully else ()
    all_pixels = [np.empty((0, spec.n, spec.n, 3), dtype=nn.DTYPE)]
    all_labels = [np.empty((0,) + label_shape, dtype=np.uint8)]
    for image in images:
        pixels, labels, _ = extract_patch_arrays(image, spec, pad_mode, cap)
        all_pixels.append(pixels)
        all_labels.append(labels)
    pixels = np.concatenate(all_pixels)
    labels = np.concatenate(all_labels)
    if cache_dir is not None:
        save_patch_cache(cache_dir, key, pixels, labels,
                         np.zeros((len(pixels), 2), dtype=np.int64))
    return pixels, labels


def evaluate_loss(layers, loss, pixels, targets, batch=256):
    """Mean loss of a fixed stack over a patch set (no gradients)."""
    fused = loss == nn.BCE
    stack = layers[:-1] if fused else layers
    total = 0.0
    for start in range(0, len(pixels), batch):
        xb = pixels[start : start + batch]
        tb = targets[start : start + batch]
        out, _ = nn.forward_network(stack, xb, keep_caches=False)
        if fused:
            value = nn.bce_from_logits(out, tb)
        else:
            value = nn.mse_loss(out, tb)
        total += value * len(xb)
    return total / len(pixels)


def _targets_from_labels(descriptor, labels):
    if descriptor.fully:
        return labels.reshape(len(labels), -1).astype(nn.DTYPE)
    return labels.reshape(len(labels), 1).astype(nn.DTYPE)


def train(descriptor, images, spec, progress=None, val_fraction=0.1,
          pad_mode="edge", cap=None, cache_dir=None):
    """Train a descriptor's topology on the patches of `images`.

    The descriptor is populated in place (weights + training log) and
    returned.  Fully deterministic for a fixed seed: initialization, the
    validation holdout and every epoch's shuffle come from one seeded
    generator.  `progress`, when given, is called as
    progress(epoch, train_loss, val_loss) after each epoch.
    """
    if descriptor.patch_size != spec.n:
        raise ConfigError(
            f"model patch size {descriptor.patch_size} != patch spec n {spec.n}"
        )
    if descriptor.fully != spec.fully:
        raise ConfigError(
            f"model fully={descriptor.fully} but patch spec fully={spec.fully}"
        )
    check_contract(descriptor)

    hp = {**DEFAULT_HYPERPARAMETERS, **descriptor.hyperparameters}
    descriptor.hyperparameters = hp
    epochs = int(hp["epochs"])
    batch_size = int(hp["batch_size"])
    lr = float(hp["learning_rate"])
    if epochs < 0 or batch_size < 1 or lr < 0:
        raise ConfigError(f"invalid hyperparameters {hp}")

    rng = np.random.default_rng(int(hp["seed"]))
    descriptor.layers = build_layers(descriptor, rng)
    descriptor.training_log = []
    if epochs == 0:
        return descriptor

    pixels, labels = gather_patches(images, spec, pad_mode, cap, cache_dir)
    targets = _targets_from_labels(descriptor, labels)
    count = len(pixels)
    if count == 0:
        raise TrainingError("no training patches were generated")

    holdout = rng.permutation(count)
    val_count = int(val_fraction * count)
    val_idx = holdout[count - val_count :]
    train_idx = holdout[: count - val_count]
    if len(train_idx) == 0:
        raise TrainingError("validation holdout consumed every training patch")

    layers = descriptor.layers
    for epoch in range(1, epochs + 1):
        order = train_idx[rng.permutation(len(train_idx))]
        running = 0.0
        for start in range(0, len(order), batch_size):
            sel = order[start : start + batch_size]
            value, grads = nn.network_loss_and_grad(
                layers, descriptor.loss, pixels[sel], targets[sel]
            )
            nn.sgd_step(layers, grads, lr)
            running += value * len(sel)
        train_loss = running / len(order)
        val_loss = (evaluate_loss(layers, descriptor.loss, pixels[val_idx],
                                  targets[val_idx])
                    if val_count else None)
        descriptor.training_log.append([epoch, train_loss, val_loss])
        if progress is not None:
            progress(epoch, train_loss, val_loss)
    return descriptor


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save(descriptor, path):
    """Write the YAML descriptor; weights go to a sibling .sstw container."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    weights_name = None
    if descriptor.trained:
        weights_name = path.with_suffix(".sstw").name
        sstw.write_weights(path.parent / weights_name, descriptor.layers)
    data = {
        "name": descriptor.name,
        "patch_size": descriptor.patch_size,
        "fully": descriptor.fully,
        "loss": descriptor.loss,
        "layers": descriptor.layer_configs,
        "hyperparameters": descriptor.hyperparameters,
        "weights": weights_name,
        "training_log": descriptor.training_log,
    }
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(data, fh, sort_keys=False)
    return path


def load(path):
    """Read a YAML descriptor (and its weight container, when present)."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ModelLoadError(f"{path} is not a valid descriptor: {exc}") from exc
    if not isinstance(data, dict):
        raise ModelLoadError(f"{path} is not a descriptor file")
    try:
        descriptor = ModelDescriptor(
            name=str(data["name"]),
            patch_size=int(data["patch_size"]),
            fully=bool(data["fully"]),
            loss=str(data["loss"]),
            layer_configs=list(data["layers"]),
            hyperparameters=dict(data.get("hyperparameters") or DEFAULT_HYPERPARAMETERS),
            training_log=[list(entry) for entry in data.get("training_log") or []],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelLoadError(f"{path} is missing descriptor fields: {exc}") from exc
    try:
        check_contract(descriptor)
    except ConfigError as exc:
        raise ModelLoadError(f"{path}: {exc}") from exc
    weights_name = data.get("weights")
    if weights_name:
        layers = sstw.read_weights(path.parent / weights_name)
        if len(layers) != len(descriptor.layer_configs):
            raise ModelLoadError(
                f"{path}: descriptor lists {len(descriptor.layer_configs)} layers "
                f"but the weight container holds {len(layers)}"
            )
        for i, (config, layer) in enumerate(zip(descriptor.layer_configs, layers)):
            if not _config_matches_layer(config, layer):
                raise ModelLoadError(
                    f"{path}: layer {i} config {config.get('kind')!r} does not "
                    "match the weight container"
                )
        try:
            nn.infer_shapes(layers, descriptor.input_shape())
        except Exception as exc:
            raise ModelLoadError(
                f"{path}: weight tensors do not fit the declared topology: {exc}"
            ) from exc
        descriptor.layers = layers
    return descriptor


def weight_hash(descriptor):
    """Content hash of the serialized weights (None when untrained)."""
    if not descriptor.trained:
        return None
    return hashlib.sha256(sstw.layers_to_bytes(descriptor.layers)).hexdigest()


# ---------------------------------------------------------------------------
# summaries
# ---------------------------------------------------------------------------

def _describe_config(config):
    kind = config["kind"]
    if kind == "convolution":
        return (f"{config['filters']} filters "
                f"{config['filter_height']}x{config['filter_width']}, "
                f"{config.get('padding', 'valid')}"
                + (", relu" if config.get("activation", "relu") else ""))
    if kind == "maxpool":
        return f"pool {config['pool_height']}x{config['pool_width']}"
    if kind == "dense":
        return f"{config['units']} units"
    return ""


def summary(descriptor):
    """Human-readable description: layer table, hyperparameters, log tail."""
    shapes = check_contract(descriptor)
    counts = layer_parameter_counts(descriptor)
    lines = [
        f"name:        {descriptor.name}",
        f"patch_size:  {descriptor.patch_size}",
        f"fully:       {str(descriptor.fully).lower()}",
        f"loss:        {descriptor.loss}",
        f"trained:     {str(descriptor.trained).lower()}",
        "",
        f"{'layer':<14}{'details':<36}{'output':<16}{'parameters':>10}",
    ]
    lines.append(f"{'input':<14}{'':<36}{str(shapes[0]):<16}{'':>10}")
    for config, shape, count in zip(descriptor.layer_configs, shapes[1:], counts):
        lines.append(
            f"{config['kind']:<14}{_describe_config(config):<36}"
            f"{str(shape):<16}{count:>10}"
        )
    lines.append(f"{'total':<66}{sum(counts):>10}")
    lines.append("")
    hp = descriptor.hyperparameters
    lines.append("hyperparameters: " + ", ".join(f"{k}={hp[k]}" for k in sorted(hp)))
    if descriptor.training_log:
        lines.append(f"training log ({len(descriptor.training_log)} epochs, last 5):")
        for epoch, tl, vl in descriptor.training_log[-5:]:
            val = "n/a" if vl is None else f"{vl:.6f}"
            lines.append(f"  epoch {epoch}: train {tl:.6f}  val {val}")
    else:
        lines.append("training log: empty")
    return "\n".join(lines)
