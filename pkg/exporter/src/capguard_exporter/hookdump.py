"""Export activation and gradient tensors from a torch classifier.

A forward hook on a user-named layer captures that layer's output for one
image at a time; the gradient of each pre-softmax class logit with respect
to the captured activation is then dumped alongside the activation itself,
the class probabilities, and a dataset manifest — all in the same binary
tensor container and manifest schema the monitoring toolkit reads, so an
exported directory drops straight into its analysis pipeline.

The wrapped model must map a [1, 1, H, W] float batch to a [1, C] tensor of
logits (pre-softmax); probabilities are derived here.  The target layer must
produce a rank-4 [1, K, H', W'] spatial activation.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from capguard.tensorstore import (
    DatasetManifest,
    SampleRecord,
    read_tensor,
    save_manifest,
    write_tensor,
)


class ExportError(Exception):
    """A sample could not be exported."""


class LayerNotFoundError(ExportError):
    """The named target layer does not exist in the model."""


class NonSpatialLayerError(ExportError):
    """The target layer's output is not a single rank-3 spatial map."""


class ShapeDriftError(ExportError):
    """A sample's shapes differ from the first exported sample's."""


def _load_tensor_input(path) -> np.ndarray:
    arr = read_tensor(path)
    if arr.ndim != 2:
        raise ExportError(
            f"tensor input must be rank 2 (H, W), got rank {arr.ndim}"
        )
    return arr.astype(np.float32)


def _load_grayscale_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as img:
        gray = img.convert("L")
        return np.asarray(gray, dtype=np.float32) / 255.0


PREPROCESSORS = {
    "tensor": _load_tensor_input,
    "grayscale-png": _load_grayscale_png,
}


@dataclass(frozen=True)
class ExportSpec:
    """What to export and where.

    `preprocess` names how image files become [H, W] float arrays: "tensor"
    reads a stored rank-2 tensor file, "grayscale-png" loads a PNG as
    grayscale scaled to [0, 1].  `activation_shape`, when set, pins the
    expected [K, H', W'] shape of the captured activation; exports whose
    activation differs raise ShapeDriftError.
    """

    model: torch.nn.Module
    layer: str
    num_classes: int
    out_dir: Path
    preprocess: str = "tensor"
    activation_shape: tuple[int, int, int] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "out_dir", Path(self.out_dir))
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        if self.preprocess not in PREPROCESSORS:
            raise ValueError(
                f"unknown preprocess {self.preprocess!r}; "
                f"choose from {sorted(PREPROCESSORS)}"
            )


def _resolve_layer(model: torch.nn.Module, name: str) -> torch.nn.Module:
    modules = dict(model.named_modules())
    if name not in modules:
        known = ", ".join(sorted(n for n in modules if n)) or "<none>"
        raise LayerNotFoundError(f"layer {name!r} not found; model has: {known}")
    return modules[name]


def _capture_forward(spec: ExportSpec, image: np.ndarray):
    """Run one image through the model, returning (activation, logits).

    The activation is the target layer's output with the unit batch axis
    still attached, kept in the autograd graph so per-class gradients can be
    taken against it.
    """
    target = _resolve_layer(spec.model, spec.layer)
    captured: list[torch.Tensor] = []
    handle = target.register_forward_hook(
        lambda module, args, output: captured.append(output)
    )
    try:
        batch = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))
        batch = batch.unsqueeze(0).unsqueeze(0)
        with torch.enable_grad():
            logits = spec.model(batch)
    finally:
        handle.remove()
    if not captured:
        raise LayerNotFoundError(
            f"layer {spec.layer!r} never ran during the forward pass"
        )
    activation = captured[-1]
    if not isinstance(activation, torch.Tensor) or activation.ndim != 4 \
            or activation.shape[0] != 1:
        what = (tuple(activation.shape) if isinstance(activation, torch.Tensor)
                else type(activation).__name__)
        raise NonSpatialLayerError(
            f"layer {spec.layer!r} must yield a [1, K, H, W] activation, "
            f"got {what}"
        )
    if logits.shape != (1, spec.num_classes):
        raise ExportError(
            f"model returned logits of shape {tuple(logits.shape)}, "
            f"expected (1, {spec.num_classes})"
        )
    return activation, logits


def export_sample(spec: ExportSpec, image_path, sample_id: str) -> SampleRecord:
    """Export one image: activation, per-class gradients, probabilities.

    Writes `<id>_image.gct`, `<id>_act.gct`, and one `<id>_grad<c>.gct` per
    class under `spec.out_dir`, and returns the manifest record referencing
    them.  Gradients are of each pre-softmax logit with respect to the
    captured activation.
    """
    image = PREPROCESSORS[spec.preprocess](image_path)
    was_training = spec.model.training
    spec.model.eval()
    try:
        activation, logits = _capture_forward(spec, image)
        grads = [
            torch.autograd.grad(logits[0, c], activation, retain_graph=True)[0]
            for c in range(spec.num_classes)
        ]
    finally:
        spec.model.train(was_training)

    act = activation.detach().numpy()[0]
    if spec.activation_shape is not None \
            and act.shape != tuple(spec.activation_shape):
        raise ShapeDriftError(
            f"sample {sample_id!r}: activation shape {act.shape} differs "
            f"from the pinned {tuple(spec.activation_shape)}"
        )
    probs = torch.softmax(logits[0], dim=0).detach().numpy().astype(np.float64)

    spec.out_dir.mkdir(parents=True, exist_ok=True)
    image_ref = f"{sample_id}_image.gct"
    write_tensor(image.astype(np.float32), spec.out_dir / image_ref)
    activation_ref = f"{sample_id}_act.gct"
    write_tensor(act.astype(np.float32), spec.out_dir / activation_ref)
    gradient_refs = []
    for c, grad in enumerate(grads):
        ref = f"{sample_id}_grad{c}.gct"
        write_tensor(grad.numpy()[0].astype(np.float32), spec.out_dir / ref)
        gradient_refs.append(ref)

    return SampleRecord(
        id=sample_id,
        num_classes=spec.num_classes,
        probs=tuple(float(p) for p in probs),
        predicted_class=int(np.argmax(probs)),
        true_class=None,
        activation_ref=activation_ref,
        gradient_refs=tuple(gradient_refs),
        mask_ref=None,
        image_ref=image_ref,
    )


def export_dataset(spec: ExportSpec, image_paths, ids=None) -> Path:
    """Export every image and write one merged manifest.

    Sample ids default to the image file stems and must be unique.  The
    first sample pins the image and activation shapes; any later sample
    that differs aborts the export.  Any per-sample failure aborts with the
    failing id named.  Returns the manifest path.
    """
    paths = [Path(p) for p in image_paths]
    if not paths:
        raise ValueError("no images to export")
    if ids is None:
        ids = [p.stem for p in paths]
    ids = [str(i) for i in ids]
    if len(ids) != len(paths):
        raise ValueError(f"{len(paths)} images but {len(ids)} ids")
    seen = set()
    for sid in ids:
        if sid in seen:
            raise ValueError(f"duplicate sample id {sid!r}")
        seen.add(sid)

    _resolve_layer(spec.model, spec.layer)  # fail fast before writing files
    records = []
    image_shape: tuple[int, int] | None = None
    for sid, path in zip(ids, paths):
        try:
            record = export_sample(spec, path, sid)
            stored = read_tensor(spec.out_dir / record.image_ref)
            if image_shape is None:
                image_shape = stored.shape
                act = read_tensor(spec.out_dir / record.activation_ref)
                spec = dataclasses.replace(spec, activation_shape=act.shape)
            elif stored.shape != image_shape:
                raise ShapeDriftError(
                    f"image shape {stored.shape} differs from the first "
                    f"sample's {image_shape}"
                )
        except ExportError as exc:
            raise ExportError(f"export aborted at sample {sid!r}: {exc}") from exc
        except OSError as exc:
            raise ExportError(f"export aborted at sample {sid!r}: {exc}") from exc
        records.append(record)

    manifest_path = spec.out_dir / "manifest.json"
    save_manifest(
        DatasetManifest(image_height=image_shape[0], image_width=image_shape[1],
                        samples=records),
        manifest_path,
    )
    return manifest_path
