"""Training (Adam), MAE/MSE evaluation, k-fold cross-validation, checkpoints.

Checkpoints are a single zip archive: ``meta.json`` holds a format-version
integer plus the serialized network config, and each parameter tensor is a
named ``tensors/<name>`` entry (magic b"TNSR", u32le ndim, u32le dims,
float32le payload). Round-trips are bit-exact.
"""

import copy
import csv
import json
import math
import struct
import zipfile
from dataclasses import dataclass, asdict, replace
from pathlib import Path

import numpy as np
import torch

from .data_pipeline import DotAnnotatedImage, build_training_set, quantize_count
from .errors import CheckpointError, ConfigError, InputError, NumericError
from .ground_truth import GroundTruthConfig
from .model_graph import (CascadedCountingNet, NetworkConfig, build_model,
                          crop_density, pad_input)
from .objectives import LossConfig, classification_loss, density_loss, unified_loss

CHECKPOINT_VERSION = 1
TENSOR_MAGIC = b"TNSR"
# fixed entry timestamp so identical models produce identical archives
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


@dataclass
class TrainingConfig:
    learning_rate: float = 1e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    epochs: int = 30
    batch_size: int = 16
    lam: float = 1e-4
    seed: int = 0
    ablation_single_stage: bool = False
    checkpoint_every: int = 0

    def validate(self):
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigError("adam betas must lie in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")

    def to_json_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "TrainingConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad training config: {exc}") from exc

    @classmethod
    def from_json_file(cls, path) -> "TrainingConfig":
        try:
            return cls.from_json_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read training config {path}: {exc}") from exc


@dataclass
class EvaluationReport:
    """Per-image (id, true count, estimated count) plus aggregate MAE/MSE."""

    per_image: list
    mae: float
    mse: float
    n: int

    def to_json_dict(self) -> dict:
        return {
            "per_image": [
                {"id": i, "true_count": y, "estimated_count": yp} for i, y, yp in self.per_image
            ],
            "mae": self.mae,
            "mse": self.mse,
            "n": self.n,
        }

    def save_json(self, path):
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2))

    def format_row(self) -> str:
        return f"MAE {self.mae:.1f}, MSE {self.mse:.1f}"


def count_metrics(y_true, y_pred):
    """MAE = mean |y - y'|; MSE = sqrt(mean |y - y'|^2)."""
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.shape != y_pred.shape or y_true.size == 0:
        raise InputError("count metrics need two equal-length non-empty vectors")
    err = np.abs(y_true - y_pred)
    return float(err.mean()), float(math.sqrt((err ** 2).mean()))


def make_report(per_image) -> EvaluationReport:
    per_image = [(str(i), float(y), float(yp)) for i, y, yp in per_image]
    if not per_image:
        raise InputError("cannot build a report from zero images")
    mae, mse = count_metrics([y for _, y, _ in per_image], [yp for _, _, yp in per_image])
    return EvaluationReport(per_image=per_image, mae=mae, mse=mse, n=len(per_image))


def _check_patch_labels(patches):
    boundaries = None
    for p in patches:
        if p.group_label is None:
            raise InputError(f"patch from {p.source_id} has no group label; "
                             "fit boundaries and assign labels before training")
        b = tuple(p.group_label.boundaries)
        if boundaries is None:
            boundaries = b
        elif b != boundaries:
            raise InputError("patches carry inconsistent group-label boundaries")


def _batches(patches, batch_size, rng):
    by_shape: dict[tuple, list[int]] = {}
    for i, p in enumerate(patches):
        by_shape.setdefault(tuple(p.image.shape), []).append(i)
    batches = []
    for shape in sorted(by_shape):
        idxs = np.asarray(by_shape[shape])
        rng.shuffle(idxs)
        batches.extend(idxs[j:j + batch_size] for j in range(0, len(idxs), batch_size))
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def _batch_tensors(patches, idxs, needs_labels):
    imgs = np.stack([np.asarray(patches[i].image, dtype=np.float32) for i in idxs])
    dens = np.stack([np.asarray(patches[i].density, dtype=np.float32) for i in idxs])
    x = torch.from_numpy(imgs).unsqueeze(1)
    d = torch.from_numpy(dens).unsqueeze(1)
    labels = None
    if needs_labels:
        labels = torch.tensor([patches[i].group_label.class_index for i in idxs], dtype=torch.long)
    return x, d, labels


def train(model: CascadedCountingNet, patches, cfg: TrainingConfig,
          losses: LossConfig | None = None, checkpoint_dir=None):
    """Adam over seeded shuffled mini-batches (grouped by identical patch dims).

    Returns (model, history) where history has one row per epoch with the
    mean unified loss L and its components L_c, L_d. With
    ``ablation_single_stage`` the prior stage and its loss do not exist; the
    model must have been built with ``single_stage=True``.
    """
    cfg.validate()
    if not patches:
        raise InputError("cannot train on an empty patch list")
    if model.cfg.single_stage != cfg.ablation_single_stage:
        raise ConfigError(
            "model/ablation mismatch: the single-stage ablation changes the fusion input "
            "channels, so build the model with single_stage matching ablation_single_stage")
    if losses is None:
        losses = LossConfig(lam=cfg.lam)
    losses.validate()
    cascaded = not model.cfg.single_stage
    if cascaded:
        _check_patch_labels(patches)

    weights = None
    if cascaded and losses.class_weights is not None:
        weights = torch.as_tensor(np.asarray(losses.class_weights, dtype=np.float32))

    rng = np.random.default_rng(cfg.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate,
                                 betas=(cfg.adam_beta1, cfg.adam_beta2))
    norm = losses.density_loss_normalization
    history = []
    for epoch in range(cfg.epochs):
        sums = {"L": 0.0, "L_c": 0.0, "L_d": 0.0}
        n_samples = 0
        for b, idxs in enumerate(_batches(patches, cfg.batch_size, rng)):
            x, d, labels = _batch_tensors(patches, idxs, cascaded)
            optimizer.zero_grad()
            out = model(x)
            ld = density_loss(out.density, d, norm)
            if cascaded:
                lc = classification_loss(out.class_probs, labels, weights)
            else:
                lc = torch.zeros((), dtype=ld.dtype)
            loss = unified_loss(lc, ld, losses.lam)
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch + 1}, batch {b + 1}")
            loss.backward()
            optimizer.step()
            k = len(idxs)
            sums["L"] += loss.item() * k
            sums["L_c"] += lc.item() * k
            sums["L_d"] += ld.item() * k
            n_samples += k
        history.append({
            "epoch": epoch + 1,
            "L": sums["L"] / n_samples,
            "L_c": sums["L_c"] / n_samples,
            "L_d": sums["L_d"] / n_samples,
        })
        if checkpoint_dir is not None and cfg.checkpoint_every > 0 \
                and (epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(model, Path(checkpoint_dir) / f"epoch_{epoch + 1:04d}.ckpt")
    return model, history


def write_history_csv(history, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "L", "L_c", "L_d"])
        for row in history:
            writer.writerow([row["epoch"], row["L"], row["L_c"], row["L_d"]])


def predict_count(model: CascadedCountingNet, image) -> tuple[float, np.ndarray]:
    """Pad, run, crop; count = sum of the non-negative part of the density."""
    padded, dims = pad_input(np.asarray(image, dtype=np.float32))
    with torch.no_grad():
        out = model(torch.from_numpy(padded).unsqueeze(0).unsqueeze(0))
    density = crop_density(out.density[0, 0].numpy(), dims)
    return float(np.clip(density, 0.0, None).sum()), density


def evaluate(model: CascadedCountingNet, images) -> EvaluationReport:
    """Full-image MAE/MSE against dot-annotation counts."""
    if not images:
        raise InputError("cannot evaluate on an empty image list")
    per_image = []
    for img in images:
        estimated, _ = predict_count(model, img.image)
        per_image.append((img.id, float(len(img.heads)), estimated))
    return make_report(per_image)


def classification_accuracy(model: CascadedCountingNet, images, boundaries) -> float:
    """Fraction of images whose predicted count group matches the label."""
    if model.cfg.single_stage:
        raise InputError("single-stage models have no count-group classifier")
    if not images:
        raise InputError("cannot score an empty image list")
    hits = 0
    for img in images:
        padded, _ = pad_input(np.asarray(img.image, dtype=np.float32))
        with torch.no_grad():
            out = model(torch.from_numpy(padded).unsqueeze(0).unsqueeze(0))
        pred = int(out.class_probs[0].argmax())
        if pred == quantize_count(len(img.heads), boundaries).class_index:
            hits += 1
    return hits / len(images)


def cross_validate(images, k: int, cfg: TrainingConfig, losses: LossConfig | None = None,
                   net_cfg: NetworkConfig | None = None,
                   gt_cfg: GroundTruthConfig | None = None, augment: bool = False):
    """Seeded k-fold protocol: train on k-1 folds, evaluate the held-out one.

    Returns (fold_reports, aggregate) with the aggregate computed over the
    pooled per-image errors; every image is evaluated exactly once.
    """
    if k < 2:
        raise InputError(f"need at least 2 folds, got {k}")
    if len(images) < k:
        raise InputError(f"{len(images)} images cannot fill {k} folds")
    net_cfg = net_cfg or NetworkConfig()
    if net_cfg.single_stage != cfg.ablation_single_stage:
        net_cfg = replace(net_cfg, single_stage=cfg.ablation_single_stage)
    gt_cfg = gt_cfg or GroundTruthConfig(sigma=2.0)

    order = np.random.default_rng(cfg.seed).permutation(len(images))
    folds = np.array_split(order, k)

    reports = []
    pooled = []
    for f, held_out in enumerate(folds):
        held = set(int(i) for i in held_out)
        train_imgs = [images[i] for i in range(len(images)) if i not in held]
        patches, boundaries, weights = build_training_set(
            train_imgs, gt_cfg, seed=cfg.seed + f, augment=augment)
        fold_losses = copy.deepcopy(losses) if losses is not None else LossConfig(lam=cfg.lam)
        if fold_losses.class_weights is None:
            fold_losses.class_weights = weights
        model = build_model(net_cfg, rng_seed=cfg.seed + f)
        model, _ = train(model, patches, cfg, fold_losses)
        report = evaluate(model, [images[int(i)] for i in held_out])
        reports.append(report)
        pooled.extend(report.per_image)
    return reports, make_report(pooled)


def _tensor_entry(array: np.ndarray) -> bytes:
    array = np.ascontiguousarray(array, dtype="<f4")
    header = TENSOR_MAGIC + struct.pack("<I", array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    return header + array.tobytes()


def _parse_tensor_entry(name: str, blob: bytes) -> np.ndarray:
    if blob[:4] != TENSOR_MAGIC:
        raise CheckpointError(f"tensor {name}: bad magic bytes")
    (ndim,) = struct.unpack("<I", blob[4:8])
    dims = struct.unpack(f"<{ndim}I", blob[8:8 + 4 * ndim])
    payload = blob[8 + 4 * ndim:]
    expected = 4 * int(np.prod(dims, dtype=np.int64)) if ndim else 4
    if len(payload) != expected:
        raise CheckpointError(f"tensor {name}: truncated payload")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


def save_checkpoint(model: CascadedCountingNet, path):
    """Write the archive: meta.json (version + config) and all parameter tensors."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"format_version": CHECKPOINT_VERSION, "config": model.cfg.to_dict()}
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("meta.json", date_time=_ZIP_DATE)
        zf.writestr(info, json.dumps(meta, indent=2, sort_keys=True))
        for name, tensor in model.state_dict().items():
            info = zipfile.ZipInfo(f"tensors/{name}", date_time=_ZIP_DATE)
            zf.writestr(info, _tensor_entry(tensor.detach().cpu().numpy()))


def load_checkpoint(path, cfg: NetworkConfig | None = None) -> CascadedCountingNet:
    """Rebuild a model from an archive; bit-exact against the saved state.

    With ``cfg`` the tensors are loaded into that architecture instead of the
    stored one, failing on the first missing or shape-mismatched tensor.
    """
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            names = set(zf.namelist())
            if "meta.json" not in names:
                raise CheckpointError(f"{path}: missing meta.json")
            meta = json.loads(zf.read("meta.json"))
            if meta.get("format_version") != CHECKPOINT_VERSION:
                raise CheckpointError(
                    f"{path}: format version {meta.get('format_version')} unsupported "
                    f"(expected {CHECKPOINT_VERSION})")
            stored = {
                n[len("tensors/"):]: _parse_tensor_entry(n, zf.read(n))
                for n in zf.namelist() if n.startswith("tensors/")
            }
    except zipfile.BadZipFile as exc:
        raise CheckpointError(f"{path}: not a readable checkpoint archive: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt meta.json: {exc}") from exc

    if cfg is None:
        cfg = NetworkConfig.from_dict(meta["config"])
    model = CascadedCountingNet(cfg)
    state = {}
    for name, param in model.state_dict().items():
        if name not in stored:
            raise CheckpointError(
                f"{path}: missing tensor {name} (model expects shape {tuple(param.shape)})")
        arr = stored.pop(name)
        if tuple(arr.shape) != tuple(param.shape):
            raise CheckpointError(
                f"{path}: tensor {name} has shape {tuple(arr.shape)}, "
                f"model expects {tuple(param.shape)}")
        state[name] = torch.from_numpy(arr)
    if stored:
        raise CheckpointError(f"{path}: unexpected extra tensor {sorted(stored)[0]}")
    model.load_state_dict(state)
    return model
