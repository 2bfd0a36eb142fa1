"""Training, evaluation, location ablation and visual inspection."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .autograd import backward, no_grad
from .data import DIHEDRAL, DatasetManifest, dihedral, load_pgm, make_folds, save_pgm, stack_samples, to_gray8
from .errors import ConfigError, FBUNetError
from .losses import compute_class_weights, feedback_loss, weighted_cross_entropy
from .metrics import ConfusionMatrix, accumulate_confusion, iou, predict_labels
from .models import LOCATIONS, Model, ModelConfig, build_model
from .optim import DEFAULT_LR, adam_step, zero_grad

log = logging.getLogger(__name__)

DROSOPHILA_RATIOS = (192, 48, 80)
MOUSE_RATIOS = (280, 40, 80)


class TrainingDiverged(FBUNetError, FloatingPointError):
    """Raised when a loss term becomes NaN or infinite."""


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    lr: float = DEFAULT_LR
    epochs: int = 1500
    batch_size: int = 16
    seed: int = 0
    fold: tuple | None = (5, 0)  # (k, index); None trains on everything
    ratios: tuple = DROSOPHILA_RATIOS
    checkpoint_dir: str | None = None
    eval_every: int = 1
    class_weights: bool = True
    augment: bool = False  # random rotation/flip per training sample and batch

    def validate(self):
        self.model.validate()
        if not self.lr > 0:
            raise ConfigError("lr", "must be > 0")
        if self.epochs < 0:
            raise ConfigError("epochs", "must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if self.eval_every < 1:
            raise ConfigError("eval_every", "must be >= 1")
        if self.fold is not None:
            k, i = self.fold
            if not 0 <= i < k:
                raise ConfigError("fold", f"index {i} outside 0..{k - 1}")
        return self


@dataclass
class Split:
    ids: list
    images: np.ndarray
    labels: np.ndarray


def load_splits(manifest: DatasetManifest, config: TrainConfig):
    """``{"train", "val", "test"}`` -> :class:`Split` for the configured fold."""
    if config.fold is None:
        groups = {"train": manifest.ids, "val": [], "test": []}
    else:
        k, i = config.fold
        fold = make_folds(manifest, k, config.ratios, config.seed)[i]
        groups = {"train": fold.train, "val": fold.val, "test": fold.test}
    out = {}
    for name, ids in groups.items():
        samples = manifest.load_samples(ids)
        if samples:
            images, labels = stack_samples(samples)
        else:
            images, labels = np.zeros((0, 1, 1, 1), np.float32), np.zeros((0, 1, 1), np.intp)
        out[name] = Split(list(ids), images, labels)
    return out


@dataclass
class EvalResult:
    class_names: list
    confusion: dict  # "round1"/"round2" -> ConfusionMatrix

    def scores(self, which="final"):
        key = self.final_key if which == "final" else which
        return iou(self.confusion[key])

    @property
    def final_key(self):
        return "round2" if "round2" in self.confusion else "round1"

    @property
    def mean_iou(self) -> float:
        return self.scores()[1]

    def table(self, label="model") -> str:
        return format_table([(label, *self.scores())], self.class_names)

    def rows(self, label="model") -> list:
        per, mean = self.scores()
        lines = [f"iou\t{label}\t{n}\t{_fmt(v)}" for n, v in zip(self.class_names, per)]
        lines.append(f"iou\t{label}\tmeanIoU\t{_fmt(mean)}")
        return lines


def _fmt(v):
    return "nan" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.6f}"


def format_table(rows, class_names) -> str:
    """Plain-text table: one column per class then meanIoU, values in percent."""
    head = ["Method"] + [f"{n} (%)" for n in class_names] + ["meanIoU (%)"]
    body = []
    for label, per, mean in rows:
        cells = [label] + ["-" if math.isnan(v) else f"{100 * v:.1f}" for v in per]
        cells.append("-" if math.isnan(mean) else f"{100 * mean:.1f}")
        body.append(cells)
    widths = [max(len(r[i]) for r in [head] + body) for i in range(len(head))]
    fmt = lambda r: "  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()
    return "\n".join([fmt(head)] + [fmt(r) for r in body])


def evaluate_arrays(model: Model, images, labels, batch_size=16, class_names=None) -> EvalResult:
    """Inference-mode global confusion matrices for each round's output."""
    C = model.config.num_classes
    cms = {"round1": ConfusionMatrix(C)}
    if model.config.is_feedback:
        cms["round2"] = ConfusionMatrix(C)
    dtype = model.precision.dtype
    with no_grad():
        for start in range(0, len(images), batch_size):
            out = model.forward(images[start:start + batch_size].astype(dtype), training=False)
            lab = labels[start:start + batch_size]
            accumulate_confusion(cms["round1"], out.probs_round1, lab)
            if out.probs_round2 is not None:
                accumulate_confusion(cms["round2"], out.probs_round2, lab)
    return EvalResult(list(class_names or [f"class{c}" for c in range(C)]), cms)


@dataclass
class TrainReport:
    model: Model
    best_model: Model
    log_lines: list
    history: list
    best_epoch: int
    best_val: float
    class_weights: np.ndarray
    splits: dict

    @property
    def log_text(self) -> str:
        return "".join(line + "\n" for line in self.log_lines)


def _clone(model: Model) -> Model:
    return ckpt.loads(ckpt.dumps(model))[0]


def _loss_terms(model, out, labels, weights):
    l1 = weighted_cross_entropy(out.probs_round1, labels, weights)
    if out.probs_round2 is None:
        return l1, None, l1
    l2 = weighted_cross_entropy(out.probs_round2, labels, weights)
    return l1, l2, feedback_loss(l1, l2, model.config.lam)


def train_step(model: Model, images, labels, weights, lr, params=None):
    """Forward, loss, backward and one Adam update on a batch.

    Returns the loss terms ``(l_first, l_second, total)`` as floats; for
    single-round models ``l_second`` is ``None``.
    """
    params = params if params is not None else model.parameters()
    out = model.forward(images, training=True)
    l1, l2, total = _loss_terms(model, out, labels, weights)
    terms = (l1.item(), None if l2 is None else l2.item(), total.item())
    if not all(math.isfinite(t) for t in terms if t is not None):
        raise TrainingDiverged(f"non-finite loss terms {terms}")
    backward(total)
    adam_step(params, lr)
    zero_grad(params)
    model.reset_state()
    return terms


def augment_batch(images, labels, rng):
    """Apply one random dihedral element per sample; images (B,1,H,W), labels (B,H,W)."""
    picks = rng.integers(0, len(DIHEDRAL), len(images))
    out_img, out_lab = np.empty_like(images), np.empty_like(labels)
    for j, e in enumerate(picks):
        k, flip = DIHEDRAL[e]
        out_img[j, 0] = dihedral(images[j, 0], k, flip)
        out_lab[j] = dihedral(labels[j], k, flip)
    return out_img, out_lab


def train(config: TrainConfig, manifest: DatasetManifest, splits=None, log_stream=None) -> TrainReport:
    """Train one model on the configured fold.

    Each epoch shuffles the training ids with a seeded permutation, runs all
    batches (the last short batch included) and optionally scores the
    validation split. The best-validation model is kept alongside the latest
    one and both are written to ``checkpoint_dir`` when it is set.
    """
    config.validate()
    if config.model.num_classes != manifest.num_classes:
        raise ConfigError("num_classes", f"model has {config.model.num_classes} classes, "
                                         f"manifest has {manifest.num_classes}")
    splits = splits or load_splits(manifest, config)
    train_split, val_split = splits["train"], splits["val"]
    C = config.model.num_classes
    weights = (compute_class_weights(train_split.labels, C) if config.class_weights
               else np.ones(C)).astype(np.float32)

    model = build_model(config.model, seed=config.seed)
    params = model.parameters()
    rng = np.random.Generator(np.random.PCG64([config.seed, 1]))
    ckdir = Path(config.checkpoint_dir) if config.checkpoint_dir else None
    if ckdir:
        ckdir.mkdir(parents=True, exist_ok=True)

    best_model, best_val, best_epoch = model, float("-inf"), 0
    log_lines, history = [], []
    n = len(train_split.ids)
    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(n)
        sums = np.zeros(3)
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = perm[start:start + config.batch_size]
            images, labels = train_split.images[idx], train_split.labels[idx]
            if config.augment:
                images, labels = augment_batch(images, labels, rng)
            try:
                l1, l2, total = train_step(model, images, labels, weights, config.lr, params)
            except TrainingDiverged as exc:
                raise TrainingDiverged(f"epoch {epoch}, batch {b}: {exc}") from None
            sums += len(idx) * np.array([l1, np.nan if l2 is None else l2, total])
        means = sums / max(n, 1)

        val = float("nan")
        if len(val_split.ids) and epoch % config.eval_every == 0:
            val = evaluate_arrays(model, val_split.images, val_split.labels, config.batch_size).mean_iou
            if val > best_val:
                best_val, best_epoch = val, epoch
                best_model = _clone(model)
                if ckdir:
                    ckpt.save_checkpoint(ckdir / "best.ckpt", model, epoch, rng.bit_generator.state,
                                         {"val_miou": val})
        line = "\t".join(["epoch", str(epoch), "L_first", _fmt(means[0]),
                          "L_second", "-" if not model.config.is_feedback else _fmt(means[1]),
                          "L", _fmt(means[2]), "val_mIoU", _fmt(val)])
        log_lines.append(line)
        history.append({"epoch": epoch, "l_first": means[0], "l_second": means[1],
                        "loss": means[2], "val_miou": val})
        if log_stream is not None:
            print(line, file=log_stream, flush=True)
        log.debug(line)

    if best_epoch == 0:
        best_model = model
    if ckdir:
        ckpt.save_checkpoint(ckdir / "latest.ckpt", model, config.epochs, rng.bit_generator.state)
        if best_epoch == 0:
            ckpt.save_checkpoint(ckdir / "best.ckpt", model, config.epochs, rng.bit_generator.state)
        (ckdir / "metrics.log").write_text("".join(l + "\n" for l in log_lines))
    return TrainReport(model, best_model, log_lines, history, best_epoch,
                       best_val if best_epoch else float("nan"), weights, splits)


def evaluate(checkpoint_path, manifest: DatasetManifest, ids=None, batch_size=16) -> EvalResult:
    """Score a saved model on ``ids`` (default: the whole manifest)."""
    model, _ = ckpt.load_checkpoint(checkpoint_path)
    if model.config.num_classes != manifest.num_classes:
        raise ConfigError("num_classes", f"checkpoint has {model.config.num_classes} classes, "
                                         f"manifest has {manifest.num_classes}")
    images, labels = stack_samples(manifest.load_samples(ids))
    return evaluate_arrays(model, images, labels, batch_size, manifest.class_names)


def location_label(locations) -> str:
    locs = tuple(sorted(set(locations)))
    return "ours" if locs == LOCATIONS else ", ".join(locs)


ABLATION_SETS = [("a",), ("b",), ("c",), ("d",), ("e",), ("a", "b", "d", "e"), LOCATIONS]


def _ablation_arm(args):
    config, manifest_path, locs = args
    manifest = DatasetManifest.load(manifest_path)
    report = train(config, manifest)
    test = report.splits["test"]
    res = evaluate_arrays(report.best_model, test.images, test.labels, config.batch_size,
                          manifest.class_names)
    return location_label(locs), res, report.model.num_parameters()


@dataclass
class AblationReport:
    class_names: list
    rows: list  # (label, EvalResult, parameter count)

    def table(self) -> str:
        return format_table([(label, *res.scores()) for label, res, _ in self.rows], self.class_names)

    def machine_rows(self):
        return [line for label, res, _ in self.rows for line in res.rows(label)]


def ablate(base: TrainConfig, location_sets, manifest: DatasetManifest, manifest_path=None,
           workers=1) -> AblationReport:
    """Train and test one feedback-convlstm model per ConvLSTM placement.

    All arms share seed, fold and schedule. With ``workers > 1`` arms run in
    separate processes (``manifest_path`` is then required).
    """
    if base.model.variant != "feedback-convlstm":
        raise ConfigError("variant", "ablation needs the feedback-convlstm variant")
    jobs = []
    for locs in location_sets:
        if not locs:
            raise ConfigError("lstm_locations", "empty location set in ablation")
        cfg = replace(base, model=replace(base.model, lstm_locations=tuple(locs)))
        cfg.validate()
        jobs.append((cfg, locs))
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        if manifest_path is None:
            raise ConfigError("manifest_path", "parallel ablation needs a manifest path")
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_ablation_arm, [(c, manifest_path, l) for c, l in jobs]))
    else:
        rows = []
        for cfg, locs in jobs:
            report = train(cfg, manifest)
            test = report.splits["test"]
            res = evaluate_arrays(report.best_model, test.images, test.labels, cfg.batch_size,
                                  manifest.class_names)
            rows.append((location_label(locs), res, report.model.num_parameters()))
    return AblationReport(manifest.class_names, rows)


def label_gray_levels(pred, num_classes) -> np.ndarray:
    """Class indices spread over 0..255: class c -> round(255 * c / (C - 1))."""
    return np.rint(pred * (255.0 / (num_classes - 1))).astype(np.uint8)


def inspect(checkpoint_path, image_path, out_dir, label_path=None):
    """Write PGM panels for one image; returns ``{panel name: path}``.

    Panels: ``input``, ``truth`` (when a label file exists), ``pred``,
    ``prob<c>`` per class and, for feedback variants, ``activation_sum``.
    """
    model, _ = ckpt.load_checkpoint(checkpoint_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    raw = load_pgm(image_path)
    image = (raw.astype(np.float32) / np.float32(255.0))[None, None]
    C = model.config.num_classes
    written = {}

    def put(name, raster):
        path = out_dir / f"{name}.pgm"
        save_pgm(raster, path)
        written[name] = path

    put("input", raw)
    if label_path is not None and Path(label_path).is_file():
        put("truth", label_gray_levels(load_pgm(label_path), C))
    elif label_path is not None:
        log.warning("label file %s not found; skipping ground-truth panel", label_path)
    with no_grad():
        out = model.forward(image, training=False, capture=model.config.is_feedback)
    probs = out.final.data[0]
    put("pred", label_gray_levels(predict_labels(out.final)[0], C))
    for c in range(C):
        put(f"prob{c}", to_gray8(probs[c]))
    if model.config.is_feedback:
        s = out.first_layer_sum.data[0, 0].astype(np.float64)
        span = s.max() - s.min()
        norm = (s - s.min()) / span if span > 0 else np.zeros_like(s)
        put("activation_sum", to_gray8(norm))
    return written
