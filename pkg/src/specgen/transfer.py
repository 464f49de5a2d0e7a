"""Transfer-learning case study: pretrain a small CNN on generated
spectrograms, fine-tune on a shifted target task, compare convergence.

The classifier is three strided 3x3 conv layers (1 -> 16 -> 32 -> 64 by
default, SiLU activations) followed by 2x average pooling and two fully
connected layers (flatten -> 128 -> classes). ``pretrain_source`` trains it
on the five-class generated corpus; ``adapt_target`` re-initializes the final
head for the three-class target task, copies every other layer from the
source weights (or starts from scratch when none are given), and fine-tunes
all layers at one tenth of the pretraining learning rate.

Convergence of a run is the first epoch whose validation accuracy reaches a
criterion fraction (default 0.95) of the run's final-5-epoch mean accuracy
and stays there for 3 consecutive epochs. Comparisons run over several seeds
and report medians, since single desk-scale runs are noise-dominated.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .numerics import AdamW, RngState, Tensor, backward
from .numerics import tensor as T


class TransferError(ValueError):
    pass


@dataclass
class ClassifierConfig:
    input_resolution: int = 32
    class_count: int = 5
    conv_channels: tuple = (16, 32, 64)
    kernel: int = 3
    stride: int = 2
    fc_hidden: int = 128

    def __post_init__(self):
        self.conv_channels = tuple(int(c) for c in self.conv_channels)
        if len(self.conv_channels) != 3:
            raise TransferError("classifier uses exactly three conv layers")
        if self.class_count < 2:
            raise TransferError(f"need at least 2 classes, got {self.class_count}")
        res = self.input_resolution
        for _ in self.conv_channels:
            res = (res + 2 * (self.kernel // 2) - self.kernel) // self.stride + 1
        if res < 2 or res % 2:
            raise TransferError(
                f"input_resolution {self.input_resolution} leaves a {res} px map before pooling"
            )
        self.flat_features = self.conv_channels[-1] * (res // 2) * (res // 2)


def param_manifest(config: ClassifierConfig) -> dict:
    man = {}
    cin = 1
    for i, cout in enumerate(config.conv_channels):
        man[f"conv{i}.w"] = (cout, cin, config.kernel, config.kernel)
        man[f"conv{i}.b"] = (cout,)
        cin = cout
    man["fc1.w"] = (config.flat_features, config.fc_hidden)
    man["fc1.b"] = (config.fc_hidden,)
    man["head.w"] = (config.fc_hidden, config.class_count)
    man["head.b"] = (config.class_count,)
    return man


def init_weights(config: ClassifierConfig, rng: RngState, dtype=np.float32) -> dict:
    params = {}
    for i, (name, shape) in enumerate(param_manifest(config).items()):
        if name.endswith(".b"):
            data = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else int(shape[0])
            data = (rng.derive(i).normal(shape, dtype=np.float64) / math.sqrt(fan_in)).astype(dtype)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


class Classifier:
    def __init__(self, config: ClassifierConfig, params: Optional[dict] = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_weights(config, RngState(seed))

    def __call__(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        p = self.params
        h = x
        pad = self.config.kernel // 2
        for i in range(3):
            h = T.silu(T.conv2d(h, p[f"conv{i}.w"], p[f"conv{i}.b"], stride=self.config.stride, padding=pad))
        h = T.avgpool2x(h)
        h = T.reshape(h, (h.shape[0], self.config.flat_features))
        h = T.silu(T.add(T.matmul(h, p["fc1.w"]), p["fc1.b"]))
        return T.add(T.matmul(h, p["head.w"]), p["head.b"])

    def predict(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        out = []
        with T.no_grad():
            for start in range(0, images.shape[0], batch_size):
                logits = self(Tensor(images[start : start + batch_size]))
                out.append(np.argmax(logits.data, axis=1))
        return np.concatenate(out)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy; stable via a detached row-max shift."""
    n, k = logits.shape
    shift = Tensor(np.max(logits.data, axis=1, keepdims=True))
    z = T.sub(logits, shift)
    log_norm = T.log(T.sum_(T.exp(z), axis=1, keepdims=True))
    onehot = np.zeros((n, k), dtype=logits.dtype)
    onehot[np.arange(n), np.asarray(labels, dtype=np.int64)] = 1.0
    picked = T.sum_(T.mul(T.sub(z, log_norm), Tensor(onehot)), axis=1)
    return T.neg(T.mean_(picked))


@dataclass
class EpochRecord:
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


@dataclass
class TrainRun:
    records: list[EpochRecord] = field(default_factory=list)
    seed: int = 0
    config: dict = field(default_factory=dict)
    dataset_hash: str = ""
    epochs: int = 0
    # stored per epoch so accuracies can be re-derived independently
    train_predictions: list = field(default_factory=list)
    train_targets: list = field(default_factory=list)
    val_predictions: list = field(default_factory=list)
    val_targets: Optional[np.ndarray] = None

    @property
    def val_accuracies(self) -> list[float]:
        return [r.val_acc for r in self.records]


def dataset_fingerprint(images: np.ndarray, labels: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(images).tobytes())
    h.update(np.ascontiguousarray(labels).tobytes())
    return h.hexdigest()[:16]


def _accuracy(preds: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(preds == labels))


def _evaluate(model: Classifier, images, labels, batch_size=64):
    losses = []
    preds = []
    with T.no_grad():
        for start in range(0, images.shape[0], batch_size):
            chunk = images[start : start + batch_size]
            logits = model(Tensor(chunk))
            losses.append(float(cross_entropy(logits, labels[start : start + batch_size]).data) * chunk.shape[0])
            preds.append(np.argmax(logits.data, axis=1))
    preds = np.concatenate(preds)
    return sum(losses) / images.shape[0], preds


def train_classifier(
    model: Classifier,
    images: np.ndarray,
    labels: np.ndarray,
    epochs: int,
    lr: float = 1e-3,
    batch_size: int = 32,
    seed: int = 0,
    val_fraction: float = 0.2,
    weight_decay: float = 1e-4,
) -> TrainRun:
    """Cross-entropy training with a deterministic validation split.

    Returns the TrainRun; the model is left at the epoch with the lowest
    validation loss (best-validation weights).
    """
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.max() >= model.config.class_count:
        raise TransferError(
            f"label {labels.max()} outside head with {model.config.class_count} classes"
        )
    n = images.shape[0]
    perm = RngState(seed).derive(4040).shuffle(n)
    n_val = max(1, round(val_fraction * n)) if n >= 2 else 0
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    xtr, ytr = images[train_idx], labels[train_idx]
    xva, yva = images[val_idx], labels[val_idx]

    opt = AdamW(model.params, lr=lr, weight_decay=weight_decay)
    run = TrainRun(seed=seed, epochs=epochs, val_targets=yva.copy(),
                   dataset_hash=dataset_fingerprint(images, labels),
                   config={"lr": lr, "batch_size": batch_size, "epochs": epochs,
                           "class_count": model.config.class_count})
    best_val = math.inf
    best_params = None
    for epoch in range(epochs):
        order = RngState(seed).derive(epoch, 1).shuffle(xtr.shape[0])
        epoch_loss = 0.0
        for start in range(0, xtr.shape[0], batch_size):
            idx = order[start : start + batch_size]
            logits = model(Tensor(xtr[idx]))
            loss = cross_entropy(logits, ytr[idx])
            backward(loss)
            opt.step()
            epoch_loss += float(loss.data) * idx.size
        _, train_preds = _evaluate(model, xtr, ytr)
        val_loss, val_preds = _evaluate(model, xva, yva)
        rec = EpochRecord(
            train_loss=epoch_loss / xtr.shape[0],
            train_acc=_accuracy(train_preds, ytr),
            val_loss=val_loss,
            val_acc=_accuracy(val_preds, yva),
        )
        run.records.append(rec)
        run.train_predictions.append(train_preds)
        run.train_targets.append(ytr.copy())
        run.val_predictions.append(val_preds)
        if val_loss < best_val:
            best_val = val_loss
            best_params = {k: p.data.copy() for k, p in model.params.items()}
    if best_params is not None:
        for k, p in model.params.items():
            p.data = best_params[k]
    return run


def pretrain_source(
    images: np.ndarray,
    labels: np.ndarray,
    config: Optional[ClassifierConfig] = None,
    epochs: int = 30,
    lr: float = 1e-3,
    seed: int = 0,
    **kw,
):
    """Train the source classifier on the 5-class generated corpus."""
    labels = np.asarray(labels, dtype=np.int64)
    config = config or ClassifierConfig(class_count=5)
    present = set(np.unique(labels).tolist())
    if present != set(range(config.class_count)):
        raise TransferError(
            f"source dataset must contain every class 0..{config.class_count - 1}, got {sorted(present)}"
        )
    model = Classifier(config, seed=seed)
    run = train_classifier(model, images, labels, epochs, lr=lr, seed=seed, **kw)
    return model, run


def adapt_target(
    source_weights: Optional[dict],
    images: np.ndarray,
    labels: np.ndarray,
    config: Optional[ClassifierConfig] = None,
    epochs: int = 40,
    lr: float = 1e-4,
    seed: int = 0,
    **kw,
):
    """Fine-tune on the target task. ``source_weights`` None = scratch arm.

    All layers except the head are initialized from the source weights; the
    head is re-initialized for the target class count. Every layer trains.
    """
    labels = np.asarray(labels, dtype=np.int64)
    config = config or ClassifierConfig(class_count=3)
    if labels.max() >= config.class_count or labels.min() < 0:
        raise TransferError(
            f"target labels span [{labels.min()}, {labels.max()}], head has {config.class_count} classes"
        )
    model = Classifier(config, seed=seed)
    if source_weights is not None:
        for name, p in model.params.items():
            if name.startswith("head."):
                continue
            src = source_weights[name]
            src_data = src.data if isinstance(src, Tensor) else np.asarray(src)
            if tuple(src_data.shape) != tuple(p.shape):
                raise TransferError(
                    f"source weight {name} has shape {src_data.shape}, target expects {p.shape}"
                )
            p.data = src_data.astype(p.dtype, copy=True)
    run = train_classifier(model, images, labels, epochs, lr=lr, seed=seed, **kw)
    return model, run


NO_CONVERGENCE = None


def convergence_epoch(run: TrainRun, criterion: float = 0.95):
    """First 1-based epoch at criterion * mean(final-5 val accuracy), held for
    3 consecutive epochs; None when never reached."""
    accs = run.val_accuracies
    if not accs:
        raise TransferError("empty training run")
    target = criterion * float(np.mean(accs[-5:]))
    for e in range(len(accs) - 2):
        if all(a >= target for a in accs[e : e + 3]):
            return e + 1
    return NO_CONVERGENCE


@dataclass
class ConvergenceReport:
    pretrained_epoch: Optional[int]
    scratch_epoch: Optional[int]
    improvement: Optional[float]  # (scratch - pretrained) / scratch
    criterion: str

    def summary(self) -> str:
        imp = "undefined" if self.improvement is None else f"{100.0 * self.improvement:.1f}%"
        return (
            f"convergence: pretrained epoch {self.pretrained_epoch}, "
            f"scratch epoch {self.scratch_epoch}, improvement {imp} ({self.criterion})"
        )


def make_convergence_report(pretrained_epoch, scratch_epoch, criterion_desc: str) -> ConvergenceReport:
    if (
        pretrained_epoch is None
        or scratch_epoch is None
        or scratch_epoch == 0
        or not (math.isfinite(pretrained_epoch) and math.isfinite(scratch_epoch))
    ):
        improvement = None
    else:
        improvement = (scratch_epoch - pretrained_epoch) / scratch_epoch
    return ConvergenceReport(
        pretrained_epoch=pretrained_epoch,
        scratch_epoch=scratch_epoch,
        improvement=improvement,
        criterion=criterion_desc,
    )


def compare_runs(pretrained: TrainRun, scratch: TrainRun, criterion: float = 0.95,
                 out_dir=None) -> ConvergenceReport:
    """ConvergenceReport for one paired (pretrained, scratch) experiment.

    Both runs must have used identical target data, epoch count, and seed;
    optionally writes accuracy/loss curve plots under ``out_dir``.
    """
    if pretrained.epochs != scratch.epochs or pretrained.seed != scratch.seed:
        raise TransferError("runs used different epoch counts or seeds")
    if pretrained.dataset_hash != scratch.dataset_hash:
        raise TransferError("runs used different target datasets")
    report = make_convergence_report(
        convergence_epoch(pretrained, criterion),
        convergence_epoch(scratch, criterion),
        f"{criterion:.2f} of final-5-epoch mean val accuracy, 3-epoch persistence",
    )
    if out_dir is not None:
        plot_curves(pretrained, scratch, Path(out_dir))
    return report


def plot_curves(pretrained: TrainRun, scratch: TrainRun, out_dir: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir.mkdir(parents=True, exist_ok=True)
    epochs = np.arange(1, len(pretrained.records) + 1)
    paths = []
    for kind, attr_train, attr_val in (
        ("accuracy", "train_acc", "val_acc"),
        ("loss", "train_loss", "val_loss"),
    ):
        fig, ax = plt.subplots(figsize=(6, 4))
        for run, name, style in ((pretrained, "pretrained", "-"), (scratch, "scratch", "--")):
            ax.plot(epochs[: len(run.records)], [getattr(r, attr_train) for r in run.records],
                    style, label=f"{name} train")
            ax.plot(epochs[: len(run.records)], [getattr(r, attr_val) for r in run.records],
                    style, alpha=0.6, label=f"{name} val")
        ax.set_xlabel("epoch")
        ax.set_ylabel(kind)
        ax.legend(fontsize=8)
        ax.grid(alpha=0.3)
        path = out_dir / f"curves_{kind}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        paths.append(path)
    return paths


def write_runs_csv(pretrained: TrainRun, scratch: TrainRun, path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["arm", "epoch", "train_loss", "train_acc", "val_loss", "val_acc"])
        for arm, run in (("pretrained", pretrained), ("scratch", scratch)):
            for i, r in enumerate(run.records, start=1):
                writer.writerow(
                    [arm, i, f"{r.train_loss:.6g}", f"{r.train_acc:.6g}",
                     f"{r.val_loss:.6g}", f"{r.val_acc:.6g}"]
                )


def median_epochs(values: list) -> float:
    """Median treating no-convergence as +inf."""
    vals = sorted(math.inf if v is None else v for v in values)
    mid = len(vals) // 2
    if len(vals) % 2:
        return vals[mid]
    return 0.5 * (vals[mid - 1] + vals[mid])


def run_transfer_study(
    source_images,
    source_labels,
    target_images,
    target_labels,
    seeds=(1, 2, 3),
    pretrain_epochs: int = 20,
    adapt_epochs: int = 30,
    pretrain_lr: float = 1e-3,
    criterion: float = 0.95,
    out_dir=None,
    scratch_only: bool = False,
    log=None,
):
    """Paired pretrained-vs-scratch runs over seeds; medians decide the report.

    Returns (report, per-seed list of (pretrained_run, scratch_run)).
    """
    per_seed = []
    pre_epochs, scr_epochs = [], []
    for seed in seeds:
        if scratch_only:
            theta_s = None
        else:
            source_model, _ = pretrain_source(
                source_images, source_labels, epochs=pretrain_epochs, lr=pretrain_lr, seed=seed
            )
            theta_s = source_model.params
        _, pre_run = (
            (None, None)
            if scratch_only
            else adapt_target(theta_s, target_images, target_labels,
                              epochs=adapt_epochs, lr=pretrain_lr / 10.0, seed=seed)
        )
        _, scr_run = adapt_target(None, target_images, target_labels,
                                  epochs=adapt_epochs, lr=pretrain_lr / 10.0, seed=seed)
        per_seed.append((pre_run, scr_run))
        scr_epochs.append(convergence_epoch(scr_run, criterion))
        if pre_run is not None:
            pre_epochs.append(convergence_epoch(pre_run, criterion))
        if log is not None:
            log(f"seed {seed}: pretrained -> {pre_epochs[-1] if pre_epochs else 'n/a'}, "
                f"scratch -> {scr_epochs[-1]}")
    med_pre = None if scratch_only else median_epochs(pre_epochs)
    med_scr = median_epochs(scr_epochs)
    report = make_convergence_report(
        med_pre, med_scr,
        f"median over seeds {tuple(seeds)}; {criterion:.2f} of final-5 mean val acc, 3-epoch persistence",
    )
    if out_dir is not None and not scratch_only:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        plot_curves(per_seed[0][0], per_seed[0][1], out_dir)
        write_runs_csv(per_seed[0][0], per_seed[0][1], out_dir / "runs.csv")
        (out_dir / "report.txt").write_text(report.summary() + "\n")
    return report, per_seed
