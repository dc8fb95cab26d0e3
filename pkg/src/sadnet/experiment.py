"""Training runs, sad-point construction, escape runs, and analysis.

A "sad point" is a weight vector that classifies the training set almost
perfectly while scoring near zero on the test set. It is manufactured by
relabeling the test set to deliberately wrong classes, concatenating
enough copies onto the clean train set, and training to saturation on
the result. Metrics during such runs are always evaluated against the
ORIGINAL train/test sets; the corrupted set only drives the gradients
and the stopping rule.

Run artifacts: metrics.jsonl (config header line + one object per
epoch), a metrics.csv mirror with fixed column order, and checkpoints
(init plus the tagged final weights) in the SADNETv1 container.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nn, optim
from .data import BatchPlan, LabeledDataset, batches, build_corrupted_train, corrupt_labels
from .errors import (CheckpointError, ConsistencyError, DivergenceError,
                     FormatError, ValidationError)
from .tensor import norm2

CHECKPOINT_MAGIC = b"SADNETv1\n"

# Independent rng streams per run seed.
_INIT_STREAM = 101
_CORRUPT_STREAM = 202
_BATCH_STREAM = 303


def init_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng((seed, _INIT_STREAM))


def corruption_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng((seed, _CORRUPT_STREAM))


def batch_seed(seed: int) -> int:
    words = np.random.SeedSequence((seed, _BATCH_STREAM)).generate_state(2)
    return int(words[0]) << 32 | int(words[1])


@dataclass
class TrainConfig:
    model_kind: str = "mlp"
    optimizer: str = "adam"
    lr: float = 0.001
    batch_size: int = 128
    epochs: int = 1
    l2_lambda: float = 0.0
    seed: int = 0
    data_seed: int = 0
    hidden: int = 512
    dataset: str = ""
    train_subset: int | None = None
    test_subset: int | None = None
    stop_at_train_acc: float | None = None

    def __post_init__(self):
        if self.model_kind not in ("mlp", "cnn"):
            raise ValidationError(f"model_kind must be 'mlp' or 'cnn', got {self.model_kind!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValidationError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.lr <= 0:
            raise ValidationError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be positive, got {self.batch_size}")
        if self.epochs < 0:
            raise ValidationError(f"epochs must be >= 0, got {self.epochs}")
        if self.l2_lambda < 0:
            raise ValidationError(f"l2_lambda must be >= 0, got {self.l2_lambda}")
        if self.stop_at_train_acc is not None and not 0.0 <= self.stop_at_train_acc <= 1.0:
            raise ValidationError(f"stop_at_train_acc must lie in [0, 1], got {self.stop_at_train_acc}")

    def to_dict(self) -> dict:
        return {
            "model_kind": self.model_kind, "optimizer": self.optimizer, "lr": self.lr,
            "batch_size": self.batch_size, "epochs": self.epochs, "l2_lambda": self.l2_lambda,
            "seed": self.seed, "data_seed": self.data_seed, "hidden": self.hidden,
            "dataset": self.dataset, "train_subset": self.train_subset,
            "test_subset": self.test_subset, "stop_at_train_acc": self.stop_at_train_acc,
        }


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    train_acc: float
    test_loss: float
    test_acc: float
    weight_norm: float
    dist_from_init: float
    elapsed_sec: float

    CSV_COLUMNS = ("epoch", "train_loss", "train_acc", "test_loss", "test_acc",
                   "weight_norm", "dist_from_init", "elapsed_sec")

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.CSV_COLUMNS}


@dataclass
class RunRecord:
    config: dict
    run_id: str
    tag: str
    init_hash: str
    init_metrics: dict
    rows: list[EpochRow] = field(default_factory=list)
    stopped_early: bool = False
    train_set_final_acc: float | None = None
    run_dir: str | None = None

    def header(self) -> dict:
        return {"type": "config", "run_id": self.run_id, "tag": self.tag,
                "init_hash": self.init_hash, "config": self.config,
                "init_metrics": self.init_metrics}

    def to_jsonl(self) -> str:
        lines = [_canon_json(self.header())]
        for row in self.rows:
            lines.append(_canon_json({"type": "epoch", **row.to_dict()}))
        return "\n".join(lines) + "\n"

    def deterministic_payload(self) -> bytes:
        """JSONL payload with wall-clock timing stripped; byte-identical
        across runs of the same config on the same platform."""
        lines = [_canon_json(self.header())]
        for row in self.rows:
            d = row.to_dict()
            d.pop("elapsed_sec")
            lines.append(_canon_json({"type": "epoch", **d}))
        return ("\n".join(lines) + "\n").encode()

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(EpochRow.CSV_COLUMNS)
        for row in self.rows:
            writer.writerow([row.to_dict()[c] for c in EpochRow.CSV_COLUMNS])
        return buf.getvalue()


@dataclass
class Checkpoint:
    arch: dict
    params: list[np.ndarray]
    seed: int
    config: dict
    tag: str
    flags: dict = field(default_factory=dict)

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params]) if self.params else np.zeros(0)

    def to_model(self, expect_kind: str | None = None) -> nn.Model:
        if expect_kind is not None and self.arch.get("kind") != expect_kind:
            raise CheckpointError(
                f"checkpoint holds a {self.arch.get('kind')!r} model, expected {expect_kind!r}")
        model = nn.build_from_descriptor(self.arch)
        want = [p.shape for p in model.parameters()]
        got = [p.shape for p in self.params]
        if want != got:
            raise CheckpointError(f"parameter shapes {got} do not match architecture {want}")
        for dst, src in zip(model.parameters(), self.params):
            dst[...] = src
        return model


def _canon_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def checkpoint_of(model: nn.Model, cfg: TrainConfig, tag: str, flags: dict | None = None) -> Checkpoint:
    params = [p.copy() for p in model.parameters()]
    return Checkpoint(dict(model.arch), params, cfg.seed, cfg.to_dict(), tag, flags or {})


def run_id_for(config: dict, tag: str) -> str:
    digest = hashlib.sha256(_canon_json({"config": config, "tag": tag}).encode()).hexdigest()
    return digest[:12]


def _params_hash(flat: np.ndarray) -> str:
    return hashlib.sha256(flat.astype("<f8").tobytes()).hexdigest()[:16]


def new_model(cfg: TrainConfig, ds: LabeledDataset) -> nn.Model:
    """Build the configured architecture for ds and Xavier-init it from cfg.seed."""
    n, c, h, w = ds.images.shape
    if cfg.model_kind == "mlp":
        model = nn.build_mlp(c * h * w, cfg.hidden, ds.class_count)
    else:
        if h != w:
            raise ValidationError(f"cnn needs square images, got {h}x{w}")
        model = nn.build_cnn(c, h, ds.class_count)
    nn.init_xavier_uniform(model, init_rng(cfg.seed))
    return model


def evaluate(model: nn.Model, ds: LabeledDataset, batch_size: int = 512) -> tuple[float, float]:
    """Mean cross-entropy and argmax accuracy over the full dataset.

    No gradient side effects; argmax ties resolve to the lowest class.
    """
    n = len(ds)
    if n == 0:
        raise ValidationError("cannot evaluate on an empty dataset")
    loss_sum = 0.0
    correct = 0
    for start in range(0, n, batch_size):
        xb = ds.images[start:start + batch_size]
        yb = ds.labels[start:start + batch_size]
        logits = model.forward(xb, cache=False)
        loss = nn.cross_entropy(logits, yb)
        loss_sum += loss.mean_loss * len(yb)
        correct += int((logits.argmax(axis=1) == yb).sum())
    return loss_sum / n, correct / n


def train(model: nn.Model, train_ds: LabeledDataset, eval_train: LabeledDataset,
          eval_test: LabeledDataset, cfg: TrainConfig, out_dir=None,
          tag: str = "clean", on_epoch=None) -> tuple[Checkpoint, RunRecord]:
    """Run cfg.epochs of minibatch training, recording metrics per epoch.

    Metrics rows are evaluated on eval_train/eval_test (the clean sets,
    even when train_ds is corrupted). Early stop triggers when accuracy
    on train_ds itself reaches cfg.stop_at_train_acc.
    """
    if cfg.epochs < 1:
        raise ValidationError("train requires epochs >= 1")
    for ds in (train_ds, eval_train, eval_test):
        if ds.class_count != model.class_count:
            raise ConsistencyError(
                f"dataset {ds.name!r} has {ds.class_count} classes, model expects {model.class_count}")

    state = optim.make_optimizer(cfg.optimizer, cfg.lr)
    w0 = model.flatten_parameters()
    init_cp = checkpoint_of(model, cfg, "init") if out_dir else None

    tr_loss0, tr_acc0 = evaluate(model, eval_train)
    te_loss0, te_acc0 = evaluate(model, eval_test)
    record = RunRecord(
        config=cfg.to_dict(), run_id=run_id_for(cfg.to_dict(), tag), tag=tag,
        init_hash=_params_hash(w0),
        init_metrics={"train_loss": tr_loss0, "train_acc": tr_acc0,
                      "test_loss": te_loss0, "test_acc": te_acc0,
                      "weight_norm": norm2(w0)},
    )

    plan = BatchPlan(cfg.batch_size, batch_seed(cfg.seed))
    start_time = time.perf_counter()
    train_set_acc = None
    for epoch in range(1, cfg.epochs + 1):
        seen = 0
        hits = 0
        for xb, yb in batches(train_ds, plan, epoch):
            logits = model.forward(xb)
            loss = nn.cross_entropy(logits, yb)
            if not np.isfinite(loss.mean_loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}", record)
            hits += int((logits.argmax(axis=1) == yb).sum())
            seen += len(yb)
            model.backward(loss.logit_gradient)
            if cfg.l2_lambda:
                nn.add_l2_gradients(model, cfg.l2_lambda)
            optim.step(model, state)
            if cfg.optimizer == "adam" and state.last_max_update > 10.0 * cfg.lr:
                raise DivergenceError(
                    f"adam update {state.last_max_update:.3e} exceeded 10*lr at epoch {epoch}", record)

        tr_loss, tr_acc = evaluate(model, eval_train)
        te_loss, te_acc = evaluate(model, eval_test)
        w = model.flatten_parameters()
        record.rows.append(EpochRow(epoch, tr_loss, tr_acc, te_loss, te_acc,
                                    norm2(w), norm2(w - w0),
                                    time.perf_counter() - start_time))
        if on_epoch is not None:
            on_epoch(record.rows[-1])
        if cfg.stop_at_train_acc is not None:
            # full evaluation is only worth it once the online epoch accuracy is close
            if train_ds is eval_train:
                train_set_acc = tr_acc
            elif hits / seen >= cfg.stop_at_train_acc - 0.01:
                train_set_acc = evaluate(model, train_ds)[1]
            else:
                train_set_acc = None
            if train_set_acc is not None and train_set_acc >= cfg.stop_at_train_acc:
                record.stopped_early = True
                break

    if train_set_acc is None:
        train_set_acc = record.rows[-1].train_acc if train_ds is eval_train \
            else evaluate(model, train_ds)[1]
    record.train_set_final_acc = train_set_acc

    cp = checkpoint_of(model, cfg, tag)
    if out_dir:
        record.run_dir = str(persist_run(out_dir, record, {"init": init_cp, tag: cp}))
    return cp, record


def construct_sad_point(train_ds: LabeledDataset, test_ds: LabeledDataset,
                        cfg: TrainConfig, out_dir=None, on_epoch=None,
                        default_stop: float | None = 0.995) -> tuple[Checkpoint, RunRecord]:
    """Corrupt the test labels, fold t copies into the train set, train to
    saturation, and return the resulting weights tagged 'sad'.

    Unless cfg sets its own stop_at_train_acc, training stops once
    corrupted-train accuracy reaches default_stop (pass None to always
    run the full epoch budget, which minimizes more deeply). The
    checkpoint's 'saturated' flag records whether the run actually met
    accuracy >= 0.98 on the original train set and <= 2/k on the
    original test set; an unsaturated run is returned, not raised.
    """
    if train_ds.class_count != test_ds.class_count:
        raise ConsistencyError("train/test class counts differ")
    corrupted_test = corrupt_labels(test_ds, corruption_rng(cfg.seed))
    corrupted_train = build_corrupted_train(train_ds, corrupted_test)
    model = new_model(cfg, train_ds)
    init_cp = checkpoint_of(model, cfg, "init")
    run_cfg = cfg if cfg.stop_at_train_acc is not None or default_stop is None \
        else replace(cfg, stop_at_train_acc=default_stop)
    cp, record = train(model, corrupted_train, train_ds, test_ds, run_cfg, tag="sad",
                       on_epoch=on_epoch)
    last = record.rows[-1]
    cp.flags["saturated"] = bool(last.train_acc >= 0.98 and last.test_acc <= 2.0 / train_ds.class_count)
    if out_dir:
        record.run_dir = str(persist_run(out_dir, record, {"init": init_cp, "sad": cp}))
    return cp, record


def escape_run(sad: Checkpoint, train_ds: LabeledDataset, test_ds: LabeledDataset,
               cfg: TrainConfig, out_dir=None, on_epoch=None) -> tuple[Checkpoint, RunRecord]:
    """Restart training from a sad point on the clean train set.

    dist_from_init in the returned record is measured from the sad
    weights. epochs == 0 returns the starting weights unchanged.
    """
    model = sad.to_model(expect_kind=cfg.model_kind)
    if cfg.epochs == 0:
        cp = checkpoint_of(model, cfg, "escaped")
        w0 = model.flatten_parameters()
        tr_loss, tr_acc = evaluate(model, train_ds)
        te_loss, te_acc = evaluate(model, test_ds)
        record = RunRecord(
            config=cfg.to_dict(), run_id=run_id_for(cfg.to_dict(), "escaped"), tag="escaped",
            init_hash=_params_hash(w0),
            init_metrics={"train_loss": tr_loss, "train_acc": tr_acc,
                          "test_loss": te_loss, "test_acc": te_acc,
                          "weight_norm": norm2(w0)},
        )
        if out_dir:
            start_cp = checkpoint_of(model, cfg, "init")
            record.run_dir = str(persist_run(out_dir, record, {"init": start_cp, "escaped": cp}))
        return cp, record
    return train(model, train_ds, train_ds, test_ds, cfg, out_dir, tag="escaped",
                 on_epoch=on_epoch)


def clean_gradient_norm(checkpoint: Checkpoint, clean_train: LabeledDataset,
                        batch_size: int = 512) -> float:
    """Norm of the full-batch cross-entropy gradient on the clean train set."""
    model = checkpoint.to_model()
    n = len(clean_train)
    if n == 0:
        raise ValidationError("cannot take gradients over an empty dataset")
    total = np.zeros(model.parameter_count())
    for start in range(0, n, batch_size):
        xb = clean_train.images[start:start + batch_size]
        yb = clean_train.labels[start:start + batch_size]
        logits = model.forward(xb)
        loss = nn.cross_entropy(logits, yb)
        model.backward(loss.logit_gradient)
        total += model.flatten_gradients() * len(yb)
    return norm2(total / n)


@dataclass
class DistanceReport:
    """Per-run distances plus cohort aggregates, with CSV serialization."""

    entries: list[dict]
    cohorts: dict[str, dict]

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with (out / "distance_summary.csv").open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index", "tag", "distance", "final_norm"])
            for i, e in enumerate(self.entries):
                writer.writerow([i, e["tag"], e["distance"], e["final_norm"]])
        with (out / "distance_cohorts.csv").open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["tag", "mean_distance", "std_distance", "runs"])
            for tag, stats in sorted(self.cohorts.items()):
                writer.writerow([tag, stats["mean"], stats["std"], stats["n"]])
        for i, e in enumerate(self.entries):
            with (out / f"weights_hist_{i}_{e['tag']}.csv").open("w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["bin_left", "bin_right", "count"])
                edges, counts = e["hist_edges"], e["hist_counts"]
                for j in range(len(counts)):
                    writer.writerow([edges[j], edges[j + 1], int(counts[j])])
        return out


def distance_report(pairs: list[tuple[Checkpoint, Checkpoint]]) -> DistanceReport:
    """Distances from init and weight histograms for (init, final) pairs.

    Histograms use 64 uniform bins over each run's observed weight range;
    cohorts aggregate by the final checkpoint's tag.
    """
    entries = []
    for init_cp, final_cp in pairs:
        if init_cp.arch != final_cp.arch:
            raise CheckpointError(
                f"pair mixes architectures: {init_cp.arch} vs {final_cp.arch}")
        w0, w1 = init_cp.flat(), final_cp.flat()
        counts, edges = np.histogram(w1, bins=64)
        entries.append({
            "tag": final_cp.tag,
            "distance": norm2(w1 - w0),
            "final_norm": norm2(w1),
            "hist_edges": edges,
            "hist_counts": counts,
        })
    cohorts = {}
    for tag in sorted({e["tag"] for e in entries}):
        dists = np.array([e["distance"] for e in entries if e["tag"] == tag])
        cohorts[tag] = {"mean": float(dists.mean()), "std": float(dists.std()), "n": len(dists)}
    return DistanceReport(entries, cohorts)


def save_checkpoint(cp: Checkpoint, path) -> Path:
    """SADNETv1 container: magic, length-prefixed JSON header, raw <f8 buffers."""
    payload = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in cp.params)
    header = {
        "arch": cp.arch,
        "shapes": [list(p.shape) for p in cp.params],
        "seed": cp.seed,
        "tag": cp.tag,
        "config": cp.config,
        "flags": cp.flags,
        "checksum": hashlib.sha256(payload).hexdigest(),
    }
    header_bytes = _canon_json(header).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack(">Q", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)
    return path


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise FormatError(f"{path}: not a SADNETv1 checkpoint")
    offset = len(CHECKPOINT_MAGIC)
    if len(raw) < offset + 8:
        raise FormatError(f"{path}: truncated header length")
    (header_len,) = struct.unpack(">Q", raw[offset:offset + 8])
    offset += 8
    if len(raw) < offset + header_len:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[offset:offset + header_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header: {exc}") from exc
    offset += header_len
    payload = raw[offset:]
    if hashlib.sha256(payload).hexdigest() != header.get("checksum"):
        raise FormatError(f"{path}: payload checksum mismatch")
    shapes = [tuple(s) for s in header["shapes"]]
    need = sum(int(np.prod(s)) for s in shapes) * 8
    if len(payload) != need:
        raise FormatError(f"{path}: payload holds {len(payload)} bytes, shapes need {need}")
    params = []
    pos = 0
    for shape in shapes:
        n = int(np.prod(shape))
        params.append(np.frombuffer(payload, dtype="<f8", count=n, offset=pos)
                      .reshape(shape).astype(np.float64))
        pos += n * 8
    return Checkpoint(header["arch"], params, header["seed"], header["config"],
                      header["tag"], header.get("flags", {}))


def persist_run(out_dir, record: RunRecord, checkpoints: dict[str, Checkpoint]) -> Path:
    """Write metrics.jsonl/metrics.csv and the given checkpoints under
    out_dir/<run_id>/."""
    run_dir = Path(out_dir) / record.run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "metrics.jsonl").write_text(record.to_jsonl())
    (run_dir / "metrics.csv").write_text(record.to_csv())
    for name, cp in checkpoints.items():
        if cp is not None:
            save_checkpoint(cp, run_dir / f"{name}.ckpt")
    return run_dir
