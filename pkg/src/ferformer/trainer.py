"""SGD training loop, step-decay schedule and binary checkpoints."""
from __future__ import annotations

import contextlib
import csv
import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import Config, parse_lines
from .data import Dataset, augment_batch
from .errors import CheckpointError, TrainingError
from .head import predict
from .model import FERFormer

log = logging.getLogger(__name__)

MAGIC = b"FERF"
FORMAT_VERSION = 1
LOG_HEADER = ["epoch", "step", "L", "L_text", "L_image", "train_acc", "lr"]


def lr_at(epoch: int, cfg: Config) -> float:
    """lr0 * decay^floor(epoch / decay_every)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr0 * cfg.lr_decay ** (epoch // cfg.lr_decay_every)


@contextlib.contextmanager
def thread_limit(threads: int | None = None):
    """Cap BLAS threads from ``FERFORMER_THREADS`` (0 = single-threaded reference mode)."""
    if threads is None:
        raw = os.environ.get("FERFORMER_THREADS")
        if raw is None or raw == "":
            yield
            return
        threads = int(raw)
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=max(1, threads)):
        yield


class SGD:
    """v <- mu v - lr (g + wd theta);  theta <- theta + v."""

    def __init__(self, named_params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = dict(named_params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def step(self) -> None:
        lr = self.lr
        for name, p in self.params.items():
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v = self.velocity[name]
            v *= self.momentum
            v -= lr * g
            p.data = p.data + v

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: v.copy() for n, v in self.velocity.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for n in self.velocity:
            if n in state:
                self.velocity[n] = np.asarray(state[n], dtype=self.velocity[n].dtype).copy()


def train_step(batch, model: FERFormer, optimizer: SGD, rng: np.random.Generator | None = None) -> dict:
    """One forward/backward/update over ``batch = (images, labels[, ids])``."""
    images, labels = batch[0], batch[1]
    ids = batch[2] if len(batch) > 2 else None
    model.zero_grad()
    drop_rng = rng if model.cfg.dropout > 0 else None
    out, lb = model.loss(images, labels, rng=drop_rng)
    values = lb.values()
    if not math.isfinite(values["L"]):
        raise TrainingError(f"non-finite loss {values['L']} at lr={optimizer.lr}; batch ids={ids}")
    T.backward(lb.L)
    optimizer.step()
    pred = predict(out, model.cfg.head)
    values["acc"] = float(np.mean(pred == np.asarray(labels)))
    values["n"] = len(labels)
    return values


@dataclass
class RunState:
    epoch: int = 0  # epochs completed
    step: int = 0
    rng: np.random.Generator = field(default_factory=np.random.default_rng)


@dataclass
class RunReport:
    rows: list[dict]
    model: FERFormer
    optimizer: SGD
    state: RunState
    notes: list[str] = field(default_factory=list)

    @property
    def final(self) -> dict | None:
        return self.rows[-1] if self.rows else None


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def fit(train: Dataset, cfg: Config, model: FERFormer | None = None, log_path: str | Path | None = None,
        checkpoint_path: str | Path | None = None, resume: str | Path | None = None,
        max_epochs: int | None = None, epochs: int | None = None) -> RunReport:
    """Train for ``cfg.epochs`` epochs (or continue a resumed run up to that count).

    A resumed run takes its config from the checkpoint; ``epochs`` overrides
    the target epoch count in either case. ``max_epochs`` stops early after that
    many epochs in this call, leaving a resumable checkpoint behind.
    """
    notes = []
    if resume is not None:
        model, optimizer, state = load_checkpoint(resume)
        cfg = model.cfg
        if epochs is not None:
            model.set_epochs(epochs)
            cfg = model.cfg
        notes.append(f"resumed from {resume} at epoch {state.epoch}")
    else:
        if epochs is not None:
            cfg = cfg.replace(epochs=epochs)
        model = model or FERFormer(cfg, train.class_names)
        optimizer = SGD(model.trainable(), lr_at(0, cfg), cfg.momentum, cfg.weight_decay)
        state = RunState(0, 0, np.random.default_rng(cfg.seed))
    if cfg.logit_scale != 1.0:
        notes.append(f"logit_scale={cfg.logit_scale} (non-default)")
        log.warning("similarity logits scaled by logit_scale=%s", cfg.logit_scale)
    log.info("SGD momentum=%s weight_decay=%s", cfg.momentum, cfg.weight_decay)

    writer = None
    fh = None
    if log_path is not None:
        log_path = Path(log_path)
        fresh = resume is None or not log_path.exists()
        fh = log_path.open("w" if fresh else "a", newline="", encoding="utf-8")
        writer = csv.writer(fh, lineterminator="\n")
        if fresh:
            writer.writerow(LOG_HEADER)

    rows = []
    end = cfg.epochs if max_epochs is None else min(cfg.epochs, state.epoch + max_epochs)
    try:
        with thread_limit():
            while state.epoch < end:
                epoch = state.epoch
                optimizer.lr = lr_at(epoch, cfg)
                order = state.rng.permutation(len(train))
                sums = {"L": 0.0, "L_text": 0.0, "L_image": 0.0, "acc": 0.0}
                n = 0
                for start in range(0, len(order), cfg.batch_size):
                    idx = order[start : start + cfg.batch_size]
                    if cfg.augment:
                        images = augment_batch(train, idx, cfg.seed, epoch, cfg)
                    else:
                        images = train.images[idx]
                    m = train_step((images, train.labels[idx], [train.ids[i] for i in idx]), model, optimizer,
                                   state.rng)
                    state.step += 1
                    for k in sums:
                        sums[k] += m[k] * m["n"]
                    n += m["n"]
                row = {"epoch": epoch, "step": state.step, "L": sums["L"] / n, "L_text": sums["L_text"] / n,
                       "L_image": sums["L_image"] / n, "train_acc": sums["acc"] / n, "lr": optimizer.lr}
                rows.append(row)
                state.epoch += 1
                if writer is not None:
                    writer.writerow([_fmt(row[k]) for k in LOG_HEADER])
                    fh.flush()
                if checkpoint_path is not None:
                    save_checkpoint(checkpoint_path, model, optimizer, state)
                log.info("epoch %d L=%.4f acc=%.3f lr=%g", epoch, row["L"], row["train_acc"], row["lr"])
    finally:
        if fh is not None:
            fh.close()
    return RunReport(rows, model, optimizer, state, notes)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path: str | Path, model: FERFormer, optimizer: SGD | None = None,
                    state: RunState | None = None) -> Path:
    arrays = [("param/" + n, a) for n, a in model.state_dict().items()]
    if optimizer is not None:
        arrays += [("velocity/" + n, v) for n, v in optimizer.state_dict().items()]
    buf = bytearray(MAGIC)
    buf += struct.pack("<II", FORMAT_VERSION, len(arrays))
    for name, arr in arrays:
        raw = name.encode("utf-8")
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    lines = model.cfg.to_lines()
    lines.append("class_names=" + ",".join(model.class_names))
    if state is not None:
        lines.append(f"epoch={state.epoch}")
        lines.append(f"step={state.step}")
        lines.append("rng_state=" + json.dumps(state.rng.bit_generator.state, sort_keys=True))
    buf += ("\n".join(lines) + "\n").encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(bytes(buf))
    os.replace(tmp, path)
    return path


def read_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], Config, dict[str, str]]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    off = 12
    arrays = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off : off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", data, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            arrays[name] = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(dims).copy()
            off += 4 * size
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    cfg, extra = parse_lines(data[off:].decode("utf-8").splitlines(), strict=False)
    return arrays, cfg, extra


def load_checkpoint(path: str | Path) -> tuple[FERFormer, SGD, RunState]:
    arrays, cfg, extra = read_checkpoint(path)
    if "class_names" not in extra:
        raise CheckpointError(f"{path}: config block lacks class_names")
    model = FERFormer(cfg, tuple(extra["class_names"].split(",")))
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    model.load_state_dict(params)
    optimizer = SGD(model.trainable(), lr_at(int(extra.get("epoch", 0)), cfg), cfg.momentum, cfg.weight_decay)
    optimizer.load_state_dict({k[len("velocity/"):]: v for k, v in arrays.items() if k.startswith("velocity/")})
    rng = np.random.default_rng(cfg.seed)
    if "rng_state" in extra:
        rng.bit_generator.state = json.loads(extra["rng_state"])
    state = RunState(int(extra.get("epoch", 0)), int(extra.get("step", 0)), rng)
    return model, optimizer, state
