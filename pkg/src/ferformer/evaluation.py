"""Accuracy and confusion matrices, steering-feature export, ablation grids."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import Config
from .data import Dataset
from .errors import ConfigError, EvaluationError
from .head import predict
from .model import FERFormer


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray  # rows = ground truth, columns = predicted
    predictions: np.ndarray

    @property
    def total(self) -> int:
        return int(self.confusion.sum())


def confusion_matrix(truth, pred, M: int) -> np.ndarray:
    cm = np.zeros((M, M), dtype=np.int64)
    np.add.at(cm, (np.asarray(truth), np.asarray(pred)), 1)
    return cm


def predict_dataset(ds: Dataset, model: FERFormer, head_mode: str | None = None, batch_size: int = 32):
    head_mode = head_mode or model.cfg.head
    preds = []
    with T.no_grad():
        for start in range(0, len(ds), batch_size):
            out = model(ds.images[start : start + batch_size])
            preds.append(predict(out, head_mode))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(ds: Dataset, model: FERFormer, head_mode: str | None = None, batch_size: int = 32) -> EvalResult:
    if len(ds) == 0:
        raise EvaluationError("cannot evaluate an empty dataset")
    pred = predict_dataset(ds, model, head_mode, batch_size)
    cm = confusion_matrix(ds.labels, pred, model.num_classes)
    return EvalResult(float(np.trace(cm)) / float(cm.sum()), cm, pred)


def write_confusion(cm: np.ndarray, class_names, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["truth\\pred"] + list(class_names))
        for name, row in zip(class_names, cm):
            w.writerow([name] + [int(v) for v in row])


def write_errors(ds: Dataset, pred: np.ndarray, path: str | Path) -> int:
    """Write (id, truth, prediction) for every misclassified sample."""
    wrong = np.flatnonzero(pred != ds.labels)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "truth", "prediction"])
        for i in wrong:
            w.writerow([ds.ids[i], ds.class_names[ds.labels[i]], ds.class_names[pred[i]]])
    return len(wrong)


# ---------------------------------------------------------------- features / PCA

def pca_power_iteration(X: np.ndarray, k: int = 2, iters: int = 1000, tol: float = 1e-12, seed: int = 0):
    """Top-k principal axes of the centred data by power iteration with deflation.

    Returns (components (k, D), variances (k,), projection (N, k)).
    """
    X = np.asarray(X, dtype=np.float64)
    Xc = X - X.mean(axis=0)
    C = Xc.T @ Xc / max(len(X) - 1, 1)
    D = C.shape[0]
    k = min(k, D)
    rng = np.random.default_rng(seed)
    comps, variances = [], []
    A = C.copy()
    for _ in range(k):
        v = _orthogonalize(rng.standard_normal(D), comps)
        v /= np.linalg.norm(v)
        for _ in range(iters):
            # re-orthogonalise so round-off in a deflated null space cannot drift back onto earlier axes
            w = _orthogonalize(A @ v, comps)
            nw = np.linalg.norm(w)
            if nw < 1e-12 * max(variances[0] if variances else 1.0, 1e-300):
                break
            w /= nw
            converged = np.linalg.norm(w - v) < tol or np.linalg.norm(w + v) < tol
            v = w
            if converged:
                break
        lam = float(v @ C @ v)
        comps.append(v)
        variances.append(max(lam, 0.0))
        A = A - lam * np.outer(v, v)
    P = np.array(comps)
    return P, np.array(variances), Xc @ P.T


def _orthogonalize(v: np.ndarray, basis) -> np.ndarray:
    for b in basis:
        v = v - (v @ b) * b
    return v


def steering_features(ds: Dataset, model: FERFormer, batch_size: int = 32) -> np.ndarray:
    feats = []
    with T.no_grad():
        for start in range(0, len(ds), batch_size):
            _, I_S = model.features(ds.images[start : start + batch_size])
            feats.append(np.asarray(I_S.data, dtype=np.float64))
    return np.concatenate(feats)


def export_features(ds: Dataset, model: FERFormer, path: str | Path, pca_path: str | Path | None = None):
    """Write (id, label, I_S...) rows and a companion CSV with the top-2 PCA projection."""
    F = steering_features(ds, model)
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label"] + [f"f{j}" for j in range(F.shape[1])])
        for i in range(len(ds)):
            w.writerow([ds.ids[i], int(ds.labels[i])] + [repr(float(v)) for v in F[i]])
    if pca_path is None:
        pca_path = path.with_name(path.stem + "_pca.csv")
    _, var, proj = pca_power_iteration(F, 2)
    with Path(pca_path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label", "pc1", "pc2"])
        for i in range(len(ds)):
            w.writerow([ds.ids[i], int(ds.labels[i])] + [repr(float(v)) for v in proj[i]])
    return F, proj, var


# ---------------------------------------------------------------- ablations

PATCH_SWEEP = ((2,), (3,), (4,), (6,), (2, 4, 6), (2, 4, 6, 12))
MGEI_OFF = (2,)


@dataclass
class AblationGrid:
    factors: dict[str, list]
    seeds: tuple[int, ...] = (0,)
    results: list[dict] = field(default_factory=list)

    @classmethod
    def mgei_hdss(cls, seeds=(0,)) -> "AblationGrid":
        return cls({"mgei": [False, True], "hdss": [False, True]}, tuple(seeds))

    @classmethod
    def text_modes(cls, seeds=(0,)) -> "AblationGrid":
        return cls({"text_mode": ["none", "word", "phrase", "active", "passive"]}, tuple(seeds))

    @classmethod
    def patch_sizes(cls, seeds=(0,)) -> "AblationGrid":
        return cls({"patch_sizes": [tuple(p) for p in PATCH_SWEEP]}, tuple(seeds))

    @property
    def kind(self) -> str:
        keys = set(self.factors)
        if keys == {"mgei", "hdss"}:
            return "mgei_hdss"
        if keys == {"text_mode"}:
            return "text_mode"
        if keys == {"patch_sizes"}:
            return "patch_sizes"
        raise ConfigError(f"conflicting or unsupported ablation factors: {sorted(keys)}")

    def cells(self, base: Config) -> list[tuple[dict, Config]]:
        kind = self.kind
        out = []
        if kind == "mgei_hdss":
            text_on = base.text_mode if base.text_mode != "none" else "phrase"
            patches_on = base.patch_sizes if base.patch_sizes != MGEI_OFF else (2, 4, 6, 12)
            for hdss in self.factors["hdss"]:
                for mgei in self.factors["mgei"]:
                    cfg = base.replace(patch_sizes=patches_on if mgei else MGEI_OFF,
                                       text_mode=text_on if hdss else "none")
                    out.append(({"mgei": mgei, "hdss": hdss}, cfg))
            # row order: baseline, +MGEI, +HDSS, both
            out.sort(key=lambda c: (c[0]["hdss"], c[0]["mgei"]))
        elif kind == "text_mode":
            for mode in self.factors["text_mode"]:
                out.append(({"text_mode": mode}, base.replace(text_mode=mode)))
        else:
            for ps in self.factors["patch_sizes"]:
                out.append(({"patch_sizes": tuple(ps)}, base.replace(patch_sizes=tuple(ps))))
        return out


def _allowed_keys(kind: str) -> set[str]:
    return {"mgei_hdss": {"patch_sizes", "text_mode"}, "text_mode": {"text_mode"},
            "patch_sizes": {"patch_sizes"}}[kind]


def run_ablation(grid: AblationGrid, base: Config, data_for_seed, path: str | Path | None = None,
                 progress=None) -> list[dict]:
    """Train every cell for every seed with an identical budget; returns one row per cell.

    ``data_for_seed(seed) -> (train, test)`` supplies the datasets.
    """
    from .trainer import fit

    kind = grid.kind
    cells = grid.cells(base)
    allowed = _allowed_keys(kind)
    rows = []
    for factor, cfg in cells:
        diff = set(base.replace(seed=cfg.seed).diff(cfg))
        if not diff <= allowed:
            raise ConfigError(f"cell {factor} differs from the base config in {sorted(diff - allowed)}")
        accs = []
        for seed in grid.seeds:
            cell_cfg = cfg.replace(seed=seed)
            train, test = data_for_seed(seed)
            report = fit(train, cell_cfg)
            acc = evaluate(test, report.model).accuracy
            accs.append(acc)
            if progress is not None:
                progress(factor, seed, acc)
        row = dict(factor)
        row["accuracy"] = float(np.mean(accs))
        row["per_seed"] = accs
        row["config_diff"] = {k: v for k, (_, v) in base.diff(cfg).items()}
        rows.append(row)
    grid.results = rows
    if path is not None:
        write_ablation(rows, kind, path)
    return rows


def _patch_label(ps) -> str:
    return f"{ps[0]}*{ps[0]}" if len(ps) == 1 else "(" + ",".join(str(p) for p in ps) + ")"


def write_ablation(rows: list[dict], kind: str, path: str | Path) -> None:
    """One CSV layout per grid kind, accuracy in percent."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if kind == "mgei_hdss":
            w.writerow(["MGEI", "HDSS", "accuracy"])
            for r in rows:
                w.writerow([int(r["mgei"]), int(r["hdss"]), f"{100 * r['accuracy']:.2f}"])
        elif kind == "text_mode":
            names = {"none": "without text", "word": "single word", "phrase": "phrase",
                     "active": "active sentence", "passive": "passive sentence"}
            w.writerow(["text_contents", "accuracy"])
            for r in rows:
                w.writerow([names[r["text_mode"]], f"{100 * r['accuracy']:.2f}"])
        else:
            w.writerow(["dataset"] + [_patch_label(r["patch_sizes"]) for r in rows])
            w.writerow(["synthetic"] + [f"{100 * r['accuracy']:.2f}" for r in rows])
