"""Acceptance criteria, one test each; prints a PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -s`` or directly as a script.
"""
import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from ferformer import tensor as T
from ferformer.config import RAFDB_CLASSES, Config
from ferformer.data import synth_generate, synth_splits
from ferformer.encoder import MultiHeadAttention, attention
from ferformer.evaluation import AblationGrid, evaluate, pca_power_iteration, run_ablation
from ferformer.head import HDSSHead, similarity
from ferformer.model import FERFormer
from ferformer.suite import ABLATION, ABLATION_SEEDS, OVERFIT, TINY, TINY_CLASSES, gradient_suite
from ferformer.tensor import Tensor
from ferformer.text import build_labels

RESULTS: list[str] = []


def report(n: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {title} ({detail})"
    RESULTS.append(line)
    print(line, flush=True)
    assert ok, line


def test_1_gradient_suite():
    t0 = time.time()
    rows = gradient_suite("f64")
    elapsed = time.time() - t0
    failed = [name for name, rep in rows if not rep.passed]
    worst_prim = max(rep.max_rel_err for name, rep in rows[:-1])
    e2e = rows[-1][1]
    ok = not failed and e2e.tol == 1e-3 and all(rep.tol == 1e-5 for _, rep in rows[:-1]) and elapsed < 120
    report(1, "gradient suite", ok, f"{len(rows) - 1} primitives worst {worst_prim:.1e} <= 1e-5, "
           f"end-to-end {e2e.max_rel_err:.1e} <= 1e-3, {elapsed:.1f}s < 120s, failed={failed}")


def test_2_structural_oracles():
    cfg = Config()
    model = FERFormer(cfg, RAFDB_CLASSES)
    counts = [(12 // p) ** 2 for p in model.mgei.scales]
    model.encoder.record_attention()
    rng = np.random.default_rng(0)
    with T.no_grad():
        tokens = model.mgei(model.stem(Tensor(rng.random((2, 3, 112, 112)))))
        Z = model.encoder.sequence(tokens).Z
        model.encoder(tokens)
    weights = model.encoder.attention_weights()
    dev = max(float(np.max(np.abs(w.sum(axis=-1) - 1.0))) for w in weights)
    ok = (counts == [36, 9, 4, 1] and tokens.shape == (2, 50, 256) and Z.shape[-2] == 52
          and len(weights) == 16 and all(w.shape == (2, 4, 52, 52) for w in weights) and dev < 1e-6)
    report(2, "structural oracles", ok, f"tokens {counts} -> {tokens.shape[-2]}, n={Z.shape[-2]}, "
           f"max |row sum - 1| = {dev:.1e} over {len(weights)} blocks x 4 heads")


def test_3_loss_identities():
    rng = np.random.default_rng(0)
    images = rng.random((2, 3, 112, 112))
    model = FERFormer(Config(**TINY), TINY_CLASSES)
    _, b = model.loss(images, [0, 2])
    bitwise = b.L.item() == b.L_text.item() + b.L_image.item()

    off = FERFormer(Config(**{**TINY, "text_mode": "none"}), TINY_CLASSES)
    off.zero_grad()
    _, b_off = off.loss(images, [0, 2])
    T.backward(b_off.L)
    text_grad = max(float(np.max(np.abs(p.grad))) if p.grad is not None else 0.0
                    for _, p in off.text.named_parameters())

    errs = {}
    with T.precision("f64"):
        for M in (2, 7, 8):
            head = HDSSHead(8, M, rng)
            out = head(Tensor(np.zeros((1, 8))), Tensor(np.ones((1, 8))), Tensor(np.zeros((M, 8))))
            lb = head.loss(out, [0])
            errs[M] = max(abs(lb.L_image.item() - math.log(M)), abs(lb.L_text.item() - math.log(M)))
    ok = bitwise and b_off.L_text is None and text_grad == 0.0 and max(errs.values()) < 1e-6
    report(3, "loss identities", ok, f"L == L_text + L_image bitwise: {bitwise}, text grads under none: "
           f"{text_grad}, |CE - ln M| = {', '.join(f'M={m}:{e:.1e}' for m, e in errs.items())}")


def test_4_overfit():
    cfg = OVERFIT
    ds = synth_generate(7, cfg.per_class, cfg.num_classes, cfg.noise_level, cfg.ambiguity_rate)
    from ferformer.trainer import fit

    t0 = time.time()
    rep = fit(ds, cfg)
    elapsed = time.time() - t0
    acc = evaluate(ds, rep.model).accuracy
    L = rep.final["L"]
    ok = len(rep.rows) <= 200 and acc == 1.0 and L < 0.05 and elapsed < 600
    report(4, "overfit", ok, f"train acc {acc:.3f}, final L {L:.4f} < 0.05 after {len(rep.rows)} epochs, "
           f"{elapsed:.0f}s < 600s")


def test_5_ablation_trend():
    base = ABLATION
    rows = run_ablation(AblationGrid.mgei_hdss(ABLATION_SEEDS), base, lambda s: synth_splits(base, s))
    acc = {(r["mgei"], r["hdss"]): 100 * r["accuracy"] for r in rows}
    both, hdss, baseline = acc[True, True], acc[False, True], acc[False, False]
    ok = both >= hdss - 1.0 and hdss >= baseline - 1.0
    report(5, "ablation trend", ok, f"MGEI+HDSS {both:.2f}% >= HDSS {hdss:.2f}% >= baseline {baseline:.2f}% "
           f"(-1pp guard), +MGEI only {acc[True, False]:.2f}%, seeds {ABLATION_SEEDS}")


def _cli(args, env):
    return subprocess.run([sys.executable, "-m", "ferformer"] + args, env=env, capture_output=True, text=True)


def test_6_determinism(tmp_path):
    env = {**os.environ, "FERFORMER_THREADS": "0"}
    data = tmp_path / "data"
    tiny = ["--set", "embed_dim=16", "--set", "depth=2", "--set", "heads=2", "--set", "patch_sizes=6,12",
            "--set", "stem_channels=4,8,8", "--set", "text_dim=16", "--set", "batch_size=4",
            "--set", "lr0=0.01", "--seed", "5"]
    r = _cli(["synth", "--out", str(data), "--per-class", "3", "--classes", "3", "--ambiguity-rate", "0.3"], env)
    assert r.returncode == 0, r.stderr
    logs = []
    for run in ("a", "b"):
        r = _cli(["train", "--data-dir", str(data), "--checkpoint", str(tmp_path / f"{run}.ferf"), "--epochs", "3",
                  "--log", str(tmp_path / f"{run}.csv")] + tiny, env)
        assert r.returncode == 0, r.stderr
        logs.append((tmp_path / f"{run}.csv").read_bytes())
    ck = tmp_path / "c.ferf"
    for extra in (["--epochs", "1"], ["--epochs", "3", "--resume"]):
        r = _cli(["train", "--data-dir", str(data), "--checkpoint", str(ck), "--log", str(tmp_path / "c.csv")]
                 + extra + tiny, env)
        assert r.returncode == 0, r.stderr
    resumed = (tmp_path / "c.csv").read_bytes()
    same_ckpt = (tmp_path / "a.ferf").read_bytes() == (tmp_path / "b.ferf").read_bytes()
    ok = logs[0] == logs[1] and resumed == logs[0] and same_ckpt
    report(6, "determinism", ok, f"repeat logs identical: {logs[0] == logs[1]}, checkpoints identical: "
           f"{same_ckpt}, 1+2 epoch resume matches 3-epoch run: {resumed == logs[0]}")


def test_7_oracle_equivalence():
    rng = np.random.default_rng(7)
    with T.precision("f64"):
        mhsa = MultiHeadAttention(8, 2, rng)
        Z = rng.standard_normal((6, 8))
        att_err = 0.0
        for h in range(2):
            d = 4
            sl = slice(h * d, (h + 1) * d)
            q, k, v = Z @ mhsa.wq.data[:, sl], Z @ mhsa.wk.data[:, sl], Z @ mhsa.wv.data[:, sl]
            ref = np.zeros((6, d))
            for i in range(6):
                s = [float(q[i] @ k[j]) / math.sqrt(d) for j in range(6)]
                e = [math.exp(x - max(s)) for x in s]
                for j in range(6):
                    ref[i] += e[j] / sum(e) * v[j]
            att_err = max(att_err, float(np.max(np.abs(attention(Tensor(Z), mhsa, h).data - ref))))

        a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
        mm_ref = np.array([[sum(a[i, r] * b[r, j] for r in range(7)) for j in range(3)] for i in range(5)])
        mm_err = float(np.max(np.abs(T.matmul(Tensor(a), Tensor(b)).data - mm_ref)))

        I, Tm = rng.standard_normal((4, 8)), rng.standard_normal((7, 8))
        Tm /= np.linalg.norm(Tm, axis=1, keepdims=True)
        cos_ref = np.array([[float(I[i] @ Tm[m]) / math.sqrt(float(I[i] @ I[i])) for m in range(7)]
                            for i in range(4)])
        cos_err = float(np.max(np.abs(similarity(Tensor(I), Tensor(Tm)).data - cos_ref)))

    X = rng.standard_normal((10, 4)) * np.array([2.0, 1.5, 1.0, 0.3])
    P, var, _ = pca_power_iteration(X, 2)
    lam, vec = np.linalg.eigh(np.cov(X, rowvar=False))
    top = np.argsort(lam)[::-1][:2]
    pca_err = max(float(np.max(np.abs(var - lam[top]))),
                  max(min(np.max(np.abs(P[j] - vec[:, c])), np.max(np.abs(P[j] + vec[:, c])))
                      for j, c in enumerate(top)))
    ok = att_err < 1e-10 and mm_err < 1e-12 and cos_err < 1e-10 and pca_err < 1e-6
    report(7, "oracle equivalence", ok, f"attention {att_err:.1e} < 1e-10, matmul {mm_err:.1e} < 1e-12, "
           f"cosine {cos_err:.1e} < 1e-10, PCA {pca_err:.1e} < 1e-6")


EXPECTED_TEXTS = {
    "word": ["surprise", "fear", "disgust", "happy", "sad", "angry", "neutral"],
    "phrase": ["a face image of surprise", "a face image of fear", "a face image of disgust",
               "a face image of happy", "a face image of sad", "a face image of angry", "a face image of neutral"],
    "active": ["this is a face image of surprise", "this is a face image of fear",
               "this is a face image of disgust", "this is a face image of happy", "this is a face image of sad",
               "this is a face image of angry", "this is a face image of neutral"],
    "passive": ["a surprise expression is shown in the image", "a fear expression is shown in the image",
                "a disgust expression is shown in the image", "a happy expression is shown in the image",
                "a sad expression is shown in the image", "an angry expression is shown in the image",
                "a neutral expression is shown in the image"],
}


def test_8_template_fidelity():
    mismatches = [(mode, got, want) for mode, texts in EXPECTED_TEXTS.items()
                  for got, want in zip(build_labels(RAFDB_CLASSES, mode).texts, texts) if got != want]
    counts_ok = all(len(build_labels(RAFDB_CLASSES, m).texts) == 7 for m in EXPECTED_TEXTS)
    ok = not mismatches and counts_ok
    report(8, "template fidelity", ok, f"{4 * 7} strings checked, mismatches={mismatches}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
