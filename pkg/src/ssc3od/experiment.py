"""Resumable regime-comparison runs producing CSV tables and checkpoints.

Layout under the output directory::

    spec.cfg                               the experiment that owns this directory
    mae/seed<S>/{mae.ckpt, mae.csv}        one pretraining per seed
    runs/<fusion>/seed<S>/<regime>/        model.ckpt, train.csv, result.csv (+ teacher.ckpt, bank.txt, mining.csv)
    results.csv, results.txt               the comparison table

A run counts as complete once its ``result.csv`` exists; completed runs are
reused unless ``force`` is set.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .collab import CollabDetector
from .config import TEST_FIRST_ID, TEST_SEED_OFFSET, ConfigError, ExperimentSpec, format_spec
from .evaluation import evaluate_detector
from .mae import pretrain
from .mining import format_bank, init_bank, new_detector, train_detector, train_ssc3od
from .scene import Dataset, generate_corpus, sparsify

log = logging.getLogger(__name__)

RESULT_COLUMNS = ("regime", "fusion", "seed", "ap30", "ap50", "ap70", "tp", "fp", "fn")
AP_COLUMNS = ("ap30", "ap50", "ap70")
DELTA_REGIME = "delta_sparse_scratch_to_ssc3od"
MEAN_SEED = "mean"
THREADS_ENV = "SSC3OD_THREADS"


def thread_cap() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be at least 1")
    return n


def experiment_datasets(spec: ExperimentSpec, seed: int) -> tuple[Dataset, Dataset]:
    """(sparsified train split, test split) for one seed."""
    train = sparsify(generate_corpus(spec.corpus(), seed), seed)
    test = generate_corpus(spec.corpus(test=True), TEST_SEED_OFFSET + seed, "test", TEST_FIRST_ID)
    return train, test


def _write_atomic(path: Path, data: bytes | str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data.encode("utf-8") if isinstance(data, str) else data)
    os.replace(tmp, path)


def _save_ckpt(path: Path, state) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    nn.save_checkpoint(tmp, state)
    os.replace(tmp, path)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _read_row(path: Path) -> dict:
    with open(path, newline="", encoding="utf-8") as fh:
        return next(csv.DictReader(fh))


@dataclass
class ExperimentResult:
    rows: list = field(default_factory=list)        # dicts keyed by RESULT_COLUMNS
    failures: list = field(default_factory=list)    # (fusion, regime, seed, message)

    @property
    def ok(self) -> bool:
        return not self.failures

    def get(self, regime: str, fusion: str, seed) -> dict | None:
        for r in self.rows:
            if r["regime"] == regime and r["fusion"] == fusion and str(r["seed"]) == str(seed):
                return r
        return None

    def csv(self) -> str:
        return csv_text(RESULT_COLUMNS, [[r.get(c, "") for c in RESULT_COLUMNS] for r in self.rows])

    def text(self) -> str:
        cells = [[str(r.get(c, "")) or "-" for c in RESULT_COLUMNS] for r in self.rows]
        widths = [max([len(c)] + [len(row[i]) for row in cells]) for i, c in enumerate(RESULT_COLUMNS)]
        lines = ["  ".join(c.ljust(w) for c, w in zip(RESULT_COLUMNS, widths))]
        lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
        return "\n".join(lines) + "\n"


def _blank_row(regime, fusion, seed) -> dict:
    return {"regime": regime, "fusion": fusion, "seed": seed, **{c: "" for c in RESULT_COLUMNS[3:]}}


def _delta_row(fusion, seed, sparse: dict | None, ssc: dict | None) -> dict:
    row = _blank_row(DELTA_REGIME, fusion, seed)
    if sparse and ssc and all(sparse[c] != "" and ssc[c] != "" for c in AP_COLUMNS):
        for c in AP_COLUMNS:
            row[c] = round(float(ssc[c]) - float(sparse[c]), 4)
    return row


def build_table(spec: ExperimentSpec, rows: dict) -> list[dict]:
    """Per-seed rows, per-seed deltas and, with several seeds, means over seeds.

    ``rows`` maps (fusion, regime, seed) to a result dict or None (failed run).
    """
    table = []
    delta = "sparse_scratch" in spec.regimes and "ssc3od" in spec.regimes
    for fusion in spec.fusions:
        for seed in spec.seeds:
            for regime in spec.regimes:
                table.append(rows.get((fusion, regime, seed)) or _blank_row(regime, fusion, seed))
            if delta:
                table.append(_delta_row(fusion, seed, rows.get((fusion, "sparse_scratch", seed)),
                                        rows.get((fusion, "ssc3od", seed))))
        if len(spec.seeds) > 1:
            means = {}
            for regime in spec.regimes:
                runs = [rows.get((fusion, regime, s)) for s in spec.seeds]
                row = _blank_row(regime, fusion, MEAN_SEED)
                if all(runs):
                    for c in RESULT_COLUMNS[3:]:
                        vals = [float(r[c]) for r in runs]
                        row[c] = round(float(np.mean(vals)), 4) if c in AP_COLUMNS else round(float(np.mean(vals)), 2)
                means[regime] = row
                table.append(row)
            if delta:
                table.append(_delta_row(fusion, MEAN_SEED, means["sparse_scratch"], means["ssc3od"]))
    return table


class Experiment:
    def __init__(self, spec: ExperimentSpec, out_dir, force: bool = False, threads: int | None = None):
        self.spec = spec
        self.out = Path(out_dir)
        self.force = force
        self.threads = threads or thread_cap()
        self._data: dict = {}
        self._lock = threading.Lock()

    # -- paths --------------------------------------------------------------
    def mae_dir(self, seed: int) -> Path:
        return self.out / "mae" / f"seed{seed}"

    def run_dir(self, fusion: str, regime: str, seed: int) -> Path:
        return self.out / "runs" / fusion / f"seed{seed}" / regime

    # -- steps --------------------------------------------------------------
    def _claim_directory(self) -> None:
        text = format_spec(self.spec)
        path = self.out / "spec.cfg"
        if path.exists() and path.read_text(encoding="utf-8") != text and not self.force:
            raise ConfigError(f"{self.out} holds a different experiment; pass --force to overwrite it")
        _write_atomic(path, text)

    def data(self, seed: int):
        """(train, test, train image cache, test image cache) for ``seed``."""
        with self._lock:
            if seed not in self._data:
                train, test = experiment_datasets(self.spec, seed)
                self._data[seed] = (train, test, {}, {})
            return self._data[seed]

    def ensure_mae(self, seed: int) -> dict:
        """Pretrained encoder state for ``seed``, computed once and kept on disk."""
        d = self.mae_dir(seed)
        ckpt = d / "mae.ckpt"
        if ckpt.exists() and (d / "mae.csv").exists() and not self.force:
            return nn.load_checkpoint(ckpt)
        train = self.data(seed)[0]
        t0 = time.perf_counter()
        res = pretrain(train, self.spec.mae(), seed=seed)
        log.info("seed %d: pretraining took %.0f s, final/baseline loss %.4f", seed, time.perf_counter() - t0,
                 res.epoch_loss[-1] / res.baseline_loss if res.epoch_loss else math.nan)
        _save_ckpt(ckpt, res.model.state())
        rows = [[e, repr(float(v)), repr(float(res.baseline_loss))] for e, v in enumerate(res.epoch_loss)]
        _write_atomic(d / "mae.csv", csv_text(["epoch", "loss", "baseline_loss"], rows))
        return res.model.state()

    def _train_regime(self, fusion: str, regime: str, seed: int, d: Path, encoder: dict | None) -> CollabDetector:
        spec = self.spec
        train, _, cache, _ = self.data(seed)
        tc = spec.train()
        if regime in ("full", "sparse_scratch"):
            labels = "full" if regime == "full" else "sparse"
            model = new_detector(fusion, seed, tc)
            bank = init_bank({sc.scene_id: train.label_boxes(sc.scene_id, labels) for sc in train.scenes})
            losses = train_detector(model, train, bank, tc, seed, image_cache=cache)
            _write_atomic(d / "train.csv", csv_text(["epoch", "loss"], [[e, repr(v)] for e, v in enumerate(losses)]))
            return model
        teacher = None
        if regime == "ssc3od_scratch":
            # the scratch teacher is exactly the sparse_scratch model; reuse it when already trained
            done = self.run_dir(fusion, "sparse_scratch", seed)
            if (done / "result.csv").exists() and (done / "model.ckpt").exists():
                teacher = new_detector(fusion, seed, tc)
                teacher.load(nn.load_checkpoint(done / "model.ckpt"))
        res = train_ssc3od(train, encoder, fusion, seed, tc, spec.mining(), teacher=teacher,
                           allow_scratch=encoder is None, image_cache=cache)
        _save_ckpt(d / "teacher.ckpt", res.teacher.state())
        _write_atomic(d / "bank.txt", format_bank(res.bank))
        _write_atomic(d / "mining.csv", res.report.csv())
        rows = [[1, e, repr(v)] for e, v in enumerate(res.report.stage1_loss)]
        rows += [[2, e, repr(v)] for e, v in enumerate(res.report.stage2_loss)]
        _write_atomic(d / "train.csv", csv_text(["stage", "epoch", "loss"], rows))
        return res.student

    def run_one(self, fusion: str, regime: str, seed: int, encoder: dict | None = None) -> dict:
        d = self.run_dir(fusion, regime, seed)
        if (d / "result.csv").exists() and not self.force:
            log.info("%s/%s/seed%d: reusing completed run", fusion, regime, seed)
            return _read_row(d / "result.csv")
        d.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        model = self._train_regime(fusion, regime, seed, d, encoder if regime == "ssc3od" else None)
        _save_ckpt(d / "model.ckpt", model.state())
        _, test, _, test_cache = self.data(seed)
        row = {**evaluate_detector(model, test, regime, self.spec.grid(), test_cache).row(), "seed": seed}
        _write_atomic(d / "result.csv", csv_text(RESULT_COLUMNS, [[row[c] for c in RESULT_COLUMNS]]))
        log.info("%s/%s/seed%d: AP50 %.2f in %.0f s", fusion, regime, seed, row["ap50"], time.perf_counter() - t0)
        return _read_row(d / "result.csv")

    def _group(self, fusion: str, seed: int, encoders: dict, rows: dict, failures: list) -> None:
        for regime in self.spec.regimes:
            try:
                if regime == "ssc3od" and encoders.get(seed) is None:
                    raise RuntimeError("pretraining failed for this seed")
                rows[(fusion, regime, seed)] = self.run_one(fusion, regime, seed, encoders.get(seed))
            except Exception as e:  # a failed run is recorded and the sweep goes on
                log.exception("%s/%s/seed%d failed", fusion, regime, seed)
                rows[(fusion, regime, seed)] = None
                failures.append((fusion, regime, seed, f"{type(e).__name__}: {e}"))

    def run(self) -> ExperimentResult:
        self._claim_directory()
        encoders, rows, failures = {}, {}, []
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            if self.spec.needs_mae():
                futures = {s: pool.submit(self.ensure_mae, s) for s in self.spec.seeds}
                for s, fut in futures.items():
                    try:
                        encoders[s] = fut.result()
                    except Exception as e:
                        log.exception("pretraining for seed %d failed", s)
                        failures.append(("-", "pretrain", s, f"{type(e).__name__}: {e}"))
            groups = [pool.submit(self._group, f, s, encoders, rows, failures)
                      for f in self.spec.fusions for s in self.spec.seeds]
            for g in groups:
                g.result()
        result = ExperimentResult(build_table(self.spec, rows), failures)
        _write_atomic(self.out / "results.csv", result.csv())
        _write_atomic(self.out / "results.txt", result.text())
        return result


def run_experiment(spec: ExperimentSpec, out_dir, force: bool = False, threads: int | None = None) -> ExperimentResult:
    return Experiment(spec, out_dir, force, threads).run()
