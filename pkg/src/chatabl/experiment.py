"""Experiment orchestration: data, ABL vs perception-only, metrics and reports."""

from __future__ import annotations

import csv
import json
import logging
import traceback
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .knowledge import default_kb, save_kb
from .loop import (
    AblRun,
    JudgementModel,
    LoopConfig,
    classify_all,
    consistent_with_all,
    embed_all,
    exemplars_from,
    run_abl,
    train_perception_only,
)
from .metrics import full_metrics
from .oracle import HypothesisState, dump_state
from .perception import PerceptionModel, save_checkpoint
from .task import MIN_LENGTH, STANDARD_CODE, Dataset, EquationSample, GenConfig, generate_dataset, save_dataset

log = logging.getLogger(__name__)

METRIC_FIELDS = ["method", "labeled_frac", "accuracy", "precision", "recall", "f1", "auc"]
LENGTH_FIELDS = ["method", "length", "n", "glyph_acc", "eqn_acc", "accuracy", "precision", "recall", "f1", "auc"]
STATS_FIELDS = ["round", "glyph_acc", "eqn_acc", "surviving_count", "mean_edits"]


@dataclass(frozen=True)
class ExperimentConfig:
    train_lengths: tuple[int, int] = (5, 10)
    test_lengths: tuple[int, int] = (5, 26)
    per_length: int = 500
    test_per_length: int = 500
    labeled_fraction: float = 0.2
    positive_fraction: float = 0.5
    glyph_noise: float = 0.1
    hidden_code: int = STANDARD_CODE
    seed: int = 0
    disjoint_lengths: bool = False
    n_exemplars: int = 8
    loop: LoopConfig = field(default_factory=LoopConfig)

    def __post_init__(self):
        for name in ("train_lengths", "test_lengths"):
            lo, hi = getattr(self, name)
            if lo < MIN_LENGTH:
                raise ValueError(f"{name}: equations need at least {MIN_LENGTH} symbols")
            if hi < lo:
                raise ValueError(f"{name}: empty range")
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise ValueError("labeled_fraction must lie in (0, 1]")
        if self.disjoint_lengths and self.train_lengths[1] >= self.test_lengths[1]:
            raise ValueError("disjoint_lengths leaves no test lengths")

    @property
    def effective_test_lengths(self) -> tuple[int, int]:
        """Test range; the disjoint variant starts above the longest training length."""
        lo, hi = self.test_lengths
        if self.disjoint_lengths:
            lo = max(lo, self.train_lengths[1] + 1)
        return lo, hi

    def train_gen(self) -> GenConfig:
        return GenConfig(
            self.train_lengths[0], self.train_lengths[1], self.per_length, self.positive_fraction,
            self.labeled_fraction, self.hidden_code, self.glyph_noise,
        )

    def test_gen(self) -> GenConfig:
        lo, hi = self.effective_test_lengths
        return GenConfig(lo, hi, self.test_per_length, self.positive_fraction, 1.0, self.hidden_code, self.glyph_noise)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train_lengths"] = list(self.train_lengths)
        d["test_lengths"] = list(self.test_lengths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        loop = LoopConfig.from_dict(d.pop("loop", {}))
        for key in ("train_lengths", "test_lengths"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__}, loop=loop)


def benchmark_config(**overrides) -> ExperimentConfig:
    """Desk-scale synthetic benchmark: 20% labels, mild glyph noise, oracle, 3 rounds."""
    base = ExperimentConfig(per_length=100, test_per_length=100, labeled_fraction=0.2, glyph_noise=0.1)
    return replace(base, **overrides)


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


@dataclass
class Predictions:
    lengths: np.ndarray
    glyph_hits: np.ndarray
    exact: np.ndarray
    levels: np.ndarray
    scores: np.ndarray
    truth: np.ndarray


def predict(model: PerceptionModel, judge: JudgementModel, samples: Sequence[EquationSample]) -> Predictions:
    pseudos = classify_all(model, samples)
    scores = judge.score(embed_all(model, samples))
    hits = np.array([sum(a == b for a, b in zip(p.argmax_symbols, s.truth)) for p, s in zip(pseudos, samples)])
    return Predictions(
        lengths=np.array([s.length for s in samples]),
        glyph_hits=hits,
        exact=np.array([p.argmax_symbols == s.truth for p, s in zip(pseudos, samples)]),
        levels=scores >= judge.threshold,
        scores=scores,
        truth=np.array([bool(s.veracity) for s in samples]),
    )


def predict_symbolic(model: PerceptionModel, state: HypothesisState, samples: Sequence[EquationSample]) -> Predictions:
    """Veracity from the perceived sequence checked against the surviving tables."""
    pseudos = classify_all(model, samples)
    levels = np.array([consistent_with_all(p.argmax_symbols, state) for p in pseudos])
    hits = np.array([sum(a == b for a, b in zip(p.argmax_symbols, s.truth)) for p, s in zip(pseudos, samples)])
    return Predictions(
        lengths=np.array([s.length for s in samples]),
        glyph_hits=hits,
        exact=np.array([p.argmax_symbols == s.truth for p, s in zip(pseudos, samples)]),
        levels=levels,
        scores=levels.astype(float),
        truth=np.array([bool(s.veracity) for s in samples]),
    )


def _fmt(x: float) -> str:
    return "nan" if x != x else f"{x:.6f}"


def _summary(pred: Predictions, mask=None) -> dict:
    if mask is None:
        mask = np.ones(len(pred.truth), dtype=bool)
    m = full_metrics(pred.levels[mask], pred.scores[mask], pred.truth[mask])
    return {
        "n": int(mask.sum()),
        "glyph_acc": float(pred.glyph_hits[mask].sum() / pred.lengths[mask].sum()),
        "eqn_acc": float(pred.exact[mask].mean()),
        **m.to_dict(),
    }


def write_csv(path: Path, fields: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(v) if isinstance(v, float) else v for k, v in row.items() if k in fields})


def save_judge(judge: JudgementModel, path: Path) -> None:
    payload = {"weights": judge.weights.tolist(), "bias": judge.bias, "threshold": judge.threshold}
    path.write_text(json.dumps(payload) + "\n", encoding="utf-8")


def load_judge(path: Path) -> JudgementModel:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    return JudgementModel(np.asarray(d["weights"], dtype=np.float64), float(d["bias"]), float(d["threshold"]))


def save_run(run: AblRun, directory: Path, config: LoopConfig | None = None) -> None:
    """Run artifact directory: config, stats.csv, checkpoint, hypotheses, judge, transcripts."""
    directory.mkdir(parents=True, exist_ok=True)
    if config is not None:
        (directory / "config.json").write_text(json.dumps(config.to_dict(), indent=2) + "\n", encoding="utf-8")
    if run.stats:
        write_csv(directory / "stats.csv", STATS_FIELDS, [asdict(s) for s in run.stats])
    save_checkpoint(run.model, directory / "model.ckpt")
    dump_state(run.state, directory / "hypotheses.txt")
    if run.judge is not None:
        save_judge(run.judge, directory / "judge.json")
    if run.transcripts:
        with open(directory / "transcripts.jsonl", "w", encoding="utf-8") as fh:
            for t in run.transcripts:
                fh.write(json.dumps(t, ensure_ascii=False) + "\n")


def evaluate_methods(methods: dict[str, Predictions], labeled_frac: float, out_dir: Path) -> tuple[list[dict], list[dict]]:
    metric_rows, length_rows = [], []
    for name, pred in methods.items():
        overall = _summary(pred)
        metric_rows.append({"method": name, "labeled_frac": labeled_frac, **overall})
        for length in np.unique(pred.lengths):
            length_rows.append({"method": name, "length": int(length), **_summary(pred, pred.lengths == length)})
        length_rows.append({"method": name, "length": "all", **overall})
    write_csv(out_dir / "metrics.csv", METRIC_FIELDS, metric_rows)
    write_csv(out_dir / "per_length.csv", LENGTH_FIELDS, length_rows)
    return metric_rows, length_rows


# --------------------------------------------------------------------------
# experiments
# --------------------------------------------------------------------------


@dataclass
class ExperimentResult:
    out_dir: Path
    abl: AblRun
    baseline: AblRun
    metrics: list[dict]
    per_length: list[dict]
    train: Dataset
    test: Dataset

    def row(self, method: str) -> dict:
        return next(r for r in self.per_length if r["method"] == method and r["length"] == "all")


def run_experiment(config: ExperimentConfig, out_dir: str | Path, backend=None, write_data: bool = True) -> ExperimentResult:
    """Generate data, run ABL and the perception-only baseline, write reports.

    Files already written stay in place if a later phase fails; the
    traceback goes to ``error.txt``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2) + "\n", encoding="utf-8")
    try:
        train = generate_dataset(config.train_gen(), config.seed)
        test = generate_dataset(config.test_gen(), config.seed + 1)
        if write_data:
            save_dataset(train, out / "train")
            save_dataset(test, out / "test")
        kb = default_kb(exemplars_from(train, config.n_exemplars))
        save_kb(kb, out / "kb.json")

        abl = run_abl(train, kb, config.loop, backend=backend, eval_samples=test.labeled)
        save_run(abl, out / "abl", config.loop)
        baseline = train_perception_only(train, config.loop)
        save_run(baseline, out / "baseline", config.loop)

        name = f"abl-{config.loop.reasoner}"
        methods = {
            name: predict(abl.model, abl.judge, test.labeled),
            f"{name}-symbolic": predict_symbolic(abl.model, abl.state, test.labeled),
            "perception-only": predict(baseline.model, baseline.judge, test.labeled),
        }
        metrics, per_length = evaluate_methods(methods, config.labeled_fraction, out)
    except Exception:
        (out / "error.txt").write_text(traceback.format_exc(), encoding="utf-8")
        raise
    return ExperimentResult(out, abl, baseline, metrics, per_length, train, test)


def run_sweep(config: ExperimentConfig, fractions: Sequence[float], out_dir: str | Path, backend=None) -> list[dict]:
    """Label-rate sweep; flags (does not fail on) non-monotone glyph accuracy."""
    out = Path(out_dir)
    rows = []
    for frac in fractions:
        res = run_experiment(replace(config, labeled_fraction=frac), out / f"labeled_{frac:g}", backend, write_data=False)
        abl_row = res.row(f"abl-{config.loop.reasoner}")
        rows.append({"labeled_frac": frac, "glyph_acc": abl_row["glyph_acc"], "eqn_acc": abl_row["eqn_acc"],
                     "accuracy": abl_row["accuracy"], "note": ""})
    for prev, cur in zip(rows, rows[1:]):
        if cur["glyph_acc"] < prev["glyph_acc"]:
            cur["note"] = f"glyph accuracy below the {prev['labeled_frac']:g} run"
            log.warning("non-monotone glyph accuracy at labeled_frac=%g", cur["labeled_frac"])
    write_csv(out / "sweep.csv", ["labeled_frac", "glyph_acc", "eqn_acc", "accuracy", "note"], rows)
    return rows
