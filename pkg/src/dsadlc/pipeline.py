"""Stage orchestration shared by the command line and the acceptance tests."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import model as M
from .config import RunConfig, dump_config
from .errors import ConfigError
from .evaluation import ConfusionMatrix, comparison_csv, confusion, format_comparison, impact_report
from .ingest import DatasetManifest, RecordingPaths, load_recording, write_recording
from .labeling import CaseSet, extract_cases, split_and_balance
from .synthgen import export_ground_truth, generate
from .trajectory import Recording

Log = Callable[[str], None]


def _quiet(_msg: str) -> None:
    pass


def synthesize(config: RunConfig, out_dir, log: Log = _quiet) -> list[Recording]:
    """Generate the configured synthetic recordings and write them in the dataset layout."""
    if config.synth is None:
        raise ConfigError("no [synth] table in the configuration")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    recordings = []
    for scenario in config.synth.scenarios():
        rec = generate(scenario)
        write_recording(rec, RecordingPaths.in_dir(out_dir, rec.recording_id))
        export_ground_truth(rec, out_dir / f"{rec.recording_id:02d}_groundTruthLaneChanges.csv")
        log(f"synth: recording {rec.recording_id}: {len(rec.tracks)} vehicles, "
            f"{len(rec.ground_truth.events)} lane changes")
        recordings.append(rec)
    return recordings


def load_dataset(root, log: Log = _quiet) -> dict[int, Recording]:
    manifest = DatasetManifest.discover(root)
    if not manifest.entries:
        raise ConfigError(f"no recordings found under {root}")
    recordings = {}
    for entry in manifest.entries:
        rec = load_recording(entry)
        recordings[rec.recording_id] = rec
        log(f"ingest: recording {rec.recording_id}: {len(rec.tracks)} vehicles")
    return recordings


def extract(recordings, config: RunConfig, log: Log = _quiet) -> CaseSet:
    sets = []
    for rid in sorted(recordings):
        cases = CaseSet.from_cases(extract_cases(recordings[rid], config.t_react, config.t_h,
                                                 config.stride_s, config.min_stay_s))
        log(f"extract: recording {rid}: " + ", ".join(f"{k} {v}" for k, v in cases.label_counts().items()))
        sets.append(cases)
    meta = {"t_react": config.t_react, "t_h": config.t_h, "stride_s": config.stride_s,
            "min_stay_s": config.min_stay_s, "recordings": sorted(int(r) for r in recordings)}
    return CaseSet.concat(sets, meta)


def model_config(config: RunConfig, ablation) -> M.ModelConfig:
    return M.ModelConfig(ablation=ablation, t_h=config.t_h, epochs=config.epochs, batch_size=config.batch_size,
                         lr=config.lr, seed=config.seed, safety_mask_default=config.safety_mask)


@dataclass
class ExperimentResult:
    config: RunConfig
    matrices: dict = field(default_factory=dict)
    histories: dict = field(default_factory=dict)
    models: dict = field(default_factory=dict)
    test: CaseSet | None = None
    impact: object = None

    def accuracy(self, ablation) -> float:
        return self.matrices[M.Ablation.parse(ablation).title].overall_accuracy


def obtain_cases(config: RunConfig, out_dir: Path, log: Log = _quiet):
    """Cases from the case file, the dataset root, or freshly generated data (in that order)."""
    recordings = None
    if config.cases and Path(config.cases).exists():
        cases = CaseSet.read(config.cases)
        log(f"cases: read {len(cases)} from {config.cases}")
        if config.dataset_root:
            recordings = load_dataset(config.dataset_root, log)
        return cases, recordings
    if config.dataset_root:
        recordings = load_dataset(config.dataset_root, log)
    elif config.synth is not None:
        recordings = {r.recording_id: r for r in synthesize(config, out_dir / "data", log)}
    else:
        missing = f"case file {config.cases} does not exist and " if config.cases else ""
        raise ConfigError(f"{missing}no dataset_root or synth table is configured")
    cases = extract(recordings, config, log)
    cases.write(out_dir / "cases.bin")
    return cases, recordings


def run_experiment(config: RunConfig, log: Log = _quiet, write: bool = True) -> ExperimentResult:
    """Train every configured ablation on one shared split and compare them."""
    out_dir = Path(config.output_dir)
    if write:
        out_dir.mkdir(parents=True, exist_ok=True)
    cases, recordings = obtain_cases(config, out_dir, log)
    train_set, test_set = split_and_balance(cases, config.train_fraction, config.dup_factor, config.seed)
    log(f"split: {len(train_set)} training rows, {len(test_set)} test cases")
    result = ExperimentResult(config, test=test_set)
    for ablation in config.ablations:
        mc = model_config(config, ablation)
        title = mc.ablation.title
        net = M.build(mc)
        fit = M.train(net, train_set, mc)
        _, predicted, _ = net.predict_cases(test_set, config.safety_mask)
        cm = confusion(predicted, test_set.labels)
        result.matrices[title] = cm
        result.histories[title] = fit.history
        result.models[title] = net
        log(f"train: {title}: loss {fit.history[-1]:.4f}, test accuracy {cm.overall_accuracy:.2f}%")
        if write:
            M.save(net, out_dir / f"model_{mc.ablation.value}.w")
        if recordings is not None and mc.ablation == M.Ablation.FULL:
            result.impact = impact_report(test_set, predicted, recordings, config.t_react, skip_missing=True)
    if write:
        write_experiment_report(result, out_dir)
    return result


def loss_curves_csv(histories: dict) -> str:
    names = list(histories)
    lines = ["epoch," + ",".join(names)]
    n = max((len(h) for h in histories.values()), default=0)
    for e in range(n):
        vals = [repr(float(histories[k][e])) if e < len(histories[k]) else "" for k in names]
        lines.append(f"{e + 1}," + ",".join(vals))
    return "\n".join(lines) + "\n"


def write_experiment_report(result: ExperimentResult, out_dir) -> None:
    out_dir = Path(out_dir)
    header = "# resolved configuration\n" + "\n".join(f"# {line}" for line in dump_config(result.config).splitlines())
    (out_dir / "ablation.txt").write_text(header + "\n\n" + format_comparison(result.matrices))
    (out_dir / "ablation.csv").write_text(comparison_csv(result.matrices))
    (out_dir / "loss_curves.csv").write_text(loss_curves_csv(result.histories))
    summary = {
        "config": result.config.to_dict(),
        "test_cases": len(result.test) if result.test is not None else 0,
        "test_label_counts": result.test.label_counts() if result.test is not None else {},
        "accuracy_pct": {k: cm.overall_accuracy for k, cm in result.matrices.items()},
        "confusion": {k: cm.counts.tolist() for k, cm in result.matrices.items()},
        "final_loss": {k: h[-1] for k, h in result.histories.items()},
        "weights_sha256": {k: m.weights_digest() for k, m in result.models.items()},
    }
    (out_dir / "report.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    if result.impact is not None:
        result.impact.write(out_dir / "impact")


def predictions_csv(cases: CaseSet, probs: np.ndarray, labels: np.ndarray, masked: np.ndarray) -> str:
    from .evaluation import CLASS_NAMES
    lines = ["recording_id,vehicle_id,decision_frame,actual,predicted,p_keep,p_left,p_right,masked"]
    for i in range(len(cases)):
        r, v, f = (int(x) for x in cases.provenance[i])
        p = ",".join(repr(float(x)) for x in probs[i])
        lines.append(f"{r},{v},{f},{CLASS_NAMES[cases.labels[i]]},{CLASS_NAMES[labels[i]]},{p},{int(masked[i])}")
    return "\n".join(lines) + "\n"


def evaluate_model(net: M.Model, cases: CaseSet, recordings=None, mask: bool = False,
                   t_react: float = 1.0) -> tuple[ConfusionMatrix, object]:
    _, predicted, _ = net.predict_cases(cases, mask)
    cm = confusion(predicted, cases.labels)
    impact = None
    if recordings is not None:
        impact = impact_report(cases, predicted, recordings, t_react, skip_missing=True)
    return cm, impact
