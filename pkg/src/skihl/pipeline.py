"""End-to-end orchestration: coarse-to-fine label inference alternating with
classifier training, plus the full-grounding and sparse-baseline comparison
arms and the evaluation entry point.

One run proceeds as: pretrain the classifier on the sparse labels; then for
each level from coarsest to finest, ground the knowledge base on the current
frontier, initialize atom values from classifier cell probabilities (cells
containing labels are clamped to them), solve, train the classifier against
the inferred soft labels via multi-instance aggregation, and refine the
uncertain cells. Leaves that are not refined keep their solved value: they
enter later levels as clamped constants and are never re-inferred.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from . import report as report_mod
from .hierarchy import (Frontier, HierarchyConfig, build_root, leaf_means,
                        refine, save_frontier)
from .inference import (LN2, SolverParams, TruthAssignment, entropy,
                        entropy_uncertainty, hinge_objective, select_refinement,
                        solve)
from .knowledge import (GroundProgram, KnowledgeBase, count_ground_atoms,
                        default_kb, ground, parse_kb)
from .learner import (ReferenceClassifier, TrainParams, save_checkpoint,
                      train, train_sparse_baseline, write_loss_curve)
from .metrics import avu, classification_report, write_metrics_json
from .raster import (LabelMap, load_label_map, load_raster,
                     load_sparse_labels, save_f32, save_label_map, save_pgm)

log = logging.getLogger("skihl")

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


@dataclass(frozen=True)
class PipelineConfig:
    """One run's inputs and knobs, loadable from a flat TOML file.

    Refinement policy: exactly one of refine_threshold (one entropy threshold
    for every level), refine_thresholds (per level, first entry = coarsest),
    or refine_fraction (budget mode). Default: threshold 0.325.
    """

    raster: str
    labels: str
    out: str
    kb: Optional[str] = None
    truth: Optional[str] = None
    eta: int = 4
    max_level: int = 2
    seed: int = 0
    hidden: int = 16
    anchor_tau: float = 0.01
    solver_max_iters: int = 500
    solver_tol: float = 1e-7
    epochs: int = 200
    pretrain_epochs: Optional[int] = None
    baseline_epochs: Optional[int] = None
    learning_rate: float = 0.05
    refine_threshold: Optional[float] = None
    refine_thresholds: Optional[tuple] = None
    refine_fraction: Optional[float] = None
    lambda_weight: float = 0.0
    t_u: float = 0.325
    outer_rounds: int = 1
    figures: bool = True

    def __post_init__(self):
        modes = [m for m in (self.refine_threshold, self.refine_thresholds,
                             self.refine_fraction) if m is not None]
        if len(modes) > 1:
            raise ValueError("refine_threshold, refine_thresholds and "
                             "refine_fraction are mutually exclusive")
        if not modes:
            object.__setattr__(self, "refine_threshold", 0.325)
        if self.refine_thresholds is not None:
            object.__setattr__(self, "refine_thresholds",
                               tuple(float(t) for t in self.refine_thresholds))
            if len(self.refine_thresholds) != self.max_level:
                raise ValueError(f"refine_thresholds needs {self.max_level} "
                                 f"entries (levels {self.max_level}..1)")
        if self.outer_rounds < 1:
            raise ValueError("outer_rounds must be >= 1")

    @property
    def effective_pretrain_epochs(self) -> int:
        return self.epochs if self.pretrain_epochs is None else self.pretrain_epochs

    @property
    def effective_baseline_epochs(self) -> int:
        if self.baseline_epochs is not None:
            return self.baseline_epochs
        # match the pipeline's total training budget
        stages = self.max_level + 1 + (self.outer_rounds - 1)
        return self.effective_pretrain_epochs + stages * self.epochs

    def refinement_policy(self, level: int) -> dict:
        if self.refine_fraction is not None:
            return {"refine_fraction": self.refine_fraction}
        if self.refine_thresholds is not None:
            return {"threshold": self.refine_thresholds[self.max_level - level]}
        return {"threshold": self.refine_threshold}


_CONFIG_KEY_MAP = {"lambda": "lambda_weight"}


def config_from_toml(path: str | os.PathLike) -> PipelineConfig:
    """Load a PipelineConfig from a flat TOML file; unknown keys are errors."""
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    known = {f.name for f in fields(PipelineConfig)}
    kwargs = {}
    for key, value in raw.items():
        name = _CONFIG_KEY_MAP.get(key, key)
        if name not in known:
            raise ValueError(f"{path}: unknown config key {key!r}")
        if isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    return PipelineConfig(**kwargs)


@dataclass
class RunReport:
    """In-memory result of one pipeline run."""

    report: dict
    classifier_map: LabelMap
    inferred_map: LabelMap
    uncertainty: np.ndarray  # painted atom entropies, nats
    out_dir: str


def _load_inputs(config: PipelineConfig):
    stack = load_raster(config.raster)
    sparse = load_sparse_labels(config.labels, stack.rows, stack.cols)
    if config.kb:
        with open(config.kb, "r", encoding="ascii") as fh:
            kb = parse_kb(fh.read())
    else:
        kb = default_kb()
    truth = load_label_map(config.truth) if config.truth else None
    if truth is not None and (truth.rows, truth.cols) != (stack.rows, stack.cols):
        raise ValueError(f"truth map {truth.rows}x{truth.cols} does not match "
                         f"raster {stack.rows}x{stack.cols}")
    return stack, sparse, kb, truth


def _accuracy(pred_values: np.ndarray, truth: LabelMap, exclude: np.ndarray) -> float:
    keep = ~exclude
    agree = (pred_values >= 0.5) == (truth.values >= 0.5)
    return float(agree[keep].mean())


def _save_prob_map(values: np.ndarray, stem: str) -> None:
    rows, cols = values.shape
    save_label_map(LabelMap(rows=rows, cols=cols, values=values), stem + ".pgm")


def _save_uncertainty(u: np.ndarray, stem: str) -> None:
    # PGM shows u / ln2 in [0,1]; the f32 sidecar keeps raw nats
    save_pgm(np.clip(u / LN2, 0.0, 1.0), stem + ".pgm")
    save_f32(u, stem + ".f32")


def evaluate(pred: LabelMap, truth: LabelMap, uncertainty: np.ndarray,
             t_u: float, exclude=None) -> dict:
    """Classification report plus AvU block for one probability map."""
    rep = classification_report(pred, truth, exclude=exclude)
    rep["avu"] = avu(pred, truth, uncertainty, t_u, exclude=exclude)
    return rep


def run(config: PipelineConfig) -> RunReport:
    """The selective coarse-to-fine run (uncertainty-guided refinement)."""
    return _run(config, full_grounding=False)


def run_full_grounding(config: PipelineConfig) -> RunReport:
    """Comparison arm: every cell refines at every level (no selection)."""
    return _run(config, full_grounding=True)


def _run(config: PipelineConfig, full_grounding: bool) -> RunReport:
    stack, sparse, kb, truth = _load_inputs(config)
    exclude = sparse.mask(stack.rows, stack.cols)
    out = config.out
    os.makedirs(out, exist_ok=True)

    hconfig = HierarchyConfig(eta=config.eta, max_level=config.max_level)
    solver_params = SolverParams(anchor_tau=config.anchor_tau,
                                 max_iters=config.solver_max_iters,
                                 tol=config.solver_tol)
    arm = "full_grounding" if full_grounding else "selective"
    warnings_list: list = []
    stages: list = []
    stage_maps: list = []
    curves: list = []

    classifier = ReferenceClassifier(bands=stack.bands, hidden=config.hidden,
                                     seed=config.seed)

    # -- pretrain on the sparse labels ------------------------------------
    t0 = time.perf_counter()
    _, pre_curve = train_sparse_baseline(
        classifier, stack, sparse,
        TrainParams(epochs=config.effective_pretrain_epochs,
                    learning_rate=config.learning_rate, seed=config.seed))
    pretrain_seconds = time.perf_counter() - t0
    write_loss_curve(pre_curve, os.path.join(out, "pretrain_loss.csv"))
    curves.append(("pretrain", pre_curve))
    pre_record = {"stage": "pretrain",
                  "epochs": config.effective_pretrain_epochs,
                  "training_seconds": pretrain_seconds,
                  "train_loss_final": pre_curve[-1][1] if pre_curve else None}
    if truth is not None:
        pre_record["classifier_accuracy"] = _accuracy(
            classifier.predict(stack).values, truth, exclude)
    stages.append(pre_record)
    log.info("pretrained on %d sparse labels (%.2fs)", len(sparse), pretrain_seconds)

    # -- coarse-to-fine ----------------------------------------------------
    frontier = build_root(stack.rows, stack.cols, hconfig)
    frozen: dict = {}
    hier_loss = 0.0
    totals = {"n_ground_rules": 0, "inference_seconds": 0.0,
              "training_seconds": 0.0}
    schedule = [(k, 1) for k in range(config.max_level, -1, -1)]
    schedule += [(0, r) for r in range(2, config.outer_rounds + 1)]
    last_assign = None
    last_frontier = frontier

    for level, round_no in schedule:
        stage = f"level_{level}" if round_no == 1 else f"level_{level}_round_{round_no}"
        stage_dir = os.path.join(out, stage)
        os.makedirs(stage_dir, exist_ok=True)

        t_inf = time.perf_counter()
        program = ground(kb, frontier, stack.elevation, sparse)
        label_clamps = len(program.observed)
        freeze = {i: frozen[leaf] for i, leaf in enumerate(frontier.leaves)
                  if leaf in frozen and i not in program.observed}
        solved_program = program.clamp(freeze) if freeze else program

        cell_p = leaf_means(classifier.predict(stack).values, frontier)
        init = TruthAssignment(values=np.clip(cell_p, 0.0, 1.0),
                               frontier=frontier)
        result = solve(solved_program, init, solver_params,
                       trace_path=os.path.join(stage_dir, "solver_trace.csv"))
        assign = result.assignment
        unc = entropy_uncertainty(assign, **config.refinement_policy(max(level, 1)))
        inference_seconds = time.perf_counter() - t_inf

        t_train = time.perf_counter()
        _, curve = train(classifier, stack, assign.values, frontier,
                         TrainParams(epochs=config.epochs,
                                     learning_rate=config.learning_rate,
                                     seed=config.seed))
        training_seconds = time.perf_counter() - t_train
        curves.append((stage, curve))
        write_loss_curve(curve, os.path.join(stage_dir, "loss_curve.csv"))

        # refinement for the next stage
        n_refined = 0
        if level >= 1 and round_no == 1:
            if full_grounding:
                selected = {c for c in frontier.leaves if c.level >= 1}
            else:
                selected = {c for c in select_refinement(unc, frontier)
                            if c.level == level}
            n_refined = len(selected)
            if not selected:
                warnings_list.append(
                    f"no cells refined at level {level}; finer levels keep "
                    f"the frozen coarse labels")
                log.warning("%s", warnings_list[-1])
            for i, leaf in enumerate(frontier.leaves):
                if leaf not in selected:
                    frozen[leaf] = float(assign.values[i])
            next_frontier = refine(frontier, selected)
        else:
            next_frontier = frontier

        # stage artifacts
        inferred_px = frontier.paint(assign.values)
        u_px = frontier.paint(unc.u)
        clf_map = classifier.predict(stack)
        side_px = frontier.paint(np.array(
            [hconfig.nominal_side(c.level) for c in frontier.leaves], dtype=np.float64))
        _save_prob_map(inferred_px, os.path.join(stage_dir, "inferred"))
        _save_uncertainty(u_px, os.path.join(stage_dir, "uncertainty"))
        _save_prob_map(clf_map.values, os.path.join(stage_dir, "classifier"))
        save_frontier(frontier, os.path.join(stage_dir, "frontier.csv"))
        stage_maps.append({"name": stage, "inferred": inferred_px,
                           "uncertainty": u_px, "classifier": clf_map.values,
                           "cell_side": side_px})

        counts = count_ground_atoms(solved_program)
        stage_hinge = hinge_objective(solved_program, assign.values)
        hier_loss += stage_hinge + config.lambda_weight * counts.n_ground_rules
        totals["n_ground_rules"] += counts.n_ground_rules
        totals["inference_seconds"] += inference_seconds
        totals["training_seconds"] += training_seconds

        record = {
            "stage": stage, "level": level, "round": round_no,
            "n_atoms": counts.n_atoms,
            "n_ground_rules": counts.n_ground_rules,
            "n_clamped_labels": label_clamps,
            "n_frozen": len(freeze),
            "n_free": int(solved_program.free_mask.sum()),
            "n_conflicted": len(solved_program.conflicted),
            "solver_iterations": result.iterations,
            "solver_objective": result.objective,
            "hinge_objective": stage_hinge,
            "n_refined": n_refined,
            "inference_seconds": inference_seconds,
            "training_seconds": training_seconds,
            "train_loss_final": curve[-1][1] if curve else None,
        }
        if truth is not None:
            record["inferred_accuracy"] = _accuracy(inferred_px, truth, exclude)
            record["classifier_accuracy"] = _accuracy(clf_map.values, truth, exclude)
        stages.append(record)
        log.info("%s: %d atoms, %d ground rules, %d free, %d refined "
                 "(inference %.2fs, training %.2fs)", stage, counts.n_atoms,
                 counts.n_ground_rules, record["n_free"], n_refined,
                 inference_seconds, training_seconds)

        last_assign, last_frontier = assign, frontier
        frontier = next_frontier

    # -- final artifacts ----------------------------------------------------
    final_dir = os.path.join(out, "final")
    os.makedirs(final_dir, exist_ok=True)
    clf_map = classifier.predict(stack)
    clf_u = entropy(clf_map.values)
    inferred_px = last_frontier.paint(last_assign.values)
    inferred_u = last_frontier.paint(entropy(last_assign.values))
    _save_prob_map(clf_map.values, os.path.join(final_dir, "classifier"))
    _save_prob_map(inferred_px, os.path.join(final_dir, "inferred"))
    _save_uncertainty(inferred_u, os.path.join(final_dir, "uncertainty"))
    _save_uncertainty(clf_u, os.path.join(final_dir, "classifier_uncertainty"))
    save_checkpoint(classifier, os.path.join(final_dir, "model.ckpt"))

    final_block: dict = {}
    metrics_block = None
    if truth is not None:
        metrics_block = evaluate(clf_map, truth, clf_u, config.t_u, exclude=exclude)
        write_metrics_json(metrics_block, os.path.join(out, "metrics.json"))
        final_block["classifier_accuracy"] = metrics_block["accuracy"]
        final_block["inferred_accuracy"] = _accuracy(inferred_px, truth, exclude)
        final_block["inferred_metrics"] = evaluate(
            LabelMap(stack.rows, stack.cols, inferred_px), truth,
            inferred_u, config.t_u, exclude=exclude)

    report = {
        "arm": arm,
        "config": {k: (list(v) if isinstance(v, tuple) else v)
                   for k, v in asdict(config).items()},
        "stages": stages,
        "totals": totals,
        "lambda": config.lambda_weight,
        "hierarchical_loss": hier_loss,
        "final": final_block,
        "warnings": warnings_list,
    }
    with open(os.path.join(out, "report.json"), "w", encoding="ascii") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")

    if config.figures:
        report_mod.render_all(stage_maps, stages, curves,
                              os.path.join(out, "figures"))

    return RunReport(report=report,
                     classifier_map=clf_map,
                     inferred_map=LabelMap(stack.rows, stack.cols, inferred_px),
                     uncertainty=inferred_u,
                     out_dir=out)


def run_baseline(config: PipelineConfig) -> dict:
    """Sparse-only arm: train on the labeled pixels alone, write the map and
    metrics. The training budget matches the pipeline's total by default."""
    stack, sparse, _, truth = _load_inputs(config)
    exclude = sparse.mask(stack.rows, stack.cols)
    out = config.out
    os.makedirs(out, exist_ok=True)
    classifier = ReferenceClassifier(bands=stack.bands, hidden=config.hidden,
                                     seed=config.seed)
    t0 = time.perf_counter()
    _, curve = train_sparse_baseline(
        classifier, stack, sparse,
        TrainParams(epochs=config.effective_baseline_epochs,
                    learning_rate=config.learning_rate, seed=config.seed))
    seconds = time.perf_counter() - t0
    write_loss_curve(curve, os.path.join(out, "baseline_loss.csv"))
    clf_map = classifier.predict(stack)
    _save_prob_map(clf_map.values, os.path.join(out, "classifier"))
    save_checkpoint(classifier, os.path.join(out, "model.ckpt"))
    report = {"arm": "baseline",
              "epochs": config.effective_baseline_epochs,
              "training_seconds": seconds,
              "train_loss_final": curve[-1][1] if curve else None}
    if truth is not None:
        metrics_block = evaluate(clf_map, truth, entropy(clf_map.values),
                                 config.t_u, exclude=exclude)
        write_metrics_json(metrics_block, os.path.join(out, "metrics.json"))
        report["classifier_accuracy"] = metrics_block["accuracy"]
    with open(os.path.join(out, "report.json"), "w", encoding="ascii") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return report
