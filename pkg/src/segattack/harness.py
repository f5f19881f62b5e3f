"""End-to-end experiment orchestration: train a pair, attack, report.

The harness generates the phantom pool, splits it, trains the attacked
network and its surrogate, then sweeps three attack suites over the held-out
test set: untargeted degradation over the epsilon grid (white-box and
black-box), targeted heart-symbol insertion (two symbol sizes, both crafting
modes, plus single-class-loss and restricted-noise variants), and targeted
structure resizing over a coefficient grid. Every adversarial batch is
re-checked against the attack-module invariants before it is scored, and
reports are written with deterministic ordering and formatting so identical
configurations produce byte-identical files.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import data as data_mod
from .attacks import AttackConfig, make_noise_mask, pgd
from .autodiff import Tensor
from .data import PhantomConfig, SegmentationSample, SplitPlan
from .metrics import SCOPE_STRUCTURES, ClassScope, iou, mean_iou
from .model import (DESK_SPEC, Network, UNetSpec, argmax_labels, load_weights,
                    predict, receptive_field, save_weights)
from .targets import TargetSpec, compose_target
from .training import TrainConfig, train_pair

OUTPUT_DIR_ENV = "SEGATTACK_OUTPUT_DIR"
EPSILON_SLACK = 2.0 ** -50  # numerical slack for the L-infinity re-check

DEFAULT_EPSILONS = (0.01, 0.02, 0.04, 0.08, 0.16)
DEFAULT_RESIZE_COEFFICIENTS = (0.4, 0.6, 0.8, 1.2, 1.4, 1.6, 1.8)

CSV_COLUMNS = (
    "image_id", "attack", "epsilon", "coefficient",
    *(f"iou_gt_{name}" for name in data_mod.CLASS_NAMES),
    *(f"iou_target_{name}" for name in data_mod.CLASS_NAMES),
    "mean_structures_gt", "mean_structures_target",
)


@dataclass
class ExperimentConfig:
    """Everything a full experiment needs, with calibrated desk defaults.

    The default pool/split/training/attack settings are the calibrated desk
    protocol; master_seed shifts every component seed at once so a different
    master seed reruns the whole experiment on fresh draws while keeping the
    run self-consistent. Heart symbol sizes are defined per image: the small
    symbol height is heart_small_fraction times the shorter side of the
    basis heart's bounding box, and the large one is heart_large_ratio times
    the small one.
    """

    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    pool_size: int = 134
    train_count: int = 50
    val_count: int = 12
    test_count: int = 10
    shared_train: int = 0
    split_seed: int = 5
    spec: UNetSpec = DESK_SPEC
    train: TrainConfig = field(default_factory=TrainConfig)
    epsilons: tuple[float, ...] = DEFAULT_EPSILONS
    attack_iterations: int = 100
    heart_small_fraction: float = 0.82
    heart_large_ratio: float = 1.6
    heart_variant_epsilon: float = 0.04
    heart_scopes: tuple[str, ...] = ("attack_all", "class_only")
    heart_noise_regions: tuple[str, ...] = ("full", "bbox")
    resize_classes: tuple[int, ...] = data_mod.STRUCTURE_CLASSES
    resize_coefficients: tuple[float, ...] = DEFAULT_RESIZE_COEFFICIENTS
    resize_epsilon: float = 0.04
    output_dir: str = "runs/desk"
    master_seed: int = 0

    def validate(self) -> None:
        self.phantom.validate()
        self.spec.validate()
        self.train.validate()
        if not self.epsilons:
            raise ValueError("epsilon grid must be non-empty")
        if any(e <= 0 for e in self.epsilons):
            raise ValueError(f"epsilons must be positive, got {self.epsilons}")
        if self.attack_iterations < 1:
            raise ValueError(f"attack_iterations must be >= 1, got {self.attack_iterations}")
        if not 0.0 < self.heart_small_fraction <= 2.0:
            raise ValueError(f"heart_small_fraction out of range: {self.heart_small_fraction}")
        if self.heart_large_ratio <= 0:
            raise ValueError(f"heart_large_ratio must be > 0, got {self.heart_large_ratio}")
        if self.heart_variant_epsilon <= 0:
            raise ValueError(f"heart_variant_epsilon must be > 0, got {self.heart_variant_epsilon}")
        for scope in self.heart_scopes:
            if scope not in ("attack_all", "class_only"):
                raise ValueError(f"unknown heart scope {scope!r}")
        for region in self.heart_noise_regions:
            if region not in ("full", "bbox", "receptive_field"):
                raise ValueError(f"unknown noise region {region!r}")
        if not self.resize_classes or any(
            c not in data_mod.STRUCTURE_CLASSES for c in self.resize_classes
        ):
            raise ValueError(f"resize_classes must be structure classes, got {self.resize_classes}")
        if not self.resize_coefficients or any(
            not 0.0 < k <= 4.0 for k in self.resize_coefficients
        ):
            raise ValueError(f"resize coefficients must be in (0, 4]: {self.resize_coefficients}")
        if self.resize_epsilon <= 0:
            raise ValueError(f"resize_epsilon must be > 0, got {self.resize_epsilon}")
        if min(self.pool_size, self.train_count, self.val_count, self.test_count) < 1:
            raise ValueError("pool/train/val/test counts must all be >= 1")

    def resolved_output_dir(self) -> str:
        return os.environ.get(OUTPUT_DIR_ENV, self.output_dir)

    def shifted(self, seed: int) -> int:
        """Component seed under this config's master seed."""
        return seed + self.master_seed


@dataclass(frozen=True)
class MetricsRecord:
    """Scores for one image under one attack setting.

    iou_gt / iou_target are per-class discrete IoUs of the post-attack
    prediction against the ground truth and against the attack target (for
    untargeted rows the target IS the ground truth). Means are over the five
    structure classes. wall_clock is this image's share of the crafting and
    scoring time and is deliberately excluded from CSV output so reports
    stay byte-reproducible.
    """

    image_id: str
    attack: str
    epsilon: float
    coefficient: float | None
    iou_gt: tuple[float, ...]
    iou_target: tuple[float, ...]
    mean_structures_gt: float
    mean_structures_target: float
    wall_clock: float

    def validate(self) -> None:
        values = (*self.iou_gt, *self.iou_target,
                  self.mean_structures_gt, self.mean_structures_target)
        if any(not 0.0 <= v <= 1.0 for v in values):
            raise ValueError(f"IoU outside [0, 1] in record {self.image_id}/{self.attack}")
        if len(self.iou_gt) != len(data_mod.CLASS_NAMES) or \
                len(self.iou_target) != len(data_mod.CLASS_NAMES):
            raise ValueError("per-class IoU tuples must cover all classes")
        if self.wall_clock < 0:
            raise ValueError("wall_clock must be >= 0")

    @property
    def suite(self) -> str:
        return self.attack.split(":")[0].split("+")[0].split("_")[0]


def check_attack_invariants(x: np.ndarray, x_adv: np.ndarray, epsilon: float,
                            mask: np.ndarray | None = None) -> None:
    """Re-verify the attack-module guarantees on a crafted batch.

    Raises if the perturbation leaves the L-infinity ball (beyond float
    slack), the adversarial image leaves [-1, 1], or a masked-out pixel
    changed at all.
    """
    delta = np.abs(np.asarray(x_adv) - np.asarray(x))
    if float(delta.max(initial=0.0)) > epsilon + EPSILON_SLACK:
        raise AssertionError(
            f"perturbation {float(delta.max()):.9f} exceeds epsilon {epsilon}"
        )
    if np.asarray(x_adv).min() < -1.0 or np.asarray(x_adv).max() > 1.0:
        raise AssertionError("adversarial image outside [-1, 1]")
    if mask is not None:
        m = np.asarray(mask, dtype=np.float64)
        while m.ndim < delta.ndim:
            m = m[:, None] if m.ndim == delta.ndim - 1 else m[None]
        m = np.broadcast_to(m, delta.shape)
        if float(delta[m == 0.0].max(initial=0.0)) > 0.0:
            raise AssertionError("masked pixels were perturbed")


def _predict_labels(net: Network, x: np.ndarray) -> np.ndarray:
    return argmax_labels(predict(net, Tensor(x)))


def _craft(net: Network, x: np.ndarray, reference: np.ndarray, epsilon: float,
           iterations: int, mode: str, scope: ClassScope = SCOPE_STRUCTURES,
           mask: np.ndarray | None = None) -> np.ndarray:
    """One PGD run with the protocol step size, invariant-checked."""
    config = AttackConfig(epsilon=epsilon, alpha=epsilon / 20.0 if iterations > 1 else epsilon,
                          iterations=iterations, mode=mode, scope=scope)
    x_adv, _ = pgd(net, x, reference, config, mask=mask)
    check_attack_invariants(x, x_adv, epsilon, mask)
    return x_adv


def _score_batch(samples, attack: str, epsilon: float, coefficient: float | None,
                 pred: np.ndarray, target_labels: np.ndarray, wall: float) -> list[MetricsRecord]:
    records = []
    share = wall / len(samples)
    for i, s in enumerate(samples):
        gt_per = tuple(iou(pred[i], s.labels, c) for c in range(len(data_mod.CLASS_NAMES)))
        tg_per = tuple(iou(pred[i], target_labels[i], c) for c in range(len(data_mod.CLASS_NAMES)))
        rec = MetricsRecord(
            image_id=s.id, attack=attack, epsilon=epsilon, coefficient=coefficient,
            iou_gt=gt_per, iou_target=tg_per,
            mean_structures_gt=mean_iou(pred[i], s.labels, SCOPE_STRUCTURES),
            mean_structures_target=mean_iou(pred[i], target_labels[i], SCOPE_STRUCTURES),
            wall_clock=share,
        )
        rec.validate()
        records.append(rec)
    return records


def run_untargeted_suite(target_net: Network, surrogate_net: Network, test_samples,
                         epsilons=DEFAULT_EPSILONS, iterations: int = 100) -> list[MetricsRecord]:
    """White-box and black-box untargeted sweeps plus the epsilon-zero rows.

    White-box rows craft on the attacked network itself; black-box rows
    craft on the surrogate and are always scored on the attacked network.
    """
    if target_net.training or surrogate_net.training:
        raise ValueError("both networks must be in inference mode")
    x = data_mod.image_batch(test_samples)
    y = np.stack([s.labels for s in test_samples])
    records = []
    clean_start = time.perf_counter()
    clean_pred = _predict_labels(target_net, x)
    clean_wall = time.perf_counter() - clean_start
    for kind in ("wb", "bb"):
        records += _score_batch(test_samples, f"untargeted:{kind}", 0.0, None,
                                clean_pred, y, clean_wall / 2.0)
    for epsilon in epsilons:
        for kind, craft_net in (("wb", target_net), ("bb", surrogate_net)):
            start = time.perf_counter()
            x_adv = _craft(craft_net, x, y, epsilon, iterations, "untargeted")
            pred = _predict_labels(target_net, x_adv)
            wall = time.perf_counter() - start
            records += _score_batch(test_samples, f"untargeted:{kind}", epsilon, None,
                                    pred, y, wall)
    return records


def _heart_targets(test_samples, size_fraction_of_bbox: float,
                   scope: str = "attack_all") -> np.ndarray:
    """Compose per-image heart-symbol targets; the symbol height is the
    given fraction of the shorter side of the heart's bounding box."""
    maps = []
    for s in test_samples:
        rows, cols = np.nonzero(s.labels == 1)
        bbox_side = min(rows.max() - rows.min() + 1, cols.max() - cols.min() + 1)
        fraction = size_fraction_of_bbox * bbox_side / s.labels.shape[0]
        spec = TargetSpec(target_class=1, shape="heart_symbol",
                          size_fraction=fraction, scope=scope)
        maps.append(compose_target(s.labels, spec).labels)
    return np.stack(maps)


def run_heart_suite(target_net: Network, surrogate_net: Network, test_samples,
                    epsilons=DEFAULT_EPSILONS, iterations: int = 100,
                    small_fraction: float = 0.82, large_ratio: float = 1.6,
                    scopes=("attack_all", "class_only"),
                    noise_regions=("full", "bbox"),
                    variant_epsilon: float = 0.04) -> list[MetricsRecord]:
    """Targeted heart-symbol sweeps.

    Main grid: {small, large} symbol x {white-box, black-box} x epsilon,
    full-image noise, loss over all five structures. Variants at a single
    epsilon: a class_only row set where the loss sees only the heart plane,
    and one row set per extra noise region with perturbation restricted to
    that region of the ground truth heart. Epsilon-zero rows score the clean
    prediction against each target (the transfer floor).
    """
    if target_net.training or surrogate_net.training:
        raise ValueError("both networks must be in inference mode")
    x = data_mod.image_batch(test_samples)
    records = []
    sizes = (("heart_small", small_fraction), ("heart_large", large_ratio * small_fraction))
    clean_pred = _predict_labels(target_net, x)
    for size_name, bbox_fraction in sizes:
        target_labels = _heart_targets(test_samples, bbox_fraction)
        for kind in ("wb", "bb"):
            records += _score_batch(test_samples, f"{size_name}:{kind}", 0.0, None,
                                    clean_pred, target_labels, 0.0)
        for epsilon in epsilons:
            for kind, craft_net in (("wb", target_net), ("bb", surrogate_net)):
                start = time.perf_counter()
                x_adv = _craft(craft_net, x, target_labels, epsilon, iterations, "targeted")
                pred = _predict_labels(target_net, x_adv)
                wall = time.perf_counter() - start
                records += _score_batch(test_samples, f"{size_name}:{kind}", epsilon,
                                        None, pred, target_labels, wall)

    if "class_only" in scopes:
        target_labels = _heart_targets(test_samples, small_fraction, scope="class_only")
        start = time.perf_counter()
        x_adv = _craft(target_net, x, target_labels, variant_epsilon, iterations,
                       "targeted", scope=ClassScope((1,)))
        pred = _predict_labels(target_net, x_adv)
        wall = time.perf_counter() - start
        records += _score_batch(test_samples, "heart_small+class_only:wb",
                                variant_epsilon, None, pred, target_labels, wall)

    for region in noise_regions:
        if region == "full":
            continue
        target_labels = _heart_targets(test_samples, small_fraction)
        rf = receptive_field(target_net.spec) if region == "receptive_field" else None
        mask = np.stack([
            make_noise_mask(region, s.labels, cls=1, rf=rf) for s in test_samples
        ])
        start = time.perf_counter()
        x_adv = _craft(target_net, x, target_labels, variant_epsilon, iterations,
                       "targeted", mask=mask)
        pred = _predict_labels(target_net, x_adv)
        wall = time.perf_counter() - start
        records += _score_batch(test_samples, f"heart_small+{region}_noise:wb",
                                variant_epsilon, None, pred, target_labels, wall)
    return records


def run_resize_suite(target_net: Network, test_samples,
                     classes=data_mod.STRUCTURE_CLASSES,
                     coefficients=DEFAULT_RESIZE_COEFFICIENTS,
                     epsilon: float = 0.04, iterations: int = 100) -> list[MetricsRecord]:
    """Targeted structure-resizing sweep on the attacked network.

    One targeted white-box PGD per (class, coefficient) batch; the
    coefficient-1.0 row is the no-attack baseline and scores the clean
    prediction, so it reproduces clean per-class IoU exactly.
    """
    if target_net.training:
        raise ValueError("network must be in inference mode")
    x = data_mod.image_batch(test_samples)
    records = []
    clean_pred = _predict_labels(target_net, x)
    for cls in classes:
        name = data_mod.CLASS_NAMES[cls]
        for coefficient in (1.0, *coefficients):
            maps = []
            for s in test_samples:
                spec = TargetSpec(target_class=cls, shape="resized", coefficient=coefficient)
                maps.append(compose_target(s.labels, spec).labels)
            target_labels = np.stack(maps)
            if coefficient == 1.0:
                records += _score_batch(test_samples, f"resize_{name}:none", 0.0,
                                        1.0, clean_pred, target_labels, 0.0)
                continue
            start = time.perf_counter()
            x_adv = _craft(target_net, x, target_labels, epsilon, iterations, "targeted")
            pred = _predict_labels(target_net, x_adv)
            wall = time.perf_counter() - start
            records += _score_batch(test_samples, f"resize_{name}:wb", epsilon,
                                    coefficient, pred, target_labels, wall)
    return records


# -- reporting ----------------------------------------------------------------


def _record_sort_key(rec: MetricsRecord):
    return (rec.suite, rec.attack, rec.epsilon,
            -1.0 if rec.coefficient is None else rec.coefficient, rec.image_id)


def _format_row(rec: MetricsRecord) -> list[str]:
    return [
        rec.image_id, rec.attack, f"{rec.epsilon:.4f}",
        "" if rec.coefficient is None else f"{rec.coefficient:.2f}",
        *(f"{v:.6f}" for v in rec.iou_gt),
        *(f"{v:.6f}" for v in rec.iou_target),
        f"{rec.mean_structures_gt:.6f}", f"{rec.mean_structures_target:.6f}",
    ]


def _mean_over(records, selector) -> float:
    vals = [selector(r) for r in records]
    return float(np.mean(vals))


def _heart_class_index() -> int:
    return data_mod.CLASS_NAMES.index("heart")


def _summary_untargeted(records) -> list[str]:
    rows = [r for r in records if r.suite == "untargeted"]
    if not rows:
        return []
    eps = sorted({r.epsilon for r in rows})
    lines = ["== untargeted: mean structure IoU vs ground truth ==",
             "attack    " + "".join(f"  eps={e:<6.2f}" for e in eps)]
    for kind in ("wb", "bb"):
        cells = []
        for e in eps:
            sel = [r for r in rows if r.attack == f"untargeted:{kind}" and r.epsilon == e]
            cells.append(_mean_over(sel, lambda r: r.mean_structures_gt) if sel else float("nan"))
        lines.append(f"{kind:<10}" + "".join(f"  {c:<10.4f}" for c in cells))
    return lines + [""]


def _summary_heart(records) -> list[str]:
    rows = [r for r in records if r.suite == "heart"]
    if not rows:
        return []
    heart = _heart_class_index()
    others = [c for c in SCOPE_STRUCTURES.classes if c != heart]
    attacks = sorted({r.attack for r in rows})
    eps = sorted({r.epsilon for r in rows})
    lines = ["== heart symbol: IoU vs attack target ==",
             "attack                        " + "".join(f"  eps={e:<6.2f}" for e in eps)]
    for attack in attacks:
        cells = []
        for e in eps:
            sel = [r for r in rows if r.attack == attack and r.epsilon == e]
            cells.append(_mean_over(sel, lambda r: r.iou_target[heart]) if sel else None)
        lines.append(f"{attack:<30}" + "".join(
            "  " + ("-" * 6).ljust(10) if c is None else f"  {c:<10.4f}" for c in cells))
    lines.append("-- other structures vs their targets (mean) --")
    for attack in attacks:
        cells = []
        for e in eps:
            sel = [r for r in rows if r.attack == attack and r.epsilon == e]
            cells.append(
                _mean_over(sel, lambda r: float(np.mean([r.iou_target[c] for c in others])))
                if sel else None)
        lines.append(f"{attack:<30}" + "".join(
            "  " + ("-" * 6).ljust(10) if c is None else f"  {c:<10.4f}" for c in cells))
    return lines + [""]


def _summary_resize(records) -> list[str]:
    rows = [r for r in records if r.suite == "resize"]
    if not rows:
        return []
    coeffs = sorted({r.coefficient for r in rows})
    classes = sorted({r.attack.split(":")[0][len("resize_"):] for r in rows})
    ordered = [n for n in data_mod.CLASS_NAMES if n in classes]
    lines = ["== resizing: IoU vs resized target (attacked class) ==",
             "class            " + "".join(f"  k={k:<6.2f}" for k in coeffs)]
    untouched_lines = ["-- untouched structures vs target (mean) --"]
    for name in ordered:
        cls = data_mod.CLASS_NAMES.index(name)
        others = [c for c in SCOPE_STRUCTURES.classes if c != cls]
        cells, ucells = [], []
        for k in coeffs:
            sel = [r for r in rows if r.coefficient == k and
                   r.attack.split(":")[0] == f"resize_{name}"]
            if sel:
                cells.append(_mean_over(sel, lambda r: r.iou_target[cls]))
                ucells.append(_mean_over(
                    sel, lambda r: float(np.mean([r.iou_target[c] for c in others]))))
            else:
                cells.append(float("nan"))
                ucells.append(float("nan"))
        lines.append(f"{name:<17}" + "".join(f"  {c:<8.4f}" for c in cells))
        untouched_lines.append(f"{name:<17}" + "".join(f"  {c:<8.4f}" for c in ucells))
    return lines + untouched_lines + [""]


SUITE_FILES = {"untargeted": "untargeted.csv", "heart": "heart.csv", "resize": "resize.csv"}


def emit_report(records, out_dir) -> dict[str, str]:
    """Write one CSV per suite plus a summary text file; returns the paths.

    Records are sorted deterministically and wall-clock is omitted, so
    emitting the same records again produces byte-identical files.
    """
    records = list(records)
    if not records:
        raise ValueError("cannot emit a report from an empty record list")
    for rec in records:
        rec.validate()
        if rec.suite not in SUITE_FILES:
            raise ValueError(f"record attack {rec.attack!r} belongs to no known suite")
    os.makedirs(out_dir, exist_ok=True)
    ordered = sorted(records, key=_record_sort_key)
    paths = {}
    for suite, filename in SUITE_FILES.items():
        rows = [r for r in ordered if r.suite == suite]
        if not rows:
            continue
        path = os.path.join(out_dir, filename)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_COLUMNS)
            for rec in rows:
                writer.writerow(_format_row(rec))
        paths[suite] = path
    summary = (_summary_untargeted(ordered) + _summary_heart(ordered)
               + _summary_resize(ordered))
    summary_path = os.path.join(out_dir, "summary.txt")
    with open(summary_path, "w", newline="") as fh:
        fh.write("\n".join(summary) + "\n")
    paths["summary"] = summary_path
    return paths


def read_records_csv(path) -> list[MetricsRecord]:
    """Load a suite CSV back into records (wall-clock is not stored)."""
    n_classes = len(data_mod.CLASS_NAMES)
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        for row in reader:
            rec = MetricsRecord(
                image_id=row["image_id"], attack=row["attack"],
                epsilon=float(row["epsilon"]),
                coefficient=float(row["coefficient"]) if row["coefficient"] else None,
                iou_gt=tuple(float(row[f"iou_gt_{n}"]) for n in data_mod.CLASS_NAMES),
                iou_target=tuple(float(row[f"iou_target_{n}"]) for n in data_mod.CLASS_NAMES),
                mean_structures_gt=float(row["mean_structures_gt"]),
                mean_structures_target=float(row["mean_structures_target"]),
                wall_clock=0.0,
            )
            rec.validate()
            records.append(rec)
    if not records:
        raise ValueError(f"{path}: no records")
    return records


# -- full experiment ----------------------------------------------------------


def build_pool(config: ExperimentConfig) -> dict[str, SegmentationSample]:
    """Generate the phantom pool for this configuration."""
    phantom = replace(config.phantom, seed=config.shifted(config.phantom.seed))
    return {s.id: s for s in (data_mod.generate_phantom(phantom, i)
                              for i in range(config.pool_size))}


def build_split(config: ExperimentConfig, pool) -> SplitPlan:
    return data_mod.make_split(sorted(pool), train=config.train_count,
                               val=config.val_count, test=config.test_count,
                               shared_train=config.shared_train,
                               seed=config.shifted(config.split_seed))


def train_or_load_pair(config: ExperimentConfig, pool, plan: SplitPlan,
                       out_dir) -> tuple[Network, Network]:
    """Load cached pair weights from out_dir if present, else train and save."""
    target_path = os.path.join(out_dir, "target.weights")
    surrogate_path = os.path.join(out_dir, "surrogate.weights")
    if os.path.exists(target_path) and os.path.exists(surrogate_path):
        return load_weights(target_path), load_weights(surrogate_path)
    train_cfg = replace(config.train, seed=config.shifted(config.train.seed))
    target_net, surrogate_net = train_pair(pool, plan, config.spec, train_cfg)
    os.makedirs(out_dir, exist_ok=True)
    save_weights(target_net, target_path)
    save_weights(surrogate_net, surrogate_path)
    return target_net, surrogate_net


@dataclass(frozen=True)
class SuiteResult:
    records: tuple[MetricsRecord, ...]
    report_paths: dict[str, str]
    attack_runs: int          # attacked image-rows (epsilon > 0), all invariant-checked
    suite_seconds: float      # process time spent crafting/scoring/reporting


def run_full_suite(config: ExperimentConfig, target_net: Network | None = None,
                   surrogate_net: Network | None = None) -> SuiteResult:
    """Train (or load) the pair, run all three suites, and emit the report."""
    config.validate()
    out_dir = config.resolved_output_dir()
    pool = build_pool(config)
    plan = build_split(config, pool)
    if target_net is None or surrogate_net is None:
        target_net, surrogate_net = train_or_load_pair(config, pool, plan, out_dir)
    test_samples = [pool[i] for i in plan.test]
    started = time.process_time()
    records = []
    records += run_untargeted_suite(target_net, surrogate_net, test_samples,
                                    config.epsilons, config.attack_iterations)
    records += run_heart_suite(target_net, surrogate_net, test_samples,
                               config.epsilons, config.attack_iterations,
                               config.heart_small_fraction, config.heart_large_ratio,
                               config.heart_scopes, config.heart_noise_regions,
                               config.heart_variant_epsilon)
    records += run_resize_suite(target_net, test_samples, config.resize_classes,
                                config.resize_coefficients, config.resize_epsilon,
                                config.attack_iterations)
    paths = emit_report(records, out_dir)
    elapsed = time.process_time() - started
    attack_runs = sum(1 for r in records if r.epsilon > 0)
    return SuiteResult(records=tuple(records), report_paths=paths,
                       attack_runs=attack_runs, suite_seconds=elapsed)


# -- config (de)serialization ---------------------------------------------------


def config_to_dict(config: ExperimentConfig) -> dict:
    """Plain-JSON representation of an ExperimentConfig."""
    d = asdict(config)
    d["phantom"]["priors"] = {
        name: {f: list(getattr(p, f)) for f in ("cx", "cy", "ax", "ay", "tilt")}
        for name, p in config.phantom.priors.items()
    }
    d["phantom"]["intensities"] = {
        name: list(r) for name, r in config.phantom.intensities.items()
    }
    d["phantom"]["textures"] = {
        name: [
            {"amplitude": t.amplitude, "orientation": t.orientation, "period": t.period}
            for t in data_mod._texture_components(spec)
        ]
        for name, spec in config.phantom.textures.items()
    }
    d["phantom"]["gradient_amplitude"] = list(config.phantom.gradient_amplitude)
    return d


def config_from_dict(d: dict) -> ExperimentConfig:
    d = dict(d)
    config = ExperimentConfig()
    if "phantom" in d:
        p = dict(d.pop("phantom"))
        if "priors" in p:
            p["priors"] = {
                name: data_mod.EllipsePrior(**{f: tuple(v) for f, v in fields.items()})
                for name, fields in p["priors"].items()
            }
        if "intensities" in p:
            p["intensities"] = {name: tuple(r) for name, r in p["intensities"].items()}
        if "textures" in p:
            p["textures"] = {
                name: tuple(data_mod.StripeTexture(**t) for t in comps)
                for name, comps in p["textures"].items()
            }
        if "gradient_amplitude" in p:
            p["gradient_amplitude"] = tuple(p["gradient_amplitude"])
        config = replace(config, phantom=PhantomConfig(**p))
    if "spec" in d:
        config = replace(config, spec=UNetSpec(**d.pop("spec")))
    if "train" in d:
        config = replace(config, train=TrainConfig(**d.pop("train")))
    for key in ("epsilons", "heart_scopes", "heart_noise_regions",
                "resize_classes", "resize_coefficients"):
        if key in d:
            d[key] = tuple(d[key])
    config = replace(config, **d)
    config.validate()
    return config
