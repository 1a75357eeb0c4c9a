"""Class-incremental evaluation protocol.

Three learners share the same frozen backbone and random expansion:

* ``ssl_cil``  - closed-form re-alignment, then recursive updates; sees each
  training block exactly once.
* ``joint``    - ridge solution over every training block seen so far (upper
  bound, keeps history on purpose).
* ``finetune`` - a 360-way linear head on the expanded features, trained by
  Adam on the current phase only (lower bound, no forgetting countermeasure).

After phase k each learner is scored on the union of test sets 0..k, with
logits of classes not yet seen masked out.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .acoustic import (
    PhaseDataset,
    generate_phase_splits,
    make_array_geometry,
    synthesize_segment_batch,
)
from .analytic import (
    expand,
    incremental_update,
    init_expansion,
    joint_solve,
    predict_expanded,
    realign,
    scatter_scores,
)
from .backbone import Adam, TrainConfig, embed, train_base
from .config import ExperimentConfig
from .errors import ParameterError, ProtocolError, ShapeError
from .gcc import extract_features
from .labels import circular_error, class_mask, encode_batch
from .storage import feature_cache_key, features_from_bytes, features_to_bytes

logger = logging.getLogger(__name__)

DEFAULT_CONDITION = "test"


# metrics ------------------------------------------------------------------


@dataclass
class MetricsReport:
    mae_deg: float
    acc_pct: float
    tolerance_deg: float
    n_samples: int
    per_phase: dict = field(default_factory=dict)  # test-phase index -> MetricsReport

    @property
    def empty(self):
        return self.n_samples == 0

    def to_dict(self):
        out = {
            "mae_deg": self.mae_deg,
            "acc_pct": self.acc_pct,
            "tolerance_deg": self.tolerance_deg,
            "n_samples": self.n_samples,
        }
        if self.per_phase:
            out["per_phase"] = {str(k): v.to_dict() for k, v in self.per_phase.items()}
        return out


def evaluate(pred_deg, truth_deg, tolerance_deg=5.0) -> MetricsReport:
    """MAE of the circular error, and the percentage of errors <= tolerance.

    An empty input gives a report with ``n_samples == 0`` and NaN metrics.
    """
    pred = np.asarray(pred_deg).reshape(-1)
    truth = np.asarray(truth_deg).reshape(-1)
    if pred.shape != truth.shape:
        raise ShapeError(f"{pred.size} predictions vs {truth.size} ground-truth angles")
    if pred.size == 0:
        return MetricsReport(float("nan"), float("nan"), float(tolerance_deg), 0)
    err = np.atleast_1d(circular_error(pred, truth))
    return MetricsReport(
        float(err.mean()), float(100.0 * np.mean(err <= tolerance_deg)), float(tolerance_deg), int(pred.size)
    )


@dataclass
class CilRunRecord:
    method: str
    reports: list  # one MetricsReport per learning phase
    config: dict
    wall_ms: list
    seed: int = 0
    # in-memory extras for verification, not serialised
    final_weights: np.ndarray | None = field(default=None, repr=False, compare=False)
    seen_classes: tuple = field(default=(), repr=False, compare=False)
    state: object = field(default=None, repr=False, compare=False)

    def rows(self):
        return [
            {
                "method": self.method,
                "phase": k,
                "n_test": r.n_samples,
                "mae_deg": r.mae_deg,
                "acc_pct": r.acc_pct,
                "wall_ms": w,
            }
            for k, (r, w) in enumerate(zip(self.reports, self.wall_ms))
        ]

    def to_dict(self):
        return {
            "method": self.method,
            "seed": self.seed,
            "phases": [dict(r.to_dict(), phase=k, wall_ms=w)
                       for k, (r, w) in enumerate(zip(self.reports, self.wall_ms))],
        }


# data ---------------------------------------------------------------------


@dataclass
class PhaseBlock:
    phase_index: int
    class_set: tuple
    x: np.ndarray  # GCC features (N, d)
    doa: np.ndarray  # (N,)


class PhaseStream:
    """One-shot iterator over training blocks.

    Each block can be taken once; the stream forgets it afterwards and
    ``reads`` counts accesses per phase.
    """

    def __init__(self, blocks):
        self._blocks = list(blocks)
        self.reads = [0] * len(self._blocks)
        self._next = 0

    def __len__(self):
        return len(self._blocks)

    def __iter__(self):
        return self

    def __next__(self) -> PhaseBlock:
        if self._next >= len(self._blocks):
            raise StopIteration
        return self.take(self._next)

    def take(self, k) -> PhaseBlock:
        if self.reads[k]:
            raise ProtocolError(f"training block {k} was already consumed")
        if k != self._next:
            raise ProtocolError(f"training block {k} requested out of order (next is {self._next})")
        self.reads[k] += 1
        block, self._blocks[k] = self._blocks[k], None
        self._next = k + 1
        return block

    def skip(self, n):
        """Advance past ``n`` blocks without reading them (used when resuming)."""
        for k in range(self._next, self._next + n):
            self._blocks[k] = None
        self._next += n


@dataclass
class Benchmark:
    """Featurised phases: training blocks plus one or more test conditions."""

    class_sets: list
    train: list  # PhaseBlock per phase
    tests: dict  # condition -> list of (x, doa) per phase

    def __post_init__(self):
        seen = set()
        for cs in self.class_sets:
            if seen & set(cs):
                raise ProtocolError("phase class sets overlap")
            seen |= set(cs)

    @property
    def num_phases(self):
        return len(self.class_sets)

    def stream(self) -> PhaseStream:
        return PhaseStream(self.train)

    @classmethod
    def from_phase_datasets(cls, datasets, geometry, tau_range=51, cache_dir=None):
        datasets = sorted(datasets, key=lambda p: p.phase_index)
        train, tests = [], []
        for p in datasets:
            train.append(PhaseBlock(p.phase_index, tuple(p.class_set),
                                    featurize(p.train, geometry, tau_range, cache_dir), p.train.doa_deg))
            tests.append((featurize(p.test, geometry, tau_range, cache_dir), p.test.doa_deg))
        return cls([tuple(p.class_set) for p in datasets], train, {DEFAULT_CONDITION: tests})


def featurize(batch, geometry, tau_range, cache_dir=None) -> np.ndarray:
    if not cache_dir:
        return extract_features(batch, geometry, tau_range).values
    path = Path(cache_dir) / f"{feature_cache_key(batch, tau_range, geometry.pairs)}.feat"
    if path.exists():
        return features_from_bytes(path.read_bytes())[0].values
    feats = extract_features(batch, geometry, tau_range)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(features_to_bytes(feats, batch.doa_deg))
    # the cached copy is float32; return it so cached and fresh runs agree
    return features_from_bytes(path.read_bytes())[0].values


def geometry_from(cfg: ExperimentConfig):
    g = cfg.geometry
    return make_array_geometry(g.width_m, g.height_m, g.sample_rate, g.sound_speed)


def phase_seeds(seed, k):
    """SeedSequence entropy for the train and test batches of phase k."""
    return [seed, k, 0], [seed, k, 1]


def simulate_phase(cfg: ExperimentConfig, seed, k, class_set, test_snr=None, train_snr=None) -> PhaseDataset:
    geometry = geometry_from(cfg)
    s = cfg.signal
    train_seed, test_seed = phase_seeds(seed, k)
    tr = np.repeat(class_set, cfg.split.train_per_class)
    te = np.repeat(class_set, cfg.split.test_per_class)
    train = synthesize_segment_batch(len(tr), geometry, tr, s.train_snr_db if train_snr is None else train_snr,
                                     train_seed, s.duration_s, s.source)
    test = synthesize_segment_batch(len(te), geometry, te, s.test_snr_db if test_snr is None else test_snr,
                                    test_seed, s.duration_s, s.source)
    return PhaseDataset(k, tuple(class_set), train, test)


def class_splits(cfg: ExperimentConfig):
    sp = cfg.split
    return generate_phase_splits(sp.num_phases, sp.classes_per_phase, sp.assignment, sp.seed)


def build_benchmark(cfg: ExperimentConfig, seed, test_snrs=None, train_snr=None) -> Benchmark:
    """Simulate and featurise every phase for one seed.

    ``test_snrs`` maps condition names to test SNRs; by default there is a
    single ``"test"`` condition at ``signal.test_snr_db``.  All conditions
    reuse the same source signals and noise draws, only the noise level
    differs.
    """
    geometry = geometry_from(cfg)
    tau = cfg.features.tau_range
    cache = cfg.features.cache_dir or None
    test_snrs = test_snrs or {DEFAULT_CONDITION: cfg.signal.test_snr_db}
    splits = class_splits(cfg)
    train, tests = [], {c: [] for c in test_snrs}
    for k, cs in enumerate(splits):
        first = None
        for cond, snr in test_snrs.items():
            phase = simulate_phase(cfg, seed, k, cs, test_snr=snr, train_snr=train_snr)
            if first is None:
                first = phase
                train.append(PhaseBlock(k, cs, featurize(phase.train, geometry, tau, cache), phase.train.doa_deg))
            tests[cond].append((featurize(phase.test, geometry, tau, cache), phase.test.doa_deg))
    return Benchmark(splits, train, tests)


# learners -----------------------------------------------------------------


def phase_targets(cfg: ExperimentConfig, doa, class_set):
    """(N, len(class_set)) Gaussian targets restricted to the phase's classes."""
    labels = encode_batch(doa, cfg.labels.sigma_deg, cfg.labels.wrap).values
    return labels[:, np.asarray(class_set) - 1]


def backbone_train_config(cfg, seed):
    b = cfg.backbone
    return TrainConfig(b.epochs, b.batch_size, b.learning_rate, b.weight_decay, seed)


def expansion_seed(cfg, seed):
    return int(np.random.SeedSequence([cfg.analytic.expansion_seed, seed]).generate_state(1)[0])


class _FrozenFeatures:
    """Base-phase training of the backbone plus the random expansion."""

    def __init__(self, cfg: ExperimentConfig, seed):
        self.cfg = cfg
        self.seed = seed
        self.backbone = None
        self.fe_map = None

    def fit_backbone(self, block: PhaseBlock):
        labels = encode_batch(block.doa, self.cfg.labels.sigma_deg, self.cfg.labels.wrap).values
        labels = labels * class_mask(block.class_set)[None, :]
        self.backbone = train_base(block.x, labels, backbone_train_config(self.cfg, self.seed),
                                   dims=tuple(self.cfg.backbone.hidden))
        self.fe_map = init_expansion(self.backbone.d_out, self.cfg.analytic.d_fe,
                                     expansion_seed(self.cfg, self.seed))

    def features(self, x):
        return expand(embed(x, self.backbone), self.fe_map)


class SslCilLearner(_FrozenFeatures):
    name = "ssl_cil"

    def __init__(self, cfg, seed):
        super().__init__(cfg, seed)
        self.state = None

    def learn(self, block: PhaseBlock):
        if self.state is None:
            self.fit_backbone(block)
            x = self.features(block.x)
            self.state = realign(x, phase_targets(self.cfg, block.doa, block.class_set),
                                 self.cfg.analytic.eta, block.class_set)
        else:
            x = self.features(block.x)
            self.state = incremental_update(self.state, x, phase_targets(self.cfg, block.doa, block.class_set),
                                            block.class_set, verify=self.cfg.analytic.verify_spd)

    def predict(self, x):
        return predict_expanded(self.features(x), self.state).angles

    @property
    def weights(self):
        return self.state.w_fcn

    @property
    def seen(self):
        return self.state.seen_classes

    def save(self, path):
        ckpt_io.save(path, self.cfg.to_dict(), self.seed, self.backbone, self.fe_map, self.state)

    @classmethod
    def from_checkpoint(cls, cfg, path):
        backbone, fe_map, state, meta = ckpt_io.load(path)
        learner = cls(cfg, meta["seed"])
        learner.backbone, learner.fe_map, learner.state = backbone, fe_map, state
        return learner


class JointLearner(_FrozenFeatures):
    name = "joint"

    def __init__(self, cfg, seed):
        super().__init__(cfg, seed)
        self.blocks = []
        self.seen = ()
        self.weights = None

    def learn(self, block: PhaseBlock):
        if self.backbone is None:
            self.fit_backbone(block)
        self.blocks.append((self.features(block.x), phase_targets(self.cfg, block.doa, block.class_set)))
        self.seen = self.seen + tuple(block.class_set)
        self.weights = joint_solve(self.blocks, self.cfg.analytic.eta)

    def predict(self, x):
        scores = scatter_scores(self.features(x) @ self.weights, self.seen)
        return np.argmax(scores, axis=1) + 1


class FinetuneLearner(_FrozenFeatures):
    name = "finetune"

    def __init__(self, cfg, seed):
        super().__init__(cfg, seed)
        self.head = None
        self.seen = ()

    def learn(self, block: PhaseBlock):
        if self.backbone is None:
            self.fit_backbone(block)
            self.head = {"W": np.zeros((self.cfg.analytic.d_fe, 360)), "b": np.zeros(360)}
        ft = self.cfg.finetune
        x = self.features(block.x)
        y = encode_batch(block.doa, self.cfg.labels.sigma_deg, self.cfg.labels.wrap).values
        y = y * class_mask(block.class_set)[None, :]
        opt = Adam(ft.learning_rate, ft.weight_decay)
        rng = np.random.default_rng([self.seed, block.phase_index, 2])
        for _ in range(ft.epochs):
            order = rng.permutation(x.shape[0])
            for start in range(0, x.shape[0], ft.batch_size):
                idx = order[start : start + ft.batch_size]
                diff = x[idx] @ self.head["W"] + self.head["b"] - y[idx]
                g = 2.0 * diff / diff.size
                opt.step(self.head, {"W": x[idx].T @ g, "b": g.sum(axis=0)})
        self.seen = self.seen + tuple(block.class_set)

    def predict(self, x):
        logits = self.features(x) @ self.head["W"] + self.head["b"]
        logits[:, ~class_mask(self.seen)] = -np.inf
        return np.argmax(logits, axis=1) + 1

    @property
    def weights(self):
        return self.head["W"]


LEARNERS = {c.name: c for c in (SslCilLearner, JointLearner, FinetuneLearner)}


# protocol -----------------------------------------------------------------


def _cumulative_report(learner, tests, k, tolerance):
    preds, truths, per_phase = [], [], {}
    for j in range(k + 1):
        x, doa = tests[j]
        pred = learner.predict(x) if len(doa) else np.zeros(0, dtype=np.int64)
        per_phase[j] = evaluate(pred, doa, tolerance)
        preds.append(pred)
        truths.append(doa)
    report = evaluate(np.concatenate(preds), np.concatenate(truths), tolerance)
    report.per_phase = per_phase
    return report


def run_cil_conditions(method, benchmark: Benchmark, cfg: ExperimentConfig, seed=None,
                       stream: PhaseStream = None, resume=None, stop_after=None, checkpoint_path=None):
    """Run one method through every phase; returns {condition: CilRunRecord}.

    ``resume`` is a checkpoint path for ``ssl_cil``: phases up to the stored
    phase are skipped unread and reports start at the next phase.
    ``stop_after`` ends the run after that phase index.
    """
    if method not in LEARNERS:
        raise ParameterError(f"unknown method {method!r}")
    seed = cfg.seed if seed is None else seed
    stream = benchmark.stream() if stream is None else stream
    if resume is not None:
        if method != "ssl_cil":
            raise ParameterError("only ssl_cil runs can resume from a checkpoint")
        learner = SslCilLearner.from_checkpoint(cfg, resume)
        seed = learner.seed
        stream.skip(learner.state.phase + 1)
        first = learner.state.phase + 1
    else:
        learner = LEARNERS[method](cfg, seed)
        first = 0
    records = {c: CilRunRecord(method, [], cfg.to_dict(), [], seed) for c in benchmark.tests}
    last = benchmark.num_phases - 1 if stop_after is None else min(stop_after, benchmark.num_phases - 1)
    for k in range(first, last + 1):
        block = stream.take(k)
        t0 = time.perf_counter()
        learner.learn(block)
        wall = (time.perf_counter() - t0) * 1000.0
        del block
        for cond, tests in benchmark.tests.items():
            records[cond].reports.append(_cumulative_report(learner, tests, k, cfg.eval.tolerance_deg))
            records[cond].wall_ms.append(wall)
        logger.info("%s seed %d phase %d: acc %.1f%%", method, seed, k,
                    records[next(iter(records))].reports[-1].acc_pct)
    for rec in records.values():
        rec.final_weights = learner.weights
        rec.seen_classes = tuple(learner.seen)
        rec.state = getattr(learner, "state", None)
    if checkpoint_path is not None and method == "ssl_cil":
        learner.save(checkpoint_path)
    return records


def run_cil(method, datasets, cfg: ExperimentConfig, seed=None, **kwargs) -> CilRunRecord:
    """Run ``method`` over ``datasets``: a Benchmark or a list of PhaseDataset."""
    if not isinstance(datasets, Benchmark):
        datasets = Benchmark.from_phase_datasets(datasets, geometry_from(cfg), cfg.features.tau_range)
    records = run_cil_conditions(method, datasets, cfg, seed, **kwargs)
    return records[DEFAULT_CONDITION] if DEFAULT_CONDITION in records else next(iter(records.values()))


def average_records(records) -> CilRunRecord:
    """Phase-wise mean of MAE/ACC/wall time over runs of one method (e.g. seeds)."""
    records = list(records)
    n_phases = min(len(r.reports) for r in records)
    reports, walls = [], []
    for k in range(n_phases):
        rs = [r.reports[k] for r in records]
        per_phase = {}
        for j in rs[0].per_phase:
            sub = [r.per_phase[j] for r in rs]
            per_phase[j] = MetricsReport(float(np.mean([s.mae_deg for s in sub])),
                                         float(np.mean([s.acc_pct for s in sub])),
                                         sub[0].tolerance_deg, int(np.mean([s.n_samples for s in sub])))
        reports.append(MetricsReport(float(np.mean([r.mae_deg for r in rs])),
                                     float(np.mean([r.acc_pct for r in rs])),
                                     rs[0].tolerance_deg, int(np.mean([r.n_samples for r in rs])), per_phase))
        walls.append(float(np.mean([r.wall_ms[k] for r in records])))
    return CilRunRecord(records[0].method, reports, records[0].config, walls, seed=-1)


def run_methods(cfg: ExperimentConfig, methods=None, benchmarks=None):
    """Every configured method over every configured seed.

    Returns ({method: mean record}, {method: [per-seed records]}).
    """
    methods = methods or cfg.eval.methods
    per_seed = {m: [] for m in methods}
    for i, seed in enumerate(cfg.seeds):
        bench = benchmarks[i] if benchmarks else build_benchmark(cfg, seed)
        for m in methods:
            per_seed[m].append(run_cil(m, bench, cfg, seed))
    return {m: average_records(rs) for m, rs in per_seed.items()}, per_seed


# sweeps -------------------------------------------------------------------


def snr_sweep(snr_list, cfg: ExperimentConfig, methods=None):
    """Final-phase MAE/ACC per test SNR and method, averaged over seeds.

    Training data stay at ``signal.train_snr_db`` unless
    ``signal.noise_train_in_sweep`` is set, in which case each SNR gets its
    own training set at that SNR.  Returns (rows, {snr: {method: record}}).
    """
    snrs = [float(s) for s in snr_list]
    if not all(np.isfinite(snrs)):
        raise ParameterError("SNR values must be finite")
    methods = methods or cfg.eval.methods
    collected = {s: {m: [] for m in methods} for s in snrs}
    for seed in cfg.seeds:
        if cfg.signal.noise_train_in_sweep:
            for s in snrs:
                bench = build_benchmark(cfg, seed, {s: s}, train_snr=s)
                for m in methods:
                    collected[s][m].append(run_cil_conditions(m, bench, cfg, seed)[s])
        else:
            bench = build_benchmark(cfg, seed, {s: s for s in snrs})
            for m in methods:
                recs = run_cil_conditions(m, bench, cfg, seed)
                for s in snrs:
                    collected[s][m].append(recs[s])
    table = {s: {m: average_records(collected[s][m]) for m in methods} for s in snrs}
    rows = []
    for s in snrs:
        row = {"snr_db": s}
        for m in methods:
            final = table[s][m].reports[-1]
            row[f"{m}_mae_deg"] = final.mae_deg
            row[f"{m}_acc_pct"] = final.acc_pct
        rows.append(row)
    overall = {"snr_db": "overall"}
    for key in rows[0]:
        if key != "snr_db":
            overall[key] = float(np.mean([r[key] for r in rows]))
    rows.append(overall)
    return rows, table


ABLATION_KEYS = {"expansion_size": "analytic.d_fe", "eta": "analytic.eta"}


def ablation_sweep(parameter, values, cfg: ExperimentConfig, methods=("ssl_cil",), benchmarks=None):
    """Final overall MAE/ACC for each value of ``parameter``, seed-averaged.

    Simulated data depend only on the seed, so each seed's benchmark is built
    once (or taken from ``benchmarks``, one per seed) and shared across
    values.  Returns (rows, {value: {method: record}}).
    """
    if parameter not in ABLATION_KEYS:
        raise ParameterError(f"unknown ablation parameter {parameter!r}; choose from {sorted(ABLATION_KEYS)}")
    values = list(values)
    if not values:
        raise ParameterError("ablation needs at least one value")
    configs = [cfg.replace(**{ABLATION_KEYS[parameter]: v}) for v in values]
    collected = {i: {m: [] for m in methods} for i in range(len(values))}
    for j, seed in enumerate(cfg.seeds):
        bench = benchmarks[j] if benchmarks else build_benchmark(cfg, seed)
        for i, c in enumerate(configs):
            for m in methods:
                collected[i][m].append(run_cil(m, bench, c, seed))
    rows, table = [], {}
    for i, v in enumerate(values):
        table[v] = {m: average_records(collected[i][m]) for m in methods}
        for m in methods:
            final = table[v][m].reports[-1]
            rows.append({parameter: v, "method": m, "mae_deg": final.mae_deg, "acc_pct": final.acc_pct})
    return rows, table
