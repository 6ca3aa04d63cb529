"""Two-stage hyperparameter search: Sobol exploration, TPE-lite
exploitation, synchronous successive halving, and top-k finalization.

The full 50-trial search is a pure function of one master seed. Trials run a
fixed training seed so only (lr, wd) varies; rungs at epochs {3, 10, 30}
keep the top third (ceiling) of still-alive trials. The top-k survivors are
re-evaluated with five seeds on validation, the winner (by mean) is
retrained once and touches the test split exactly once.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import StoreFormatError
from .numerics import STREAM_FINAL_SEEDS, STREAM_TPE, derive_seed, rng_stream
from .probe import ProbeTrainer, TrainConfig, evaluate, split_train_val, train

# -- Sobol --------------------------------------------------------------------

_SOBOL_BITS = 32


def _direction_integers() -> tuple:
    """32-bit direction integers for the first two dimensions of the
    standard Joe-Kuo set: dimension 1 is van der Corput (all m_k = 1),
    dimension 2 uses the degree-1 primitive polynomial with m_1 = 1."""
    v0 = [1 << (_SOBOL_BITS - k) for k in range(1, _SOBOL_BITS + 1)]
    m = [1]
    for _ in range(_SOBOL_BITS - 1):
        m.append((2 * m[-1]) ^ m[-1])
    v1 = [m[k - 1] << (_SOBOL_BITS - k) for k in range(1, _SOBOL_BITS + 1)]
    return (tuple(v0), tuple(v1))


@dataclass
class SobolState:
    """Gray-code Sobol walker over [0, 1)^2. ``next_index`` starts at 1:
    the all-zeros point is skipped."""

    dimension: int = 2
    direction: tuple = field(default_factory=_direction_integers)
    next_index: int = 1
    _x: list = field(default_factory=lambda: [0, 0])

    def __post_init__(self):
        if self.dimension != 2:
            raise ValueError("only the 2-d (lr, wd) sequence is supported")


def sobol_next(state: SobolState) -> np.ndarray:
    """Next quasi-random point; deterministic given the state."""
    n = state.next_index
    c = 0
    m = n - 1
    while m & 1:
        m >>= 1
        c += 1
    for d in range(state.dimension):
        state._x[d] ^= state.direction[d][c]
    state.next_index = n + 1
    return np.array([x / 2.0**_SOBOL_BITS for x in state._x])


def to_loguniform(u: float, bounds) -> float:
    """Map u in [0, 1) onto [low, high] log-uniformly."""
    low, high = bounds
    if not 0 < low < high:
        raise ValueError(f"need 0 < low < high, got {bounds}")
    return float(np.exp(np.log(low) + u * (np.log(high) - np.log(low))))


# -- search space -------------------------------------------------------------


@dataclass(frozen=True)
class SearchSpace:
    """Log-uniform (lr, wd) box; prototype heads get the shifted lr range."""

    lr_range: tuple = (1e-4, 7e-3)
    wd_range: tuple = (1e-5, 5e-4)
    proto_lr_range: tuple = (2e-3, 8e-2)

    def lr_range_for(self, head: str) -> tuple:
        return self.proto_lr_range if head in ("proto", "protobin") else self.lr_range


@dataclass
class TrialRecord:
    trial_id: int
    lr: float
    wd: float
    rung_metrics: list = field(default_factory=list)
    pruned: bool = False

    @property
    def last_metric(self) -> float:
        return self.rung_metrics[-1]


# -- TPE-lite -----------------------------------------------------------------


def _log_kde(points: np.ndarray, x: np.ndarray, bandwidth: float, lo: float, hi: float) -> np.ndarray:
    """Gaussian KDE on [lo, hi] with boundary reflection, so densities do not
    leak mass outside the box (otherwise the good/bad ratio dips at edges)."""
    support = np.concatenate([points, 2 * lo - points, 2 * hi - points])
    diff = (x[:, None] - support[None, :]) / bandwidth
    log_k = -0.5 * diff**2 - 0.5 * np.log(2 * np.pi) - np.log(bandwidth)
    m = log_k.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(log_k - m).sum(axis=1, keepdims=True)))[:, 0] - np.log(
        points.size
    )


def _bandwidth(points: np.ndarray, span: float) -> float:
    sigma = float(points.std())
    bw = 1.06 * sigma * points.size ** (-0.2)
    return max(bw, 1e-8 * span)


def _reflect(x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    span = hi - lo
    z = np.mod(x - lo, 2.0 * span)
    return lo + np.where(z > span, 2.0 * span - z, z)


def tpe_suggest(
    history,
    space: SearchSpace,
    rng: np.random.Generator,
    head: str = "linear",
    n_candidates: int = 24,
    gamma: float = 0.25,
    sobol_fallback: Optional[SobolState] = None,
):
    """Suggest (lr, wd) from trial history by a per-dimension Parzen density
    ratio in log space.

    History is split by rank into the top ceil(gamma*n) ("good") and the
    rest; per dimension, Gaussian KDEs with Silverman bandwidth
    (1.06 sigma n^(-1/5)) model both sets, candidates are drawn from the
    good density (reflected into the box), and the candidate with the
    largest good/bad ratio wins. With fewer than 10 finished trials this
    falls back to the Sobol sequence.
    """
    finished = [t for t in history if t.rung_metrics]
    if len(finished) < 10:
        state = sobol_fallback if sobol_fallback is not None else SobolState()
        u = sobol_next(state)
        return (
            to_loguniform(u[0], space.lr_range_for(head)),
            to_loguniform(u[1], space.wd_range),
        )
    metrics = np.array([t.last_metric for t in finished])
    # value-based split at the top-25% quantile; ties land in "good", and a
    # fully tied history leaves "bad" empty, making the ratio flat by
    # definition (no evidence to discriminate on)
    threshold = np.quantile(metrics, 1.0 - gamma)
    good_idx = np.flatnonzero(metrics >= threshold)
    bad_idx = np.flatnonzero(metrics < threshold)
    bounds = (space.lr_range_for(head), space.wd_range)
    pts = np.log([[t.lr, t.wd] for t in finished])  # (n, 2)

    chosen = []
    total_ratio = np.zeros(n_candidates)
    for dim in range(2):
        lo, hi = np.log(bounds[dim][0]), np.log(bounds[dim][1])
        good = pts[good_idx, dim]
        bw_good = _bandwidth(good, hi - lo)
        picks = rng.integers(0, good.size, size=n_candidates)
        cand = good[picks] + bw_good * rng.standard_normal(n_candidates)
        cand = _reflect(cand, lo, hi)
        if bad_idx.size:
            bad = pts[bad_idx, dim]
            bw_bad = _bandwidth(bad, hi - lo)
            total_ratio += _log_kde(good, cand, bw_good, lo, hi) - _log_kde(
                bad, cand, bw_bad, lo, hi
            )
        chosen.append(cand)
    best = int(np.argmax(total_ratio))
    return float(np.exp(chosen[0][best])), float(np.exp(chosen[1][best]))


# -- successive halving -------------------------------------------------------

DEFAULT_RUNGS = (3, 10, 30)


class StoreTrialRunner:
    """Runs rung-resumable trials of one head on fixed train/val datasets.

    Every trial trains under the same fixed seed (comparability across
    configurations); the cosine schedule always spans the full epoch budget
    so pruning only truncates, never reshapes, a run.
    """

    def __init__(self, train_ds, val_ds, base_cfg: TrainConfig):
        self.train_ds = train_ds
        self.val_ds = val_ds
        self.base_cfg = base_cfg
        self.epoch_log: dict = {}  # trial audit: epochs trained per handle
        self.test_evaluations = 0
        self._counter = 0

    def start(self, lr: float, wd: float):
        cfg = replace(self.base_cfg, lr=lr, weight_decay=wd)
        trainer = ProbeTrainer(self.train_ds, self.val_ds, cfg)
        handle = self._counter
        self._counter += 1
        self.epoch_log[handle] = []
        return handle, trainer

    def advance(self, handle_trainer, to_epoch: int) -> float:
        handle, trainer = handle_trainer
        trainer.advance_to(to_epoch)
        self.epoch_log[handle].append(to_epoch)
        return trainer.per_epoch_val[-1]

    def run_full(self, lr: float, wd: float, seed: int) -> float:
        cfg = replace(self.base_cfg, lr=lr, weight_decay=wd, seed=seed)
        _, _, result, _ = train(self.train_ds, self.val_ds, cfg)
        return result.final_val_metric

    def run_test(self, test_ds, lr: float, wd: float, seed: int):
        cfg = replace(self.base_cfg, lr=lr, weight_decay=wd, seed=seed)
        head, params, _, _ = train(self.train_ds, self.val_ds, cfg)
        self.test_evaluations += 1
        return evaluate(test_ds, head, params, self.base_cfg.metric), head, params


def successive_halving(
    runner,
    space: SearchSpace,
    head: str,
    master_seed: int,
    n_trials: int = 50,
    n_sobol: int = 25,
    rungs=DEFAULT_RUNGS,
):
    """Run the staged search; returns the TrialRecords in trial order.

    The first ``n_sobol`` configurations come from the Sobol sequence, the
    rest from TPE over the history available at suggestion time. All trials
    reach the first rung; after each rung the top ceil(alive/3) by the rung
    metric survive (ties to the lower trial id).
    """
    sobol = SobolState()
    tpe_rng = rng_stream(master_seed, STREAM_TPE)
    records: list[TrialRecord] = []
    handles = {}
    for i in range(n_trials):
        if i < n_sobol:
            u = sobol_next(sobol)
            lr = to_loguniform(u[0], space.lr_range_for(head))
            wd = to_loguniform(u[1], space.wd_range)
        else:
            lr, wd = tpe_suggest(records, space, tpe_rng, head=head)
        record = TrialRecord(trial_id=i, lr=lr, wd=wd)
        handles[i] = runner.start(lr, wd)
        record.rung_metrics.append(runner.advance(handles[i], rungs[0]))
        records.append(record)

    alive = list(range(n_trials))
    for rung_epoch in rungs[1:]:
        keep = -(-len(alive) // 3)
        metrics = np.array([records[i].last_metric for i in alive])
        order = np.argsort(-metrics, kind="stable")
        survivors = [alive[k] for k in order[:keep]]
        for i in alive:
            if i not in survivors:
                records[i].pruned = True
                handles.pop(i, None)
        survivors.sort()
        for i in survivors:
            records[i].rung_metrics.append(runner.advance(handles[i], rung_epoch))
        alive = survivors
    return records


@dataclass
class CandidateSummary:
    lr: float
    wd: float
    seed_metrics: list
    mean: float
    sd: float


@dataclass
class FinalResult:
    lr: float
    wd: float
    seed_metrics: list
    val_mean: float
    val_sd: float
    test_metric: float
    candidates: list


def select_and_finalize(records, k, runner, test_ds, master_seed: int, n_seeds: int = 5):
    """Re-evaluate the top-k full-budget trials with ``n_seeds`` seeds on
    validation, pick the highest mean, retrain once and evaluate the test
    split exactly once."""
    full_rungs = max(len(r.rung_metrics) for r in records)
    finished = [r for r in records if len(r.rung_metrics) == full_rungs]
    finished.sort(key=lambda r: (-r.last_metric, r.trial_id))
    top = finished[:k]

    seed_rng = rng_stream(master_seed, STREAM_FINAL_SEEDS)
    seeds = [int(s) for s in seed_rng.integers(0, 2**31 - 1, size=n_seeds)]
    candidates = []
    for rec in top:
        vals = [runner.run_full(rec.lr, rec.wd, s) for s in seeds]
        arr = np.array(vals, dtype=np.float64)
        sd = float(arr.std(ddof=1)) if len(vals) > 1 else 0.0
        candidates.append(CandidateSummary(rec.lr, rec.wd, vals, float(arr.mean()), sd))
    best = max(range(len(candidates)), key=lambda i: (candidates[i].mean, -i))
    winner = candidates[best]
    final_seed = derive_seed(master_seed, STREAM_FINAL_SEEDS + 1)
    test_metric, head, params = runner.run_test(test_ds, winner.lr, winner.wd, final_seed)
    return (
        FinalResult(
            lr=winner.lr,
            wd=winner.wd,
            seed_metrics=winner.seed_metrics,
            val_mean=winner.mean,
            val_sd=winner.sd,
            test_metric=test_metric,
            candidates=candidates,
        ),
        head,
        params,
    )


def run_search(
    train_ds,
    val_ds,
    test_ds,
    head: str,
    master_seed: int,
    k: int = 3,
    n_trials: int = 50,
    n_sobol: int = 25,
    rungs=DEFAULT_RUNGS,
    space: SearchSpace = SearchSpace(),
    base_cfg: Optional[TrainConfig] = None,
):
    """Full protocol for one (head, store) pair. If ``val_ds`` is None, a
    seeded 80/20 holdout of the training set is used."""
    if val_ds is None:
        train_ds, val_ds = split_train_val(train_ds, 0.2, master_seed)
    if base_cfg is None:
        base_cfg = TrainConfig(head=head, epochs=rungs[-1])
    else:
        base_cfg = replace(base_cfg, head=head, epochs=rungs[-1])
    base_cfg = replace(base_cfg, seed=derive_seed(master_seed, 0))
    runner = StoreTrialRunner(train_ds, val_ds, base_cfg)
    records = successive_halving(
        runner, space, head, master_seed, n_trials=n_trials, n_sobol=n_sobol, rungs=rungs
    )
    final, head_obj, params = select_and_finalize(
        records, k, runner, test_ds, master_seed
    )
    return records, final, head_obj, params, runner


# -- journal ------------------------------------------------------------------

_JOURNAL_HEADER = "trial_id\tlr\twd\trung_metrics\tpruned"


def write_journal(path, records) -> None:
    """One tab-separated row per trial; rung metrics are comma-joined."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_JOURNAL_HEADER + "\n")
        for r in records:
            rungs = ",".join(repr(m) for m in r.rung_metrics)
            fh.write(f"{r.trial_id}\t{r.lr!r}\t{r.wd!r}\t{rungs}\t{int(r.pruned)}\n")


def read_journal(path):
    records = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != _JOURNAL_HEADER:
            raise StoreFormatError(f"{path}: unexpected journal header {header!r}")
        for line in fh:
            trial_id, lr, wd, rungs, pruned = line.rstrip("\n").split("\t")
            records.append(
                TrialRecord(
                    trial_id=int(trial_id),
                    lr=float(lr),
                    wd=float(wd),
                    rung_metrics=[float(x) for x in rungs.split(",") if x],
                    pruned=bool(int(pruned)),
                )
            )
    return records
