"""Trustworthiness assessment for trained twins.

Safe/unsafe confusion bookkeeping, dataset-coverage comparison through
kernel density estimates and symmetric Kullback-Leibler divergence,
correlation, target-loss sweeps, sensor-failure replays and full
error surfaces.  Everything here is pure analytics over immutable
stores and models; nothing mutates plant or twin state.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .episodes import (ROW_DT, SERIES_COLUMNS, ControlAction, EpisodeStore,
                       simulate_batch)
from .network import NeuralNetModel, TrainHyper, forward, train
from .plant import CHANNELS
from .twins import (assess, diagnosis_dataset, enumerate_strategies,
                    gradient_features, prognose_batch, recommend)

KL_FLOOR = 1e-12


class EmptyInput(Exception):
    """No cases/samples were supplied."""


class DegenerateBandwidth(Exception):
    """KDE bandwidth is not positive definite."""


class GridMismatch(Exception):
    """Density grids being compared have different shapes."""


class ZeroVariance(Exception):
    """Correlation of a constant sequence is undefined."""


# ---------------------------------------------------------------------------
# Safe/unsafe classification.  "Safe" (peak strictly below the limit) is
# the positive class, so a false positive is the dangerous cell: truly
# unsafe but predicted safe.

CASE_LABELS = ("TP", "FP", "FN", "TN")


def classify_case(true_max: float, predicted_max: float, limit: float) -> str:
    truly_safe = true_max < limit
    predicted_safe = predicted_max < limit
    if predicted_safe:
        return "TP" if truly_safe else "FP"
    return "FN" if truly_safe else "TN"


def _rate(num: int, den: int):
    return None if den == 0 else num / den


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def tpr(self):
        return _rate(self.tp, self.tp + self.fn)

    @property
    def fpr(self):
        return _rate(self.fp, self.fp + self.tn)

    @property
    def fnr(self):
        return _rate(self.fn, self.tp + self.fn)

    @property
    def tnr(self):
        return _rate(self.tn, self.fp + self.tn)

    def to_csv(self) -> str:
        def cell(v):
            return "undefined" if v is None else f"{v:.9g}"
        return ("metric,value\n"
                f"TP,{self.tp}\nFP,{self.fp}\nFN,{self.fn}\nTN,{self.tn}\n"
                f"TPR,{cell(self.tpr)}\nFPR,{cell(self.fpr)}\n"
                f"FNR,{cell(self.fnr)}\nTNR,{cell(self.tnr)}\n")


def confusion_matrix(cases) -> ConfusionMatrix:
    cases = list(cases)
    if not cases:
        raise EmptyInput("no classified cases")
    bad = sorted(set(cases) - set(CASE_LABELS))
    if bad:
        raise ValueError(f"unknown case labels: {bad}")
    return ConfusionMatrix(cases.count("TP"), cases.count("FP"),
                           cases.count("FN"), cases.count("TN"))


# ---------------------------------------------------------------------------
# Whole-run classification study: recommend per scenario, realize the
# recommendation against the plant, classify.

@dataclass
class RunCase:
    """One classified scenario run."""

    w1_end: float
    coastdown_rate: float
    recommended_scram: bool
    predicted_max: float
    true_max: float
    label: str


@dataclass
class ConfusionStudy:
    cases: list
    matrix: ConfusionMatrix

    def to_csv(self) -> str:
        lines = ["w1_end,coastdown_rate,scram,predicted_max,true_max,label"]
        for c in self.cases:
            lines.append(f"{c.w1_end:.9g},{c.coastdown_rate:.9g},"
                         f"{int(c.recommended_scram)},{c.predicted_max:.9g},"
                         f"{c.true_max:.9g},{c.label}")
        return "\n".join(lines) + "\n" + self.matrix.to_csv()


def confusion_study(bundle, specs, config) -> ConfusionStudy:
    """Classify the recommendation pipeline over a batch of scenarios.

    Per scenario the pipeline diagnoses a simulated sensor window,
    ranks the strategy grid and commits to its recommendation.  An
    action's claim is checked against the plant's realized peak under
    that action; a scram's claim (nothing works) is checked against the
    realized peak under the strongest strategy available, with the most
    optimistic grid prediction standing in as the predicted value.
    """
    specs = list(specs)
    if not specs:
        raise EmptyInput("no scenarios")
    bundle.require_complete()
    best = ControlAction(bundle.bounds.w2_max, bundle.bounds.trip_min)
    i_pfcl = SERIES_COLUMNS.index("T_PFCL")
    i_hpp = SERIES_COLUMNS.index("T_HPP")
    i_t = SERIES_COLUMNS.index("t")
    k0 = int(round(bundle.decision_delay / ROW_DT))

    series, _ = simulate_batch(specs, [best] * len(specs), config,
                               arm_delay=bundle.decision_delay)
    chosen = []
    preds = []
    for i, spec in enumerate(specs):
        window = series[i, :k0 + 1]
        est = forward(bundle.diagnosis, window[:, i_hpp:i_hpp + 3])[:, 0]
        grads = gradient_features(window[:, i_t], est, bundle.grad_spans)
        actions = enumerate_strategies(bundle.bounds, bundle.grid_n,
                                       diagnosed=float(est[-1]))
        p = prognose_batch(bundle.prognosis, float(est[-1]), grads, actions)
        rec = recommend(assess(actions, p, bundle.limit))
        if rec.scram:
            chosen.append(None)
            preds.append(float(p.min()))
        else:
            chosen.append(rec.action)
            preds.append(rec.prediction)

    rerun_idx = [i for i, a in enumerate(chosen)
                 if a is not None and a != best]
    if rerun_idx:
        re_series, _ = simulate_batch([specs[i] for i in rerun_idx],
                                      [chosen[i] for i in rerun_idx], config,
                                      arm_delay=bundle.decision_delay)
    rerun_set = set(rerun_idx)
    cases = []
    j = 0
    for i, spec in enumerate(specs):
        if i in rerun_set:
            true_max = float(re_series[j, :, i_pfcl].max())
            j += 1
        else:
            true_max = float(series[i, :, i_pfcl].max())
        label = classify_case(true_max, preds[i], bundle.limit)
        cases.append(RunCase(spec.w1_end, spec.coastdown_rate,
                             chosen[i] is None, preds[i], true_max, label))
    return ConfusionStudy(cases, confusion_matrix([c.label for c in cases]))


# ---------------------------------------------------------------------------
# Kernel density estimation with a Gaussian kernel.

def scott_bandwidth(samples: np.ndarray) -> np.ndarray:
    """Diagonal bandwidth variances h_k^2 with h_k = sigma_k n^(-1/(d+4))."""
    x = np.atleast_2d(np.asarray(samples, dtype=float).T).T
    n, d = x.shape
    if n < 1:
        raise EmptyInput("no samples")
    sig = x.std(axis=0)
    if np.any(sig <= 0.0):
        raise DegenerateBandwidth("zero sample spread on some axis")
    h = sig * n ** (-1.0 / (d + 4))
    return h ** 2


def kde(samples, grid, bandwidth=None) -> np.ndarray:
    """Mean of Gaussian kernels centred on the samples, evaluated on grid.

    bandwidth is the kernel covariance: None for Scott's rule, a scalar
    or length-d vector of variances (diagonal), or a full d x d matrix.
    """
    x = np.atleast_2d(np.asarray(samples, dtype=float).T).T
    pts = np.atleast_2d(np.asarray(grid, dtype=float).T).T
    n, d = x.shape
    if n < 1:
        raise EmptyInput("no samples")
    if pts.shape[1] != d:
        raise GridMismatch(f"grid dim {pts.shape[1]} != sample dim {d}")
    if bandwidth is None:
        cov = np.diag(scott_bandwidth(x))
    else:
        bw = np.asarray(bandwidth, dtype=float)
        if bw.ndim == 0:
            cov = np.eye(d) * float(bw)
        elif bw.ndim == 1:
            if bw.shape[0] != d:
                raise DegenerateBandwidth("bandwidth vector length != dim")
            cov = np.diag(bw)
        else:
            cov = bw
    if cov.shape != (d, d) or not np.allclose(cov, cov.T):
        raise DegenerateBandwidth("bandwidth must be a symmetric d x d matrix")
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise DegenerateBandwidth("bandwidth not positive definite") from exc
    norm = (2.0 * np.pi) ** (-d / 2.0) / np.prod(np.diag(chol))
    out = np.empty(pts.shape[0])
    chunk = max(1, int(2e6) // max(n, 1))
    for lo in range(0, pts.shape[0], chunk):
        diff = pts[lo:lo + chunk, None, :] - x[None, :, :]
        z = np.linalg.solve(chol, diff.reshape(-1, d).T)
        q = np.sum(z * z, axis=0).reshape(diff.shape[0], n)
        out[lo:lo + chunk] = norm * np.exp(-0.5 * q).mean(axis=1)
    return out


def normalize_density(density: np.ndarray, cell_volume: float = 1.0) -> np.ndarray:
    """Rescale so that grid-sum times cell volume equals one."""
    d = np.asarray(density, dtype=float)
    total = d.sum() * cell_volume
    if total <= 0.0:
        raise EmptyInput("density sums to zero")
    return d / total


def sym_kl(p, q, floor: float = KL_FLOOR) -> float:
    """Symmetric divergence sum((p-q) log(p/q)) with zero cells floored.

    Term-wise non-negative, zero only for identical grids.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise GridMismatch(f"{p.shape} vs {q.shape}")
    pf = np.maximum(p, floor)
    qf = np.maximum(q, floor)
    return float(np.sum((pf - qf) * np.log(pf / qf)))


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValueError("need two equal-length 1-d sequences of length >= 2")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = np.sqrt(np.sum(dx * dx))
    sy = np.sqrt(np.sum(dy * dy))
    if sx == 0.0 or sy == 0.0:
        raise ZeroVariance("constant input sequence")
    # rounding can push |rho| a few ulp past 1
    return float(np.clip(np.sum(dx * dy) / (sx * sy), -1.0, 1.0))


# ---------------------------------------------------------------------------
# Coverage: how far a test store's feature distribution sits from the
# training store's, against how much the twin's error grows there.

@dataclass
class CoverageReport:
    bandwidth: np.ndarray       # kernel variances per feature axis
    grid: np.ndarray            # shared evaluation points (m, d)
    names: list
    divergence: list            # sym KL of each test store vs train
    test_rmse: list
    train_rmse: float
    correlation: float | None   # across (divergence, rmse) pairs

    def to_csv(self) -> str:
        lines = ["store,divergence,rmse"]
        lines.append(f"train,0,{self.train_rmse:.9g}")
        for n, d, r in zip(self.names, self.divergence, self.test_rmse):
            lines.append(f"{n},{d:.9g},{r:.9g}")
        rho = "undefined" if self.correlation is None else f"{self.correlation:.9g}"
        lines.append(f"pearson,{rho},")
        return "\n".join(lines) + "\n"


def _feature_sample(x: np.ndarray, max_rows: int, seed: int) -> np.ndarray:
    if x.shape[0] > max_rows:
        idx = np.random.default_rng(seed).permutation(x.shape[0])[:max_rows]
        x = x[np.sort(idx)]
    return x


def coverage_study(train_store: EpisodeStore, test_stores, trainer,
                   row_stride: int = 10, grid_per_dim: int = 10,
                   max_rows: int = 1500, seed: int = 0,
                   dataset=None) -> CoverageReport:
    """Train on one store, measure divergence and error on the others.

    trainer: callable(store) -> model.  test_stores is a list of
    (name, store) pairs; divergence is computed between Gaussian KDE
    densities on a shared grid spanning every store's features.
    dataset: callable(store, row_stride) -> (x, y, groups) choosing the
    feature space under study; the per-timestep estimator inputs by
    default.
    """
    stores = list(test_stores)
    if not stores:
        raise EmptyInput("no test stores")
    if dataset is None:
        dataset = diagnosis_dataset
    model = trainer(train_store)
    xt, yt, _ = dataset(train_store, row_stride)
    train_rmse = float(np.sqrt(np.mean((forward(model, xt)[:, 0] - yt) ** 2)))

    ref = _feature_sample(xt, max_rows, seed)
    bw = scott_bandwidth(ref)
    samples = [_feature_sample(dataset(s, row_stride)[0], max_rows, seed)
               for _, s in stores]
    alls = np.concatenate([ref] + samples)
    h = np.sqrt(bw)
    axes = [np.linspace(alls[:, k].min() - 2 * h[k], alls[:, k].max() + 2 * h[k],
                        grid_per_dim) for k in range(alls.shape[1])]
    cell = float(np.prod([a[1] - a[0] for a in axes]))
    mesh = np.meshgrid(*axes, indexing="ij")
    grid = np.stack([m.ravel() for m in mesh], axis=1)

    p_train = normalize_density(kde(ref, grid, bw), cell)
    names, divs, rmses = [], [], []
    for (name, store), feat in zip(stores, samples):
        p_test = normalize_density(kde(feat, grid, bw), cell)
        x, y, _ = dataset(store, row_stride)
        err = forward(model, x)[:, 0] - y
        names.append(name)
        divs.append(sym_kl(p_test, p_train))
        rmses.append(float(np.sqrt(np.mean(err ** 2))))
    try:
        rho = pearson(divs, rmses) if len(divs) >= 2 else None
    except ZeroVariance:
        rho = None
    return CoverageReport(bw, grid, names, divs, rmses, train_rmse, rho)


# ---------------------------------------------------------------------------
# Target-loss sweep: how the stop criterion moves train vs test error.

@dataclass
class SweepResult:
    values: list                # swept target losses
    train_rmse: list
    test_rmse: dict             # name -> list aligned with values
    tags: dict                  # name -> "interpolated" | "extrapolated"
    epochs: list

    def to_csv(self) -> str:
        names = list(self.test_rmse)
        head = "target,epochs,train_rmse," + ",".join(
            f"{n}({self.tags[n]})" for n in names)
        lines = [head]
        for i, v in enumerate(self.values):
            row = [f"{v:.9g}", str(self.epochs[i]), f"{self.train_rmse[i]:.9g}"]
            row += [f"{self.test_rmse[n][i]:.9g}" for n in names]
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"


def target_loss_sweep(values, x, y, groups, test_sets, layers,
                      hyper: TrainHyper) -> SweepResult:
    """Train once per target loss value and report errors everywhere.

    test_sets: {name: (x, y, tag)} with tag "interpolated" or
    "extrapolated" describing the set's relation to the training data.
    """
    values = list(values)
    if not values:
        raise EmptyInput("no sweep values")
    y2 = np.asarray(y, dtype=float).reshape(len(x), -1)
    out_train, out_epochs = [], []
    out_test = {name: [] for name in test_sets}
    for v in values:
        model, report = train(x, y2, layers, replace(hyper, target_mse=float(v)),
                              groups=groups)
        out_train.append(report.train_rmse)
        out_epochs.append(report.epochs_used)
        for name, (tx, ty, _) in test_sets.items():
            pred = forward(model, tx)[:, 0]
            out_test[name].append(float(np.sqrt(np.mean(
                (pred - np.asarray(ty, dtype=float)) ** 2))))
    tags = {name: tag for name, (_, _, tag) in test_sets.items()}
    return SweepResult(values, out_train, out_test, tags, out_epochs)


# ---------------------------------------------------------------------------
# Sensor-failure replay: time-resolved diagnosis error when channels
# drop out partway through an episode.

@dataclass
class FailureTrace:
    label: str
    channels: tuple
    fail_start: float           # s after episode start
    times: np.ndarray           # s after episode start
    errors: np.ndarray          # diagnosed - true, degC
    scram: bool                 # all channels gone: diagnosis impossible


def sensor_failure_study(model: NeuralNetModel, record, failures,
                         fail_start: float = 5.0,
                         row_stride: int = 1) -> list:
    i_t = SERIES_COLUMNS.index("t")
    i_hpp = SERIES_COLUMNS.index("T_HPP")
    i_pfcl = SERIES_COLUMNS.index("T_PFCL")
    rows = record.series[::row_stride]
    t_rel = rows[:, i_t] - rows[0, i_t]
    sensors = rows[:, i_hpp:i_hpp + 3]
    true = rows[:, i_pfcl]
    out = []
    for channels in failures:
        channels = tuple(sorted(int(c) for c in channels))
        label = "none" if not channels else "+".join(CHANNELS[c] for c in channels)
        if len(channels) >= len(CHANNELS):
            out.append(FailureTrace(label, channels, fail_start,
                                    np.empty(0), np.empty(0), True))
            continue
        x = sensors.copy()
        after = t_rel >= fail_start
        if channels:
            keep = [k for k in range(len(CHANNELS)) if k not in channels]
            fill = x[:, keep].mean(axis=1)
            for c in channels:
                x[after, c] = fill[after]
        pred = forward(model, x)[:, 0]
        out.append(FailureTrace(label, channels, fail_start,
                                t_rel.copy(), pred - true, False))
    return out


# ---------------------------------------------------------------------------
# Error surface: diagnosis error over every episode and timestep.

@dataclass
class ErrorSurface:
    episode_ids: np.ndarray
    times: np.ndarray           # s after episode start, shared by episodes
    errors: np.ndarray          # (n_episodes, n_times) diagnosed - true
    rmse_per_episode: np.ndarray
    max_rmse: float


def error_surface(model: NeuralNetModel, store: EpisodeStore,
                  row_stride: int = 1) -> ErrorSurface:
    i_t = SERIES_COLUMNS.index("t")
    i_hpp = SERIES_COLUMNS.index("T_HPP")
    i_pfcl = SERIES_COLUMNS.index("T_PFCL")
    if not store.records:
        raise EmptyInput("empty store")
    rows0 = store.records[0].series[::row_stride]
    times = rows0[:, i_t] - rows0[0, i_t]
    ids, errs = [], []
    for rec in store.records:
        rows = rec.series[::row_stride]
        pred = forward(model, rows[:, i_hpp:i_hpp + 3])[:, 0]
        errs.append(pred - rows[:, i_pfcl])
        ids.append(rec.episode_id)
    errors = np.stack(errs)
    rmse = np.sqrt(np.mean(errors ** 2, axis=1))
    return ErrorSurface(np.array(ids), times, errors, rmse, float(rmse.max()))
