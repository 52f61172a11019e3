"""Error metrics, correlation, duration sweeps and significance tests."""

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import (InvalidArgumentError, UnbalancedDesignError,
                         UndefinedCorrelationError)

REPORT_CLAMP = 2.0
SWEEP_STEP = 0.2
SWEEP_MAX = 8.0

# Published full-scale results for annotating desk-scale reports.
REFERENCE_ANNOTATIONS = {
    "noise-aware seen+real avg": {"rmse_s": 0.160, "pearson": 0.907},
    "noise-aware real-world avg": {"rmse_s": 0.154},
}


# --- point metrics --------------------------------------------------------------
def estimation_error(t60, t60_hat):
    """Signed error ``t60 - t60_hat``; positive means underestimation."""
    return np.asarray(t60, dtype=float) - np.asarray(t60_hat, dtype=float)


def _pair_arrays(t60, t60_hat, min_n=1):
    a = np.asarray(t60, dtype=float).ravel()
    b = np.asarray(t60_hat, dtype=float).ravel()
    if a.shape != b.shape:
        raise InvalidArgumentError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < min_n:
        raise InvalidArgumentError(f"need at least {min_n} pairs, got {a.size}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise InvalidArgumentError("metrics need finite values")
    return a, b


def rmse(t60, t60_hat):
    """Root mean squared estimation error in seconds."""
    a, b = _pair_arrays(t60, t60_hat)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def pearson(t60, t60_hat):
    """Product-moment correlation between ground truth and estimates."""
    a, b = _pair_arrays(t60, t60_hat, min_n=2)
    da, db = a - a.mean(), b - b.mean()
    sa, sb = np.sqrt(np.sum(da * da)), np.sqrt(np.sum(db * db))
    if sa == 0 or sb == 0:
        raise UndefinedCorrelationError("correlation is undefined for a constant series")
    return float(np.clip(np.sum(da * db) / (sa * sb), -1.0, 1.0))


@dataclass
class EvalBatch:
    """Ground truth/estimate pairs with optional per-pair grouping labels."""

    t60: np.ndarray
    estimate: np.ndarray
    groups: dict = field(default_factory=dict)

    def __post_init__(self):
        self.t60, self.estimate = _pair_arrays(self.t60, self.estimate)
        for k, v in self.groups.items():
            if len(v) != self.t60.size:
                raise InvalidArgumentError(f"group {k!r} has {len(v)} labels for "
                                           f"{self.t60.size} pairs")

    def __len__(self):
        return self.t60.size

    def rmse(self):
        return rmse(self.t60, self.estimate)

    def pearson(self):
        return pearson(self.t60, self.estimate)

    def errors(self):
        return estimation_error(self.t60, self.estimate)


# --- distributions --------------------------------------------------------------
def _betacf(a, b, x, max_iter=500, eps=3e-16):
    """Continued fraction for the incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError(f"incomplete beta did not converge (a={a}, b={b}, x={x})")


def betainc_reg(a, b, x):
    """Regularized incomplete beta ``I_x(a, b)``."""
    if a <= 0 or b <= 0:
        raise InvalidArgumentError("betainc_reg needs a, b > 0")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


def f_sf(f, d1, d2):
    """Upper tail ``P(F > f)`` of the F(d1, d2) distribution."""
    if not np.isfinite(f):
        return 0.0 if f > 0 else 1.0
    if f <= 0:
        return 1.0
    return betainc_reg(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f))


def t_sf_two_sided(t, df):
    """``P(|T| > |t|)`` for Student's t with ``df`` degrees of freedom."""
    if not np.isfinite(t):
        return 0.0
    return betainc_reg(df / 2.0, 0.5, df / (df + t * t))


# --- ANOVA ----------------------------------------------------------------------
@dataclass
class AnovaRow:
    source: str
    ss: float
    df: int
    ms: float
    f: float
    p: float


@dataclass
class AnovaTable:
    rows: list
    grand_mean: float
    ss_total: float
    degenerate: bool = False

    def row(self, source):
        for r in self.rows:
            if r.source == source:
                return r
        raise KeyError(source)

    @property
    def mse(self):
        return self.row("within").ms

    @property
    def df_error(self):
        return self.row("within").df

    def to_dict(self):
        return {"rows": [r.__dict__ for r in self.rows], "grand_mean": self.grand_mean,
                "ss_total": self.ss_total, "degenerate": self.degenerate}


def _effect_columns(codes, n_levels):
    # sum-to-zero coding: level k -> e_k, last level -> -1 everywhere
    cols = np.zeros((codes.size, n_levels - 1))
    for k in range(n_levels - 1):
        cols[codes == k, k] = 1.0
    cols[codes == n_levels - 1, :] = -1.0
    return cols


def _rss(X, y):
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    r = y - X @ beta
    return float(r @ r)


def anova_two_way(values, factor_a, factor_b, empty_cells="error", names=("A", "B")):
    """Fixed-effects two-way ANOVA with interaction.

    Sums of squares are type III (each term adjusted for all others, using
    sum-to-zero coding), which reduces to the classical decomposition on a
    balanced design.

    Parameters
    ----------
    values : array_like
        One observation per entry.
    factor_a, factor_b : array_like
        Level labels per observation; each factor needs two or more levels.
    empty_cells : {"error", "additive"}
        With ``"additive"`` a design with empty cells is analysed without
        the interaction term instead of raising.

    Returns
    -------
    AnovaTable
        Rows ``A``, ``B``, ``A x B`` (absent in the additive fallback) and
        ``within``. ``degenerate`` is set when the within-cell variance is
        zero, in which case F is reported as NaN for terms with zero SS and
        infinity otherwise.
    """
    y = np.asarray(values, dtype=float).ravel()
    a_lab = np.asarray(factor_a).ravel()
    b_lab = np.asarray(factor_b).ravel()
    if not (y.size == a_lab.size == b_lab.size):
        raise InvalidArgumentError("values and factor labels must have equal lengths")
    if not np.all(np.isfinite(y)):
        raise InvalidArgumentError("ANOVA needs finite values")
    a_levels, a_codes = np.unique(a_lab, return_inverse=True)
    b_levels, b_codes = np.unique(b_lab, return_inverse=True)
    if a_levels.size < 2 or b_levels.size < 2:
        raise InvalidArgumentError("each factor needs at least two levels")
    counts = np.zeros((a_levels.size, b_levels.size), dtype=int)
    np.add.at(counts, (a_codes, b_codes), 1)
    interaction = True
    if np.any(counts == 0):
        if empty_cells != "additive":
            raise UnbalancedDesignError(
                f"{int(np.sum(counts == 0))} empty cell(s) in the "
                f"{a_levels.size}x{b_levels.size} design")
        interaction = False
    A = _effect_columns(a_codes, a_levels.size)
    B = _effect_columns(b_codes, b_levels.size)
    AB = (np.einsum("ni,nj->nij", A, B).reshape(y.size, -1) if interaction
          else np.zeros((y.size, 0)))
    ones = np.ones((y.size, 1))
    full = np.hstack([ones, A, B, AB])
    rss_full = _rss(full, y)
    df_within = y.size - np.linalg.matrix_rank(full)
    if df_within < 1:
        raise UnbalancedDesignError("no residual degrees of freedom (one value per cell)")
    terms = [(names[0], A, np.hstack([ones, B, AB])),
             (names[1], B, np.hstack([ones, A, AB]))]
    if interaction:
        terms.append((f"{names[0]} x {names[1]}", AB, np.hstack([ones, A, B])))
    grand = float(y.mean())
    ss_total = float(np.sum((y - grand) ** 2))
    mse = rss_full / df_within
    degenerate = mse <= 1e-14 * max(ss_total, 1e-300) or rss_full == 0.0
    rows = []
    for name, cols, reduced in terms:
        ss = max(_rss(reduced, y) - rss_full, 0.0)
        df = cols.shape[1]
        ms = ss / df
        if degenerate:
            f = float("nan") if ss <= 1e-12 * max(ss_total, 1e-300) else float("inf")
            p = float("nan") if np.isnan(f) else 0.0
        else:
            f = ms / mse
            p = f_sf(f, df, df_within)
        rows.append(AnovaRow(name, ss, df, ms, f, p))
    rows.append(AnovaRow("within", rss_full, int(df_within), mse, float("nan"), float("nan")))
    return AnovaTable(rows, grand, ss_total, bool(degenerate))


@dataclass
class LsdResult:
    labels: list
    means: np.ndarray
    diff: np.ndarray
    p: np.ndarray

    def significant(self, level=0.05):
        return self.p < level


def fisher_lsd(values, groups, mse, df_error):
    """Pairwise least-significant-difference tests with a pooled error.

    ``mse`` and ``df_error`` come from a preceding ANOVA. Returns a
    symmetric p-value matrix with ones on the diagonal.
    """
    y = np.asarray(values, dtype=float).ravel()
    g = np.asarray(groups).ravel()
    if y.size != g.size:
        raise InvalidArgumentError("values and groups must have equal lengths")
    labels, codes = np.unique(g, return_inverse=True)
    if labels.size < 2:
        raise InvalidArgumentError("Fisher LSD needs at least two groups")
    if mse < 0 or df_error < 1:
        raise InvalidArgumentError("mse must be >= 0 and df_error >= 1")
    k = labels.size
    n = np.bincount(codes, minlength=k).astype(float)
    means = np.bincount(codes, weights=y, minlength=k) / n
    diff = means[:, None] - means[None, :]
    p = np.ones((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            se = math.sqrt(mse * (1.0 / n[i] + 1.0 / n[j]))
            if se == 0:
                pij = 1.0 if diff[i, j] == 0 else 0.0
            else:
                pij = t_sf_two_sided(diff[i, j] / se, df_error)
            p[i, j] = p[j, i] = pij
    return LsdResult(list(labels), means, diff, p)


# --- duration sweep --------------------------------------------------------------
def sweep_durations(step=SWEEP_STEP, max_duration=SWEEP_MAX):
    n = int(round(max_duration / step))
    return [round(step * (i + 1), 10) for i in range(n)]


def frames_for_duration(duration, sample_rate=16000, window=320, hop=160):
    n = int(round(duration * sample_rate))
    return (n - window) // hop + 1 if n >= window else 0


def duration_sweep(frame_fn, samples, sample_rate=16000, step=SWEEP_STEP,
                   max_duration=SWEEP_MAX, mode="prefix"):
    """Estimates for growing prefixes of one utterance.

    Parameters
    ----------
    frame_fn : callable
        Maps a waveform (ndarray) to its per-frame T60 track.
    samples : ndarray
        At least ``max_duration`` seconds at ``sample_rate``.
    mode : {"prefix", "full"}
        ``"prefix"`` runs ``frame_fn`` on each prefix and keeps its last
        frame; ``"full"`` runs once and reads the frame where each prefix
        ends, which is identical for a causal model.

    Returns
    -------
    ndarray of shape (n_points, 2)
        Columns are duration (s) and estimate (s).
    """
    samples = np.asarray(samples, dtype=float)
    need = int(round(max_duration * sample_rate))
    if samples.ndim != 1 or samples.shape[0] < need:
        raise InvalidArgumentError(
            f"duration sweep needs at least {max_duration} s of mono audio, got "
            f"{samples.shape[0] / sample_rate:.3f} s")
    durations = sweep_durations(step, max_duration)
    out = np.zeros((len(durations), 2))
    full = np.asarray(frame_fn(samples[:need])) if mode == "full" else None
    for i, d in enumerate(durations):
        n_frames = frames_for_duration(d, sample_rate)
        if n_frames < 1:
            raise InvalidArgumentError(f"prefix of {d} s is shorter than one frame")
        if mode == "full":
            est = full[n_frames - 1]
        else:
            est = np.asarray(frame_fn(samples[:int(round(d * sample_rate))]))[-1]
        out[i] = (d, float(est))
    return out


# --- reporting --------------------------------------------------------------------
def five_number_summary(values):
    """Minimum, first quartile, median, third quartile, maximum."""
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise InvalidArgumentError("five-number summary of an empty set")
    q = np.percentile(v, [0, 25, 50, 75, 100])
    return dict(zip(("min", "q1", "median", "q3", "max"), (float(x) for x in q)))


def report(records, snrs=None, clamp=REPORT_CLAMP):
    """RMSE and correlation per (method, condition) row and SNR column.

    Parameters
    ----------
    records : iterable of dict
        Keys ``method``, ``condition``, ``snr``, ``t60``, ``estimate``.
    snrs : sequence, optional
        Column order; defaults to the sorted SNRs present.
    clamp : float or None
        Estimates are clipped to ``[0, clamp]`` before scoring.

    Returns
    -------
    list of dict
        One row per (method, condition) with ``rmse_<snr>``, ``pearson_<snr>``
        and the unweighted across-SNR means ``rmse_avg`` and ``pearson_avg``.
    """
    records = list(records)
    if not records:
        raise InvalidArgumentError("report needs at least one record")
    snrs = sorted({float(r["snr"]) for r in records}) if snrs is None else [float(s) for s in snrs]
    keys = sorted({(str(r["method"]), str(r.get("condition", "all"))) for r in records})
    rows = []
    for method, cond in keys:
        row = {"method": method, "condition": cond}
        rm, pr = [], []
        for snr in snrs:
            sel = [r for r in records if str(r["method"]) == method
                   and str(r.get("condition", "all")) == cond and float(r["snr"]) == snr]
            if not sel:
                row[f"rmse_{snr:g}"] = row[f"pearson_{snr:g}"] = None
                continue
            t = np.array([r["t60"] for r in sel], dtype=float)
            e = np.array([r["estimate"] for r in sel], dtype=float)
            if clamp is not None:
                e = np.clip(e, 0.0, clamp)
            row[f"rmse_{snr:g}"] = rmse(t, e)
            rm.append(row[f"rmse_{snr:g}"])
            try:
                row[f"pearson_{snr:g}"] = pearson(t, e)
                pr.append(row[f"pearson_{snr:g}"])
            except (UndefinedCorrelationError, InvalidArgumentError):
                row[f"pearson_{snr:g}"] = None
        row["rmse_avg"] = float(np.mean(rm)) if rm else None
        row["pearson_avg"] = float(np.mean(pr)) if pr else None
        rows.append(row)
    return rows


def write_report(rows, csv_path=None, json_path=None, annotations=True):
    columns = list(rows[0].keys())
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=columns)
            w.writeheader()
            for r in rows:
                w.writerow({k: ("" if v is None else (f"{v:.6f}" if isinstance(v, float) else v))
                            for k, v in r.items()})
    if json_path is not None:
        doc = {"rows": rows}
        if annotations:
            doc["reference"] = REFERENCE_ANNOTATIONS
        Path(json_path).write_text(json.dumps(doc, indent=2))


def write_gnuplot(path, columns, header=None):
    """Whitespace-separated columns with an optional ``#`` header line."""
    data = np.column_stack([np.asarray(c, dtype=float) for c in columns])
    with open(path, "w") as fh:
        if header:
            fh.write("# " + " ".join(header) + "\n")
        for row in data:
            fh.write(" ".join(f"{v:.6f}" for v in row) + "\n")


def write_sweep_csv(path, sweep):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["duration_s", "t60_estimate_s"])
        for d, e in sweep:
            w.writerow([f"{d:.1f}", f"{e:.6f}"])
