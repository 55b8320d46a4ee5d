"""Study configs, dispatch to the numerical modules, and CSV output."""

from __future__ import annotations

import dataclasses
import io
import math
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InvariantViolation
from .expansion import expansion_tree, qhat_matrix
from .matrix import MatrixSemigroup, expm, tv_distance_matrix
from .order_params import GridSpec, OrderParams, recursion_table
from .random_grid import weak_error_study
from .report import ConvergenceReport, ConvergenceRow, DegenerateFitError, fit_slope
from .scheme import (
    SchemeSemigroup,
    brownian_scheme,
    ellipticity_floor,
    gaussian_noise,
    make_chain_scheme,
    make_test_function,
    moment_estimate,
    ou_exact_for,
    ou_oracle,
    ou_scheme,
    psi_norm,
    random_cloud,
    rademacher_noise,
    uniform_noise,
    weak_expectation,
)
from .splitting import (
    build_split,
    bump_scaling_slopes,
    convolved_density,
    ks_two_sample,
    localization_bounds,
    localization_probabilities,
    regularized_expectation,
)

KINDS = (
    "params",
    "expand",
    "matrix-convergence",
    "sde-base-error",
    "sde-weak-error",
    "tv-study",
    "density-compare",
    "splitting-check",
    "hypothesis-report",
)

OUTPUT_DIR_ENV = "TVBOOST_OUTPUT_DIR"


@dataclass
class StudyConfig:
    kind: str = "params"
    alpha: int = 1
    beta: int = 2
    nu: list = field(default_factory=lambda: [1])
    n: list = field(default_factory=lambda: [2, 4, 8, 16])
    T: float = 1.0
    level: int = 0
    max_depth: int = -1
    generator: list = field(default_factory=lambda: ["-1,1", "1,-1"])
    scheme: str = "ou"
    a: float = 1.0
    sigma: float = 1.0
    x0: float = 1.0
    function: str = "x2"
    samples: int = 100_000
    seed: int = 0
    workers: int = 1
    theta: float = 1.0
    grid: str = "-2:2:81"
    noise: str = "gaussian"
    z_star: float = 0.0
    r_star: float = 1.0
    t: float = 1.0
    steps: list = field(default_factory=lambda: [8, 16, 32])
    psi_norm: float | None = None
    out: str = ""

    # keys that repeat, one value per line
    LISTS = ("nu", "n", "generator", "steps")

    def validate(self) -> "StudyConfig":
        if self.kind not in KINDS:
            raise ConfigError(f"unknown study kind {self.kind!r}")
        if not self.nu or not self.n:
            raise ConfigError("nu and n lists must be nonempty")
        if any(v < 0 for v in self.nu) or any(v < 2 for v in self.n):
            raise ConfigError("need nu >= 0 and n >= 2")
        if self.samples <= 0 or self.workers < 1:
            raise ConfigError("samples and workers must be positive")
        if not self.T > 0:
            raise ConfigError("T must be positive")
        return self

    def serialize(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            val = getattr(self, f.name)
            if f.name in self.LISTS:
                lines += [f"{f.name}={_fmt(v)}" for v in val]
            else:
                lines.append(f"{f.name}={_fmt(val)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str, base: "StudyConfig | None" = None) -> "StudyConfig":
        """Flat ``key=value`` lines; list keys repeat. Keys present override ``base``."""
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = dataclasses.asdict(base) if base is not None else {}
        lists: dict = {}
        for num, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"line {num}: expected key=value, got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {num}: unknown key {key!r}")
            try:
                if key in cls.LISTS:
                    lists.setdefault(key, []).extend(_parse_list_item(key, val))
                else:
                    values[key] = _coerce(types[key], val)
            except ValueError as exc:
                raise ConfigError(f"line {num}: bad value for {key}: {val!r}") from exc
        values.update(lists)
        return cls(**values).validate()

    def params(self, nu: int, n: int) -> OrderParams:
        return OrderParams(self.alpha, self.beta, nu, GridSpec(self.T, n))


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(typ, val: str):
    typ = str(typ)
    if "None" in typ:
        return None if val == "" else float(val)
    if typ == "int":
        return int(val)
    if typ == "float":
        return float(val)
    return val


def _parse_list_item(key, val):
    if key == "generator":
        return [val]
    return [int(v) for v in val.split(",") if v.strip()]


# --- builders -------------------------------------------------------------


def generator_matrix(cfg: StudyConfig) -> np.ndarray:
    try:
        A = np.array([[float(x) for x in row.split(",")] for row in cfg.generator])
    except ValueError as exc:
        raise ConfigError("generator rows must be comma-separated numbers") from exc
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ConfigError("generator must be square")
    return A


def build_noise(name: str):
    if name == "gaussian":
        return gaussian_noise(1)
    if name == "uniform":
        return uniform_noise(1, 1.0)
    if name == "rademacher":
        return rademacher_noise(1)
    raise ConfigError(f"unknown noise {name!r}")


def build_scheme(cfg: StudyConfig):
    """``(scheme, noise, f, exact)`` for the configured backend and test function."""
    if cfg.scheme == "ou":
        if not cfg.a > 0:
            raise ConfigError("OU rate a must be positive")
        f = make_test_function(cfg.function)
        return ou_scheme(cfg.a, cfg.sigma), build_noise(cfg.noise), f, ou_exact_for(
            cfg.function, cfg.a, cfg.sigma, cfg.x0, cfg.T
        )
    if cfg.scheme == "brownian":
        f = make_test_function(cfg.function)
        # Brownian motion is the OU family's a -> 0 limit; use the Gaussian law directly
        exact = _brownian_exact(cfg.function, cfg.x0, cfg.T)
        return brownian_scheme(1), build_noise(cfg.noise), f, exact
    if cfg.scheme == "chain":
        A = generator_matrix(cfg)
        scheme, noise = make_chain_scheme(A)
        target = int(cfg.function.split(":", 1)[1]) if cfg.function.startswith("state:") else None
        if target is None:
            raise ConfigError("chain studies take function=state:K")
        x0 = int(cfg.x0)
        exact = float(expm(cfg.T * A)[x0, target])
        return scheme, noise, (lambda X: (X[:, 0] == target).astype(float)), exact
    raise ConfigError(f"unknown scheme {cfg.scheme!r}")


def _brownian_exact(spec: str, x0: float, T: float) -> float:
    from scipy import stats

    if spec == "x":
        return x0
    if spec in ("poly", "x2"):
        return T + x0 * x0
    if spec == "cos":
        return math.cos(x0) * math.exp(-T / 2)
    if spec.startswith("indicator"):
        K = float(spec.split(":", 1)[1]) if ":" in spec else 0.0
        return float(stats.norm.cdf(K, loc=x0, scale=math.sqrt(T)))
    raise ConfigError(f"unknown test function {spec!r}")


def parse_grid(spec: str) -> np.ndarray:
    try:
        lo, hi, k = spec.split(":")
        return np.linspace(float(lo), float(hi), int(k))
    except ValueError as exc:
        raise ConfigError(f"grid must read lo:hi:steps, got {spec!r}") from exc


# --- studies ----------------------------------------------------------------


@dataclass
class StudyResult:
    columns: list
    rows: list
    notes: list = field(default_factory=list)


def _slope_or_nan(rows):
    try:
        return fit_slope(rows)
    except DegenerateFitError:
        return float("nan"), float("nan")


def study_params(cfg: StudyConfig) -> StudyResult:
    from .order_params import GridTooCoarseError

    rows = []
    for nu in cfg.nu:
        p = cfg.params(nu, cfg.n[0])
        for r in recursion_table(nu, cfg.alpha, cfg.beta):
            q = r["q_i"] if r["q_i"] is not None else ""
            rows.append([nu, "node", r["level"], r["nu"], r["i"], r["m"], q, "", r["kappa"]])
        rows.append([nu, "q_nu", "", "", "", "", "", "", p.q_nu])
        rows.append([nu, "l_max", "", "", "", "", "", "", p.l_max])
        for n in sorted(cfg.n):
            try:
                val = cfg.params(nu, n).t_nu()
            except GridTooCoarseError:
                val = "too_coarse"
            rows.append([nu, "t_nu", "", "", "", "", "", n, val])
    return StudyResult(["target_nu", "row", "level", "nu", "i", "m", "q_i", "n", "value"], rows)


def study_expand(cfg: StudyConfig) -> StudyResult:
    rows = []
    depth = None if cfg.max_depth < 0 else cfg.max_depth
    for nu in cfg.nu:
        p = cfg.params(nu, cfg.n[0])
        for d, term in expansion_tree(p, depth, cfg.level):
            rows.append([nu, d, "+" if term.sign > 0 else "-", term.kind, " ".join(a.label() for a in term.atoms)])
    return StudyResult(["nu", "depth", "sign", "kind", "atoms"], rows)


def study_matrix(cfg: StudyConfig) -> StudyResult:
    A = generator_matrix(cfg)
    exact = expm(cfg.T * A)
    rows = []
    for nu in cfg.nu:
        errs = []
        for n in sorted(cfg.n):
            Q = qhat_matrix(cfg.params(nu, n), MatrixSemigroup(A))
            errs.append((n, tv_distance_matrix(exact, Q)))
        slope, _ = _slope_or_nan(errs)
        rows += [[n, nu, e, slope] for n, e in errs]
    return StudyResult(["n", "nu", "tv_error", "fitted_slope"], rows)


def _report_rows(report: ConvergenceReport, nu=None):
    """One row per ``n``, then footer rows carrying the fit in the estimate column."""
    rows = [[r.n, r.nu, r.estimate, r.stderr, r.exact, r.error, int(r.usable), r.work_per_sample]
            for r in report.rows]
    nu = report.rows[0].nu if nu is None else nu
    rows.append(["fitted_slope", nu, report.slope, "", "", "", "", ""])
    rows.append(["slope_ci", nu, report.slope_ci, "", "", "", "", ""])
    rows.append(["noise_dominated", nu, int(report.noise_dominated), "", "", "", "", ""])
    return rows


REPORT_COLUMNS = ["n", "nu", "estimate", "stderr", "exact", "abs_error", "usable", "work_per_sample"]


def study_base_error(cfg: StudyConfig) -> StudyResult:
    scheme, noise, f, exact = build_scheme(cfg)
    rows = []
    for n in sorted(cfg.n):
        sg = SchemeSemigroup(scheme, noise, GridSpec(cfg.T, n, 1))
        est = weak_expectation(sg, [cfg.x0], cfg.T, f, cfg.samples, cfg.seed + n, cfg.workers)
        rows.append(ConvergenceRow(n, 1, est.mean, est.stderr, exact, est.work_per_sample))
    return StudyResult(REPORT_COLUMNS, _report_rows(ConvergenceReport(rows).fit()))


def study_weak_error(cfg: StudyConfig) -> StudyResult:
    scheme, noise, f, exact = build_scheme(cfg)
    rows, notes = [], []
    for nu in cfg.nu:
        rep = weak_error_study(cfg.params(nu, cfg.n[0]), scheme, noise, [cfg.x0], f, exact,
                               cfg.n, cfg.samples, cfg.seed, cfg.workers)
        if rep.noise_dominated:
            notes.append(f"nu={nu}: fewer than two usable rows, slope not reported")
        rows += _report_rows(rep)
    return StudyResult(REPORT_COLUMNS, rows, notes)


def study_density(cfg: StudyConfig) -> StudyResult:
    if cfg.scheme not in ("ou", "brownian"):
        raise ConfigError("density-compare supports the ou and brownian schemes")
    scheme, noise, _, _ = build_scheme(dataclasses.replace(cfg, function="x"))
    y = parse_grid(cfg.grid)
    if cfg.scheme == "ou":
        exact = ou_oracle(cfg.a, cfg.sigma, cfg.x0, cfg.T, "density_at", y)
    else:
        exact = np.exp(-((y - cfg.x0) ** 2) / (2 * cfg.T)) / math.sqrt(2 * math.pi * cfg.T)
    rows = []
    for nu in cfg.nu:
        for n in sorted(cfg.n):
            p = cfg.params(nu, n)
            sg = SchemeSemigroup(scheme, noise, p.grid)
            est = convolved_density(sg, cfg.theta, [cfg.x0], cfg.T, y, cfg.samples, cfg.seed + n,
                                    cfg.workers, params=p)
            err = np.abs(est.mean - exact)
            rows += [[n, nu, "point", yy, ph, pe, e, se] for yy, ph, pe, e, se in zip(y, est.mean, exact, err, est.stderr)]
            j = int(err.argmax())
            rows.append([n, nu, "sup", y[j], est.mean[j], exact[j], err[j], est.stderr[j]])
    return StudyResult(["n", "nu", "row", "y", "p_hat", "p_exact", "abs_err", "stderr"], rows)


def splitting_checks(cfg: StudyConfig) -> StudyResult:
    """The five splitting invariants as ``(check, value, threshold, passed)`` rows."""
    noise = build_noise(cfg.noise)
    delta = cfg.t / cfg.steps[0]
    split = build_split(noise, [cfg.z_star], cfg.r_star, delta)
    rows = []

    ks = []
    for s in range(3):
        rng = np.random.default_rng([cfg.seed, s])
        _, y = split.sample(rng, cfg.samples)
        direct = math.sqrt(delta) * noise.sample(rng, cfg.samples)
        ks.append(ks_two_sample(y, direct))
    stat, crit = max(k[0] for k in ks), ks[0][1]
    rows.append(["law_equality_ks", stat, crit, stat < crit])

    dev = max(abs(s + q * p) for (q, p), s in bump_scaling_slopes().items())
    rows.append(["bump_scaling_slope_dev", dev, 0.2, dev <= 0.2])

    worst = -math.inf
    for k in cfg.steps:
        sp = split.with_delta(cfg.t / k)
        emp = localization_probabilities(sp, cfg.t, cfg.samples, cfg.seed + k, cfg.workers)
        bound = localization_bounds(sp, cfg.t)
        worst = max(worst, emp["not_lambda"] - bound["not_lambda"] - 3 * emp["not_lambda_se"])
    rows.append(["lambda_tail_excess", worst, 0.0, worst <= 0])

    rng = np.random.default_rng([cfg.seed, 99])
    acc = split.residual_acceptance(noise.sample(rng, max(cfg.samples, 10**6)))
    rows.append(["v_acceptance_min", float(acc.min()), 0.0, bool(acc.min() >= 0)])

    sg = SchemeSemigroup(ou_scheme(cfg.a, cfg.sigma), noise, GridSpec(cfg.t, cfg.steps[0], 1))
    est = regularized_expectation(sg, split, [cfg.x0], cfg.t, lambda X: np.ones(X.shape[0]),
                                  min(cfg.samples, 20_000), cfg.seed, cfg.workers)
    rows.append(["self_normalized_one", abs(est.mean - 1.0), 0.0, est.mean == 1.0])
    return StudyResult(["check", "value", "threshold", "passed"], [[c, v, t, int(bool(p))] for c, v, t, p in rows])


@dataclass
class HypothesisInputs:
    psi_norm: float | None
    ellipticity: float | None
    m8: float | None
    m_star: float | None
    dim_noise: int


def _tangent_lhs(h: HypothesisInputs, delta: float, t: float) -> float:
    return 3 * delta**0.25 * h.psi_norm + delta * h.m8 + math.exp(-h.m_star**2 * t / (2 * delta))


def _ellipt_rhs(h: HypothesisInputs) -> float:
    N = h.dim_noise
    return 8 * (N**3 + N**2 + 1) / h.ellipticity * h.psi_norm**2


def hypothesis_report(scheme, noise, T: float, n_list, t: float | None = None, psi: float | None = None,
                      ellipticity: float | None = None, m8: float | None = None, m_star: float | None = None,
                      seed: int = 0, max_n: int = 10**12) -> dict:
    """Evaluate the tangent-flow and ellipticity thresholds per ``n`` and the least passing ``n``.

    Missing inputs are measured: ``psi`` on a random cloud, the ellipticity
    floor, ``M_8`` by Monte Carlo and ``m*`` by the Gaussian-ball split. Any
    input that cannot be measured is reported as unknown.
    """
    t = T if t is None else t
    notes = []
    cloud = random_cloud(scheme, 256, seed)
    if psi is None:
        psi = psi_norm(scheme, 3, cloud)
    if ellipticity is None:
        ellipticity = ellipticity_floor(scheme, cloud)
    if m8 is None:
        m8 = moment_estimate(noise, 8, 200_000, seed).mean
    if m_star is None:
        try:
            m_star = build_split(noise, np.zeros(noise.dim), 1.0, T / max(n_list)).m_star
        except ValueError:
            m_star = None
            notes.append("m* unknown: noise has no Lebesgue lower bound")
    h = HypothesisInputs(psi, ellipticity, m8, m_star, scheme.dim_z)
    ellipt_ok = ellipticity > 0
    if not ellipt_ok:
        notes.append("ellipticity violated, Proposition inapplicable")

    def passes(n):
        d = T / n
        tan = _tangent_lhs(h, d, t) if m_star is not None else float("nan")
        rhs = _ellipt_rhs(h) if ellipt_ok else float("inf")
        return tan, tan <= 0.5, d**-0.5, rhs, d**-0.5 >= rhs

    rows = []
    for n in sorted(n_list):
        tan, tan_ok, lhs, rhs, e_ok = passes(n)
        rows.append(dict(n=n, t=t, delta=T / n, tangent_lhs=tan, tangent_pass=tan_ok,
                         ellipt_lhs=lhs, ellipt_rhs=rhs, ellipt_pass=e_ok))
    minimal = None
    if ellipt_ok and m_star is not None:
        hi = 2
        while not all(passes(hi)[i] for i in (1, 4)):
            hi *= 2
            if hi > max_n:
                hi = None
                break
        if hi is not None:
            lo = max(hi // 2, 1)
            while hi - lo > 1:
                mid = (lo + hi) // 2
                if all(passes(mid)[i] for i in (1, 4)):
                    hi = mid
                else:
                    lo = mid
            minimal = hi
    return dict(inputs=h, rows=rows, minimal_n=minimal, notes=notes)


def study_hypothesis(cfg: StudyConfig) -> StudyResult:
    if cfg.scheme == "ou":
        scheme = ou_scheme(cfg.a, cfg.sigma)
    elif cfg.scheme == "brownian":
        scheme = brownian_scheme(1)
    else:
        raise ConfigError("hypothesis-report supports the ou and brownian schemes")
    rep = hypothesis_report(scheme, build_noise(cfg.noise), cfg.T, cfg.n, cfg.t, psi=cfg.psi_norm, seed=cfg.seed)
    h = rep["inputs"]
    cols = ["n", "t", "delta", "tangent_lhs", "tangent_pass", "ellipt_lhs", "ellipt_rhs", "ellipt_pass"]
    rows = [[r[c] if not isinstance(r[c], bool) else int(r[c]) for c in cols] for r in rep["rows"]]
    rows.append(["minimal_n", cfg.t, "", "", "", "", "", rep["minimal_n"] if rep["minimal_n"] else "unknown"])
    notes = [f"psi_norm={h.psi_norm!r} ellipticity={h.ellipticity!r} m8={h.m8!r} m_star={h.m_star!r}"] + rep["notes"]
    return StudyResult(cols, rows, notes)


DISPATCH = {
    "params": study_params,
    "expand": study_expand,
    "matrix-convergence": study_matrix,
    "sde-base-error": study_base_error,
    "sde-weak-error": study_weak_error,
    "tv-study": study_weak_error,
    "density-compare": study_density,
    "splitting-check": splitting_checks,
    "hypothesis-report": study_hypothesis,
}


def run(cfg: StudyConfig) -> StudyResult:
    cfg.validate()
    try:
        return DISPATCH[cfg.kind](cfg)
    except (InvariantViolation, ConfigError):
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def render_csv(cfg: StudyConfig, result: StudyResult) -> str:
    buf = io.StringIO()
    buf.write(f"# tvboost {cfg.kind}\n")
    for line in cfg.serialize().splitlines():
        buf.write(f"# {line}\n")
    for note in result.notes:
        buf.write(f"# note: {note}\n")
    buf.write(",".join(result.columns) + "\n")
    for row in result.rows:
        buf.write(",".join(_cell(v) for v in row) + "\n")
    return buf.getvalue()


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    s = "" if v is None else str(v)
    return f'"{s}"' if "," in s else s


def write_atomic(path: str, text: str) -> None:
    """Write through a temp file in the target directory, then rename over ``path``."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".csv")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def resolve_output(cfg: StudyConfig) -> str | None:
    if cfg.out:
        return cfg.out
    base = os.environ.get(OUTPUT_DIR_ENV)
    if base:
        return os.path.join(base, f"{cfg.kind}.csv")
    return None


def run_study(cfg: StudyConfig) -> tuple[int, str, str]:
    """Run and emit; returns ``(exit_status, csv_text, message)``. Exit codes are
    0 ok, 2 config error, 3 numerical invariant violated, 4 I/O. Nothing is
    written unless the study completed."""
    try:
        result = run(cfg)
    except ConfigError as exc:
        return 2, "", f"config error: {exc}"
    except InvariantViolation as exc:
        return 3, "", f"invariant violated: {exc}"
    text = render_csv(cfg, result)
    path = resolve_output(cfg)
    if path is not None:
        try:
            write_atomic(path, text)
        except OSError as exc:
            return 4, text, f"cannot write {path}: {exc}"
    return 0, text, ""
