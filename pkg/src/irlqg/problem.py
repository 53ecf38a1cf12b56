"""Problem data model, validation and JSON ingestion.

A problem file is a UTF-8 JSON object::

    {
      "n": 1, "m": 1, "s": 1,
      "t0": 0.0, "T": 1.0, "steps": 1000,
      "A": [[0.0]], "B": [[1.0]], "D": [[1.0]], "C": [[1.0]], "G": [[1.0]],
      "Q": [[0.0]], "R": [[0.0]], "H": [[1.0]],
      "x0_mean": [1.0], "sigma0": [[0.0]],
      "p1_terminal": [[-1.0]]            # optional
    }

Any of A, B, C, D, G, Q, R may instead be ``{"samples": [M_0, ..., M_N]}``
with one matrix per grid node; values between nodes are linearly
interpolated.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .matrixkit import DEFAULT_TOL, NotPSDError, as_matrix, check_psd

SCHEDULE_FIELDS = ("A", "B", "C", "D", "G", "Q", "R")
REQUIRED_FIELDS = ("n", "m", "s", "t0", "T", "steps", *SCHEDULE_FIELDS, "H", "x0_mean", "sigma0")


class ProblemFileError(ValueError):
    """Malformed or invalid problem file."""

    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        self.field = field
        self.line = line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    T: float
    steps: int

    def __post_init__(self):
        if not self.T > self.t0:
            raise ValueError(f"horizon must satisfy T > t0 (got t0={self.t0}, T={self.T})")
        if self.steps < 2:
            raise ValueError(f"steps must be >= 2 (got {self.steps})")

    @property
    def h(self) -> float:
        return (self.T - self.t0) / self.steps

    @property
    def nodes(self) -> np.ndarray:
        return self.t0 + self.h * np.arange(self.steps + 1)

    @property
    def half_nodes(self) -> np.ndarray:
        """Nodes and midpoints interleaved: ``t0, t0 + h/2, t0 + h, ...``."""
        return self.t0 + 0.5 * self.h * np.arange(2 * self.steps + 1)


@dataclass(frozen=True)
class MatrixSchedule:
    """A matrix-valued function of time on a grid.

    ``samples`` has shape ``(1, r, c)`` for a constant matrix or
    ``(N + 1, r, c)`` for per-node samples.
    """

    samples: np.ndarray

    @classmethod
    def constant(cls, M) -> "MatrixSchedule":
        return cls(as_matrix(M)[None].copy())

    @property
    def is_constant(self) -> bool:
        return self.samples.shape[0] == 1

    @property
    def shape(self) -> tuple[int, int]:
        return self.samples.shape[1:]

    def on_nodes(self, grid: TimeGrid) -> np.ndarray:
        """Values at every grid node, shape ``(N + 1, r, c)``."""
        if self.is_constant:
            return np.repeat(self.samples, grid.steps + 1, axis=0)
        return self.samples.copy()

    def on_half_nodes(self, grid: TimeGrid) -> np.ndarray:
        """Values on nodes and midpoints, shape ``(2N + 1, r, c)``."""
        if self.is_constant:
            return np.repeat(self.samples, 2 * grid.steps + 1, axis=0)
        S = self.samples
        out = np.empty((2 * grid.steps + 1, *S.shape[1:]))
        out[0::2] = S
        out[1::2] = 0.5 * (S[:-1] + S[1:])
        return out

    def __call__(self, t: float, grid: TimeGrid) -> np.ndarray:
        if self.is_constant:
            return self.samples[0].copy()
        x = (t - grid.t0) / grid.h
        j = round(x)
        if abs(x - j) <= 1e-9 and 0 <= j <= grid.steps:
            # Rounding in t0 + k h must not blend neighbouring samples.
            return self.samples[j].copy()
        k = int(np.clip(np.floor(x), 0, grid.steps - 1))
        w = x - k
        return (1.0 - w) * self.samples[k] + w * self.samples[k + 1]


@dataclass(frozen=True)
class ProblemSpec:
    n: int
    m: int
    s: int
    A: MatrixSchedule
    B: MatrixSchedule
    C: MatrixSchedule
    D: MatrixSchedule
    G: MatrixSchedule
    Q: MatrixSchedule
    R: MatrixSchedule
    H: np.ndarray
    grid: TimeGrid
    x0_mean: np.ndarray
    sigma0: np.ndarray
    p1_terminal: np.ndarray | None = None

    def replace(self, **changes) -> "ProblemSpec":
        kwargs = {f: getattr(self, f) for f in self.__dataclass_fields__}
        for key, value in changes.items():
            if key in SCHEDULE_FIELDS and not isinstance(value, MatrixSchedule):
                value = MatrixSchedule.constant(value)
            elif key in ("H", "sigma0", "p1_terminal") and value is not None:
                value = as_matrix(value, key)
            elif key == "x0_mean":
                value = np.asarray(value, dtype=float).reshape(-1)
            kwargs[key] = value
        return ProblemSpec(**kwargs)


def make_problem(
    A, B, C, D, G, Q, R, H, *,
    t0: float = 0.0, T: float = 1.0, steps: int = 1000,
    x0_mean=None, sigma0=None, p1_terminal=None,
) -> ProblemSpec:
    """Build a ``ProblemSpec`` from plain (constant) arrays or schedules."""

    def sched(M, name):
        return M if isinstance(M, MatrixSchedule) else MatrixSchedule.constant(as_matrix(M, name))

    scheds = {k: sched(v, k) for k, v in zip(SCHEDULE_FIELDS, (A, B, C, D, G, Q, R))}
    n, m = scheds["B"].shape
    s = scheds["C"].shape[0]
    x0 = np.zeros(n) if x0_mean is None else np.asarray(x0_mean, dtype=float).reshape(-1)
    S0 = np.zeros((n, n)) if sigma0 is None else as_matrix(sigma0, "sigma0")
    P1T = None if p1_terminal is None else as_matrix(p1_terminal, "p1_terminal")
    return ProblemSpec(
        n=n, m=m, s=s, **scheds, H=as_matrix(H, "H"), grid=TimeGrid(float(t0), float(T), int(steps)),
        x0_mean=x0, sigma0=S0, p1_terminal=P1T,
    )


@dataclass(frozen=True)
class Violation:
    field: str
    message: str
    severity: str = "error"

    def __str__(self) -> str:
        return f"[{self.severity}] {self.field}: {self.message}"


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not any(v.severity == "error" for v in self.violations)

    def add(self, fld: str, message: str, severity: str = "error") -> None:
        self.violations.append(Violation(fld, message, severity))

    def __str__(self) -> str:
        return "valid" if not self.violations else "\n".join(map(str, self.violations))


def validate(spec: ProblemSpec, tol: float = DEFAULT_TOL) -> ValidationReport:
    """Collect every violation instead of stopping at the first one."""
    rep = ValidationReport()
    n, m, s = spec.n, spec.m, spec.s
    expected = {"A": (n, n), "B": (n, m), "C": (s, n), "D": (n, n), "G": (s, s), "Q": (n, n), "R": (m, m)}
    shapes_ok = True
    for name, shp in expected.items():
        sch = getattr(spec, name)
        if sch.shape != shp:
            rep.add(name, f"dimension mismatch: expected {shp}, got {sch.shape}")
            shapes_ok = False
        if not sch.is_constant and sch.samples.shape[0] != spec.grid.steps + 1:
            rep.add(name, f"needs {spec.grid.steps + 1} samples (one per grid node), got {sch.samples.shape[0]}")
            shapes_ok = False
        if not np.all(np.isfinite(sch.samples)):
            rep.add(name, "non-finite entries")
            shapes_ok = False
    for name, arr, shp in (("H", spec.H, (n, n)), ("sigma0", spec.sigma0, (n, n))):
        if arr.shape != shp:
            rep.add(name, f"dimension mismatch: expected {shp}, got {arr.shape}")
            shapes_ok = False
    if spec.x0_mean.shape != (n,):
        rep.add("x0_mean", f"dimension mismatch: expected ({n},), got {spec.x0_mean.shape}")
    if spec.p1_terminal is not None:
        if spec.p1_terminal.shape != (n, n):
            rep.add("p1_terminal", f"dimension mismatch: expected {(n, n)}, got {spec.p1_terminal.shape}")
        elif np.max(np.abs(spec.p1_terminal - spec.p1_terminal.T)) > 1e-12 * (1 + np.abs(spec.p1_terminal).max()):
            rep.add("p1_terminal", "must be symmetric")
    if not shapes_ok:
        return rep

    for name in ("Q", "R"):
        for k, M in enumerate(getattr(spec, name).samples):
            try:
                check_psd(M, tol, name)
            except NotPSDError as exc:
                label = name if getattr(spec, name).is_constant else f"{name}[{k}]"
                rep.add(label, f"{name} not PSD ({exc})")
                break
    for name in ("H", "sigma0"):
        try:
            check_psd(getattr(spec, name), tol, name)
        except NotPSDError as exc:
            rep.add(name, f"{name} not PSD ({exc})")
    for k, G in enumerate(spec.G.samples):
        GG = G @ G.T
        if s > 0 and (np.linalg.matrix_rank(GG) < s or np.linalg.cond(GG) > 1e14):
            label = "G" if spec.G.is_constant else f"G[{k}]"
            rep.add(label, "GG' singular")
            break
    return rep


def _parse_matrix(doc: dict, name: str):
    value = doc[name]
    try:
        if isinstance(value, dict):
            if "samples" not in value:
                raise ProblemFileError("time-varying matrix needs a 'samples' list", name)
            arr = np.array(value["samples"], dtype=float)
            if arr.ndim == 1:
                arr = arr.reshape(-1, 1, 1)
            if arr.ndim != 3:
                raise ProblemFileError("samples must be a list of matrices", name)
            return arr
        return as_matrix(value, name)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ProblemFileError):
            raise
        raise ProblemFileError(str(exc), name) from None


def problem_from_dict(doc: dict) -> ProblemSpec:
    if not isinstance(doc, dict):
        raise ProblemFileError("top level must be a JSON object")
    for name in REQUIRED_FIELDS:
        if name not in doc:
            raise ProblemFileError("missing required field", name)
    try:
        grid = TimeGrid(float(doc["t0"]), float(doc["T"]), int(doc["steps"]))
    except (TypeError, ValueError) as exc:
        raise ProblemFileError(str(exc), "t0/T/steps") from None
    scheds = {}
    for name in SCHEDULE_FIELDS:
        arr = _parse_matrix(doc, name)
        scheds[name] = MatrixSchedule(arr[None] if arr.ndim == 2 else arr)
    x0 = np.asarray(doc["x0_mean"], dtype=float).reshape(-1)
    p1 = doc.get("p1_terminal")
    spec = ProblemSpec(
        n=int(doc["n"]), m=int(doc["m"]), s=int(doc["s"]), **scheds,
        H=_parse_matrix(doc, "H"), grid=grid, x0_mean=x0,
        sigma0=_parse_matrix(doc, "sigma0"),
        p1_terminal=None if p1 is None else _parse_matrix(doc, "p1_terminal"),
    )
    if not np.all(np.isfinite(x0)):
        raise ProblemFileError("entries must be finite", "x0_mean")
    return spec


def load_problem(path, validate_spec: bool = True) -> ProblemSpec:
    """Read, parse and validate a problem file.

    Raises ``FileNotFoundError`` for a missing file and ``ProblemFileError``
    (with field or line information) for anything malformed or invalid.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ProblemFileError(exc.msg, line=exc.lineno) from None
    spec = problem_from_dict(doc)
    if validate_spec:
        report = validate(spec)
        if not report.ok:
            first = next(v for v in report.violations if v.severity == "error")
            raise ProblemFileError(f"{first.message}\n{report}", first.field)
    return spec


def _matrix_to_json(sched: MatrixSchedule):
    if sched.is_constant:
        return sched.samples[0].tolist()
    return {"samples": sched.samples.tolist()}


def problem_to_dict(spec: ProblemSpec) -> dict:
    doc = {"n": spec.n, "m": spec.m, "s": spec.s,
           "t0": spec.grid.t0, "T": spec.grid.T, "steps": spec.grid.steps}
    for name in SCHEDULE_FIELDS:
        doc[name] = _matrix_to_json(getattr(spec, name))
    doc["H"] = spec.H.tolist()
    doc["x0_mean"] = spec.x0_mean.tolist()
    doc["sigma0"] = spec.sigma0.tolist()
    if spec.p1_terminal is not None:
        doc["p1_terminal"] = spec.p1_terminal.tolist()
    return doc


def save_problem(spec: ProblemSpec, path) -> None:
    # json writes floats with repr(), which round-trips IEEE doubles exactly.
    Path(path).write_text(json.dumps(problem_to_dict(spec), indent=2) + "\n", encoding="utf-8")


def bundled_problem_path(name: str) -> Path:
    """Path of a problem file shipped with the package (e.g. ``"intro_scalar"``)."""
    ref = resources.files("irlqg") / "data" / f"{name}.json"
    if not ref.is_file():
        raise FileNotFoundError(f"no bundled problem named {name!r}")
    return Path(str(ref))


def intro_problem(T: float = 1.0, x0: float = 1.0, steps: int = 1000, sigma0: float = 0.0) -> ProblemSpec:
    """Scalar problem dx = u dt + dw, dy = x dt + dv, cost [E x(T)]^2."""
    return make_problem(
        A=0.0, B=1.0, C=1.0, D=1.0, G=1.0, Q=0.0, R=0.0, H=1.0,
        t0=0.0, T=T, steps=steps, x0_mean=[x0], sigma0=sigma0,
    )
