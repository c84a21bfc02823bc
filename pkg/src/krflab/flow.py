"""Kähler–Ricci flow on the torus in parabolic Monge–Ampère form.

Three metrics are in play:

* ``g0``  the reference metric ``flat + dd̄ phi0``; monitors measure against it.
* ``gt``  the initial metric ``g0 + dd̄ u0`` (g-tilde).
* ``g``   the evolving metric ``gt + dd̄ v`` where ``v`` solves
  ``v_t = log(det g / det gt) + c v + f`` with ``v(0) = 0`` and ``f`` the
  Ricci potential of ``gt``.

The state stores the total potential ``u = u0 + v`` so that
``g = metric_from_potential(phi0 + u)`` always holds.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .grid import GridError, GridSpec, integrate, make_grid, random_bandlimited, read_field, write_field
from .tensor import (
    DEFAULT_MARGIN,
    MetricField,
    PositivityLoss,
    _hermitian_eig_extremes,
    metric_from_potential,
    ricci,
    sup_abs,
)

log = logging.getLogger(__name__)

__all__ = [
    "ConfigError",
    "NonexactClass",
    "CheckpointError",
    "PotentialSpec",
    "FlowConfig",
    "FlowProblem",
    "FlowState",
    "RunResult",
    "ricci_potential",
    "ma_rhs",
    "step",
    "stable_dt",
    "initial_state",
    "make_window",
    "run",
    "resume",
    "checkpoint_save",
    "checkpoint_load",
]

TERMINATIONS = ("reached_t_end", "positivity_loss", "nan_detected")


class ConfigError(ValueError):
    """Invalid flow configuration."""


class NonexactClass(ValueError):
    """``c g`` is not dd̄-exact on the torus, so no Ricci potential exists for ``c != 0``."""


class CheckpointError(IOError):
    """Checkpoint file is corrupt, truncated or of an unknown version."""


# -- configuration ---------------------------------------------------------


@dataclass(frozen=True)
class PotentialSpec:
    """Recipe for a real potential: ``zero``, ``cosine`` (along one real axis) or seeded ``bandlimited``."""

    kind: str = "zero"
    amplitude: float = 0.0
    K: int = 1
    seed: int = 0
    axis: int = 0
    norm_N: int | None = None

    def __post_init__(self):
        if self.kind not in ("zero", "cosine", "bandlimited"):
            raise ConfigError(f"unknown potential kind {self.kind!r}")

    @classmethod
    def from_dict(cls, d: dict | None) -> "PotentialSpec":
        if d is None:
            return cls()
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown potential keys {sorted(unknown)}")
        return cls(**d)

    def build(self, grid: GridSpec) -> np.ndarray:
        if self.kind == "zero" or self.amplitude == 0:
            return np.zeros(grid.shape, dtype=complex)
        if self.kind == "cosine":
            if not 0 <= self.axis < grid.ndim:
                raise ConfigError(f"cosine axis {self.axis} outside [0, {grid.ndim})")
            return (self.amplitude * np.cos(2 * np.pi * grid.coord(self.axis)) * np.ones(grid.shape)).astype(complex)
        try:
            return random_bandlimited(grid, self.K, self.amplitude, self.seed, self.norm_N)
        except GridError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass(frozen=True)
class FlowConfig:
    n: int = 1
    N: int = 32
    c: float = 0.0
    t_end: float = 1.0
    cfl: float = 0.4
    dt_fixed: float | None = None
    cadence: int = 100
    margin: float = DEFAULT_MARGIN
    initial: PotentialSpec = field(default_factory=PotentialSpec)
    reference: PotentialSpec = field(default_factory=PotentialSpec)
    k_max: int = 2
    m_max: int = 3
    ceq_bound: float | None = None
    monitor_times: tuple[float, ...] = ()
    checkpoint_cadence: int = 0
    dealias: bool = False
    window_h: float = 0.0

    def __post_init__(self):
        if not self.t_end > 0:
            raise ConfigError("t_end must be positive")
        if not 0 < self.cfl <= 1:
            raise ConfigError("cfl must lie in (0, 1]")
        if int(self.cadence) < 1:
            raise ConfigError("cadence must be at least 1")
        if self.dt_fixed is not None and not self.dt_fixed > 0:
            raise ConfigError("dt_fixed must be positive")
        if not self.margin > 0:
            raise ConfigError("margin must be positive")
        if not 0 <= self.k_max <= 2:
            raise ConfigError("k_max must lie in [0, 2]")
        if not 1 <= self.m_max <= 3:
            raise ConfigError("m_max must lie in [1, 3]")
        if self.checkpoint_cadence < 0 or self.window_h < 0:
            raise ConfigError("checkpoint_cadence and window_h must be non-negative")
        if any(not 0 < t <= self.t_end for t in self.monitor_times):
            raise ConfigError("monitor_times must lie in (0, t_end]")
        try:
            make_grid(self.n, self.N)
        except GridError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def bound(self) -> float:
        """Equivalence bound used by the verdict (defaults to ``1/margin``)."""
        return self.ceq_bound if self.ceq_bound is not None else 1.0 / self.margin

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "FlowConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        for key in ("initial", "reference"):
            if key in d:
                d[key] = PotentialSpec.from_dict(d[key])
        if "monitor_times" in d:
            d["monitor_times"] = tuple(sorted(float(t) for t in d["monitor_times"]))
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["monitor_times"] = list(self.monitor_times)
        return d

    def with_overrides(self, **kw) -> "FlowConfig":
        return FlowConfig.from_dict({**self.to_dict(), **kw})


def load_config(path: str | os.PathLike) -> FlowConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    return FlowConfig.from_dict(data)


# -- problem setup ---------------------------------------------------------


def ricci_potential(gt: MetricField, c: float = 0.0) -> np.ndarray:
    """Mean-zero ``f`` with ``dd̄ f = -Ric(gt)``: ``log det gt`` minus its mean."""
    if c != 0:
        raise NonexactClass("a Ricci potential with c != 0 does not exist on the torus")
    logdet = np.log(gt.det.real)
    return (logdet - logdet.mean()).astype(complex)


class FlowProblem:
    """Fixed data of one flow: grid, reference and initial metrics, and ``f``.

    Raises :class:`PositivityLoss` when the initial metric is inadmissible.
    """

    def __init__(self, config: FlowConfig, f: np.ndarray | None = None):
        self.config = config
        grid = self.grid = make_grid(config.n, config.N)
        self.phi0 = config.reference.build(grid)
        self.u0 = config.initial.build(grid)
        if config.reference.kind == "zero" or config.reference.amplitude == 0:
            self.g0 = MetricField.flat(grid)
        else:
            self.g0 = metric_from_potential(grid, self.phi0, margin=config.margin)
        self.gt = metric_from_potential(grid, self.phi0 + self.u0, margin=config.margin)
        self.f_user_supplied = f is not None
        self.f = np.asarray(f, dtype=complex) if f is not None else ricci_potential(self.gt, config.c)
        self.log_det_t = np.log(self.gt.det.real)
        self._sym = [[grid.dz_symbol(i) * grid.dzbar_symbol(j) for j in range(grid.n)] for i in range(grid.n)]

    @property
    def sup_f(self) -> float:
        return sup_abs(self.f)

    def metric_components(self, v: np.ndarray) -> np.ndarray:
        """``gt + dd̄ v``, Hermitian by construction."""
        grid = self.grid
        n = grid.n
        vh = grid.fft(v)
        g = self.gt.g.copy()
        for i in range(n):
            for j in range(i, n):
                h = grid.ifft(vh * self._sym[i][j], overwrite=True)
                if i == j:
                    g[i, i] += h.real
                else:
                    g[i, j] += h
                    g[j, i] += np.conj(h)
        return g

    def metric(self, v: np.ndarray, stage: int | None = None) -> MetricField:
        comps = self.metric_components(v)
        lo, _ = _hermitian_eig_extremes(comps, self.grid.n)
        idx = np.unravel_index(np.argmin(lo), lo.shape)
        if not lo[idx] >= self.config.margin:
            raise PositivityLoss(idx, lo[idx], self.config.margin, stage)
        return MetricField(self.grid, comps, margin=self.config.margin, check=False)

    def rhs(self, v: np.ndarray, stage: int | None = None) -> tuple[np.ndarray, MetricField]:
        g = self.metric(v, stage)
        det = g.det.real
        out = np.log(det) - self.log_det_t + self.f
        if self.config.c:
            out = out + self.config.c * v
        if self.config.dealias:
            out = self.grid.dealias(out)
        return out.astype(complex), g


def ma_rhs(u: np.ndarray, problem: FlowProblem) -> np.ndarray:
    """Right side ``log(det(gt + dd̄ v)/det gt) + c v + f`` for the total potential ``u = u0 + v``."""
    return problem.rhs(np.asarray(u, dtype=complex) - problem.u0)[0]


# -- state and stepping ----------------------------------------------------


@dataclass
class FlowState:
    t: float
    u: np.ndarray
    w: np.ndarray
    g: MetricField
    steps: int = 0
    dt_last: float = 0.0

    def v(self, problem: FlowProblem) -> np.ndarray:
        return self.u - problem.u0


def initial_state(problem: FlowProblem) -> FlowState:
    v = np.zeros(problem.grid.shape, dtype=complex)
    w, g = problem.rhs(v)
    return FlowState(0.0, problem.u0.copy(), w, g)


def _state_from(problem: FlowProblem, t: float, u: np.ndarray, steps: int, dt_last: float) -> FlowState:
    w, g = problem.rhs(u - problem.u0)
    return FlowState(t, u, w, g, steps, dt_last)


def step(state: FlowState, dt: float, problem: FlowProblem) -> FlowState:
    """One classical RK4 step.  The end-of-step right side is cached as the new ``w``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    v = state.u - problem.u0
    k1 = state.w
    k2, _ = problem.rhs(v + 0.5 * dt * k1, stage=2)
    k3, _ = problem.rhs(v + 0.5 * dt * k2, stage=3)
    k4, _ = problem.rhs(v + dt * k3, stage=4)
    u_new = problem.u0 + (v + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4))
    # w is a function of the stored u alone, so a reloaded state continues bitwise
    w, g = problem.rhs(u_new - problem.u0, stage=None)
    return FlowState(state.t + dt, u_new, w, g, state.steps + 1, dt)


def stable_dt(state: FlowState | MetricField, cfl: float, N: int | None = None) -> float:
    """``cfl / (Lambda (pi N)^2)`` with ``Lambda`` the largest eigenvalue of ``g^{-1}``."""
    g = state.g if isinstance(state, FlowState) else state
    lo, _ = g.eigen_extremes
    lam = 1.0 / float(np.min(lo))
    N = N or g.grid.N
    return cfl / (lam * (math.pi * N) ** 2)


def make_window(problem: FlowProblem, state: FlowState, h: float, points: int = 3) -> list[FlowState]:
    """``points`` states spaced by ``h`` starting at ``state``; spacing is split into stable substeps."""
    sub = max(1, math.ceil(h / stable_dt(state, problem.config.cfl)))
    out = [state]
    for _ in range(points - 1):
        s = out[-1]
        for _ in range(sub):
            s = step(s, h / sub, problem)
        s = replace(s, t=out[-1].t + h)
        out.append(s)
    return out


def _finite(state: FlowState) -> bool:
    return bool(np.isfinite(state.u).all() and np.isfinite(state.w).all())


# -- runs ------------------------------------------------------------------


@dataclass
class RunResult:
    config: FlowConfig
    records: list = field(default_factory=list)
    termination: str = "reached_t_end"
    detail: str = ""
    breakdown: dict | None = None
    steps: int = 0
    wall_time: float = 0.0
    sup_f: float = 0.0
    f_user_supplied: bool = False
    final_ric_sup: float | None = None
    final_state: FlowState | None = None
    snapshots: list = field(default_factory=list)
    windows: list = field(default_factory=list)

    @property
    def completed(self) -> bool:
        return self.termination == "reached_t_end"

    def series(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)


def _record(problem, state, windowed: bool, result: RunResult, keep_snapshots: bool):
    from .monitors import monitor_record, window_samples

    rec = monitor_record(problem, state)
    result.records.append(rec)
    if keep_snapshots:
        result.snapshots.append(state)
    if windowed and problem.config.window_h > 0:
        result.windows.append(window_samples(problem, make_window(problem, state, problem.config.window_h, points=5)))


def _next_time(times: tuple[float, ...], t: float) -> float | None:
    for s in times:
        if s > t * (1 + 1e-12) + 1e-300:
            return s
    return None


def _advance(
    problem: FlowProblem,
    state: FlowState,
    result: RunResult,
    *,
    keep_snapshots: bool = False,
    checkpoint_path: str | os.PathLike | None = None,
    progress: Callable[[FlowState], None] | None = None,
) -> RunResult:
    cfg = problem.config
    t_end = cfg.t_end
    eps = 1e-12 * t_end
    try:
        while state.t < t_end - eps:
            dt = cfg.dt_fixed if cfg.dt_fixed is not None else stable_dt(state, cfg.cfl)
            target = _next_time(cfg.monitor_times, state.t)
            stop = min(t_end, target) if target is not None else t_end
            hit = False
            lands = state.t + dt >= stop - eps
            if lands:
                # keep a step that reaches the stop within rounding, so fixed-dt runs do not depend on t_end
                if abs(state.t + dt - stop) > eps:
                    dt = stop - state.t
                hit = target is not None and stop == target
            state = step(state, dt, problem)
            if not _finite(state):
                result.termination = "nan_detected"
                result.detail = f"non-finite values after step {state.steps} at t={state.t:.6g}"
                break
            if lands:
                state = replace(state, t=stop)
            done = state.t >= t_end - eps
            if hit or done or state.steps % cfg.cadence == 0:
                _record(problem, state, True, result, keep_snapshots)
            if checkpoint_path and cfg.checkpoint_cadence and state.steps % cfg.checkpoint_cadence == 0:
                checkpoint_save(problem, state, result.records, checkpoint_path)
            if progress:
                progress(state)
    except PositivityLoss as exc:
        result.termination = "positivity_loss"
        result.detail = str(exc)
        result.breakdown = {"t": state.t, "point": list(exc.point), "eigenvalue": exc.eigenvalue, "stage": exc.stage}
    result.steps = state.steps
    result.final_state = state
    if result.completed:
        result.final_ric_sup = sup_abs(ricci(state.g).values)
    return result


def _breakdown_at_start(config: FlowConfig, exc: PositivityLoss) -> RunResult:
    from .monitors import monitor_raw

    result = RunResult(config, termination="positivity_loss", detail=str(exc))
    result.breakdown = {"t": 0.0, "point": list(exc.point), "eigenvalue": exc.eigenvalue, "stage": exc.stage}
    result.records.append(monitor_raw(config))
    return result


def run(
    config: FlowConfig,
    *,
    f: np.ndarray | None = None,
    keep_snapshots: bool = False,
    checkpoint_path: str | os.PathLike | None = None,
    progress: Callable[[FlowState], None] | None = None,
) -> RunResult:
    """Integrate from ``t = 0`` to ``t_end`` or breakdown, recording monitors along the way."""
    start = time.perf_counter()
    try:
        problem = FlowProblem(config, f=f)
        state = initial_state(problem)
    except PositivityLoss as exc:
        return _breakdown_at_start(config, exc)
    result = RunResult(config, sup_f=problem.sup_f, f_user_supplied=problem.f_user_supplied)
    result.problem = problem
    _record(problem, state, True, result, keep_snapshots)
    _advance(problem, state, result, keep_snapshots=keep_snapshots, checkpoint_path=checkpoint_path, progress=progress)
    result.wall_time = time.perf_counter() - start
    log.info("run finished: %s after %d steps in %.2fs", result.termination, result.steps, result.wall_time)
    return result


def resume(path: str | os.PathLike, *, checkpoint_path: str | os.PathLike | None = None, **kw) -> RunResult:
    """Continue a checkpointed run to its ``t_end``."""
    start = time.perf_counter()
    problem, state, records = checkpoint_load(path)
    result = RunResult(problem.config, records=list(records), sup_f=problem.sup_f)
    result.problem = problem
    _advance(problem, state, result, checkpoint_path=checkpoint_path, **kw)
    result.wall_time = time.perf_counter() - start
    return result


# -- checkpoints -----------------------------------------------------------

CKPT_MAGIC = "KRFLAB-CKPT v1"


def _checksum(payload: bytes) -> str:
    return hashlib.blake2b(payload, digest_size=8).hexdigest()


def checkpoint_bytes(problem: FlowProblem, state: FlowState, records=()) -> bytes:
    from .monitors import MonitorRecord

    buf = io.BytesIO()
    buf.write((CKPT_MAGIC + "\n").encode("ascii"))
    buf.write((json.dumps(problem.config.to_dict(), sort_keys=True) + "\n").encode("ascii"))
    meta = {
        "t": state.t,
        "steps": state.steps,
        "dt_last": state.dt_last,
        "f_user_supplied": problem.f_user_supplied,
        "records": [MonitorRecord.to_dict(r) for r in records],
    }
    buf.write((json.dumps(meta, sort_keys=True) + "\n").encode("ascii"))
    write_field(buf, problem.grid, state.u)
    write_field(buf, problem.grid, problem.f)
    payload = buf.getvalue()
    return payload + f"CHECKSUM {_checksum(payload)}\n".encode("ascii")


def checkpoint_save(problem: FlowProblem, state: FlowState, records, path: str | os.PathLike) -> None:
    """Atomic write: temp file in the target directory, then rename."""
    data = checkpoint_bytes(problem, state, records)
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def checkpoint_load(path: str | os.PathLike) -> tuple[FlowProblem, FlowState, list]:
    """Read and verify a checkpoint; returns the problem, the state and the monitor records so far."""
    from .monitors import MonitorRecord

    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    cut = data.rfind(b"CHECKSUM ")
    if cut < 0 or not data.endswith(b"\n"):
        raise CheckpointError("checkpoint is truncated (no checksum trailer)")
    payload, trailer = data[:cut], data[cut:].decode("ascii", errors="replace").split()
    if len(trailer) != 2 or trailer[1] != _checksum(payload):
        raise CheckpointError("checkpoint checksum mismatch")
    fh = io.BytesIO(payload)
    magic = fh.readline().decode("ascii", errors="replace").strip()
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"unsupported checkpoint version {magic!r}")
    try:
        config = FlowConfig.from_dict(json.loads(fh.readline()))
        meta = json.loads(fh.readline())
        grid, u, _ = read_field(fh)
        _, f, _ = read_field(fh)
    except (ValueError, KeyError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    problem = FlowProblem(config, f=f if meta.get("f_user_supplied") else None)
    if not meta.get("f_user_supplied"):
        problem.f = f
    state = _state_from(problem, float(meta["t"]), u, int(meta["steps"]), float(meta["dt_last"]))
    records = [MonitorRecord.from_dict(r) for r in meta["records"]]
    return problem, state, records
