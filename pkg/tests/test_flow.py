import json
import math

import numpy as np
import pytest

from conftest import cosine
from krflab.flow import (
    CheckpointError,
    ConfigError,
    FlowConfig,
    FlowProblem,
    NonexactClass,
    PotentialSpec,
    checkpoint_bytes,
    checkpoint_load,
    checkpoint_save,
    initial_state,
    load_config,
    ma_rhs,
    resume,
    ricci_potential,
    run,
    stable_dt,
    step,
)
from krflab.grid import make_grid
from krflab.tensor import MetricField, metric_from_potential, ricci, sup_abs

SMOOTH = {"kind": "bandlimited", "K": 1, "amplitude": 0.02, "seed": 1}


def smooth_config(**kw):
    base = {"n": 1, "N": 16, "t_end": 1e-3, "dt_fixed": 1e-4, "cadence": 2, "k_max": 1, "m_max": 1,
            "initial": SMOOTH}
    return FlowConfig.from_dict({**base, **kw})


def ddbar(grid, f):
    return np.stack([np.stack([grid.ddbar(f, i, j) for j in range(grid.n)]) for i in range(grid.n)])


# -- Ricci potential ---------------------------------------------------------------

def test_ricci_potential_flat(grid2):
    assert sup_abs(ricci_potential(MetricField.flat(grid2))) == 0


def test_ricci_potential_cosine_closed_form():
    grid = make_grid(1, 64)
    gt = metric_from_potential(grid, cosine(grid, 0.05))
    x = grid.coord(0) * np.ones(grid.shape)
    expect = np.log(1 - 0.05 * np.pi**2 * np.cos(2 * np.pi * x))
    expect -= expect.mean()
    assert sup_abs(ricci_potential(gt) - expect) < 1e-12


@pytest.mark.parametrize("n,N,amp", [(1, 64, 0.03), (2, 16, 0.003)])
def test_ricci_potential_residual(n, N, amp):
    grid = make_grid(n, N)
    gt = metric_from_potential(grid, cosine(grid, amp) + cosine(grid, amp, axis=1))
    f = ricci_potential(gt)
    ric = ricci(gt).values
    assert sup_abs(ddbar(grid, f) + ric) <= 1e-9 * (1 + sup_abs(ric))
    assert abs(f.mean()) < 1e-15


def test_ricci_potential_rejects_nonzero_c(grid1):
    with pytest.raises(NonexactClass):
        ricci_potential(MetricField.flat(grid1), c=1.0)


# -- right side -----------------------------------------------------------------------

def test_rhs_at_zero_is_f():
    p = FlowProblem(smooth_config(N=32))
    r = ma_rhs(p.u0, p)
    assert sup_abs(r - p.f) < 1e-15
    assert sup_abs(ddbar(p.grid, r) + ricci(p.gt).values) <= 1e-9 * (1 + sup_abs(ricci(p.gt).values))


def test_flat_is_fixed_point():
    p = FlowProblem(FlowConfig(n=2, N=16))
    assert sup_abs(ma_rhs(np.zeros(p.grid.shape, complex), p)) == 0


def test_rhs_consistency_away_from_start():
    p = FlowProblem(smooth_config(N=32))
    u = p.u0 + 0.5 * p.u0 * np.roll(p.u0, 3, axis=0) / sup_abs(p.u0)
    r = ma_rhs(u, p)
    g = p.metric(u - p.u0)
    # dd-bar of the right side is -Ric(g) + Ric(gt) + f_{i jbar} = -Ric(g)
    lhs = ddbar(p.grid, r)
    rhs = -ricci(g).values + ricci(p.gt).values + ddbar(p.grid, p.f)
    assert sup_abs(lhs - rhs) <= 1e-9 * (1 + sup_abs(rhs))
    assert sup_abs(lhs + ricci(g).values) <= 1e-9 * (1 + sup_abs(rhs))


# -- stepping ---------------------------------------------------------------------------

def test_flat_step_unchanged():
    p = FlowProblem(FlowConfig(n=1, N=16))
    s = initial_state(p)
    for dt in (1e-5, 0.1, 10.0):
        s2 = step(s, dt, p)
        assert sup_abs(s2.u - s.u) <= 1e-14 and s2.t == s.t + dt


def test_step_rejects_nonpositive_dt():
    p = FlowProblem(smooth_config())
    s = initial_state(p)
    for dt in (0.0, -1e-3):
        with pytest.raises(ValueError):
            step(s, dt, p)


def test_rk4_order():
    p = FlowProblem(smooth_config())
    s0 = initial_state(p)

    def integrate(m, T=4e-3):
        s = s0
        for _ in range(m):
            s = step(s, T / m, p)
        return s.u

    ref = integrate(256)
    e4, e8, e16 = (sup_abs(integrate(m) - ref) for m in (4, 8, 16))
    assert math.log2(e4 / e8) >= 3.7 and math.log2(e8 / e16) >= 3.7


def test_w_cache_coherent():
    p = FlowProblem(smooth_config())
    s = step(initial_state(p), 1e-4, p)
    assert sup_abs(s.w - ma_rhs(s.u, p)) == 0


def test_stable_dt_formula():
    g = MetricField.flat(make_grid(1, 64))
    assert stable_dt(g, 0.4) == pytest.approx(0.4 / (64 * math.pi) ** 2, rel=1e-15)
    g2 = MetricField.flat(make_grid(1, 128))
    assert stable_dt(g2, 0.4) == pytest.approx(stable_dt(g, 0.4) / 4, rel=1e-15)


def test_stable_dt_monotone_in_pinching():
    grid = make_grid(1, 32)
    dts = [stable_dt(metric_from_potential(grid, cosine(grid, a)), 0.4) for a in (0.0, 0.03, 0.06, 0.09)]
    assert all(b < a for a, b in zip(dts, dts[1:]))


# -- configuration ------------------------------------------------------------------------

@pytest.mark.parametrize("bad", [
    {"t_end": 0}, {"cfl": 0}, {"cfl": 1.5}, {"cadence": 0}, {"N": 20}, {"n": 3}, {"dt_fixed": -1.0},
    {"margin": 0}, {"k_max": 3}, {"m_max": 0}, {"bogus": 1}, {"initial": {"kind": "spline"}},
    {"initial": {"kind": "bandlimited", "K": 30, "amplitude": 0.1}}, {"monitor_times": [2.0]},
])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        cfg = FlowConfig.from_dict({"n": 1, "N": 32, "t_end": 1.0, **bad})
        FlowProblem(cfg)


def test_load_config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"n": 1, "N": 32, "t_end": 0.5, "initial": {"kind": "cosine", "amplitude": 0.01}}))
    cfg = load_config(path)
    assert cfg.initial == PotentialSpec("cosine", 0.01) and cfg.t_end == 0.5
    assert FlowConfig.from_dict(cfg.to_dict()) == cfg
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")


# -- runs ---------------------------------------------------------------------------------

def test_flat_run():
    res = run(FlowConfig(n=1, N=16, t_end=1.0, cfl=1.0, cadence=500))
    assert res.termination == "reached_t_end" and res.records[-1].t == 1.0
    for r in res.records:
        assert max(r.rm) <= 1e-12 and r.Q_sup <= 1e-12 and r.w_sup == 0 and r.C_eq == 1.0


def test_inadmissible_start_breaks_down_at_t0():
    # smallest eigenvalue 1 - 0.097 pi^2 = 0.043 is below the 0.05 margin
    res = run(FlowConfig(n=1, N=32, initial=PotentialSpec("cosine", 0.097)))
    assert res.termination == "positivity_loss" and res.steps == 0
    assert res.breakdown["t"] == 0.0 and res.breakdown["eigenvalue"] == pytest.approx(1 - 0.097 * np.pi**2)
    assert res.records[0].flags == "inadmissible" and res.records[0].C_eq > 20


def test_run_is_monotone_and_conserves_volume():
    res = run(smooth_config(t_end=2e-3))
    t = res.series("t")
    assert np.all(np.diff(t) > 0) and res.completed
    vol = res.series("volume")
    assert np.max(np.abs(vol - vol[0])) <= 1e-8 * vol[0]
    assert not res.f_user_supplied


def test_user_supplied_f_is_flagged():
    cfg = smooth_config(t_end=2e-4)
    res = run(cfg, f=np.zeros((16, 16)))
    assert res.f_user_supplied and res.sup_f == 0


def test_monitor_times_are_hit_exactly():
    res = run(smooth_config(t_end=1e-3, dt_fixed=None, cfl=1.0, cadence=10**6, monitor_times=[2.5e-4, 7e-4]))
    assert [r.t for r in res.records] == [0.0, 2.5e-4, 7e-4, 1e-3]


def test_fixed_step_determinism():
    a, b = run(smooth_config()), run(smooth_config())
    assert [r.to_dict() for r in a.records] == [r.to_dict() for r in b.records]
    assert a.final_state.u.tobytes() == b.final_state.u.tobytes()


# -- checkpoints ------------------------------------------------------------------------------

def test_checkpoint_roundtrip_bytes(tmp_path):
    res = run(smooth_config(t_end=3e-4))
    p1 = tmp_path / "a.krf"
    checkpoint_save(res.problem, res.final_state, res.records, p1)
    problem, state, records = checkpoint_load(p1)
    p2 = tmp_path / "b.krf"
    checkpoint_save(problem, state, records, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert p1.read_bytes().startswith(b"KRFLAB-CKPT v1\n")
    assert state.u.tobytes() == res.final_state.u.tobytes()
    assert state.w.tobytes() == res.final_state.w.tobytes()


def test_checkpoint_integrity(tmp_path):
    res = run(smooth_config(t_end=2e-4))
    data = checkpoint_bytes(res.problem, res.final_state, res.records)
    (tmp_path / "trunc.krf").write_bytes(data[: len(data) // 2])
    with pytest.raises(CheckpointError):
        checkpoint_load(tmp_path / "trunc.krf")
    flipped = bytearray(data)
    flipped[len(data) // 2] ^= 0x01
    (tmp_path / "flip.krf").write_bytes(bytes(flipped))
    with pytest.raises(CheckpointError, match="checksum"):
        checkpoint_load(tmp_path / "flip.krf")
    with pytest.raises(CheckpointError):
        checkpoint_load(tmp_path / "absent.krf")


def test_checkpoint_version_mismatch(tmp_path):
    import hashlib

    res = run(smooth_config(t_end=2e-4))
    data = checkpoint_bytes(res.problem, res.final_state, res.records)
    payload = data[: data.rfind(b"CHECKSUM ")].replace(b"KRFLAB-CKPT v1", b"KRFLAB-CKPT v9", 1)
    digest = hashlib.blake2b(payload, digest_size=8).hexdigest()
    (tmp_path / "v9.krf").write_bytes(payload + f"CHECKSUM {digest}\n".encode())
    with pytest.raises(CheckpointError, match="version"):
        checkpoint_load(tmp_path / "v9.krf")


def test_resume_matches_uninterrupted_run_bitwise(tmp_path):
    cfg = smooth_config(t_end=1e-3, checkpoint_cadence=4)
    full = run(cfg)
    ckpt = tmp_path / "mid.krf"
    partial = run(cfg.with_overrides(t_end=4e-4), checkpoint_path=ckpt)
    assert partial.completed
    # continue the checkpoint under the original horizon
    problem, state, records = checkpoint_load(ckpt)
    problem.config = cfg
    checkpoint_save(problem, state, records, ckpt)
    resumed = resume(ckpt)
    assert resumed.final_state.u.tobytes() == full.final_state.u.tobytes()
    assert [r.to_dict() for r in resumed.records] == [r.to_dict() for r in full.records]
