import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from isingflow.dataset import (
    build_dataset,
    compute_observables,
    conditional_samples,
    load_dataset,
    read_observables_csv,
    save_dataset,
)
from isingflow.lattice import SpinGrid, hamiltonian, magnetization
from isingflow.montecarlo import rng_stream


def test_observables_of_identical_grids():
    g = SpinGrid.all_up(4)
    r = compute_observables([g, g, g], 0.5)
    assert r.e == -2.0 and r.m == 1.0
    assert r.cv == 0.0 and r.chi == 0.0
    assert r.temperature == 2.0 and r.n_samples == 3


def test_single_sample_has_no_fluctuations():
    r = compute_observables([SpinGrid.checkerboard(4)], 1.0)
    assert r.cv is None and r.chi is None
    assert r.e == 2.0 and r.m == 0.0
    with pytest.raises(ValueError):
        compute_observables([], 1.0)


def test_observables_against_direct_formulas(rng):
    beta = 0.37
    gs = [SpinGrid.random(5, rng) for _ in range(30)]
    h = np.array([hamiltonian(g) for g in gs])
    am = np.array([abs(magnetization(g)) for g in gs], dtype=float)
    r = compute_observables(gs, beta)
    assert r.e == pytest.approx(h.mean() / 25)
    assert r.m == pytest.approx(am.mean() / 25)
    assert r.cv == pytest.approx(beta**2 * np.var(h) / 25)
    assert r.chi == pytest.approx(beta * np.var(am) / 25)


@given(st.integers(0, 1000))
def test_observables_ignore_sample_order_and_global_flips(seed):
    rng = np.random.default_rng(seed)
    gs = [SpinGrid.random(4, rng) for _ in range(6)]
    flipped = [SpinGrid(-g.spins, 4) if i % 2 else g for i, g in enumerate(gs)][::-1]
    a, b = compute_observables(gs, 0.4), compute_observables(flipped, 0.4)
    for x, y in zip((a.e, a.m, a.cv, a.chi), (b.e, b.m, b.cv, b.chi)):
        assert x == pytest.approx(y, abs=1e-12)


def test_conditional_samples_are_cooled_copies():
    g = SpinGrid.random(12, rng_stream(5))
    beta = 0.5
    out, flags = conditional_samples(g, beta, 5, rng=rng_stream(5, 1))
    assert len(out) == 5 and all(flags)
    assert all(s.n == 12 for s in out)
    again, _ = conditional_samples(g, beta, 5, rng=rng_stream(5, 1))
    assert out == again
    assert len(set(out)) > 1
    with pytest.raises(ValueError):
        conditional_samples(g, beta, 0, rng=rng_stream(0))
    with pytest.raises(ValueError):
        conditional_samples(g, beta, 2)


def test_dataset_shape(tiny_dataset, tiny_schedule):
    ds = tiny_dataset
    assert ds.n_traj == 3 and ds.k_count == 4
    for t in ds.trajectories:
        assert len(t.grids) == len(tiny_schedule)
        assert len(t.conditional) == len(tiny_schedule) - 1
        assert all(len(c) == 4 for c in t.conditional)
    assert len(ds.samples_at(0)) == 3
    assert len(ds.samples_at(2)) == 3 + 3 * 4
    assert len(ds.samples_at(2, include_conditional=False)) == 3
    assert ds.nonconverged() == 0


def test_round_trip_and_layout(tmp_path, tiny_dataset):
    path = save_dataset(tiny_dataset, tmp_path / "ds")
    assert (path / "manifest.json").exists()
    assert (path / "trajectories" / "traj_0" / "grid_0.bin").stat().st_size == 36
    assert (path / "trajectories" / "traj_2" / "cond_3" / "k_3.bin").exists()
    back = load_dataset(path)
    for a, b in zip(tiny_dataset.trajectories, back.trajectories):
        assert a.grids == b.grids
        assert a.conditional == b.conditional
        assert a.converged == b.converged
    man = json.loads((path / "manifest.json").read_text())
    assert man["n"] == 6 and man["K"] == 4 and man["n_traj"] == 3
    assert len(man["schedule"]["temperatures"]) == 5
    obs = read_observables_csv(path / "observables.csv")
    ref = tiny_dataset.observables()
    assert [o.temperature for o in obs] == pytest.approx([r.temperature for r in ref])
    assert [o.e for o in obs] == pytest.approx([r.e for r in ref], abs=1e-9)


def test_refuses_to_overwrite(tmp_path, tiny_dataset):
    save_dataset(tiny_dataset, tmp_path / "ds")
    with pytest.raises(FileExistsError):
        save_dataset(tiny_dataset, tmp_path / "ds")
    save_dataset(tiny_dataset, tmp_path / "ds", force=True)


def test_incomplete_directory_is_rejected(tmp_path):
    (tmp_path / "half").mkdir()
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "half")


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_build_is_deterministic_and_thread_independent(tmp_path, tiny_schedule):
    a = build_dataset(tmp_path / "a", 5, tiny_schedule, 3, k_count=2, seed=11, threads=1)
    build_dataset(tmp_path / "b", 5, tiny_schedule, 3, k_count=2, seed=11, threads=3)
    build_dataset(tmp_path / "c", 5, tiny_schedule, 3, k_count=2, seed=12)
    assert a.n_grids == 3 * (5 + 4 * 2) and a.nonconverged == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    assert tree_bytes(tmp_path / "a") != tree_bytes(tmp_path / "c")


def test_build_arguments(tmp_path, tiny_schedule):
    with pytest.raises(ValueError):
        build_dataset(tmp_path / "x", 1, tiny_schedule, 2)
    with pytest.raises(ValueError):
        build_dataset(tmp_path / "y", 4, tiny_schedule, 0)
