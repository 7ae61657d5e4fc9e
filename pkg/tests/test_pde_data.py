"""Synthetic PDE data: solvers, trajectory generators, and the MNOD container."""

import numpy as np
import pytest

import mno.pde_data as pde
from mno.pde_data import (
    DarcyConfig,
    DatasetFormatError,
    DRConfig,
    GridField,
    SampleSet,
    SolverError,
    SWEConfig,
    build_sampleset,
    gen_darcy_coefficient,
    generate_sample,
    read_sampleset,
    simulate_diffusion_reaction,
    simulate_shallow_water,
    solve_darcy,
    solve_darcy_rhs,
    write_sampleset,
)


class TestGridField:
    def test_2d_data_gains_channel_axis(self):
        gf = GridField(np.zeros((5, 5)))
        assert gf.shape == (5, 5, 1)

    def test_small_grid_rejected(self):
        with pytest.raises(ValueError):
            GridField(np.zeros((3, 5, 1)))

    def test_non_finite_rejected(self):
        bad = np.zeros((5, 5))
        bad[0, 0] = np.nan
        with pytest.raises(ValueError):
            GridField(bad)


class TestConfigValidation:
    def test_darcy_field_values_positive(self):
        with pytest.raises(ValueError):
            DarcyConfig(field_values=(0.0, 12.0))

    def test_swe_cfl_bounds(self):
        with pytest.raises(ValueError):
            SWEConfig(cfl=1.5)
        with pytest.raises(ValueError):
            SWEConfig(cfl=0.0)

    def test_swe_boundary_names(self):
        with pytest.raises(ValueError):
            SWEConfig(boundary="periodic")

    def test_dr_safety_bounds(self):
        with pytest.raises(ValueError):
            DRConfig(safety=1.2)


class TestDarcyCoefficient:
    def test_values_are_two_level(self):
        a = gen_darcy_coefficient(DarcyConfig(grid=16), seed=3).data[:, :, 0]
        assert set(np.unique(a)) <= {3.0, 12.0}

    def test_threshold_convention_zero_field_maps_high(self, monkeypatch):
        monkeypatch.setattr(pde, "_grf", lambda n, c, rng: np.zeros((n, n)))
        a = gen_darcy_coefficient(DarcyConfig(grid=8), seed=0).data
        assert np.all(a == 12.0)

    def test_high_fraction_near_half(self):
        fracs = [np.mean(gen_darcy_coefficient(DarcyConfig(grid=32), seed=s).data
                         == 12.0) for s in range(100)]
        assert abs(np.mean(fracs) - 0.5) <= 0.05

    def test_seeded_determinism(self):
        a1 = gen_darcy_coefficient(DarcyConfig(grid=16), seed=11).data
        a2 = gen_darcy_coefficient(DarcyConfig(grid=16), seed=11).data
        assert np.array_equal(a1, a2)


class TestDarcySolver:
    def test_zero_forcing_gives_zero(self):
        a = gen_darcy_coefficient(DarcyConfig(grid=16), seed=0)
        u = solve_darcy(a, beta=0.0)
        assert np.all(u.data == 0.0)

    def test_linear_in_forcing(self):
        a = gen_darcy_coefficient(DarcyConfig(grid=16), seed=1)
        u1 = solve_darcy(a, beta=1.0).data
        u3 = solve_darcy(a, beta=3.0).data
        assert np.max(np.abs(u3 - 3.0 * u1)) <= 1e-10 * np.max(np.abs(u3))

    def test_maximum_principle_positive_forcing(self):
        a = gen_darcy_coefficient(DarcyConfig(grid=24), seed=2)
        u = solve_darcy(a, beta=1.0).data[:, :, 0]
        assert np.all(u >= -1e-12)
        assert np.all(u[0, :] == 0.0) and np.all(u[:, -1] == 0.0)

    def test_nonpositive_coefficient_rejected(self):
        a = np.ones((8, 8))
        a[4, 4] = 0.0
        with pytest.raises(ValueError):
            solve_darcy_rhs(a, np.ones((8, 8)))

    def test_constant_coefficient_matches_eigenfunction(self):
        # -lap(u) = f with u = sin(pi x) sin(pi y): f = 2 pi^2 u.
        n = 65
        x = np.linspace(0.0, 1.0, n)
        xx, yy = np.meshgrid(x, x, indexing="ij")
        u_exact = np.sin(np.pi * xx) * np.sin(np.pi * yy)
        f = 2.0 * np.pi ** 2 * u_exact
        u = solve_darcy_rhs(np.ones((n, n)), f)
        assert np.max(np.abs(u - u_exact)) <= 5e-3


class TestShallowWater:
    def test_flat_lake_is_stationary(self):
        cfg = SWEConfig(grid=16, t_end=0.5, n_frames=6)
        frames = simulate_shallow_water(cfg, seed=0,
                                        h_init=np.full((16, 16), 1.5))
        assert np.array_equal(frames[-1], frames[0])

    def test_reflective_walls_conserve_mass(self):
        cfg = SWEConfig(grid=24, t_end=0.5, n_frames=6, boundary="reflective")
        frames = simulate_shallow_water(cfg, seed=4)
        mass = frames[:, :, :, 0].sum(axis=(1, 2))
        assert np.max(np.abs(mass - mass[0])) <= 1e-10 * mass[0]

    def test_depth_stays_positive_and_bounded(self):
        cfg = SWEConfig(grid=32, t_end=1.0, n_frames=11)
        frames = simulate_shallow_water(cfg, seed=7)
        h = frames[:, :, :, 0]
        assert np.all(h > 0.0) and np.max(h) <= 2.0 + 1e-12

    def test_quarter_turn_symmetry_of_radial_break(self):
        cfg = SWEConfig(grid=32, t_end=0.3, n_frames=4)
        h = simulate_shallow_water(cfg, seed=0, r=0.5)[-1, :, :, 0]
        assert np.max(np.abs(h - np.rot90(h))) <= 1e-6

    def test_radius_override_changes_initial_frame(self):
        cfg = SWEConfig(grid=16, t_end=0.1, n_frames=2)
        h_small = simulate_shallow_water(cfg, seed=0, r=0.4)[0, :, :, 0]
        h_large = simulate_shallow_water(cfg, seed=0, r=1.4)[0, :, :, 0]
        assert (h_large == 2.0).sum() > (h_small == 2.0).sum()
        assert set(np.unique(h_small)) == {1.0, 2.0}


class TestDiffusionReaction:
    def test_fixed_point_is_stationary(self):
        cfg = DRConfig(grid=8, t_end=1.0, n_frames=3)
        w = -cfg.k ** (1.0 / 3.0)
        init = (np.full((8, 8), w), np.full((8, 8), w))
        frames = simulate_diffusion_reaction(cfg, init=init)
        assert np.max(np.abs(frames[-1] - w)) <= 1e-8

    def test_pure_diffusion_conserves_mean(self):
        cfg = DRConfig(grid=16, t_end=1.0, n_frames=3)
        frames = simulate_diffusion_reaction(cfg, seed=5, with_reactions=False)
        m0 = frames[0].mean(axis=(0, 1))
        m1 = frames[-1].mean(axis=(0, 1))
        assert np.max(np.abs(m1 - m0)) <= 1e-12

    def test_pure_diffusion_contracts_range(self):
        cfg = DRConfig(grid=16, t_end=2.0, n_frames=3)
        frames = simulate_diffusion_reaction(cfg, seed=6, with_reactions=False)
        assert np.ptp(frames[-1][:, :, 0]) < np.ptp(frames[0][:, :, 0])

    def test_unstable_start_raises_solver_error(self):
        # with the default small diffusivities the stable step is large
        # (dt ~ 2.5), so the cubic reaction overshoots from a big start
        cfg = DRConfig(grid=8, t_end=5.0, n_frames=6, safety=1.0)
        init = (np.full((8, 8), 5.0), np.zeros((8, 8)))
        with pytest.raises(SolverError):
            simulate_diffusion_reaction(cfg, init=init)

    def test_seeded_determinism(self):
        cfg = DRConfig(grid=8, t_end=0.2, n_frames=3)
        f1 = simulate_diffusion_reaction(cfg, seed=9)
        f2 = simulate_diffusion_reaction(cfg, seed=9)
        assert np.array_equal(f1, f2)


class TestSampleGeneration:
    def test_darcy_channels_and_solution_oracle(self):
        cfg = DarcyConfig(grid=16)
        inp, tgt = generate_sample("darcy", cfg, sample_seed=13)
        assert inp.shape == (16, 16, 2) and tgt.shape == (16, 16, 1)
        assert np.all(inp.data[:, :, 1] == cfg.beta)
        a = gen_darcy_coefficient(cfg, seed=13)
        assert np.array_equal(inp.data[:, :, 0], a.data[:, :, 0].astype(np.float32))
        u = solve_darcy(a, cfg.beta).data.astype(np.float32)
        assert np.array_equal(tgt.data, u)

    def test_sw2d_frame_split_and_dt(self):
        cfg = SWEConfig(grid=8, t_end=0.2, n_frames=15)
        inp, tgt = generate_sample("sw2d", cfg, sample_seed=0)
        assert inp.shape == (8, 8, 10) and tgt.shape == (8, 8, 5)
        assert inp.dt == pytest.approx(cfg.t_end / (cfg.n_frames - 1))
        traj = simulate_shallow_water(cfg, seed=0)
        assert np.array_equal(inp.data[:, :, 3],
                              traj[3, :, :, 0].astype(np.float32))

    def test_dr2d_interleaves_two_species(self):
        cfg = DRConfig(grid=8, t_end=0.2, n_frames=12)
        inp, tgt = generate_sample("dr2d", cfg, sample_seed=0)
        assert inp.shape == (8, 8, 20) and tgt.shape == (8, 8, 4)
        traj = simulate_diffusion_reaction(cfg, seed=0)
        assert np.array_equal(inp.data[:, :, 2 * 4 + 1],
                              traj[4, :, :, 1].astype(np.float32))

    def test_unknown_task_rejected(self):
        with pytest.raises(ValueError):
            generate_sample("burgers", DarcyConfig(grid=8), 0)


class TestSampleSets:
    def test_split_is_disjoint_and_exhaustive(self):
        sset = build_sampleset("darcy", 3, 2, DarcyConfig(grid=8), seed=0)
        assert sset.split["train"] == [0, 1, 2]
        assert sset.split["test"] == [3, 4]
        with pytest.raises(ValueError):
            SampleSet(samples=sset.samples,
                      split={"train": [0, 1], "test": [1, 2, 3, 4]})

    def test_samples_independent_of_set_size(self):
        small = build_sampleset("darcy", 1, 1, DarcyConfig(grid=8), seed=5)
        large = build_sampleset("darcy", 3, 1, DarcyConfig(grid=8), seed=5)
        assert np.array_equal(small.samples[0][0].data, large.samples[0][0].data)
        assert np.array_equal(small.samples[1][1].data, large.samples[1][1].data)

    def test_regeneration_from_recorded_seed(self):
        sset = build_sampleset("darcy", 2, 1, DarcyConfig(grid=8), seed=7)
        s = sset.provenance["sample_seeds"][1]
        inp, tgt = generate_sample("darcy", DarcyConfig(grid=8), s)
        assert np.array_equal(inp.data, sset.samples[1][0].data)
        assert np.array_equal(tgt.data, sset.samples[1][1].data)


class TestDatasetContainer:
    def _sset(self):
        return build_sampleset("darcy", 2, 1, DarcyConfig(grid=8), seed=2)

    def test_round_trip(self, tmp_path):
        sset = self._sset()
        path = tmp_path / "d.mnod"
        write_sampleset(sset, path)
        back = read_sampleset(path)
        assert back.split == sset.split
        assert back.provenance["sample_seeds"] == sset.provenance["sample_seeds"]
        for (i1, t1), (i2, t2) in zip(sset.samples, back.samples):
            assert np.array_equal(i1.data, i2.data)
            assert np.array_equal(t1.data, t2.data)
            assert i1.extent == i2.extent and i1.dt == i2.dt

    def test_rewrite_is_byte_identical(self, tmp_path):
        p1, p2 = tmp_path / "a.mnod", tmp_path / "b.mnod"
        write_sampleset(self._sset(), p1)
        write_sampleset(read_sampleset(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()
        assert (tmp_path / "a.mnod.split.json").read_bytes() == \
               (tmp_path / "b.mnod.split.json").read_bytes()

    def test_time_metadata_survives_round_trip(self, tmp_path):
        cfg = SWEConfig(grid=8, t_end=0.2, n_frames=12)
        sset = build_sampleset("sw2d", 1, 1, cfg, seed=0)
        path = tmp_path / "t.mnod"
        write_sampleset(sset, path)
        back = read_sampleset(path)
        assert back.samples[0][0].extent == ((-2.5, 2.5), (-2.5, 2.5))
        assert back.samples[0][0].dt == pytest.approx(0.2 / 11)

    def test_bad_magic_reports_offset_zero(self, tmp_path):
        path = tmp_path / "bad.mnod"
        path.write_bytes(b"ZZZZ" + b"\x00" * 16)
        with pytest.raises(DatasetFormatError) as exc:
            read_sampleset(path)
        assert exc.value.offset == 0

    def test_truncation_reports_offset(self, tmp_path):
        path = tmp_path / "t.mnod"
        write_sampleset(self._sset(), path)
        blob = path.read_bytes()
        path.write_bytes(blob[:len(blob) - 7])
        with pytest.raises(DatasetFormatError) as exc:
            read_sampleset(path)
        assert 0 < exc.value.offset <= len(blob) - 7
