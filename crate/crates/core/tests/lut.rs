mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use vitprune::analysis::{latency_fit, r_squared};
use vitprune::lut::*;
use vitprune::model::{block_macs, ArchSpec, BlockDims, MaskSet};

#[test]
fn paper_grid_has_9375_measured_points_plus_zero_plane() {
    let g = LutGrid::paper();
    assert_eq!(g.emb, [0, 256, 512, 768]);
    assert_eq!(g.qk, [1, 16, 32, 48, 64]);
    assert_eq!(g.mlp.len(), 25);
    assert_eq!(*g.mlp.last().unwrap(), 3072);
    assert_eq!(g.measured_points(), 3 * 5 * 5 * 5 * 25);
    assert_eq!(g.measured_points(), 9375);
    assert_eq!(g.total_points() - g.measured_points(), 5 * 5 * 5 * 25);
    let lut = analytic_lut(&g, 1, 198).unwrap();
    assert_eq!(lut.values.len(), g.total_points());
    assert!(lut.values.iter().all(|&v| v >= 0.0));
}

#[test]
fn analytic_points_are_closed_form_macs_and_zero_plane_is_zero() {
    let lut = analytic_lut(&LutGrid::desk(), 3, 18).unwrap();
    for i in 0..lut.values.len() {
        let [e, h, qk, v, m] = lut.grid.point(i);
        let want = if e == 0 {
            0.0
        } else {
            3.0 * block_macs(e, &BlockDims::new(h, qk, v, m), 18) as f64
        };
        assert_eq!(lut.values[i], want);
    }
}

/// Runner that replays a fixed noise sequence and records where it ran.
struct Scripted {
    noise: Vec<f64>,
    calls: usize,
    zero_emb_calls: usize,
}

impl BlockRunner for Scripted {
    fn kind(&self) -> RunnerKind {
        RunnerKind::WallClock
    }

    fn run(&mut self, emb: usize, _: BlockDims) -> vitprune::error::Result<f64> {
        self.zero_emb_calls += (emb == 0) as usize;
        let v = self.noise[self.calls % self.noise.len()];
        self.calls += 1;
        Ok(v)
    }
}

#[test]
fn profiled_values_are_medians_of_repeats() {
    let mut r = rng(1);
    let noise: Vec<f64> = (0..100).map(|_| r.random::<f64>()).collect();
    let mut sorted = noise.clone();
    sorted.sort_by(f64::total_cmp);
    let want = 0.5 * (sorted[49] + sorted[50]);
    let grid = LutGrid {
        emb: vec![0, 4],
        h: vec![1, 2],
        qk: vec![1, 2],
        v: vec![1, 2],
        mlp: vec![1, 3],
    };
    let mut runner = Scripted {
        noise,
        calls: 0,
        zero_emb_calls: 0,
    };
    let lut = profile(&grid, &mut runner, 100, 1, 6).unwrap();
    assert_eq!(runner.zero_emb_calls, 0);
    assert_eq!(runner.calls, 100 * grid.measured_points());
    for (i, v) in lut.values.iter().enumerate() {
        let expect = if grid.point(i)[0] == 0 { 0.0 } else { want };
        assert_eq!(*v, expect);
    }
}

#[test]
fn runner_failure_names_the_grid_point() {
    struct Failing;
    impl BlockRunner for Failing {
        fn kind(&self) -> RunnerKind {
            RunnerKind::Analytic
        }
        fn run(&mut self, emb: usize, d: BlockDims) -> vitprune::error::Result<f64> {
            Ok(if d.mlp == 3 && emb == 4 {
                f64::NAN
            } else {
                1.0
            })
        }
    }
    let grid = LutGrid {
        emb: vec![0, 4],
        h: vec![1, 2],
        qk: vec![1, 2],
        v: vec![1, 2],
        mlp: vec![1, 3],
    };
    let err = profile(&grid, &mut Failing, 1, 1, 6)
        .unwrap_err()
        .to_string();
    assert!(err.contains("emb=4 h=1 qk=1 v=1 mlp=3"), "{err}");
}

#[test]
fn wall_clock_runner_fills_a_small_grid() {
    let grid = LutGrid {
        emb: vec![0, 8],
        h: vec![1, 2],
        qk: vec![1, 4],
        v: vec![1, 4],
        mlp: vec![1, 8],
    };
    let mut runner = WallClockRunner::new(2, 6, 0).unwrap();
    let lut = profile(&grid, &mut runner, 3, 2, 6).unwrap();
    assert_eq!(lut.runner, RunnerKind::WallClock);
    assert!(lut.values.iter().all(|v| v.is_finite() && *v >= 0.0));
    assert!(WallClockRunner::new(2, 7, 0).is_err());
}

#[test]
fn interpolation_is_exact_at_every_grid_point() {
    let lut = random_lut(2);
    for i in 0..lut.values.len() {
        let q = lut.grid.point(i).map(|x| x as f64);
        assert_eq!(lut.interpolate(q).unwrap(), lut.values[i], "point {q:?}");
    }
}

#[test]
fn interpolation_matches_corner_sum_oracle() {
    let lut = random_lut(3);
    let mut r = rng(4);
    for _ in 0..1000 {
        let q = random_query(&lut, &mut r);
        let got = lut.interpolate(q).unwrap();
        let want = corner_sum(&lut, q);
        assert!((got - want).abs() < 1e-9, "{q:?}: {got} vs {want}");
    }
}

#[test]
fn midpoint_on_one_axis_is_the_neighbor_mean() {
    let lut = random_lut(5);
    let g = &lut.grid;
    for a in 0..5 {
        let ax = g.axes()[a];
        let mut idx = [1, 1, 1, 1, 1];
        let lo = lut.value_at(idx);
        idx[a] += 1;
        let hi = lut.value_at(idx);
        let mut q = [g.emb[1], g.h[1], g.qk[1], g.v[1], g.mlp[1]].map(|x| x as f64);
        q[a] = 0.5 * (ax[1] + ax[2]) as f64;
        assert!((lut.interpolate(q).unwrap() - 0.5 * (lo + hi)).abs() < 1e-12);
    }
}

#[test]
fn interpolation_is_continuous_across_cell_boundaries() {
    let lut = random_lut(6);
    let mut r = rng(7);
    for _ in 0..200 {
        let mut q = random_query(&lut, &mut r);
        let a = r.random_range(0..5);
        let ax = lut.grid.axes()[a];
        q[a] = ax[r.random_range(1..ax.len() - 1)] as f64;
        let at = lut.interpolate(q).unwrap();
        for d in [-1e-9, 1e-9] {
            let mut p = q;
            p[a] += d;
            assert!((lut.interpolate(p).unwrap() - at).abs() < 1e-6);
        }
    }
}

#[test]
fn out_of_bounds_queries_are_rejected() {
    let lut = random_lut(8);
    assert!(lut.interpolate([193.0, 1.0, 1.0, 1.0, 1.0]).is_err());
    assert!(lut.interpolate([64.0, 1.0, 1.0, 1.0, 769.0]).is_err());
    assert!(lut.interpolate([-1.0, 1.0, 1.0, 1.0, 1.0]).is_err());
    assert!(lut.interpolate([64.0, 1.0, f64::NAN, 1.0, 1.0]).is_err());
}

#[test]
fn model_latency_sums_block_values() {
    let lut = random_lut(9);
    let g = &lut.grid;
    let mut spec = ArchSpec::desk(8);
    spec.emb = g.emb[2];
    spec.blocks = vec![
        BlockDims::new(g.h[1], g.qk[2], g.v[0], g.mlp[5]),
        BlockDims::new(g.h[3], g.qk[4], g.v[4], g.mlp[12]),
    ];
    let want = lut.value_at([2, 1, 2, 0, 5]) + lut.value_at([2, 3, 4, 4, 12]);
    assert!((lut.model_latency(&spec).unwrap() - want).abs() < 1e-12);
}

#[test]
fn emptied_block_costs_only_its_remaining_branch() {
    let lut = analytic_lut(&LutGrid::desk(), 1, 18).unwrap();
    let spec = ArchSpec::desk(8);
    let mut m = MaskSet::full(&spec);
    m.blocks[1].heads.iter_mut().for_each(|h| *h = false);
    let e = spec.emb;
    let direct: f64 = m
        .effective_spec(&spec)
        .blocks
        .iter()
        .map(|d| {
            (18 * (2 * e * d.h * d.qk + 2 * e * d.h * d.v + 2 * e * d.mlp)
                + 18 * 18 * d.h * (d.qk + d.v)) as f64
        })
        .sum();
    let got = lut.masked_latency(&spec, &m).unwrap();
    assert!((got - direct).abs() < 1e-6 * direct);
}

#[test]
fn text_round_trip_is_bit_exact_with_eight_header_rows() {
    let lut = random_lut(10);
    let text = lut.to_text();
    assert_eq!(LatencyLut::from_text(&text).unwrap(), lut);
    assert_eq!(text.lines().count(), 8 + lut.values.len());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lut.txt");
    lut.save(&path).unwrap();
    assert_eq!(LatencyLut::load(&path).unwrap(), lut);
    assert!(LatencyLut::from_text(&text.replacen("vitprune-lut 1", "vitprune-lut 9", 1)).is_err());
}

#[test]
fn estimated_latency_fits_direct_whole_model_cost() {
    let lut = analytic_lut(&LutGrid::desk(), 4, 18).unwrap();
    let mut r = rng(11);
    let specs: Vec<ArchSpec> = (0..200).map(|_| random_desk_spec(&mut r)).collect();
    let (pts, r2) = latency_fit(&lut, &specs).unwrap();
    let direct: Vec<f64> = specs.iter().map(|s| direct_cost(s, 4)).collect();
    for (p, d) in pts.iter().zip(&direct) {
        assert_eq!(p.direct, *d);
    }
    let est: Vec<f64> = specs
        .iter()
        .map(|s| lut.model_latency(s).unwrap())
        .collect();
    assert_eq!(r_squared(&est, &direct), r2);
    assert!(r2 >= 0.99, "R² = {r2}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn analytic_latency_is_monotone_in_every_dimension(seed in 0u64..10_000, block in 0usize..4, axis in 0usize..5, step in 1usize..16) {
        let lut = analytic_lut(&LutGrid::desk(), 1, 18).unwrap();
        let mut r = rng(seed);
        let mut spec = random_desk_spec(&mut r);
        spec.emb = spec.emb.min(192 - 16);
        let before = lut.model_latency(&spec).unwrap();
        let d = &mut spec.blocks[block];
        match axis {
            0 => spec.emb += step,
            1 => d.h = (d.h + 1).min(4),
            2 => d.qk = (d.qk + step).min(32),
            3 => d.v = (d.v + step).min(32),
            _ => d.mlp = (d.mlp + step).min(768),
        }
        prop_assert!(lut.model_latency(&spec).unwrap() >= before);
    }

    #[test]
    fn interpolation_stays_within_cell_bounds(seed in 0u64..10_000) {
        let lut = random_lut(seed);
        let q = random_query(&lut, &mut rng(seed + 1));
        let v = lut.interpolate(q).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
    }
}
