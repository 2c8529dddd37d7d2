//! Shared checks built on the reference implementations: finite-difference
//! gradient probes, Taylor-versus-exact scoring and reachable mask states.

use rand::Rng;
use vitprune::data::{synthetic, Dataset, SyntheticSpec};
use vitprune::importance::*;
use vitprune::loss::{loss_total, LossConfig, LossMode, Targets};
use vitprune::model::{ArchSpec, MaskSet, Vit};
use vitprune::optim::{AdamConfig, AdamW};
use vitprune::pruner::{eligible_groups, PruneSchedule};
use vitprune::tensor::{Graph, Tensor, Var};
use vitprune::train::{compute_grads, evaluate, train, OptimConfig, Supervision, Teacher};

use super::*;

/// A differentiable op under test: builds its output from leaf inputs.
pub type Build = dyn Fn(&mut Graph, &[Var]) -> Var;

/// Checks the tape gradient of `Σ c·op(inputs)` against central differences
/// of the 64-bit oracle, at up to `probes` coordinates. Returns the worst
/// relative error.
pub fn check_op(
    shapes: &[Vec<usize>],
    build: &Build,
    oracle: &dyn Fn(&[Vec<f64>]) -> Vec<f64>,
    probes: usize,
    seed: u64,
) -> f64 {
    let mut r = rng(seed);
    let mut xs: Vec<Vec<f64>> = shapes
        .iter()
        .map(|s| uniform(&mut r, s.iter().product(), 1.0))
        .collect();
    let out_len = oracle(&xs).len();
    let coef = uniform(&mut r, out_len, 1.0);

    let mut g = Graph::new();
    let vars: Vec<Var> = shapes
        .iter()
        .zip(&xs)
        .map(|(s, x)| g.input(&Tensor::new(s.clone(), to_f32(x)).unwrap().requiring_grad()))
        .collect();
    let y = build(&mut g, &vars);
    assert_eq!(g.value(y).len(), out_len, "oracle and op disagree on size");
    let c = g.constant(g.shape(y).to_vec(), to_f32(&coef)).unwrap();
    let yc = g.mul(y, c).unwrap();
    let loss = g.sum(yc);
    g.backward(loss).unwrap();
    let grads: Vec<Vec<f64>> = vars.iter().map(|&v| to_f64(g.grad(v).unwrap())).collect();

    let total: usize = xs.iter().map(Vec::len).sum();
    let mut worst = 0f64;
    for k in 0..probes.min(total) {
        let flat = if probes >= total {
            k
        } else {
            r.random_range(0..total)
        };
        let (mut which, mut idx) = (0, flat);
        while idx >= xs[which].len() {
            idx -= xs[which].len();
            which += 1;
        }
        let mut f = |x: &[f64]| {
            let mut all = xs.clone();
            all[which] = x.to_vec();
            oracle(&all)
                .iter()
                .zip(&coef)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let mut x = xs[which].clone();
        let num = central_diff(&mut f, &mut x, idx, FD_EPS);
        worst = worst.max(rel_err(grads[which][idx], num));
        xs[which] = x;
    }
    worst
}

/// Relative errors of the tape gradient of the toy model's loss against
/// central differences of the reference forward, at `probes` random
/// parameter coordinates.
pub fn toy_vit_gradient_errors(probes: usize, seed: u64) -> Vec<f64> {
    let spec = toy_spec();
    let mut vit = toy_model(seed);
    let mut r = rng(seed + 1);
    randomize(&mut vit, &mut r, 0.5);
    let images = random_images(&spec, 3, &mut r);
    let labels: Vec<usize> = (0..3)
        .map(|_| r.random_range(0..spec.num_classes))
        .collect();
    let loss = LossConfig {
        mode: LossMode::CnnOnly,
        ..Default::default()
    };
    let sup = Supervision {
        loss: &loss,
        teacher: &Teacher::Labels,
        full: None,
    };
    compute_grads(&mut vit, None, &images, &labels, &sup).unwrap();
    let img64 = to_f64(images.data());
    let base = RefParams::of(&vit);
    let names: Vec<(String, usize)> = vit
        .params()
        .map(|(l, t)| (l.name.clone(), t.numel()))
        .collect();
    let total: usize = names.iter().map(|(_, n)| n).sum();
    (0..probes)
        .map(|_| {
            let mut flat = r.random_range(0..total);
            let (name, _) = names
                .iter()
                .find(|(_, n)| {
                    if flat < *n {
                        true
                    } else {
                        flat -= n;
                        false
                    }
                })
                .unwrap();
            let analytic = vit.get(name).unwrap().grad().unwrap()[flat] as f64;
            let mut x = base.get(name).to_vec();
            let mut f = |xs: &[f64]| {
                let mut p = base.clone();
                p.0.insert(name.clone(), xs.to_vec());
                ref_cnn_loss(&spec, &p, None, &img64, &labels)
            };
            let num = central_diff(&mut f, &mut x, flat, FD_EPS);
            rel_err(analytic, num)
        })
        .collect()
}

pub const UNIT: Divisors = Divisors {
    emb: Some(1.0),
    h: 1.0,
};

/// Group sizes that fit the toy model: every axis has several groups.
pub fn toy_sizes() -> GroupSizes {
    GroupSizes {
        emb: 4,
        h: 1,
        qk: 2,
        v: 2,
        mlp: 2,
    }
}

pub fn taylor_all(
    vit: &Vit,
    groups: &[PruneGroup],
    sizes: &GroupSizes,
    div: &Divisors,
) -> Vec<f64> {
    let sums = AxisSums::from_model(vit).unwrap();
    groups
        .iter()
        .map(|g| group_taylor(&sums, g, sizes, div, vit.spec().num_blocks()))
        .collect()
}

/// Installs `c` as every tensor's gradient, so `Σ c·w` is a loss whose
/// gradient the model holds.
pub fn install_linear_grads(vit: &mut Vit, c: &[Vec<f32>]) {
    vit.zero_grad();
    for (t, ci) in vit.tensors_mut().iter_mut().zip(c) {
        t.accumulate_grad(ci).unwrap();
    }
}

pub fn linear_loss(c: &[Vec<f32>]) -> impl FnMut(&Vit) -> vitprune::Result<f64> + '_ {
    move |vit: &Vit| {
        Ok(vit
            .tensors()
            .iter()
            .zip(c)
            .map(|(t, ci)| {
                t.data()
                    .iter()
                    .zip(ci)
                    .map(|(&w, &g)| w as f64 * g as f64)
                    .sum::<f64>()
            })
            .sum())
    }
}

/// Worst relative gap between Taylor and exact perturbation scores over every
/// group of a randomized toy model under a random linear loss.
pub fn linear_taylor_worst_gap(seed: u64, mode: AlignmentMode) -> f64 {
    let mut vit = toy_model(seed);
    randomize(&mut vit, &mut rng(seed + 10), 0.5);
    let mut r = rng(seed + 20);
    let c: Vec<Vec<f32>> = vit
        .tensors()
        .iter()
        .map(|t| to_f32(&uniform(&mut r, t.numel(), 1.0)))
        .collect();
    install_linear_grads(&mut vit, &c);
    let sizes = toy_sizes();
    let groups = enumerate_groups(vit.spec(), &sizes, mode);
    let taylor = taylor_all(&vit, &groups, &sizes, &UNIT);
    groups
        .iter()
        .zip(&taylor)
        .map(|(g, t)| {
            let exact = exact_perturbation(&mut vit, g, &sizes, &mut linear_loss(&c)).unwrap();
            (t - exact).abs() / exact.max(1.0)
        })
        .fold(0.0, f64::max)
}

pub fn toy_data(n: usize, seed: u64) -> Dataset {
    let spec = SyntheticSpec {
        classes: 4,
        side: 8,
        train: n,
        test: 4,
        noise: 0.8,
        seed,
        ..SyntheticSpec::default()
    };
    let (mut tr, _) = synthetic(&spec).unwrap();
    let stats = tr.channel_stats();
    tr.normalize_with(&stats);
    tr
}

/// Spearman correlation of Taylor and exact scores over every
/// single-coordinate-wide group, evaluated on the whole training set of a
/// toy model trained to at least 95% training accuracy.
pub fn converged_rank_correlation(seed: u64) -> f64 {
    let data = toy_data(256, seed);
    let mut vit = toy_model(seed);
    let loss_cfg = LossConfig {
        mode: LossMode::CnnOnly,
        ..LossConfig::default()
    };
    let teacher = Teacher::Labels;
    let sup = Supervision {
        loss: &loss_cfg,
        teacher: &teacher,
        full: None,
    };
    let cfg = OptimConfig {
        lr_base: 4e-2,
        batch_size: 32,
        epochs: 10,
        warmup_epochs: 2,
        ..OptimConfig::train()
    };
    let mut opt = AdamW::new(AdamConfig::default(), &vit);
    train(
        &mut vit,
        &mut opt,
        None,
        &data,
        &cfg,
        &sup,
        None,
        7,
        &mut |_| {},
    )
    .unwrap();
    let acc = evaluate(&vit, None, &data, 256).unwrap();
    assert!(acc >= 0.95, "toy model did not converge: {acc}");

    let all: Vec<usize> = (0..data.len()).collect();
    let (images, labels) = data.batch(&all, None).unwrap();
    compute_grads(&mut vit, None, &images, &labels, &sup).unwrap();
    let sizes = GroupSizes {
        emb: 1,
        h: 1,
        qk: 1,
        v: 1,
        mlp: 1,
    };
    let groups = enumerate_groups(vit.spec(), &sizes, AlignmentMode::HeadAligned);
    let taylor = taylor_all(&vit, &groups, &sizes, &UNIT);
    let mut loss = |v: &Vit| {
        let mut g = Graph::new();
        let out = v.forward(&mut g, &images, None, false)?;
        let t = Targets {
            labels: &labels,
            teacher_labels: Some(&labels),
            full_logits: None,
        };
        let l = loss_total(&mut g, &loss_cfg, out.logits_cls, out.logits_dist, &t)?;
        Ok(g.value(l)[0] as f64)
    };
    let exact: Vec<f64> = groups
        .iter()
        .map(|g| exact_perturbation(&mut vit, g, &sizes, &mut loss).unwrap())
        .collect();
    spearman(&taylor, &exact)
}

/// Removes, one after another, the eligible group at each of `picks`
/// (indices into the eligible list, wrapped).
pub fn apply_picks(
    spec: &ArchSpec,
    sizes: &GroupSizes,
    picks: &[usize],
) -> (MaskSet, Vec<(PruneGroup, MaskSet)>) {
    let groups = enumerate_groups(spec, sizes, AlignmentMode::HeadAligned);
    let schedule = PruneSchedule {
        group_sizes: *sizes,
        min_emb: sizes.emb,
        ..PruneSchedule::default()
    };
    let mut m = MaskSet::full(spec);
    let mut steps = Vec::new();
    for &p in picks {
        let live = eligible_groups(&groups, &schedule, &m);
        if live.is_empty() {
            break;
        }
        let g = live[p % live.len()];
        steps.push((g, m.clone()));
        remove_group(&g, sizes, &mut m);
    }
    (m, steps)
}
