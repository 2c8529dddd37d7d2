//! Finite-difference cases for every differentiable op on the tape, each
//! paired with its 64-bit reference.

use super::*;

/// Worst relative gradient error of every op, probed at up to 100
/// coordinates each (1000 for the composed MLP).
pub fn op_gradient_errors() -> Vec<(&'static str, f64)> {
    let mut out = vec![
        (
            "matmul",
            check_op(
                &[vec![3, 4], vec![4, 2]],
                &|g, v| g.matmul(v[0], v[1]).unwrap(),
                &|x| matmul(&x[0], &x[1], 3, 4, 2),
                100,
                1,
            ),
        ),
        (
            "linear",
            check_op(
                &[vec![5, 3], vec![4, 3], vec![4]],
                &|g, v| g.linear(v[0], v[1], Some(v[2])).unwrap(),
                &|x| linear(&x[0], &x[1], Some(&x[2]), 5, 3, 4),
                100,
                2,
            ),
        ),
    ];
    for (name, trans) in [("bmm", false), ("bmm_t", true)] {
        let bshape = if trans { vec![2, 4, 3] } else { vec![2, 3, 4] };
        let w = check_op(
            &[vec![2, 5, 3], bshape],
            &move |g, v| g.bmm(v[0], v[1], trans).unwrap(),
            &move |x| {
                let mut out = Vec::new();
                for b in 0..2 {
                    let a = &x[0][b * 15..(b + 1) * 15];
                    let bb = &x[1][b * 12..(b + 1) * 12];
                    if trans {
                        out.extend(linear(a, bb, None, 5, 3, 4));
                    } else {
                        out.extend(matmul(a, bb, 5, 3, 4));
                    }
                }
                out
            },
            100,
            3,
        );
        out.push((name, w));
    }
    out.push((
        "permute/reshape",
        check_op(
            &[vec![2, 3, 4]],
            &|g, v| {
                let p = g.permute(v[0], &[2, 0, 1]).unwrap();
                g.reshape(p, &[4, 6]).unwrap()
            },
            &|x| {
                let mut out = Vec::new();
                for k in 0..4 {
                    for i in 0..2 {
                        for j in 0..3 {
                            out.push(x[0][(i * 3 + j) * 4 + k]);
                        }
                    }
                }
                out
            },
            100,
            4,
        ),
    ));
    out.push((
        "add/mul/scale",
        check_op(
            &[vec![3, 4], vec![4], vec![4]],
            &|g, v| {
                let a = g.add(v[0], v[1]).unwrap();
                let m = g.mul(a, v[2]).unwrap();
                g.scale(m, 0.7)
            },
            &|x| {
                (0..12)
                    .map(|i| 0.7 * (x[0][i] + x[1][i % 4]) * x[2][i % 4])
                    .collect()
            },
            100,
            5,
        ),
    ));
    out.push((
        "softmax",
        check_op(
            &[vec![3, 5]],
            &|g, v| g.softmax(v[0]),
            &|x| x[0].chunks(5).flat_map(softmax).collect(),
            100,
            6,
        ),
    ));
    out.push((
        "log_softmax",
        check_op(
            &[vec![2, 6]],
            &|g, v| g.log_softmax(v[0]),
            &|x| x[0].chunks(6).flat_map(log_softmax).collect(),
            100,
            7,
        ),
    ));
    for (name, mask) in [
        ("layernorm", None),
        (
            "layernorm_masked",
            Some(vec![1.0f32, 0.0, 1.0, 1.0, 0.0, 1.0]),
        ),
    ] {
        let keep: Vec<bool> = mask
            .as_ref()
            .map_or(vec![true; 6], |m| m.iter().map(|&x| x > 0.0).collect());
        let w = check_op(
            &[vec![4, 6], vec![6], vec![6]],
            &move |g, v| {
                g.layernorm(v[0], v[1], v[2], mask.as_deref(), 1e-6)
                    .unwrap()
            },
            &move |x| {
                x[0].chunks(6)
                    .flat_map(|row| layernorm(row, &x[1], &x[2], &keep, 1e-6))
                    .collect()
            },
            100,
            8,
        );
        out.push((name, w));
    }
    out.push((
        "gelu",
        check_op(
            &[vec![100]],
            &|g, v| g.gelu(v[0]),
            &|x| x[0].iter().map(|&v| gelu(v)).collect(),
            100,
            10,
        ),
    ));
    out.push((
        "tokens",
        check_op(
            &[vec![2, 3, 4], vec![4], vec![4]],
            &|g, v| {
                let t = g.assemble_tokens(v[0], v[1], v[2]).unwrap();
                let a = g.select_token(t, 1).unwrap();
                let b = g.select_token(t, 3).unwrap();
                g.add(a, b).unwrap()
            },
            &|x| {
                (0..2)
                    .flat_map(|b| (0..4).map(move |c| (b, c)))
                    .map(|(b, c)| x[2][c] + x[0][(b * 3 + 1) * 4 + c])
                    .collect()
            },
            100,
            11,
        ),
    ));
    let labels = [2usize, 0, 4];
    out.push((
        "cross_entropy",
        check_op(
            &[vec![3, 5]],
            &move |g, v| g.cross_entropy(v[0], &labels).unwrap(),
            &move |x| vec![cross_entropy(&x[0], &labels)],
            100,
            12,
        ),
    ));
    let target: Vec<f64> = uniform(&mut rng(13), 15, 2.0)
        .chunks(5)
        .flat_map(softmax)
        .collect();
    let t32 = to_f32(&target);
    out.push((
        "kl_div",
        check_op(
            &[vec![3, 5]],
            &move |g, v| g.kl_div(v[0], &t32).unwrap(),
            &move |x| vec![kl_div(&x[0], &target, 5)],
            100,
            14,
        ),
    ));
    out.push((
        "sum/mean",
        check_op(
            &[vec![4, 3]],
            &|g, v| {
                let s = g.sum(v[0]);
                let m = g.mean(v[0]);
                g.add(s, m).unwrap()
            },
            &|x| vec![x[0].iter().sum::<f64>() * (1.0 + 1.0 / 12.0)],
            100,
            15,
        ),
    ));
    let labels = [0usize, 2, 1, 2, 0, 1];
    out.push((
        "mlp",
        check_op(
            &[vec![6, 5], vec![8, 5], vec![8], vec![3, 8], vec![3]],
            &move |g, v| {
                let h = g.linear(v[0], v[1], Some(v[2])).unwrap();
                let h = g.gelu(h);
                let z = g.linear(h, v[3], Some(v[4])).unwrap();
                g.cross_entropy(z, &labels).unwrap()
            },
            &move |x| {
                let h: Vec<f64> = linear(&x[0], &x[1], Some(&x[2]), 6, 5, 8)
                    .into_iter()
                    .map(gelu)
                    .collect();
                let z = linear(&h, &x[3], Some(&x[4]), 6, 8, 3);
                vec![cross_entropy(&z, &labels)]
            },
            1000,
            16,
        ),
    ));
    out
}
