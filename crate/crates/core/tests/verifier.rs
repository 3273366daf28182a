use ndarray::Array2;
use nprobe::nn::ParamSet;
use nprobe::rng::rng_for;
use nprobe::verifier::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn shape() -> VerifierShape {
    VerifierShape {
        input_dim: 5,
        frames: 4,
        width: 8,
        heads: 2,
    }
}

fn inputs(n: usize, seed: u64, sh: VerifierShape) -> Vec<Array2<f64>> {
    let mut rng = rng_for(&[seed, 77]);
    (0..n)
        .map(|_| Array2::from_shape_simple_fn((sh.frames, sh.input_dim), || StandardNormal.sample(&mut rng)))
        .collect()
}

fn items<'a>(x: &'a [Array2<f64>], seed: u64) -> Vec<VerifierItem<'a>> {
    let mut rng = rng_for(&[seed, 78]);
    x.iter()
        .enumerate()
        .map(|(i, f)| VerifierItem {
            features: f,
            t: if i % 3 == 0 { 200 } else { 600 },
            y_pc: rng.random::<bool>(),
            y_sem: rng.random::<bool>(),
        })
        .collect()
}

fn weights() -> LossWeights {
    LossWeights {
        lambda_pc: 1.0,
        lambda_sem: 0.7,
        pos_weight_pc: 1.857143,
        pos_weight_sem: 0.5,
    }
}

#[test]
fn analytic_gradient_matches_central_differences() {
    let h = 1e-5;
    for seed in 0..5u64 {
        let sh = shape();
        let mut params = VerifierParams::init(sh, seed).unwrap();
        // Non-trivial LayerNorm parameters so their gradients are exercised.
        let mut rng = rng_for(&[seed, 79]);
        for v in params.ln_attn.gamma.iter_mut().chain(params.ln_final.gamma.iter_mut()) {
            *v = 1.0 + 0.3 * rng.random::<f64>();
        }
        for v in params.ln_attn.beta.iter_mut().chain(params.ln_final.beta.iter_mut()) {
            *v = 0.2 * (rng.random::<f64>() - 0.5);
        }
        let x = inputs(6, seed, sh);
        let batch = items(&x, seed);
        let w = weights();
        let (_, grad, diag) = loss_and_grad(&params, &batch, &w).unwrap();
        assert_eq!(diag.clamped, 0);
        let analytic = grad.to_flat();
        let names: Vec<(String, usize)> = params.tensors().iter().map(|(n, t)| (n.clone(), t.len())).collect();
        let base = params.to_flat();
        let mut probe = params.clone();
        let mut idx = 0;
        for (name, len) in names {
            for _ in 0..len {
                let mut p = base.clone();
                p[idx] = base[idx] + h;
                probe.load_flat(&p);
                let up = total_loss(&probe, &batch, &w).unwrap();
                p[idx] = base[idx] - h;
                probe.load_flat(&p);
                let down = total_loss(&probe, &batch, &w).unwrap();
                let fd = (up - down) / (2.0 * h);
                let a = analytic[idx];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
                assert!(rel <= 1e-4, "seed {seed} {name}[{idx}]: analytic {a} fd {fd}");
                idx += 1;
            }
        }
    }
}

#[test]
fn zero_heads_make_bias_gradient_the_weighted_residual_mean() {
    let sh = shape();
    let mut params = VerifierParams::init(sh, 4).unwrap();
    for head in [&mut params.pc, &mut params.sem] {
        head.fc2.w.fill(0.0);
        head.fc2.b.fill(0.0);
    }
    let x = inputs(10, 4, sh);
    let mut batch = items(&x, 4);
    batch.iter_mut().for_each(|b| b.t = 400);
    let w = LossWeights {
        lambda_pc: 1.0,
        lambda_sem: 1.0,
        pos_weight_pc: 2.5,
        pos_weight_sem: 1.5,
    };
    let (_, grad, _) = loss_and_grad(&params, &batch, &w).unwrap();
    let expect = |label: &dyn Fn(&VerifierItem) -> bool, pw: f64| {
        batch
            .iter()
            .map(|b| {
                let y = label(b);
                (if y { pw } else { 1.0 }) * (0.5 - y as u8 as f64)
            })
            .sum::<f64>()
            / batch.len() as f64
    };
    assert!((grad.pc.fc2.b[0] - expect(&|b| b.y_pc, 2.5)).abs() < 1e-15);
    assert!((grad.sem.fc2.b[0] - expect(&|b| b.y_sem, 1.5)).abs() < 1e-15);
}

#[test]
fn positional_gradient_is_generally_nonzero_for_every_frame() {
    let sh = shape();
    let params = VerifierParams::init(sh, 2).unwrap();
    let x = inputs(8, 2, sh);
    let batch = items(&x, 2);
    let (_, grad, _) = loss_and_grad(&params, &batch, &weights()).unwrap();
    assert_eq!(grad.pos.dim(), (sh.frames, sh.width));
    for row in grad.pos.rows() {
        assert!(row.iter().any(|v| *v != 0.0));
    }
}

#[test]
fn earlier_frame_summaries_ignore_later_frames() {
    let sh = VerifierShape {
        input_dim: 12,
        frames: 6,
        width: 16,
        heads: 4,
    };
    let params = VerifierParams::init(sh, 9).unwrap();
    let xs = inputs(20, 9, sh);
    for x in &xs {
        let base = params.forward(&[x]).unwrap().summaries;
        for k in 1..sh.frames {
            let mut y = x.clone();
            for j in 0..sh.input_dim {
                y[[k, j]] += 3.0;
            }
            let pert = params.forward(&[&y]).unwrap().summaries;
            for r in 0..k {
                for c in 0..sh.width {
                    assert_eq!(base[[r, c]].to_bits(), pert[[r, c]].to_bits());
                }
            }
            assert!((0..sh.width).any(|c| base[[k, c]] != pert[[k, c]]));
        }
    }
}

#[test]
fn single_frame_attention_is_self_value() {
    let sh = VerifierShape {
        input_dim: 3,
        frames: 1,
        width: 4,
        heads: 2,
    };
    let p = VerifierParams::init(sh, 1).unwrap();
    let x = Array2::from_shape_vec((1, 3), vec![0.3, -0.2, 0.9]).unwrap();
    let out = p.forward(&[&x]).unwrap();
    let f = p.proj.forward(&x) + &p.pos;
    let (n, _) = p.ln_attn.forward(&f);
    let expect = &f + &p.attn.o.forward(&p.attn.v.forward(&n));
    for (a, b) in out.summaries.iter().zip(expect.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn loss_is_additive_over_heads_and_invariant_to_duplication() {
    let sh = shape();
    let params = VerifierParams::init(sh, 6).unwrap();
    let x = inputs(7, 6, sh);
    let batch = items(&x, 6);
    let both = LossWeights {
        lambda_pc: 1.0,
        lambda_sem: 1.0,
        ..weights()
    };
    let pc_only = LossWeights { lambda_sem: 0.0, ..both };
    let sem_only = LossWeights { lambda_pc: 0.0, ..both };
    let total = total_loss(&params, &batch, &both).unwrap();
    let sum = total_loss(&params, &batch, &pc_only).unwrap() + total_loss(&params, &batch, &sem_only).unwrap();
    assert!((total - sum).abs() <= 1e-12);
    let doubled: Vec<VerifierItem> = batch.iter().chain(batch.iter()).copied().collect();
    assert!((total_loss(&params, &doubled, &both).unwrap() - total).abs() <= 1e-12);

    let one = &batch[..1];
    let out = params.forward(&[one[0].features]).unwrap();
    let direct = wbce_loss(one[0].y_pc, out.s_pc[0], both.pos_weight_pc).0 + wbce_loss(one[0].y_sem, out.s_sem[0], both.pos_weight_sem).0;
    assert!((total_loss(&params, one, &both).unwrap() - direct).abs() <= 1e-12);
    assert!(total_loss(&params, &[], &both).is_err());
}

#[test]
fn pos_weight_is_negative_over_positive() {
    let labels: Vec<bool> = (0..100).map(|i| i < 35).collect();
    assert!((pos_weight(&labels).unwrap() - 1.857143).abs() < 1e-6);
    assert!(pos_weight(&[true, true]).is_err());
}
