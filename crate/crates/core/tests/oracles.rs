//! Reference values computed at 30 significant digits outside this crate,
//! plus brute-force oracles for the ranking metrics.

use pvit::metrics::{auroc, fpr_at_tpr};
use pvit::model::Params;
use pvit::rng::SeededRng;
use pvit::scoring::{base_score, cefe_expand, energy, guidance_ce, guidance_kl};
use pvit::tensor::logsumexp;
use pvit::train::{adam_step, OptimizerState, TrainConfig};
use pvit::Tensor;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

#[test]
fn logsumexp_reference() {
    let v = logsumexp(&[-3.5, 0.125, 7.25, 7.0, -20.0]);
    assert!(close(v, 7.826_403_770_144_779, 1e-15), "{v}");
    assert!(close(base_score(&[1.0, 2.0, 3.0]).unwrap(), 3.407_605_964_444_380_3, 1e-15));
    assert!(close(energy(&[1.0, 2.0, 3.0]).unwrap(), -3.407_605_964_444_380_3, 1e-15));
}

#[test]
fn cefe_reference() {
    let (factored, expanded) = cefe_expand(&[1.0, 2.0, 3.0], 2).unwrap();
    let want = 1.388_960_515_583_774_3;
    assert!(close(factored, want, 1e-12), "{factored}");
    assert!(close(expanded, want, 1e-12), "{expanded}");
    // CE guidance times the base score is the same product.
    let g = guidance_ce(&[1.0, 2.0, 3.0], 2).unwrap();
    assert!(close(g * base_score(&[1.0, 2.0, 3.0]).unwrap(), want, 1e-12));
}

#[test]
fn kl_reference() {
    let kl = guidance_kl(&[0.5, -1.25, 2.0], &[1.5, 0.25, -0.75]).unwrap();
    assert!(close(kl, 1.554_386_297_014_920_5, 1e-13), "{kl}");
}

#[test]
fn adam_reference_trajectory() {
    let mut params = Params::new();
    params.push("x", Tensor::row(vec![1.0]).unwrap());
    let mut state = OptimizerState::new(&params);
    let cfg = TrainConfig { weight_decay: 0.0, base_lr: 0.1, ..TrainConfig::default() };
    let want = [0.900_000_000_5, 0.800_412_228_691_792_1, 0.701_586_272_946_029_5];
    for w in want {
        let x = params.tensor(0).data()[0];
        adam_step(&mut params, &[vec![2.0 * x]], &mut state, 0.1, &cfg).unwrap();
        let got = params.tensor(0).data()[0];
        assert!(close(got, w, 1e-14), "{got} vs {w}");
    }
}

fn auroc_pairs(id: &[f64], ood: &[f64]) -> f64 {
    let mut credit = 0.0;
    for &a in id {
        for &b in ood {
            credit += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
        }
    }
    credit / (id.len() * ood.len()) as f64
}

/// Sweeps every candidate threshold and keeps the highest one whose TPR
/// still reaches the target.
fn fpr_sweep(id: &[f64], ood: &[f64], tpr: f64) -> (f64, f64) {
    let mut cands = id.to_vec();
    cands.sort_by(|a, b| b.total_cmp(a));
    for &g in &cands {
        let hit = id.iter().filter(|&&s| s >= g).count();
        if hit as f64 / id.len() as f64 >= tpr {
            let fp = ood.iter().filter(|&&s| s >= g).count();
            return (fp as f64 / ood.len() as f64, g);
        }
    }
    unreachable!()
}

/// Scores on a coarse grid so that ties within and across sets are common.
fn tied_scores(rng: &mut SeededRng, n: usize, shift: i64) -> Vec<f64> {
    (0..n).map(|_| (rng.below(9) as i64 + shift) as f64 * 0.25).collect()
}

#[test]
fn metrics_match_brute_force() {
    let mut rng = SeededRng::new(77);
    for case in 0..200 {
        let (n_id, n_ood) = (1 + rng.below(40), 1 + rng.below(40));
        let (id, ood) = if case % 2 == 0 {
            (tied_scores(&mut rng, n_id, 2), tied_scores(&mut rng, n_ood, 0))
        } else {
            let id = (0..n_id).map(|_| rng.normal() + 0.5).collect::<Vec<_>>();
            (id, (0..n_ood).map(|_| rng.normal()).collect())
        };
        assert!((auroc(&id, &ood).unwrap() - auroc_pairs(&id, &ood)).abs() <= 1e-12, "case {case}");
        for tpr in [0.5, 0.9, 0.95, 1.0] {
            assert_eq!(fpr_at_tpr(&id, &ood, tpr).unwrap(), fpr_sweep(&id, &ood, tpr), "case {case} tpr {tpr}");
        }
    }
}

#[test]
fn metric_worked_examples() {
    assert_eq!(auroc(&[3.0, 4.0], &[1.0, 2.0]).unwrap(), 1.0);
    assert_eq!(auroc(&[1.0], &[1.0]).unwrap(), 0.5);
    assert_eq!(auroc(&[1.0, 3.0], &[2.0, 2.0]).unwrap(), 0.5);
    // 20 ID scores 1..=20: 95% keeps the top 19, so γ = 2.
    let id: Vec<f64> = (1..=20).map(f64::from).collect();
    let (fpr, gamma) = fpr_at_tpr(&id, &[0.5, 1.5, 2.0, 2.5], 0.95).unwrap();
    assert_eq!(gamma, 2.0);
    assert_eq!(fpr, 0.5);
}
