use gdpo_core::corpus::PreferencePair;
use gdpo_core::numerics::{fd_check, Differentiable};
use gdpo_core::objectives::{
    batch_loss, db_residuals, gdpo_db_loss, pairwise_baseline_loss, prepare_pairs, LossConfig, Method, PolicyObjective,
};
use gdpo_core::policy::{Context, NeuralDims, NeuralPolicy, Policy, PolicyShape, TabularPolicy};
use gdpo_core::rewards::{build_tracks, RewardConfig};
use gdpo_core::rng;
use gdpo_core::scalar::sigmoid;

fn shape() -> PolicyShape {
    PolicyShape {
        vocab_size: 6,
        eos_id: 5,
        sep_id: Some(4),
        max_response_len: 5,
    }
}

fn dims() -> NeuralDims {
    NeuralDims {
        embed_dim: 4,
        window: 5,
        hidden: 8,
    }
}

fn pairs(seed: u64, n: usize) -> Vec<PreferencePair> {
    let mut r = rng::stream(seed, "pairs", 0);
    let mut draw = |lo: usize, hi: usize| lo + (rng::uniform01(&mut r) * (hi - lo + 1) as f64) as usize;
    (0..n)
        .map(|_| {
            let mut seq = |len: usize| (0..len).map(|_| draw(0, 3) as u32).collect::<Vec<_>>();
            let (lp, lc, lr) = (2, 1 + (seed as usize + 1) % 5, 1 + (seed as usize + 3) % 5);
            PreferencePair {
                prompt: seq(lp),
                chosen: seq(lc),
                rejected: seq(lr),
            }
        })
        .collect()
}

fn random_table(seed: u64, prompts: &[Vec<u32>]) -> TabularPolicy<f64> {
    let mut r = rng::stream(seed, "table", 0);
    TabularPolicy::from_fn(shape(), prompts, |_| {
        Ok((0..6).map(|_| 2.0 * rng::uniform01(&mut r) - 1.0).collect())
    })
    .unwrap()
}

#[test]
fn terminal_row_does_not_move_the_final_residual() {
    let pair = PreferencePair {
        prompt: vec![1, 2],
        chosen: vec![0, 3, 1],
        rejected: vec![2, 2],
    };
    let prompts = vec![pair.prompt.clone()];
    let pi = random_table(1, &prompts);
    let pi_ref = random_table(2, &prompts);
    let cfg = RewardConfig::default();
    let loss_of = |p: &TabularPolicy<f64>, chosen: bool| {
        let (c, r) = build_tracks(p, &pi_ref, &pair, &cfg).unwrap();
        let res = db_residuals(if chosen { &c } else { &r }).unwrap();
        res.last().copied().flatten().unwrap()
    };
    let h = 1e-5;
    for (chosen, content) in [(true, &pair.chosen), (false, &pair.rejected)] {
        let probe = |prefix: &[u32]| -> f64 {
            let mut worst: f64 = 0.0;
            for v in 0..6 {
                let mut up = pi.clone();
                up.row_mut(Context::new(&pair.prompt, prefix)).unwrap()[v] += h;
                let mut dn = pi.clone();
                dn.row_mut(Context::new(&pair.prompt, prefix)).unwrap()[v] -= h;
                worst = worst.max(((loss_of(&up, chosen) - loss_of(&dn, chosen)) / (2.0 * h)).abs());
            }
            worst
        };
        let last = probe(content);
        assert!(last < 1e-8, "terminal row derivative {last}");
        let mut closed = content.clone();
        closed.push(5);
        let post = probe(&closed);
        assert!(post > 1e-4, "post-EOS row should matter, got {post}");
    }
}

#[test]
fn dpo_and_ipo_fixed_points_on_neural_batches() {
    let p = NeuralPolicy::<f64>::new(shape(), dims(), 5);
    let data = pairs(4, 6);
    for pair in &data {
        let dpo = pairwise_baseline_loss(&p, &p, pair, &LossConfig::with_method(Method::Dpo)).unwrap();
        assert!((dpo - std::f64::consts::LN_2).abs() < 1e-9);
        let ipo = pairwise_baseline_loss(&p, &p, pair, &LossConfig::with_method(Method::Ipo)).unwrap();
        assert!((ipo - 25.0).abs() < 1e-9);
    }
}

#[test]
fn sigmoid_link_is_symmetric() {
    for i in -50..=50 {
        let w = i as f64 * 0.37;
        assert!((sigmoid(w) + sigmoid(-w) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn every_objective_passes_fd_check_at_three_seeds() {
    for method in Method::ALL {
        for seed in 1..=3 {
            let p = NeuralPolicy::<f64>::new(shape(), dims(), 10 + seed);
            let r = NeuralPolicy::<f64>::new(shape(), dims(), 20 + seed);
            let cfg = LossConfig::with_method(method);
            let batch = prepare_pairs(&pairs(seed, 3), 5, Some(&r), &cfg.reward).unwrap();
            let obj = PolicyObjective {
                policy: &p,
                batch: &batch,
                cfg: &cfg,
            };
            let rep = fd_check(&obj, p.params(), 1e-5, seed).unwrap();
            assert!(rep.max_rel_error < 1e-4, "{method} seed {seed}: {rep:?}");
        }
    }
}

#[test]
fn one_small_step_from_the_reference_lowers_pairwise_losses() {
    let p = NeuralPolicy::<f64>::new(shape(), dims(), 33);
    let data = pairs(7, 4);
    for method in [Method::Dpo, Method::Ipo, Method::Cpo, Method::Slic, Method::Orpo] {
        let cfg = LossConfig::with_method(method);
        let batch = prepare_pairs(&data, 5, Some(&p), &cfg.reward).unwrap();
        let obj = PolicyObjective {
            policy: &p,
            batch: &batch,
            cfg: &cfg,
        };
        let (l0, g) = obj.value_and_grad(p.params()).unwrap();
        let decreased = [1e-1, 1e-2, 1e-3, 1e-4, 1e-5].iter().any(|&lr| {
            let moved: Vec<f64> = p.params().iter().zip(&g).map(|(w, d)| w - lr * d).collect();
            obj.value(&moved).unwrap() < l0
        });
        assert!(decreased, "{method}");
    }
}

#[test]
fn gdpo_batch_is_the_mean_of_pair_sums() {
    let p = NeuralPolicy::<f64>::new(shape(), dims(), 1);
    let r = NeuralPolicy::<f64>::new(shape(), dims(), 2);
    let data = pairs(9, 5);
    let cfg = LossConfig::with_method(Method::Gdpo);
    let batch = prepare_pairs(&data, 5, Some(&r), &cfg.reward).unwrap();
    let got = batch_loss(&p, &batch, &cfg, None).unwrap().loss;
    let mut want = 0.0;
    for pair in &data {
        let (c, rj) = build_tracks(&p, &r, pair, &cfg.reward).unwrap();
        want += gdpo_db_loss(&c).unwrap() + gdpo_db_loss(&rj).unwrap();
    }
    want /= data.len() as f64;
    assert!((got - want).abs() < 1e-10 * want.max(1.0));
}

#[test]
fn f32_objectives_agree_with_f64() {
    let p64 = NeuralPolicy::<f64>::new(shape(), dims(), 3);
    let p32 = NeuralPolicy::<f32>::new(shape(), dims(), 3);
    let data = pairs(2, 3);
    for method in Method::ALL {
        let cfg = LossConfig::with_method(method);
        let b64 = prepare_pairs(&data, 5, Some(&p64), &cfg.reward).unwrap();
        let b32 = prepare_pairs(&data, 5, Some(&p32), &cfg.reward).unwrap();
        let l64 = batch_loss(&p64, &b64, &cfg, None).unwrap().loss;
        let l32 = batch_loss(&p32, &b32, &cfg, None).unwrap().loss as f64;
        assert!(
            (l64 - l32).abs() < 1e-3 * l64.abs().max(1.0),
            "{method}: {l64} vs {l32}"
        );
    }
}
