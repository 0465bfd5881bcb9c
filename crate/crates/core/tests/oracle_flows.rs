use std::collections::BTreeMap;

use gdpo_core::objectives::gdpo_db_loss;
use gdpo_core::oracle::{
    db_objective, exact_flows, optimal_policy, policy_terminal_dist, train_db_exact, tv_distance, DbTrainConfig,
    EnumMdp,
};
use gdpo_core::policy::{next_logprobs, Context, TabularPolicy};
use gdpo_core::rewards::TokenRewardTrack;
use gdpo_core::rng;
use gdpo_core::TokenId;

fn random_mdp(seed: u64) -> EnumMdp<f64> {
    let mut r = rng::stream(seed, "random-mdp", 0);
    let symbols = 2 + (rng::uniform01(&mut r) * 2.0) as usize;
    let max_len = 2 + (rng::uniform01(&mut r) * 3.0) as usize;
    EnumMdp::from_fn(symbols, max_len, |_| 0.5 + 4.5 * rng::uniform01(&mut r)).unwrap()
}

#[test]
fn converged_db_policy_samples_proportionally_to_reward() {
    for seed in 0..5 {
        let mdp = random_mdp(seed);
        let flows = exact_flows(&mdp).unwrap();
        let fit = train_db_exact(&mdp, seed, &DbTrainConfig::default()).unwrap();
        assert!(fit.residual < 1e-10, "seed {seed}: residual {}", fit.residual);
        let dist = policy_terminal_dist(&fit.policy, &mdp).unwrap();
        let tv = tv_distance(&dist, &flows.target).unwrap();
        assert!(tv < 1e-4, "seed {seed}: tv {tv}");
    }
}

#[test]
fn exact_flow_track_has_zero_db_loss() {
    let mdp = random_mdp(11);
    let flows = exact_flows(&mdp).unwrap();
    let pi = optimal_policy(&mdp, &flows).unwrap();
    let eos = mdp.eos() as usize;
    for y in mdp.rewards().keys() {
        let mut track = TokenRewardTrack {
            logp: vec![],
            eos_logp: vec![],
            log_reward: vec![],
            mask: vec![],
        };
        for k in 1..=y.len() {
            let before = next_logprobs(&pi, Context::new(&[], &y[..k - 1])).unwrap();
            let after = next_logprobs(&pi, Context::new(&[], &y[..k])).unwrap();
            track.logp.push(before[y[k - 1] as usize]);
            track.eos_logp.push(after[eos]);
            track.log_reward.push(mdp.reward(&y[..k]).unwrap().ln());
            track.mask.push(true);
        }
        let loss = gdpo_db_loss(&track).unwrap();
        assert!(loss < 1e-12, "{y:?}: {loss}");
    }
}

#[test]
fn optimal_policy_is_a_db_fixed_point() {
    for seed in 0..3 {
        let mdp = random_mdp(100 + seed);
        let flows = exact_flows(&mdp).unwrap();
        let pi = optimal_policy(&mdp, &flows).unwrap();
        assert!(db_objective(&mdp, &pi, flows.z.ln(), None).unwrap() < 1e-12);
        let dist = policy_terminal_dist(&pi, &mdp).unwrap();
        assert!(tv_distance(&dist, &flows.target).unwrap() < 1e-10);
    }
}

#[test]
fn parents_are_unique_and_flows_conserve() {
    let mdp = random_mdp(3);
    let states = mdp.states().unwrap();
    let mut seen = std::collections::HashSet::new();
    for s in &states {
        assert!(seen.insert(s.clone()));
        if !s.is_empty() {
            assert!(seen.contains(&s[..s.len() - 1]), "parent of {s:?} listed later");
        }
    }
    let flows = exact_flows(&mdp).unwrap();
    for s in &states {
        let mut rhs = mdp.reward(s).copied().unwrap_or(0.0);
        for a in 0..mdp.num_symbols() as TokenId {
            let mut c = s.clone();
            c.push(a);
            rhs += flows.flows.get(&c).copied().unwrap_or(0.0);
        }
        let f = flows.flows[s];
        assert!((f - rhs).abs() <= 1e-12 * f);
    }
}

#[test]
fn uniform_table_terminal_probabilities() {
    let mdp = EnumMdp::from_fn(2, 2, |_| 1.0f64).unwrap();
    let uniform = TabularPolicy::<f64>::zeros(mdp.shape(), &[vec![]]);
    let dist = policy_terminal_dist(&uniform, &mdp).unwrap();
    // depth 0 has two choices, depth 1 has three
    assert!((dist[&vec![0]] - 1.0 / 6.0).abs() < 1e-15);
    assert!((dist[&vec![1, 1]] - 1.0 / 6.0).abs() < 1e-15);
    let expected: BTreeMap<Vec<TokenId>, f64> = dist.keys().map(|k| (k.clone(), 1.0 / 6.0)).collect();
    assert!(tv_distance(&dist, &expected).unwrap() < 1e-12);
}
