//! Train LRML and CML on a synthetic latent-factor dataset and print test
//! metrics, as a quick end-to-end smoke of the whole pipeline:
//!
//! ```text
//! cargo run -p lrml --example synthetic_demo --release
//! ```

use lrml::data::{leave_one_out_split, Dataset};
use lrml::eval::{evaluate, EvalSplit};
use lrml::model::ModelKind;
use lrml::optim::{train, TrainConfig};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

/// Users and items get latent factors; each user interacts with their
/// highest-affinity items, so a ranking model has real structure to find.
fn latent_factor_dataset(
    num_users: usize,
    num_items: usize,
    per_user: usize,
    factors: usize,
    seed: u64,
) -> Dataset {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut draw = |n: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                (0..factors)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect()
    };
    let user_factors = draw(num_users);
    let item_factors = draw(num_items);

    let interactions = user_factors
        .iter()
        .map(|z| {
            let mut scored: Vec<(f64, u32)> = item_factors
                .iter()
                .enumerate()
                .map(|(i, w)| {
                    let affinity: f64 = z.iter().zip(w).map(|(a, b)| a * b).sum();
                    let noise: f64 = rng.sample::<f64, _>(StandardNormal);
                    (affinity + 0.5 * noise, i as u32)
                })
                .collect();
            scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            let mut items: Vec<u32> = scored[..per_user].iter().map(|&(_, i)| i).collect();
            items.sort_unstable();
            items
        })
        .collect();
    Dataset::from_interactions(num_items, interactions).unwrap()
}

fn main() {
    let ds = latent_factor_dataset(600, 400, 25, 6, 42);
    println!(
        "synthetic dataset: {} users x {} items, {} interactions (density {:.3})",
        ds.num_users(),
        ds.num_items(),
        ds.num_interactions(),
        ds.density()
    );
    let split = leave_one_out_split(&ds, 7).unwrap();

    for kind in [
        ModelKind::Lrml,
        ModelKind::Cml,
        ModelKind::Bpr,
        ModelKind::Mf,
    ] {
        let config = TrainConfig {
            model_kind: kind,
            dim: 32,
            memory_slices: 10,
            max_epochs: 120,
            patience_epochs: 15,
            seed: 42,
            ..TrainConfig::default()
        };
        let start = std::time::Instant::now();
        let outcome = train(&split, &config).unwrap();
        let report = evaluate(&split, &outcome.best_params, EvalSplit::Test).unwrap();
        println!(
            "{kind}: test HR@10 {:.4} nDCG@10 {:.4} (best epoch {}, {} epochs, {:.1}s)",
            report.hr10,
            report.ndcg10,
            outcome.best_epoch,
            outcome.log.len(),
            start.elapsed().as_secs_f64()
        );
    }
}
