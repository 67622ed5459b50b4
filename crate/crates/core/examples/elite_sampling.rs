//! Local (block argmax) and cluster-based elite sampling over a reward pool,
//! with the softmax weights each selection receives.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rftcast::grip::{adaptive_weights, kmeans_1d, sample_cluster_random, sample_local_random, KMEANS_MAX_ITER};

fn main() {
    // k = 3, G = 4: a pool of 12 with one format failure
    let pool = [2.1, 1.9, 2.3, -1.0, 2.0, 2.2, 1.2, 1.1, 1.3, 2.4, 0.4, 2.35];
    let local = sample_local_random(&pool, 3, 4);
    println!("local elites {local:?}");

    let c = kmeans_1d(&pool, 4, KMEANS_MAX_ITER);
    println!("cluster centroids {:?}", c.centroids);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cluster = sample_cluster_random(&pool, 4, 4, &mut rng);
    println!("cluster elites {cluster:?}");

    for tau in [1.0, 0.1, 0.02] {
        let scores: Vec<f64> = cluster.iter().map(|&i| pool[i]).collect();
        let w = adaptive_weights(&scores, tau);
        println!(
            "tau {tau}: weights {:?}",
            w.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>()
        );
    }
}
