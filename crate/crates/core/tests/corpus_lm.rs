use itts_core::corpus::{generate_corpus, MarkovChain};
use itts_core::lm::{train_lm, LmConfig};
use itts_core::nn::AdamConfig;

/// Stationary distribution by power iteration (independent of the sampler).
fn stationary(chain: &MarkovChain) -> Vec<f64> {
    let n = chain.size();
    let mut p = vec![1.0 / n as f64; n];
    for _ in 0..2000 {
        let mut next = vec![0.0; n];
        for (i, row) in chain.transitions.iter().enumerate() {
            for (j, q) in row.iter().enumerate() {
                next[j] += p[i] * q;
            }
        }
        p = next;
    }
    p
}

fn tv(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

#[test]
fn word_frequencies_follow_the_stationary_distribution() {
    let c = generate_corpus(21, 32, 6000, (4, 14)).unwrap();
    let pi = stationary(&c.chain);
    let mut counts = vec![0.0; 32];
    let mut total = 0.0;
    for s in &c.sentences {
        for &w in s.words() {
            counts[w - 2] += 1.0;
            total += 1.0;
        }
    }
    let freq: Vec<f64> = counts.iter().map(|c| c / total).collect();
    let d = tv(&freq, &pi);
    assert!(d < 0.03, "tv {d}");
}

#[test]
fn trained_lm_conditionals_approach_the_chain() {
    let c = generate_corpus(22, 12, 3000, (4, 10)).unwrap();
    let cfg = LmConfig {
        embed_dim: 16,
        hidden: 32,
        iterations: 400,
        batch_size: 32,
        learning_rate: 1e-2,
        grad_clip: 5.0,
    };
    let (lm, _) = train_lm(&c.sentences, c.vocab.len(), &cfg, &AdamConfig::default(), 1).unwrap();
    let untrained = itts_core::lm::LanguageModel::new(c.vocab.len(), 16, 32, 1);
    let pi = stationary(&c.chain);
    // After one word the sentence cannot end yet, so the next word follows
    // the chain row exactly.
    let (mut trained_tv, mut base_tv) = (0.0, 0.0);
    for (i, weight) in pi.iter().enumerate() {
        let w = i + 2;
        let row = &c.chain.transitions[i];
        let p = lm.next_distribution(&[w]).unwrap();
        let q = untrained.next_distribution(&[w]).unwrap();
        let regular = |d: &[f64]| d[2..].to_vec();
        trained_tv += weight * tv(&regular(&p), row);
        base_tv += weight * tv(&regular(&q), row);
    }
    assert!(trained_tv < 0.12, "trained tv {trained_tv}");
    assert!(trained_tv < 0.5 * base_tv, "trained {trained_tv} untrained {base_tv}");
}
