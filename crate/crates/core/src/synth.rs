//! Synthetic interaction data: tiny toy graphs for tests and a MovieLens-100K
//! sized generator with genre-clustered tastes and long-tailed popularity.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Dirichlet, LogNormal};

use crate::error::{Error, Result};
use crate::graph::{Interaction, InteractionSet, Role};

/// `edges` distinct user-item pairs in which every user and every item occurs
/// at least once (when `edges` allows it).
pub fn toy_interactions(users: usize, items: usize, edges: usize, seed: u64) -> Result<InteractionSet> {
    if users == 0 || items == 0 {
        return Err(Error::invalid("users/items", "must be positive"));
    }
    if edges > users * items || edges < users.max(items) {
        return Err(Error::invalid(
            "edges",
            format!("need between {} and {} edges for {users}x{items}", users.max(items), users * items),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = BTreeSet::new();
    let mut item_order: Vec<u32> = (0..items as u32).collect();
    item_order.shuffle(&mut rng);
    for k in 0..users.max(items) {
        set.insert(((k % users) as u32, item_order[k % items]));
    }
    while set.len() < edges {
        set.insert((rng.gen_range(0..users as u32), rng.gen_range(0..items as u32)));
    }
    let records = set.into_iter().map(|(u, i)| Interaction::new(u, i)).collect();
    Ok(InteractionSet::new(users, items, records, Role::All))
}

/// Genre names in MovieLens order.
pub const GENRES: [&str; 18] = [
    "Action", "Adventure", "Animation", "Children's", "Comedy", "Crime", "Documentary", "Drama", "Fantasy",
    "Film-Noir", "Horror", "Musical", "Mystery", "Romance", "Sci-Fi", "Thriller", "War", "Western",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub users: usize,
    pub items: usize,
    /// Minimum interactions per user.
    pub min_per_user: usize,
    /// Median of the extra (above minimum) per-user activity.
    pub activity_median: f64,
    pub activity_sigma: f64,
    pub max_per_user: usize,
    /// Zipf exponent of item popularity.
    pub popularity_exponent: f64,
    /// Dirichlet concentration of user genre tastes (small → focused).
    pub taste_concentration: f64,
    /// Dimension of the latent preference space.
    pub latent_dim: usize,
    /// Scale of the user-item affinity in the choice logits.
    pub affinity: f64,
    /// Weight of item-specific (non-genre) latent variation.
    pub idiosyncrasy: f64,
    /// Probability an interaction ignores taste and follows popularity alone.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    /// Roughly MovieLens-100K: 943 users, 1682 items, about 10⁵ interactions.
    fn default() -> Self {
        Self {
            users: 943,
            items: 1682,
            min_per_user: 20,
            activity_median: 45.0,
            activity_sigma: 1.0,
            max_per_user: 700,
            popularity_exponent: 0.9,
            taste_concentration: 0.15,
            latent_dim: 4,
            affinity: 4.0,
            idiosyncrasy: 1.0,
            noise: 0.1,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    /// Ratings 1–5 with increasing timestamps per user.
    pub interactions: InteractionSet,
    pub ratings: Vec<u8>,
    /// Genre indices per item.
    pub item_genres: Vec<Vec<usize>>,
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    if cfg.users == 0 || cfg.items < 2 * cfg.min_per_user {
        return Err(Error::invalid("items", "must be at least twice the per-user minimum"));
    }
    let cap = cfg.max_per_user.min(cfg.items / 2).max(cfg.min_per_user);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let g = GENRES.len();

    let label_count = WeightedIndex::new([0.5, 0.35, 0.15]).expect("static weights");
    let item_genres: Vec<Vec<usize>> = (0..cfg.items)
        .map(|_| {
            let n = label_count.sample(&mut rng) + 1;
            let mut labels = rand::seq::index::sample(&mut rng, g, n).into_vec();
            labels.sort_unstable();
            labels
        })
        .collect();

    let mut rank: Vec<usize> = (0..cfg.items).collect();
    rank.shuffle(&mut rng);
    let popularity: Vec<f64> = rank
        .iter()
        .map(|&r| ((r + 1) as f64).powf(-cfg.popularity_exponent))
        .collect();

    // Genre prototypes anchor both sides of the latent space, so tastes and
    // labels stay correlated while items keep individual character.
    let normal = rand_distr::StandardNormal;
    let l = cfg.latent_dim.max(1);
    let scale = 1.0 / (l as f64).sqrt();
    let gaussian = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..l).map(|_| rng.sample::<f64, _>(normal) * scale).collect() };
    let prototypes: Vec<Vec<f64>> = (0..g).map(|_| gaussian(&mut rng)).collect();
    let item_latent: Vec<Vec<f64>> = item_genres
        .iter()
        .map(|labels| {
            let noise = gaussian(&mut rng);
            (0..l)
                .map(|d| labels.iter().map(|&x| prototypes[x][d]).sum::<f64>() / labels.len() as f64 + cfg.idiosyncrasy * noise[d])
                .collect()
        })
        .collect();
    let global = WeightedIndex::new(&popularity).expect("positive popularity");

    let taste_dist = Dirichlet::new_with_size(cfg.taste_concentration, g)
        .map_err(|e| Error::invalid("taste_concentration", e.to_string()))?;
    let activity = LogNormal::new(cfg.activity_median.ln(), cfg.activity_sigma)
        .map_err(|e| Error::invalid("activity_sigma", e.to_string()))?;

    let mut records = Vec::new();
    let mut ratings = Vec::new();
    for u in 0..cfg.users {
        let taste = taste_dist.sample(&mut rng);
        let noise = gaussian(&mut rng);
        let user_latent: Vec<f64> = (0..l)
            .map(|d| (0..g).map(|x| taste[x] * prototypes[x][d]).sum::<f64>() + cfg.idiosyncrasy * noise[d])
            .collect();
        let logits: Vec<f64> = item_latent
            .iter()
            .map(|v| cfg.affinity * v.iter().zip(&user_latent).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights = logits.iter().zip(&popularity).map(|(z, p)| p * (z - top).exp());
        let personal = WeightedIndex::new(weights).map_err(|e| Error::invalid("affinity", e.to_string()))?;
        let extra = activity.sample(&mut rng).round() as usize;
        let n = (cfg.min_per_user + extra).min(cap);
        let mut chosen = BTreeSet::new();
        let mut guard = 0;
        while chosen.len() < n && guard < n * 200 {
            guard += 1;
            let item = if rng.gen_bool(cfg.noise) {
                global.sample(&mut rng)
            } else {
                personal.sample(&mut rng)
            };
            chosen.insert(item);
        }
        let mut order: Vec<usize> = chosen.into_iter().collect();
        order.shuffle(&mut rng);
        let start = 874_724_710 + rng.gen_range(0..20_000_000i64);
        for (k, item) in order.into_iter().enumerate() {
            records.push(Interaction {
                user: u as u32,
                item: item as u32,
                timestamp: start + 3_600 * k as i64,
            });
            ratings.push(rng.gen_range(1..=5u8));
        }
    }
    Ok(SynthDataset {
        interactions: InteractionSet::new(cfg.users, cfg.items, records, Role::All),
        ratings,
        item_genres,
    })
}

impl SynthDataset {
    /// Writes `ratings.dat` (`user::item::rating::timestamp`, 1-based ids) and
    /// `movies.dat` (`item::title::Genre|Genre`).
    pub fn write_movielens(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let ratings_path = dir.join("ratings.dat");
        let mut out = std::io::BufWriter::new(std::fs::File::create(&ratings_path).map_err(|e| Error::io(&ratings_path, e))?);
        for (r, &rating) in self.interactions.records.iter().zip(&self.ratings) {
            writeln!(out, "{}::{}::{}::{}", r.user + 1, r.item + 1, rating, r.timestamp)
                .map_err(|e| Error::io(&ratings_path, e))?;
        }
        out.flush().map_err(|e| Error::io(&ratings_path, e))?;
        let movies_path = dir.join("movies.dat");
        let mut out = std::io::BufWriter::new(std::fs::File::create(&movies_path).map_err(|e| Error::io(&movies_path, e))?);
        for (i, labels) in self.item_genres.iter().enumerate() {
            let names: Vec<&str> = labels.iter().map(|&l| GENRES[l]).collect();
            writeln!(out, "{}::Movie {} (1995)::{}", i + 1, i + 1, names.join("|")).map_err(|e| Error::io(&movies_path, e))?;
        }
        out.flush().map_err(|e| Error::io(&movies_path, e))
    }
}
