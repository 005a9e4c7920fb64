//! Basket files, catalogs, dataset splits, evaluation instances and the
//! synthetic generator with planted combination patterns.
//!
//! Basket file: UTF-8, one basket per line, `basket_id,item,item,...` in add
//! order. Catalog file: one `id<TAB>name` per line with dense ids.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NpaError, Result};
use crate::parallel::derive_seed;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Basket {
    pub id: String,
    pub items: Vec<usize>,
    pub has_temporal_order: bool,
}

impl Basket {
    pub fn new(id: impl Into<String>, items: Vec<usize>) -> Self {
        Basket {
            id: id.into(),
            items,
            has_temporal_order: false,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

impl AsRef<[usize]> for Basket {
    fn as_ref(&self) -> &[usize] {
        &self.items
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Catalog {
    names: Vec<String>,
}

impl Catalog {
    /// Items `0..n` named `item<id>`.
    pub fn anonymous(n: usize) -> Self {
        Catalog {
            names: (0..n).map(|i| format!("item{i}")).collect(),
        }
    }

    pub fn from_names(names: Vec<String>) -> Self {
        Catalog { names }
    }

    pub fn num_items(&self) -> usize {
        self.names.len()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let p = path.display().to_string();
        let mut names = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (id, name) = line.split_once('\t').ok_or_else(|| NpaError::Parse {
                path: p.clone(),
                line: n + 1,
                msg: "expected `id<TAB>name`".into(),
            })?;
            let id: usize = id.trim().parse().map_err(|_| NpaError::Parse {
                path: p.clone(),
                line: n + 1,
                msg: format!("bad item id `{id}`"),
            })?;
            if id != names.len() {
                return Err(NpaError::Parse {
                    path: p.clone(),
                    line: n + 1,
                    msg: format!("ids must be dense and ascending; expected {}", names.len()),
                });
            }
            names.push(name.to_string());
        }
        if names.is_empty() {
            return Err(NpaError::Parse {
                path: p,
                line: 0,
                msg: "empty catalog".into(),
            });
        }
        Ok(Catalog { names })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (i, n) in self.names.iter().enumerate() {
            out.push_str(&format!("{i}\t{n}\n"));
        }
        write_atomic(path, out.as_bytes())
    }
}

/// How item tokens in a basket file are interpreted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BasketFormat {
    /// Integer item ids.
    Ids,
    /// Item names resolved through the catalog.
    Names,
}

/// Parse a basket file. Without a catalog, ids define an anonymous catalog of
/// size `max_id + 1`.
pub fn load_baskets(
    path: &Path,
    format: BasketFormat,
    catalog: Option<&Catalog>,
) -> Result<(Catalog, Vec<Basket>)> {
    let text = fs::read_to_string(path)?;
    parse_baskets(&text, &path.display().to_string(), format, catalog)
}

pub fn parse_baskets(
    text: &str,
    source: &str,
    format: BasketFormat,
    catalog: Option<&Catalog>,
) -> Result<(Catalog, Vec<Basket>)> {
    let err = |line: usize, msg: String| NpaError::Parse {
        path: source.to_string(),
        line,
        msg,
    };
    let by_name: Option<HashMap<&str, usize>> = match (format, catalog) {
        (BasketFormat::Names, Some(c)) => Some(
            c.names
                .iter()
                .enumerate()
                .map(|(i, n)| (n.as_str(), i))
                .collect(),
        ),
        (BasketFormat::Names, None) => {
            return Err(NpaError::invalid("name-based basket files need a catalog"))
        }
        _ => None,
    };
    let mut baskets = Vec::new();
    let mut max_id = 0usize;
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let id = fields.next().unwrap_or("").trim();
        if id.is_empty() {
            return Err(err(line_no, "missing basket id".into()));
        }
        let mut items = Vec::new();
        for tok in fields {
            let tok = tok.trim();
            let item = match &by_name {
                Some(map) => *map
                    .get(tok)
                    .ok_or_else(|| err(line_no, format!("unknown item token `{tok}`")))?,
                None => tok
                    .parse::<usize>()
                    .map_err(|_| err(line_no, format!("unknown item token `{tok}`")))?,
            };
            if let Some(c) = catalog {
                if item >= c.num_items() {
                    return Err(err(line_no, format!("unknown item token `{tok}`")));
                }
            }
            max_id = max_id.max(item);
            items.push(item);
        }
        if items.is_empty() {
            return Err(err(line_no, format!("basket `{id}` has no items")));
        }
        baskets.push(Basket::new(id, items));
    }
    if baskets.is_empty() {
        return Err(err(0, "empty basket file".into()));
    }
    let catalog = match catalog {
        Some(c) => c.clone(),
        None => Catalog::anonymous(max_id + 1),
    };
    Ok((catalog, baskets))
}

pub fn format_baskets(baskets: &[Basket]) -> String {
    let mut out = String::new();
    for b in baskets {
        out.push_str(&b.id);
        for i in &b.items {
            out.push(',');
            out.push_str(&i.to_string());
        }
        out.push('\n');
    }
    out
}

pub fn save_baskets(path: &Path, baskets: &[Basket]) -> Result<()> {
    write_atomic(path, format_baskets(baskets).as_bytes())
}

/// Write via a temporary sibling and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = BufWriter::new(fs::File::create(&tmp)?);
        f.write_all(bytes)?;
        f.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Seeded split by basket into (train, valid, test).
pub fn split_dataset(
    baskets: &[Basket],
    ratios: [f64; 3],
    seed: u64,
) -> Result<(Vec<Basket>, Vec<Basket>, Vec<Basket>)> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(NpaError::invalid(format!(
            "split ratios {ratios:?} must be in [0, 1] and sum to 1"
        )));
    }
    let n = baskets.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((ratios[0] * n as f64).round() as usize).min(n);
    let n_valid = ((ratios[1] * n as f64).round() as usize).min(n - n_train);
    let pick = |sel: &[usize]| {
        let mut sel = sel.to_vec();
        sel.sort_unstable();
        sel.into_iter().map(|i| baskets[i].clone()).collect::<Vec<_>>()
    };
    Ok((
        pick(&idx[..n_train]),
        pick(&idx[n_train..n_train + n_valid]),
        pick(&idx[n_train + n_valid..]),
    ))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalInstance {
    pub basket_id: String,
    pub input: Vec<usize>,
    pub truth: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSampling {
    pub input_fraction: f64,
    /// Consecutive window (ordered data) instead of a random subset.
    pub temporal: bool,
    pub instances_per_basket: usize,
    pub seed: u64,
}

impl Default for EvalSampling {
    fn default() -> Self {
        EvalSampling {
            input_fraction: 0.5,
            temporal: false,
            instances_per_basket: 1,
            seed: 0,
        }
    }
}

/// Split each test basket into model input and ground-truth remainder.
/// Returns the instances and the number of baskets skipped for having fewer
/// than two distinct items.
pub fn make_eval_instances(baskets: &[Basket], sampling: &EvalSampling) -> Result<(Vec<EvalInstance>, usize)> {
    if !(sampling.input_fraction > 0.0 && sampling.input_fraction < 1.0) {
        return Err(NpaError::invalid("input_fraction must be in (0, 1)"));
    }
    let mut out = Vec::new();
    let mut skipped = 0;
    for (bi, b) in baskets.iter().enumerate() {
        let mut seen = std::collections::HashSet::new();
        let items: Vec<usize> = b.items.iter().copied().filter(|i| seen.insert(*i)).collect();
        let len = items.len();
        if len < 2 {
            skipped += 1;
            continue;
        }
        let n_input = ((len as f64 * sampling.input_fraction).round() as usize).clamp(1, len - 1);
        for k in 0..sampling.instances_per_basket {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[sampling.seed, bi as u64, k as u64]));
            let chosen: Vec<bool> = if sampling.temporal {
                let start = rng.random_range(0..=len - n_input);
                (0..len).map(|j| j >= start && j < start + n_input).collect()
            } else {
                let mut flags = vec![false; len];
                let mut idx: Vec<usize> = (0..len).collect();
                idx.shuffle(&mut rng);
                for &j in &idx[..n_input] {
                    flags[j] = true;
                }
                flags
            };
            let (input, truth): (Vec<_>, Vec<_>) = items
                .iter()
                .zip(&chosen)
                .partition(|(_, &c)| c);
            out.push(EvalInstance {
                basket_id: b.id.clone(),
                input: input.into_iter().map(|(i, _)| *i).collect(),
                truth: truth.into_iter().map(|(i, _)| *i).collect(),
            });
        }
    }
    Ok((out, skipped))
}

/// Synthetic data with planted combination patterns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub num_items: usize,
    pub num_patterns: usize,
    pub items_per_pattern: usize,
    /// Assign non-overlapping pools when they fit in the catalog.
    pub disjoint_pools: bool,
    /// Draw every pool from this many items (the rest of the catalog is
    /// noise only); 0 uses the whole catalog.
    pub pool_universe: usize,
    pub min_patterns_per_basket: usize,
    pub max_patterns_per_basket: usize,
    pub min_basket_len: usize,
    pub max_basket_len: usize,
    pub noise_probability: f64,
    /// Zipf exponent for pattern choice; 0 is uniform.
    pub pattern_skew: f64,
    /// Zipf exponent for item choice inside a pool; 0 is uniform.
    pub item_skew: f64,
    pub num_baskets: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_items: 200,
            num_patterns: 8,
            items_per_pattern: 8,
            disjoint_pools: false,
            pool_universe: 24,
            min_patterns_per_basket: 1,
            max_patterns_per_basket: 2,
            min_basket_len: 6,
            max_basket_len: 12,
            noise_probability: 0.02,
            pattern_skew: 0.0,
            item_skew: 0.0,
            num_baskets: 5000,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(NpaError::Config(m.to_string()));
        if self.num_items == 0 || self.num_patterns == 0 || self.items_per_pattern == 0 {
            return fail("num_items, num_patterns and items_per_pattern must be positive");
        }
        if self.items_per_pattern > self.num_items {
            return fail("items_per_pattern exceeds catalog size");
        }
        if self.pool_universe > self.num_items
            || (self.pool_universe > 0 && self.pool_universe < self.items_per_pattern)
        {
            return fail("pool_universe must be 0 or between items_per_pattern and num_items");
        }
        if self.min_patterns_per_basket == 0 || self.min_patterns_per_basket > self.max_patterns_per_basket {
            return fail("patterns per basket range is empty");
        }
        if self.max_patterns_per_basket > self.num_patterns {
            return fail("max_patterns_per_basket exceeds num_patterns");
        }
        if self.min_basket_len == 0 || self.min_basket_len > self.max_basket_len {
            return fail("basket length range is empty");
        }
        if self.max_basket_len > self.num_items {
            return fail("max_basket_len exceeds catalog size");
        }
        if !(0.0..=1.0).contains(&self.noise_probability) {
            return fail("noise_probability must be in [0, 1]");
        }
        if self.pattern_skew < 0.0 || self.item_skew < 0.0 {
            return fail("skew exponents must be non-negative");
        }
        Ok(())
    }

    /// Probability of choosing each pattern (before excluding chosen ones).
    pub fn pattern_weights(&self) -> Vec<f64> {
        zipf_weights(self.num_patterns, self.pattern_skew)
    }

    pub fn item_weights(&self) -> Vec<f64> {
        zipf_weights(self.items_per_pattern, self.item_skew)
    }
}

fn zipf_weights(n: usize, s: f64) -> Vec<f64> {
    let raw: Vec<f64> = (1..=n).map(|r| (r as f64).powf(-s)).collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / z).collect()
}

/// Ground truth behind a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    /// `pools[k]` lists pattern `k`'s items, most popular first.
    pub pools: Vec<Vec<usize>>,
    /// Patterns planted in each basket.
    pub basket_patterns: Vec<Vec<usize>>,
    /// Per item of each basket: the pattern it was drawn for, or `None` for noise.
    pub provenance: Vec<Vec<Option<usize>>>,
}

fn weighted_index<R: Rng + ?Sized>(weights: &[f64], allowed: &[bool], rng: &mut R) -> Option<usize> {
    let total: f64 = weights
        .iter()
        .zip(allowed)
        .filter(|(_, &a)| a)
        .map(|(w, _)| w)
        .sum();
    if total <= 0.0 {
        return None;
    }
    let mut u = rng.random::<f64>() * total;
    let mut last = None;
    for (i, (&w, &a)) in weights.iter().zip(allowed).enumerate() {
        if !a {
            continue;
        }
        last = Some(i);
        if u < w {
            return Some(i);
        }
        u -= w;
    }
    last
}

/// Generate baskets: pick a pattern set, then fill each slot with a noise
/// item (with `noise_probability`) or an unused item from a randomly chosen
/// planted pattern, so patterns interleave within the basket.
pub fn gen_synthetic(spec: &SynthSpec) -> Result<(Catalog, Vec<Basket>, SynthTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let all: Vec<usize> = (0..spec.num_items).collect();
    let universe: Vec<usize> = if spec.pool_universe == 0 {
        all.clone()
    } else {
        let mut u: Vec<usize> = all.choose_multiple(&mut rng, spec.pool_universe).copied().collect();
        u.sort_unstable();
        u
    };
    let pools: Vec<Vec<usize>> = if spec.disjoint_pools
        && spec.num_patterns * spec.items_per_pattern <= universe.len()
    {
        let mut perm = universe.clone();
        perm.shuffle(&mut rng);
        perm.chunks(spec.items_per_pattern)
            .take(spec.num_patterns)
            .map(<[usize]>::to_vec)
            .collect()
    } else {
        (0..spec.num_patterns)
            .map(|_| {
                universe
                    .choose_multiple(&mut rng, spec.items_per_pattern)
                    .copied()
                    .collect()
            })
            .collect()
    };
    let pattern_w = spec.pattern_weights();
    let item_w = spec.item_weights();

    let mut baskets = Vec::with_capacity(spec.num_baskets);
    let mut basket_patterns = Vec::with_capacity(spec.num_baskets);
    let mut provenance = Vec::with_capacity(spec.num_baskets);
    for b in 0..spec.num_baskets {
        let n_pat = rng.random_range(spec.min_patterns_per_basket..=spec.max_patterns_per_basket);
        let mut allowed = vec![true; spec.num_patterns];
        let mut chosen = Vec::with_capacity(n_pat);
        for _ in 0..n_pat {
            let k = weighted_index(&pattern_w, &allowed, &mut rng).expect("enough patterns");
            allowed[k] = false;
            chosen.push(k);
        }
        let len = rng.random_range(spec.min_basket_len..=spec.max_basket_len);
        let mut in_basket = vec![false; spec.num_items];
        let mut used: Vec<Vec<bool>> = chosen.iter().map(|_| vec![false; spec.items_per_pattern]).collect();
        let mut items = Vec::with_capacity(len);
        let mut prov = Vec::with_capacity(len);
        while items.len() < len {
            let noise = rng.random::<f64>() < spec.noise_probability;
            let mut placed = false;
            if !noise {
                // patterns that still have an unused item not already in the basket
                let open: Vec<usize> = (0..chosen.len())
                    .filter(|&c| {
                        pools[chosen[c]]
                            .iter()
                            .zip(&used[c])
                            .any(|(&it, &u)| !u && !in_basket[it])
                    })
                    .collect();
                if let Some(&c) = open.choose(&mut rng) {
                    let pool = &pools[chosen[c]];
                    let free: Vec<bool> = pool
                        .iter()
                        .zip(&used[c])
                        .map(|(&it, &u)| !u && !in_basket[it])
                        .collect();
                    let j = weighted_index(&item_w, &free, &mut rng).expect("open pool");
                    used[c][j] = true;
                    in_basket[pool[j]] = true;
                    items.push(pool[j]);
                    prov.push(Some(chosen[c]));
                    placed = true;
                }
            }
            if !placed {
                let free: Vec<usize> = all.iter().copied().filter(|&i| !in_basket[i]).collect();
                let &it = free.choose(&mut rng).expect("catalog larger than basket");
                in_basket[it] = true;
                items.push(it);
                prov.push(None);
            }
        }
        baskets.push(Basket::new(format!("s{b}"), items));
        basket_patterns.push(chosen);
        provenance.push(prov);
    }
    let catalog = Catalog::anonymous(spec.num_items);
    Ok((
        catalog,
        baskets,
        SynthTruth {
            pools,
            basket_patterns,
            provenance,
        },
    ))
}
