//! Dataset ingestion, side-feature encoding, template sampling, and
//! fake-profile injection.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::linalg::{kmeans, truncated_svd};

/// Sparse integer ratings, values in `{1..5}`, absent entries meaning
/// unobserved. Rows are kept sorted by item index.
#[derive(Clone, Debug, PartialEq)]
pub struct RatingMatrix {
    pub n_users: usize,
    pub n_items: usize,
    rows: Vec<Vec<(usize, u8)>>,
}

impl RatingMatrix {
    pub fn new(n_users: usize, n_items: usize) -> Self {
        Self {
            n_users,
            n_items,
            rows: vec![Vec::new(); n_users],
        }
    }

    pub fn set(&mut self, user: usize, item: usize, rating: u8) -> Result<()> {
        if !(1..=5).contains(&rating) {
            return Err(Error::Validation(format!(
                "rating {rating} out of range [1,5] at ({user},{item})"
            )));
        }
        if user >= self.n_users || item >= self.n_items {
            return Err(Error::Dim(format!(
                "index ({user},{item}) outside {}x{}",
                self.n_users, self.n_items
            )));
        }
        let row = &mut self.rows[user];
        match row.binary_search_by_key(&item, |e| e.0) {
            Ok(pos) => row[pos].1 = rating,
            Err(pos) => row.insert(pos, (item, rating)),
        }
        Ok(())
    }

    pub fn get(&self, user: usize, item: usize) -> u8 {
        self.rows[user]
            .binary_search_by_key(&item, |e| e.0)
            .map(|pos| self.rows[user][pos].1)
            .unwrap_or(0)
    }

    pub fn row(&self, user: usize) -> &[(usize, u8)] {
        &self.rows[user]
    }

    pub fn observed(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn iter_entries(&self) -> impl Iterator<Item = (usize, usize, u8)> + '_ {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(u, row)| row.iter().map(move |&(i, r)| (u, i, r)))
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.n_users, self.n_items));
        for (u, i, r) in self.iter_entries() {
            out[[u, i]] = r as f64;
        }
        out
    }

    /// Number of users who rated `item`.
    pub fn item_count(&self, item: usize) -> usize {
        self.rows
            .iter()
            .filter(|row| row.binary_search_by_key(&item, |e| e.0).is_ok())
            .count()
    }

    /// Stack `other` below `self` (same item dimension).
    pub fn vstack(&self, other: &RatingMatrix) -> Result<RatingMatrix> {
        if self.n_items != other.n_items {
            return Err(Error::Dim(format!(
                "item dims differ: {} vs {}",
                self.n_items, other.n_items
            )));
        }
        let mut rows = self.rows.clone();
        rows.extend(other.rows.iter().cloned());
        Ok(RatingMatrix {
            n_users: self.n_users + other.n_users,
            n_items: self.n_items,
            rows,
        })
    }
}

/// Dense per-entity real-valued feature rows.
#[derive(Clone, Debug, PartialEq)]
pub struct SideFeatureTable {
    pub dim: usize,
    pub rows: Array2<f64>,
}

impl SideFeatureTable {
    pub fn empty(n: usize) -> Self {
        Self {
            dim: 0,
            rows: Array2::zeros((n, 0)),
        }
    }

    pub fn new(rows: Array2<f64>) -> Self {
        Self {
            dim: rows.ncols(),
            rows,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn vstack(&self, other: &SideFeatureTable) -> Result<SideFeatureTable> {
        if self.dim != other.dim {
            return Err(Error::Dim(format!(
                "feature dims differ: {} vs {}",
                self.dim, other.dim
            )));
        }
        let rows = ndarray::concatenate(ndarray::Axis(0), &[self.rows.view(), other.rows.view()])
            .expect("vstack");
        Ok(SideFeatureTable::new(rows))
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub ratings: RatingMatrix,
    pub user_features: SideFeatureTable,
    pub item_features: SideFeatureTable,
    pub name: String,
}

impl Dataset {
    pub fn n_users(&self) -> usize {
        self.ratings.n_users
    }

    pub fn n_items(&self) -> usize {
        self.ratings.n_items
    }

    /// Real users who have not rated `target`.
    pub fn eligible_users(&self, target: usize) -> Vec<usize> {
        (0..self.n_users())
            .filter(|&u| self.ratings.get(u, target) == 0)
            .collect()
    }

    fn check(&self) -> Result<()> {
        if self.user_features.len() != self.n_users() {
            return Err(Error::Dim(format!(
                "user feature rows {} != n_users {}",
                self.user_features.len(),
                self.n_users()
            )));
        }
        if self.item_features.len() != self.n_items() {
            return Err(Error::Dim(format!(
                "item feature rows {} != n_items {}",
                self.item_features.len(),
                self.n_items()
            )));
        }
        Ok(())
    }
}

/// Fake users: discrete ratings plus the side-feature rows attached to them.
#[derive(Clone, Debug, PartialEq)]
pub struct ProfileBatch {
    pub ratings: RatingMatrix,
    pub user_features: SideFeatureTable,
    /// Source real-user index each fake row's features were drawn from.
    pub provenance: Vec<usize>,
    pub target: usize,
    pub cap: usize,
}

impl ProfileBatch {
    pub fn n_fakes(&self) -> usize {
        self.ratings.n_users
    }

    pub fn validate(&self) -> Result<()> {
        if self.user_features.len() != self.n_fakes() || self.provenance.len() != self.n_fakes() {
            return Err(Error::Dim("batch row counts disagree".into()));
        }
        for u in 0..self.n_fakes() {
            let row = self.ratings.row(u);
            if row.len() > self.cap + 1 {
                return Err(Error::Validation(format!(
                    "fake row {u} has {} nonzeros, budget {}+target",
                    row.len(),
                    self.cap
                )));
            }
            if self.ratings.get(u, self.target) != 5 {
                return Err(Error::Validation(format!(
                    "fake row {u} does not rate target {} with 5",
                    self.target
                )));
            }
        }
        Ok(())
    }
}

/// Capped template rows sampled from real users.
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateSet {
    pub users: Vec<usize>,
    pub rows: Vec<Vec<(usize, u8)>>,
    pub cap: usize,
    pub n_items: usize,
}

impl TemplateSet {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    /// Dense `(len, n_items)` matrix of the capped template rows.
    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.len(), self.n_items));
        for (k, row) in self.rows.iter().enumerate() {
            for &(i, r) in row {
                out[[k, i]] = r as f64;
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetFormat {
    Ml100k,
    RatingTriples,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplingStrategy {
    Uniform,
    KmeansFriendly { k: usize, svd_rank: usize },
}

/// Non-fatal observations from loading.
#[derive(Clone, Debug, Default)]
pub struct LoadReport {
    pub duplicate_ratings: usize,
    pub missing_years: usize,
    pub empty_ratings: bool,
}

fn read_latin1(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(bytes.iter().map(|&b| b as char).collect())
}

pub const ML100K_OCCUPATIONS: [&str; 21] = [
    "administrator",
    "artist",
    "doctor",
    "educator",
    "engineer",
    "entertainment",
    "executive",
    "healthcare",
    "homemaker",
    "lawyer",
    "librarian",
    "marketing",
    "none",
    "other",
    "programmer",
    "retired",
    "salesman",
    "scientist",
    "student",
    "technician",
    "writer",
];

pub const USER_FEATURE_DIM: usize = 24;
pub const ITEM_FEATURE_DIM: usize = 20;
pub const N_GENRES: usize = 19;

#[derive(Clone, Debug)]
pub struct UserRecord {
    pub age: u32,
    pub gender: char,
    pub occupation: String,
}

#[derive(Clone, Debug)]
pub struct ItemRecord {
    pub genres: [u8; N_GENRES],
    pub year: Option<i32>,
}

/// `[age/100] ++ one-hot(gender M,F) ++ one-hot(occupation, 21)`.
pub fn encode_user_side_features(records: &[UserRecord]) -> Result<SideFeatureTable> {
    let mut rows = Array2::zeros((records.len(), USER_FEATURE_DIM));
    for (u, rec) in records.iter().enumerate() {
        rows[[u, 0]] = rec.age as f64 / 100.0;
        match rec.gender {
            'M' | 'm' => rows[[u, 1]] = 1.0,
            'F' | 'f' => rows[[u, 2]] = 1.0,
            other => {
                return Err(Error::Validation(format!(
                    "user {u}: unknown gender '{other}'"
                )))
            }
        }
        if rec.occupation.is_empty() {
            return Err(Error::Validation(format!("user {u}: missing occupation")));
        }
        let slot = ML100K_OCCUPATIONS
            .iter()
            .position(|&o| o == rec.occupation.to_lowercase())
            .unwrap_or_else(|| {
                ML100K_OCCUPATIONS.iter().position(|&o| o == "other").unwrap()
            });
        rows[[u, 3 + slot]] = 1.0;
    }
    Ok(SideFeatureTable::new(rows))
}

/// `19 genre flags ++ [(year-1900)/100 clipped to [0,1]]`.
pub fn encode_item_side_features(records: &[ItemRecord], report: &mut LoadReport) -> SideFeatureTable {
    let mut rows = Array2::zeros((records.len(), ITEM_FEATURE_DIM));
    for (i, rec) in records.iter().enumerate() {
        for (g, &flag) in rec.genres.iter().enumerate() {
            rows[[i, g]] = if flag != 0 { 1.0 } else { 0.0 };
        }
        rows[[i, N_GENRES]] = match rec.year {
            Some(y) => (((y - 1900) as f64) / 100.0).clamp(0.0, 1.0),
            None => {
                report.missing_years += 1;
                log::warn!("item {i}: missing release year, defaulting to 0.5");
                0.5
            }
        };
    }
    SideFeatureTable::new(rows)
}

pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<(Dataset, LoadReport)> {
    match format {
        DatasetFormat::Ml100k => load_ml100k(path),
        DatasetFormat::RatingTriples => load_triples(path),
    }
}

fn load_ml100k(dir: &Path) -> Result<(Dataset, LoadReport)> {
    let mut report = LoadReport::default();

    // Users: id|age|gender|occupation|zip
    let user_text = read_latin1(&dir.join("u.user"))?;
    let mut user_ids = Vec::new();
    let mut user_records = Vec::new();
    for (lineno, line) in user_text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('|').collect();
        if parts.len() < 4 {
            return Err(Error::Parse {
                line: lineno + 1,
                msg: format!("u.user expects 5 pipe-separated fields, got {}", parts.len()),
            });
        }
        let id: usize = parts[0].trim().parse().map_err(|_| Error::Parse {
            line: lineno + 1,
            msg: format!("bad user id '{}'", parts[0]),
        })?;
        let age: u32 = parts[1].trim().parse().map_err(|_| Error::Parse {
            line: lineno + 1,
            msg: format!("bad age '{}'", parts[1]),
        })?;
        let gender = parts[2].trim().chars().next().ok_or(Error::Parse {
            line: lineno + 1,
            msg: "missing gender".into(),
        })?;
        user_ids.push(id);
        user_records.push(UserRecord {
            age,
            gender,
            occupation: parts[3].trim().to_string(),
        });
    }

    // Items: id|title|date|videodate|url|19 genre flags
    let item_text = read_latin1(&dir.join("u.item"))?;
    let mut item_ids = Vec::new();
    let mut item_records = Vec::new();
    for (lineno, line) in item_text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('|').collect();
        if parts.len() < 5 + N_GENRES {
            return Err(Error::Parse {
                line: lineno + 1,
                msg: format!("u.item expects {} fields, got {}", 5 + N_GENRES, parts.len()),
            });
        }
        let id: usize = parts[0].trim().parse().map_err(|_| Error::Parse {
            line: lineno + 1,
            msg: format!("bad item id '{}'", parts[0]),
        })?;
        let date = parts[2].trim();
        let year = if date.len() >= 4 {
            date[date.len() - 4..].parse::<i32>().ok()
        } else {
            None
        };
        let mut genres = [0u8; N_GENRES];
        for (g, part) in parts[5..5 + N_GENRES].iter().enumerate() {
            genres[g] = match part.trim() {
                "1" => 1,
                "0" | "" => 0,
                other => {
                    return Err(Error::Parse {
                        line: lineno + 1,
                        msg: format!("bad genre flag '{other}'"),
                    })
                }
            };
        }
        item_ids.push(id);
        item_records.push(ItemRecord { genres, year });
    }

    let user_index = index_of(&user_ids);
    let item_index = index_of(&item_ids);

    // Ratings: user \t item \t rating \t timestamp
    let data_text = read_latin1(&dir.join("u.data"))?;
    let mut ratings = RatingMatrix::new(user_ids.len(), item_ids.len());
    let mut seen = 0usize;
    for (lineno, line) in data_text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let (u, i, r) = match (it.next(), it.next(), it.next()) {
            (Some(u), Some(i), Some(r)) => (u, i, r),
            _ => {
                return Err(Error::Parse {
                    line: lineno + 1,
                    msg: "u.data expects user, item, rating".into(),
                })
            }
        };
        let uid: usize = u.parse().map_err(|_| Error::Parse {
            line: lineno + 1,
            msg: format!("bad user id '{u}'"),
        })?;
        let iid: usize = i.parse().map_err(|_| Error::Parse {
            line: lineno + 1,
            msg: format!("bad item id '{i}'"),
        })?;
        let rating: i64 = r.parse().map_err(|_| Error::Parse {
            line: lineno + 1,
            msg: format!("bad rating '{r}'"),
        })?;
        if !(1..=5).contains(&rating) {
            return Err(Error::Validation(format!(
                "line {}: rating {rating} outside [1,5]",
                lineno + 1
            )));
        }
        let &urow = user_index.get(&uid).ok_or_else(|| Error::Parse {
            line: lineno + 1,
            msg: format!("unknown user id {uid}"),
        })?;
        let &irow = item_index.get(&iid).ok_or_else(|| Error::Parse {
            line: lineno + 1,
            msg: format!("unknown item id {iid}"),
        })?;
        if ratings.get(urow, irow) != 0 {
            report.duplicate_ratings += 1;
        } else {
            seen += 1;
        }
        ratings.set(urow, irow, rating as u8)?;
    }
    if seen == 0 {
        report.empty_ratings = true;
        log::warn!("ratings file contains no entries");
    }
    if report.duplicate_ratings > 0 {
        log::warn!("{} duplicate ratings, kept last occurrence", report.duplicate_ratings);
    }

    let user_features = encode_user_side_features(&user_records)?;
    let item_features = encode_item_side_features(&item_records, &mut report);
    let ds = Dataset {
        ratings,
        user_features,
        item_features,
        name: "ml100k".into(),
    };
    ds.check()?;
    Ok((ds, report))
}

fn index_of(ids: &[usize]) -> BTreeMap<usize, usize> {
    let mut sorted: Vec<usize> = ids.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    sorted.into_iter().enumerate().map(|(k, id)| (id, k)).collect()
}

fn load_triples(path: &Path) -> Result<(Dataset, LoadReport)> {
    let mut report = LoadReport::default();
    let text = read_latin1(path)?;
    let mut triples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .collect();
        if fields.len() < 3 {
            return Err(Error::Parse {
                line: lineno + 1,
                msg: "expected user item rating".into(),
            });
        }
        let u: usize = fields[0].parse().map_err(|_| Error::Parse {
            line: lineno + 1,
            msg: format!("bad user id '{}'", fields[0]),
        })?;
        let i: usize = fields[1].parse().map_err(|_| Error::Parse {
            line: lineno + 1,
            msg: format!("bad item id '{}'", fields[1]),
        })?;
        // tolerate float-formatted integer ratings such as "4.0"
        let r: f64 = fields[2].parse().map_err(|_| Error::Parse {
            line: lineno + 1,
            msg: format!("bad rating '{}'", fields[2]),
        })?;
        if r.fract() != 0.0 || !(1.0..=5.0).contains(&r) {
            return Err(Error::Validation(format!(
                "line {}: rating {r} outside integer range [1,5]",
                lineno + 1
            )));
        }
        triples.push((u, i, r as u8));
    }
    let user_index = index_of(&triples.iter().map(|t| t.0).collect::<Vec<_>>());
    let item_index = index_of(&triples.iter().map(|t| t.1).collect::<Vec<_>>());
    let mut ratings = RatingMatrix::new(user_index.len(), item_index.len());
    let mut dup = 0usize;
    for &(u, i, r) in &triples {
        let (urow, irow) = (user_index[&u], item_index[&i]);
        if ratings.get(urow, irow) != 0 {
            dup += 1;
        }
        ratings.set(urow, irow, r)?;
    }
    report.duplicate_ratings = dup;
    report.empty_ratings = triples.is_empty();
    let n_users = ratings.n_users;
    let n_items = ratings.n_items;
    let ds = Dataset {
        ratings,
        user_features: SideFeatureTable::empty(n_users),
        item_features: SideFeatureTable::empty(n_items),
        name: "triples".into(),
    };
    Ok((ds, report))
}

/// Per-cluster friendliness toward `target` and the selected template pool.
#[derive(Clone, Debug)]
pub struct FriendlinessReport {
    pub scores: Vec<f64>,
    pub assignments: Vec<usize>,
    pub pool: Vec<usize>,
    pub target_unrated: bool,
}

pub fn cluster_friendliness(
    dataset: &Dataset,
    target: usize,
    k: usize,
    svd_rank: usize,
    seed: u64,
) -> Result<FriendlinessReport> {
    if k < 2 {
        return Err(Error::Validation("cluster count must be >= 2".into()));
    }
    if svd_rank < 1 {
        return Err(Error::Validation("svd rank must be >= 1".into()));
    }
    let n = dataset.n_users();
    let dense = dataset.ratings.to_dense();
    let mut rng = ChaCha12Rng::seed_from_u64(crate::derive_seed(seed, "friendliness"));
    let (u, s, _) = truncated_svd(&dense, svd_rank, &mut rng);
    let embed = &u * &s.clone().insert_axis(ndarray::Axis(0));
    let (assignments, _) = kmeans(&embed, k.min(n), &mut rng, 100);
    let k = k.min(n);

    if dataset.ratings.item_count(target) == 0 {
        log::warn!("target {target} has no raters; friendliness degenerate, pooling all users");
        return Ok(FriendlinessReport {
            scores: vec![0.0; k],
            assignments,
            pool: (0..n).collect(),
            target_unrated: true,
        });
    }

    let mut top10_mean = vec![0.0f64; k];
    let mut high_frac = vec![0.0f64; k];
    for c in 0..k {
        let members: Vec<usize> = (0..n).filter(|&i| assignments[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        let mut target_ratings: Vec<f64> = members
            .iter()
            .map(|&uix| dataset.ratings.get(uix, target) as f64)
            .collect();
        target_ratings.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let m = ((members.len() as f64) * 0.1).ceil().max(1.0) as usize;
        let any_rater = target_ratings.iter().any(|&r| r > 0.0);
        top10_mean[c] = if any_rater {
            target_ratings.iter().take(m).sum::<f64>() / m as f64
        } else {
            0.0
        };
        high_frac[c] = target_ratings.iter().filter(|&&r| r >= 4.0).count() as f64
            / members.len() as f64;
    }

    let norm = |v: &[f64]| -> Vec<f64> {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if (hi - lo).abs() < 1e-12 {
            vec![0.0; v.len()]
        } else {
            v.iter().map(|x| (x - lo) / (hi - lo)).collect()
        }
    };
    let n1 = norm(&top10_mean);
    let n2 = norm(&high_frac);
    let scores: Vec<f64> = n1.iter().zip(&n2).map(|(a, b)| (a + b) / 2.0).collect();
    let mean = scores.iter().sum::<f64>() / k as f64;
    let selected: Vec<usize> = (0..k).filter(|&c| scores[c] >= mean).collect();
    let pool: Vec<usize> = (0..n)
        .filter(|&uix| selected.contains(&assignments[uix]))
        .collect();
    Ok(FriendlinessReport {
        scores,
        assignments,
        pool,
        target_unrated: false,
    })
}

pub fn sample_templates(
    dataset: &Dataset,
    n: usize,
    strategy: SamplingStrategy,
    cap: usize,
    target: usize,
    seed: u64,
) -> Result<TemplateSet> {
    if n > dataset.n_users() {
        return Err(Error::Validation(format!(
            "requested {n} templates from {} users",
            dataset.n_users()
        )));
    }
    if cap < 1 {
        return Err(Error::Validation("cap must be >= 1".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(crate::derive_seed(seed, "templates"));
    let candidates: Vec<usize> = match strategy {
        SamplingStrategy::Uniform => (0..dataset.n_users()).collect(),
        SamplingStrategy::KmeansFriendly { k, svd_rank } => {
            let report = cluster_friendliness(dataset, target, k, svd_rank, seed)?;
            if report.pool.is_empty() {
                log::warn!("empty friendliness pool, falling back to uniform sampling");
                (0..dataset.n_users()).collect()
            } else if report.pool.len() < n {
                log::warn!(
                    "friendliness pool has {} users (< {n}), falling back to uniform sampling",
                    report.pool.len()
                );
                (0..dataset.n_users()).collect()
            } else {
                report.pool
            }
        }
    };
    let mut chosen = candidates;
    chosen.shuffle(&mut rng);
    chosen.truncate(n);
    chosen.sort_unstable();

    let mut rows = Vec::with_capacity(n);
    for &u in &chosen {
        let full = dataset.ratings.row(u).to_vec();
        let row = if full.len() > cap {
            let mut picked = full;
            picked.shuffle(&mut rng);
            picked.truncate(cap);
            picked.sort_by_key(|e| e.0);
            picked
        } else {
            full
        };
        rows.push(row);
    }
    Ok(TemplateSet {
        users: chosen,
        rows,
        cap,
        n_items: dataset.n_items(),
    })
}

/// Vertical concatenation of real data and a fake batch. Fake rows occupy
/// indices `[N, N + n_fakes)`; item features are untouched.
pub fn inject(dataset: &Dataset, batch: &ProfileBatch) -> Result<Dataset> {
    if batch.n_fakes() == 0 {
        return Ok(dataset.clone());
    }
    if batch.ratings.n_items != dataset.n_items() {
        return Err(Error::Dim(format!(
            "batch item dim {} != dataset {}",
            batch.ratings.n_items,
            dataset.n_items()
        )));
    }
    if batch.user_features.dim != dataset.user_features.dim {
        return Err(Error::Dim(format!(
            "batch feature dim {} != dataset {}",
            batch.user_features.dim, dataset.user_features.dim
        )));
    }
    Ok(Dataset {
        ratings: dataset.ratings.vstack(&batch.ratings)?,
        user_features: dataset.user_features.vstack(&batch.user_features)?,
        item_features: dataset.item_features.clone(),
        name: dataset.name.clone(),
    })
}
