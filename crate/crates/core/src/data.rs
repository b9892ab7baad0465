//! Dataset parsing, preprocessing and the on-disk cache.
//!
//! A cache directory holds `manifest.txt` (key=value lines, including the
//! token maps and a SHA-256 of each edge file) plus `train.bin` and
//! `test.bin`, each a sequence of little-endian `u32` (user, item) pairs.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{k_core_filter, reindex, split_interactions, Interaction, InteractionSet, Role};

const CACHE_FORMAT: &str = "wgat-cache-1";
const MALFORMED_LIMIT: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct RawInteraction {
    pub user: String,
    pub item: String,
    pub rating: f64,
    pub timestamp: i64,
}

/// Parsed records plus the count of lines that were skipped.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Parsed {
    pub records: Vec<RawInteraction>,
    pub malformed: usize,
    pub lines: usize,
}

impl Parsed {
    fn finish(self, path: &Path) -> Result<Self> {
        if self.lines == 0 {
            log::warn!("{}: no interactions found", path.display());
        } else if self.malformed as f64 > MALFORMED_LIMIT * self.lines as f64 {
            return Err(Error::TooManyMalformed {
                path: path.to_path_buf(),
                malformed: self.malformed,
                total: self.lines,
            });
        } else if self.malformed > 0 {
            log::warn!("{}: skipped {} malformed of {} lines", path.display(), self.malformed, self.lines);
        }
        Ok(self)
    }
}

fn open(path: &Path) -> Result<BufReader<fs::File>> {
    Ok(BufReader::new(fs::File::open(path).map_err(|e| Error::io(path, e))?))
}

/// One `user::item::rating::timestamp` line.
pub fn parse_movielens_line(line: &str) -> Option<RawInteraction> {
    let fields: Vec<&str> = line.trim().split("::").collect();
    if fields.len() != 4 || fields[0].is_empty() || fields[1].is_empty() {
        return None;
    }
    Some(RawInteraction {
        user: fields[0].to_string(),
        item: fields[1].to_string(),
        rating: fields[2].parse().ok()?,
        timestamp: fields[3].parse().ok()?,
    })
}

pub fn parse_movielens(path: &Path) -> Result<Parsed> {
    let mut out = Parsed::default();
    for line in open(path)?.lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.lines += 1;
        match parse_movielens_line(&line) {
            Some(r) => out.records.push(r),
            None => out.malformed += 1,
        }
    }
    out.finish(path)
}

/// Column positions of a delimited file. `None` columns take defaults
/// (rating 1.0, timestamp 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ColumnMap {
    pub user: usize,
    pub item: usize,
    pub rating: Option<usize>,
    pub timestamp: Option<usize>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            user: 0,
            item: 1,
            rating: None,
            timestamp: None,
        }
    }
}

impl ColumnMap {
    /// Maps a header row by the names user/item/rating/timestamp.
    fn from_header(header: &csv::StringRecord) -> Option<Self> {
        let find = |names: &[&str]| {
            header
                .iter()
                .position(|h| names.contains(&h.trim().to_ascii_lowercase().as_str()))
        };
        Some(Self {
            user: find(&["user", "user_id", "userid"])?,
            item: find(&["item", "item_id", "itemid"])?,
            rating: find(&["rating", "score"]),
            timestamp: find(&["timestamp", "time", "ts"]),
        })
    }
}

/// Generic delimited interactions. With `columns == None` the first row must
/// be a header naming the user and item columns; otherwise a header row is
/// still recognized and skipped.
pub fn parse_delimited(path: &Path, delimiter: u8, columns: Option<ColumnMap>) -> Result<Parsed> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(false)
        .flexible(true)
        .from_reader(open(path)?);
    let mut records = reader.records();
    let mut out = Parsed::default();
    let mut pending = None;
    let map = match records.next() {
        None => return out.finish(path),
        Some(first) => {
            let first = first.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            match (ColumnMap::from_header(&first), columns) {
                (Some(m), None) => m,
                (Some(_), Some(m)) => m,
                (None, Some(m)) => {
                    pending = Some(first);
                    m
                }
                (None, None) => {
                    // no header to map: count the first row against the defaults
                    pending = Some(first);
                    ColumnMap::default()
                }
            }
        }
    };
    let rows = pending.into_iter().map(Ok).chain(records);
    for row in rows {
        let row = row.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if row.iter().all(|f| f.trim().is_empty()) {
            continue;
        }
        out.lines += 1;
        match delimited_record(&row, &map) {
            Some(r) => out.records.push(r),
            None => out.malformed += 1,
        }
    }
    out.finish(path)
}

fn delimited_record(row: &csv::StringRecord, map: &ColumnMap) -> Option<RawInteraction> {
    let field = |i: usize| row.get(i).map(str::trim).filter(|s| !s.is_empty());
    let user = field(map.user)?;
    let item = field(map.item)?;
    let rating = match map.rating {
        Some(c) => field(c)?.parse().ok()?,
        None => 1.0,
    };
    let timestamp = match map.timestamp {
        Some(c) => field(c)?.parse().ok()?,
        None => 0,
    };
    Some(RawInteraction {
        user: user.to_string(),
        item: item.to_string(),
        rating,
        timestamp,
    })
}

/// `item::title::Label|Label` lines, keyed by item token.
pub fn parse_categories(path: &Path) -> Result<BTreeMap<String, BTreeSet<String>>> {
    let mut out = BTreeMap::new();
    let mut lines = 0;
    let mut malformed = 0;
    for line in open(path)?.lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        lines += 1;
        let fields: Vec<&str> = line.trim().split("::").collect();
        if fields.len() < 3 || fields[0].is_empty() {
            malformed += 1;
            continue;
        }
        let labels: BTreeSet<String> = fields[fields.len() - 1]
            .split('|')
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        if labels.is_empty() {
            malformed += 1;
            continue;
        }
        out.insert(fields[0].to_string(), labels);
    }
    if malformed as f64 > MALFORMED_LIMIT * lines as f64 {
        return Err(Error::TooManyMalformed {
            path: path.to_path_buf(),
            malformed,
            total: lines,
        });
    }
    Ok(out)
}

/// Numeric tokens sort by value and before non-numeric ones.
fn token_order(a: &str, b: &str) -> std::cmp::Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y).then_with(|| a.cmp(b)),
        (Ok(_), Err(_)) => std::cmp::Ordering::Less,
        (Err(_), Ok(_)) => std::cmp::Ordering::Greater,
        _ => a.cmp(b),
    }
}

fn dense_tokens<'a>(tokens: impl Iterator<Item = &'a str>) -> (Vec<String>, HashMap<&'a str, u32>) {
    let mut uniq: Vec<&str> = tokens.collect::<BTreeSet<_>>().into_iter().collect();
    uniq.sort_by(|a, b| token_order(a, b));
    let ids = uniq.iter().enumerate().map(|(i, &t)| (t, i as u32)).collect();
    (uniq.into_iter().map(String::from).collect(), ids)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreprocessConfig {
    pub k_core: usize,
    pub ratio: f64,
    pub seed: u64,
    /// Ratings below this are dropped before binarization.
    pub min_rating: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            k_core: 5,
            ratio: 0.8,
            seed: 42,
            min_rating: 1.0,
        }
    }
}

/// Train/test interactions over dense ids plus the token maps.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub config: PreprocessConfig,
    pub user_tokens: Vec<String>,
    pub item_tokens: Vec<String>,
    pub train: InteractionSet,
    pub test: InteractionSet,
    /// Surviving edges after each k-core pass.
    pub core_trace: Vec<usize>,
}

impl DatasetBundle {
    pub fn num_users(&self) -> usize {
        self.user_tokens.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_tokens.len()
    }

    pub fn item_index(&self) -> HashMap<&str, u32> {
        self.item_tokens.iter().enumerate().map(|(i, t)| (t.as_str(), i as u32)).collect()
    }
}

/// Binarize, k-core filter, densely re-index and split.
pub fn preprocess(raw: &[RawInteraction], cfg: &PreprocessConfig) -> Result<DatasetBundle> {
    let kept: Vec<&RawInteraction> = raw.iter().filter(|r| r.rating >= cfg.min_rating).collect();
    let (user_tokens, user_ids) = dense_tokens(kept.iter().map(|r| r.user.as_str()));
    let (item_tokens, item_ids) = dense_tokens(kept.iter().map(|r| r.item.as_str()));
    let records = kept
        .iter()
        .map(|r| Interaction {
            user: user_ids[r.user.as_str()],
            item: item_ids[r.item.as_str()],
            timestamp: 0,
        })
        .collect();
    let all = InteractionSet::new(user_tokens.len(), item_tokens.len(), records, Role::All);
    let (all, dups) = all.dedup();
    if dups > 0 {
        log::info!("collapsed {dups} repeated user-item events");
    }
    let core = k_core_filter(&all, cfg.k_core)?;
    if core.interactions.is_empty() {
        return Err(Error::EmptyAfterCore {
            k: cfg.k_core,
            trace: core.trace,
        });
    }
    let (dense, old_users, old_items) = reindex(&core.interactions);
    let split = split_interactions(&dense, cfg.ratio, cfg.seed)?;
    if !split.non_evaluable.is_empty() {
        log::info!("{} users have a single interaction and are train-only", split.non_evaluable.len());
    }
    Ok(DatasetBundle {
        config: *cfg,
        user_tokens: old_users.iter().map(|&u| user_tokens[u as usize].clone()).collect(),
        item_tokens: old_items.iter().map(|&i| item_tokens[i as usize].clone()).collect(),
        train: split.train,
        test: split.test,
        core_trace: core.trace,
    })
}

fn edge_bytes(set: &InteractionSet) -> Vec<u8> {
    let mut pairs = set.pairs();
    pairs.sort_unstable();
    let mut out = Vec::with_capacity(pairs.len() * 8);
    for (u, i) in pairs {
        out.extend_from_slice(&u.to_le_bytes());
        out.extend_from_slice(&i.to_le_bytes());
    }
    out
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `bytes` to a temporary sibling, then renames it into place.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn check_token(kind: &str, t: &str) -> Result<()> {
    if t.contains('\n') || t.contains('\r') {
        return Err(Error::Format(format!("{kind} token {t:?} contains a line break")));
    }
    Ok(())
}

/// Paths of the files making up a cache directory.
#[derive(Debug, Clone)]
pub struct CachePaths {
    pub manifest: PathBuf,
    pub train: PathBuf,
    pub test: PathBuf,
}

impl CachePaths {
    pub fn new(dir: &Path) -> Self {
        Self {
            manifest: dir.join("manifest.txt"),
            train: dir.join("train.bin"),
            test: dir.join("test.bin"),
        }
    }
}

/// Writes the cache and returns the SHA-256 of the manifest, which covers
/// the edge-file checksums and so identifies the whole cache.
pub fn write_cache(dir: &Path, bundle: &DatasetBundle) -> Result<String> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = CachePaths::new(dir);
    let train = edge_bytes(&bundle.train);
    let test = edge_bytes(&bundle.test);
    let c = &bundle.config;
    let mut m = String::new();
    let mut kv = |k: &str, v: String| {
        m.push_str(k);
        m.push('=');
        m.push_str(&v);
        m.push('\n');
    };
    kv("format", CACHE_FORMAT.into());
    kv("num_users", bundle.num_users().to_string());
    kv("num_items", bundle.num_items().to_string());
    kv("train_edges", bundle.train.len().to_string());
    kv("test_edges", bundle.test.len().to_string());
    kv("k_core", c.k_core.to_string());
    kv("ratio", c.ratio.to_string());
    kv("seed", c.seed.to_string());
    kv("min_rating", c.min_rating.to_string());
    kv(
        "core_trace",
        bundle.core_trace.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
    );
    kv("train_sha256", sha256_hex(&train));
    kv("test_sha256", sha256_hex(&test));
    for (i, t) in bundle.user_tokens.iter().enumerate() {
        check_token("user", t)?;
        kv(&format!("user.{i}"), t.clone());
    }
    for (i, t) in bundle.item_tokens.iter().enumerate() {
        check_token("item", t)?;
        kv(&format!("item.{i}"), t.clone());
    }
    write_atomic(&paths.train, &train)?;
    write_atomic(&paths.test, &test)?;
    write_atomic(&paths.manifest, m.as_bytes())?;
    Ok(sha256_hex(m.as_bytes()))
}

fn read_edges(path: &Path, expected_sha: &str, num_users: usize, num_items: usize, role: Role) -> Result<InteractionSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if sha256_hex(&bytes) != expected_sha {
        return Err(Error::Format(format!("{}: checksum mismatch", path.display())));
    }
    if bytes.len() % 8 != 0 {
        return Err(Error::Format(format!("{}: truncated edge list", path.display())));
    }
    let records = bytes
        .chunks_exact(8)
        .map(|c| Interaction::new(u32::from_le_bytes(c[..4].try_into().unwrap()), u32::from_le_bytes(c[4..].try_into().unwrap())))
        .collect::<Vec<_>>();
    if records.iter().any(|r| r.user as usize >= num_users || r.item as usize >= num_items) {
        return Err(Error::Format(format!("{}: id outside the manifest's id space", path.display())));
    }
    Ok(InteractionSet::new(num_users, num_items, records, role))
}

/// Loads a cache, verifying edge-file checksums. Returns the bundle and the
/// manifest checksum.
pub fn read_cache(dir: &Path) -> Result<(DatasetBundle, String)> {
    let paths = CachePaths::new(dir);
    let text = fs::read_to_string(&paths.manifest).map_err(|e| Error::io(&paths.manifest, e))?;
    let mut kv: HashMap<&str, &str> = HashMap::new();
    for line in text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("manifest line without '=': {line:?}")))?;
        kv.insert(k, v);
    }
    let get = |k: &str| kv.get(k).copied().ok_or_else(|| Error::Format(format!("manifest lacks `{k}`")));
    fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
        v.parse().map_err(|_| Error::Format(format!("manifest `{k}` is not a number: {v:?}")))
    }
    if get("format")? != CACHE_FORMAT {
        return Err(Error::Format(format!("unsupported cache format {:?}", get("format")?)));
    }
    let num_users: usize = num("num_users", get("num_users")?)?;
    let num_items: usize = num("num_items", get("num_items")?)?;
    let tokens = |prefix: &str, n: usize| -> Result<Vec<String>> {
        (0..n).map(|i| get(&format!("{prefix}.{i}")).map(String::from)).collect()
    };
    let trace = get("core_trace")?;
    let core_trace = if trace.is_empty() {
        Vec::new()
    } else {
        trace.split(',').map(|t| num("core_trace", t)).collect::<Result<_>>()?
    };
    let bundle = DatasetBundle {
        config: PreprocessConfig {
            k_core: num("k_core", get("k_core")?)?,
            ratio: num("ratio", get("ratio")?)?,
            seed: num("seed", get("seed")?)?,
            min_rating: num("min_rating", get("min_rating")?)?,
        },
        user_tokens: tokens("user", num_users)?,
        item_tokens: tokens("item", num_items)?,
        train: read_edges(&paths.train, get("train_sha256")?, num_users, num_items, Role::Train)?,
        test: read_edges(&paths.test, get("test_sha256")?, num_users, num_items, Role::Test)?,
        core_trace,
    };
    for (set, key) in [(&bundle.train, "train_edges"), (&bundle.test, "test_edges")] {
        let n: usize = num(key, get(key)?)?;
        if set.len() != n {
            return Err(Error::Format(format!("manifest `{key}`={n} but file holds {}", set.len())));
        }
    }
    Ok((bundle, sha256_hex(text.as_bytes())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn movielens_line() {
        let r = parse_movielens_line("1::1193::5::978300760").unwrap();
        assert_eq!(
            r,
            RawInteraction {
                user: "1".into(),
                item: "1193".into(),
                rating: 5.0,
                timestamp: 978300760
            }
        );
        assert!(parse_movielens_line("1::1193::5").is_none());
        assert!(parse_movielens_line("1::1193::x::5").is_none());
    }

    #[test]
    fn malformed_rate_limits() {
        let dir = tempfile::tempdir().unwrap();
        let mut body: String = (0..199).map(|i| format!("{i}::3::4::100\n")).collect();
        body.push_str("1::2::3\n");
        let p = write(dir.path(), "ok.dat", &body);
        let parsed = parse_movielens(&p).unwrap();
        assert_eq!((parsed.records.len(), parsed.malformed, parsed.lines), (199, 1, 200));
        body.push_str("bad line\n");
        body.push_str("also::bad\n");
        let p = write(dir.path(), "bad.dat", &body);
        assert!(matches!(parse_movielens(&p), Err(Error::TooManyMalformed { malformed: 3, .. })));
        let p = write(dir.path(), "empty.dat", "");
        assert!(parse_movielens(&p).unwrap().records.is_empty());
        assert!(matches!(parse_movielens(&dir.path().join("missing")), Err(Error::Io { .. })));
    }

    #[test]
    fn delimited_defaults_and_headers() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.tsv", "u1\ti9\nu2\ti3\n");
        let parsed = parse_delimited(&p, b'\t', Some(ColumnMap::default())).unwrap();
        assert_eq!(
            parsed.records[0],
            RawInteraction {
                user: "u1".into(),
                item: "i9".into(),
                rating: 1.0,
                timestamp: 0
            }
        );
        let p = write(dir.path(), "b.csv", "timestamp,item,user,rating\n5,a,x,4.5\n6,b,y,2\n");
        let parsed = parse_delimited(&p, b',', None).unwrap();
        assert_eq!(parsed.records.len(), 2);
        assert_eq!(parsed.records[0].user, "x");
        assert_eq!(parsed.records[0].rating, 4.5);
        assert_eq!(parsed.records[1].timestamp, 6);
        // wrong delimiter: every row is one column
        let p = write(dir.path(), "c.tsv", "u1\ti9\nu2\ti3\n");
        assert!(matches!(
            parse_delimited(&p, b',', Some(ColumnMap::default())),
            Err(Error::TooManyMalformed { .. })
        ));
    }

    #[test]
    fn categories_split_and_dedup() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "movies.dat",
            "1::Toy Story (1995)::Animation|Children's|Comedy\n2::Jumanji (1995)::Adventure\n3::X::Drama|Drama\n",
        );
        let c = parse_categories(&p).unwrap();
        let toy: Vec<&str> = c["1"].iter().map(String::as_str).collect();
        assert_eq!(toy, vec!["Animation", "Children's", "Comedy"]);
        assert_eq!(c["2"].len(), 1);
        assert_eq!(c["3"].len(), 1);
    }

    #[test]
    fn tokens_sort_numerically_first() {
        let mut t = vec!["10", "b", "2", "a", "1"];
        t.sort_by(|a, b| token_order(a, b));
        assert_eq!(t, vec!["1", "2", "10", "a", "b"]);
    }

    fn raw(pairs: &[(u32, u32)]) -> Vec<RawInteraction> {
        pairs
            .iter()
            .map(|&(u, i)| RawInteraction {
                user: u.to_string(),
                item: format!("m{i}"),
                rating: 4.0,
                timestamp: 0,
            })
            .collect()
    }

    #[test]
    fn one_core_is_identity_plus_split() {
        let set = crate::synth::toy_interactions(5, 7, 20, 1).unwrap();
        let cfg = PreprocessConfig {
            k_core: 1,
            ..Default::default()
        };
        let b = preprocess(&raw(&set.pairs()), &cfg).unwrap();
        assert_eq!(b.num_users(), 5);
        assert_eq!(b.num_items(), 7);
        assert_eq!(b.train.len() + b.test.len(), 20);
        assert_eq!(b.user_tokens, vec!["0", "1", "2", "3", "4"]);
    }

    #[test]
    fn threshold_and_empty_core() {
        let mut r = raw(&[(0, 0), (0, 1), (1, 0), (1, 1)]);
        r[3].rating = 1.0;
        let cfg = PreprocessConfig {
            k_core: 2,
            min_rating: 3.0,
            ..Default::default()
        };
        assert!(matches!(preprocess(&r, &cfg), Err(Error::EmptyAfterCore { .. })));
        let ok = PreprocessConfig { min_rating: 1.0, ..cfg };
        assert_eq!(preprocess(&r, &ok).unwrap().num_users(), 2);
    }

    #[test]
    fn cache_round_trip_and_determinism() {
        let set = crate::synth::toy_interactions(12, 15, 90, 4).unwrap();
        let cfg = PreprocessConfig {
            k_core: 2,
            ..Default::default()
        };
        let b = preprocess(&raw(&set.pairs()), &cfg).unwrap();
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let h1 = write_cache(d1.path(), &b).unwrap();
        let b2 = preprocess(&raw(&set.pairs()), &cfg).unwrap();
        let h2 = write_cache(d2.path(), &b2).unwrap();
        assert_eq!(h1, h2);
        for f in ["manifest.txt", "train.bin", "test.bin"] {
            assert_eq!(fs::read(d1.path().join(f)).unwrap(), fs::read(d2.path().join(f)).unwrap());
        }
        let (back, h) = read_cache(d1.path()).unwrap();
        assert_eq!(h, h1);
        assert_eq!(back.train.pairs(), b.train.pairs());
        assert_eq!(back, b);
        // corrupt one edge
        let mut bytes = fs::read(d1.path().join("train.bin")).unwrap();
        bytes[0] ^= 1;
        fs::write(d1.path().join("train.bin"), bytes).unwrap();
        assert!(read_cache(d1.path()).is_err());
    }
}
