//! Rating files: raw triplet loaders, normalized block files and meta-test
//! manifests.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use mmf_core::episodes::{Episode, Normalization, Rating, RatingMatrix};

use crate::error::{Error, Result};
use crate::num::fmt_f64;

/// Layout of a raw rating file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum TripletFormat {
    /// `user<TAB>item<TAB>rating<TAB>timestamp`, as in MovieLens 100K.
    #[value(name = "movielens_tab")]
    MovielensTab,
    /// `user::item::rating::timestamp`, as in MovieLens 1M.
    #[value(name = "movielens_dcolon")]
    MovielensDcolon,
    /// `user,item,rating` with an optional header line.
    #[value(name = "csv")]
    Csv,
}

impl TripletFormat {
    fn split<'a>(self, line: &'a str) -> Vec<&'a str> {
        match self {
            TripletFormat::MovielensTab => line.split('\t').collect(),
            TripletFormat::MovielensDcolon => line.split("::").collect(),
            TripletFormat::Csv => line.split(',').map(str::trim).collect(),
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(Error::io(path))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(Error::io(path))
}

fn field<T: FromStr>(path: &Path, line: usize, what: &str, raw: &str) -> Result<T> {
    raw.trim().parse().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("cannot parse {what} from {raw:?}"),
    })
}

/// Parses raw triplets. Blank lines are skipped; anything else that does not
/// parse is reported with its 1-based line number.
pub fn parse_triplets(path: &Path, text: &str, format: TripletFormat) -> Result<Vec<Rating>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let parts = format.split(line);
        if format == TripletFormat::Csv && out.is_empty() && idx == 0 && parts[0].parse::<u64>().is_err() {
            continue;
        }
        if parts.len() < 3 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                message: format!("expected at least 3 fields, found {}", parts.len()),
            });
        }
        let user = field(path, lineno, "user id", parts[0])?;
        let item = field(path, lineno, "item id", parts[1])?;
        let value: f64 = field(path, lineno, "rating", parts[2])?;
        if !value.is_finite() {
            return Err(Error::Parse { path: path.to_path_buf(), line: lineno, message: "rating is not finite".into() });
        }
        out.push(Rating::new(user, item, value));
    }
    if out.is_empty() {
        return Err(Error::Format { path: path.to_path_buf(), message: "no ratings found".into() });
    }
    Ok(out)
}

pub fn load_triplets(path: &Path, format: TripletFormat) -> Result<Vec<Rating>> {
    parse_triplets(path, &read_text(path)?, format)
}

/// Counts of a raw rating set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TripletSummary {
    pub ratings: usize,
    pub users: usize,
    pub items: usize,
    pub min: f64,
    pub max: f64,
}

pub fn summarize(ratings: &[Rating]) -> TripletSummary {
    let mut users: Vec<u64> = ratings.iter().map(|r| r.user).collect();
    let mut items: Vec<u64> = ratings.iter().map(|r| r.item).collect();
    users.sort_unstable();
    users.dedup();
    items.sort_unstable();
    items.dedup();
    let min = ratings.iter().map(|r| r.value).fold(f64::INFINITY, f64::min);
    let max = ratings.iter().map(|r| r.value).fold(f64::NEG_INFINITY, f64::max);
    TripletSummary { ratings: ratings.len(), users: users.len(), items: items.len(), min, max }
}

const BLOCK_MAGIC: &str = "# mmf-block v1";
const MANIFEST_MAGIC: &str = "# mmf-manifest v1";

fn ids_line(tag: &str, ids: &[u64]) -> String {
    let mut s = String::from(tag);
    for id in ids {
        write!(s, "\t{id}").unwrap();
    }
    s
}

fn norm_line(norm: &Normalization) -> String {
    format!("norm\t{}\t{}", fmt_f64(norm.mean), fmt_f64(norm.std))
}

/// Writes a block of normalized ratings. Row and column ids are listed
/// explicitly so users or items without ratings in the block survive a round
/// trip.
pub fn render_block(block: &RatingMatrix, norm: &Normalization) -> String {
    let mut s = String::new();
    writeln!(s, "{BLOCK_MAGIC}").unwrap();
    writeln!(s, "{}", norm_line(norm)).unwrap();
    writeln!(s, "{}", ids_line("rows", block.row_ids())).unwrap();
    writeln!(s, "{}", ids_line("cols", block.col_ids())).unwrap();
    for r in block.ratings() {
        writeln!(s, "{}\t{}\t{}", r.user, r.item, fmt_f64(r.value)).unwrap();
    }
    s
}

pub fn write_block(path: &Path, block: &RatingMatrix, norm: &Normalization) -> Result<()> {
    write_text(path, &render_block(block, norm))
}

struct Lines<'a> {
    path: &'a Path,
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    lineno: usize,
}

impl<'a> Lines<'a> {
    fn new(path: &'a Path, text: &'a str) -> Self {
        Self { path, inner: text.lines().enumerate(), lineno: 0 }
    }

    fn next_fields(&mut self) -> Option<Vec<&'a str>> {
        for (idx, line) in self.inner.by_ref() {
            self.lineno = idx + 1;
            if !line.trim().is_empty() {
                return Some(line.trim_end_matches('\r').split('\t').collect());
            }
        }
        None
    }

    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse { path: self.path.to_path_buf(), line: self.lineno, message: message.into() }
    }

    fn expect_magic(&mut self, magic: &str) -> Result<()> {
        match self.inner.next() {
            Some((_, line)) if line.trim_end() == magic => {
                self.lineno = 1;
                Ok(())
            }
            _ => Err(Error::Format { path: self.path.to_path_buf(), message: format!("missing header {magic:?}") }),
        }
    }

    fn parse<T: FromStr>(&self, what: &str, raw: &str) -> Result<T> {
        field(self.path, self.lineno, what, raw)
    }

    fn tagged(&mut self, tag: &str) -> Result<Vec<&'a str>> {
        match self.next_fields() {
            Some(f) if f[0] == tag => Ok(f[1..].to_vec()),
            Some(_) => Err(self.err(format!("expected a {tag:?} line"))),
            None => Err(self.err(format!("unexpected end of file, expected a {tag:?} line"))),
        }
    }

    fn norm(&mut self) -> Result<Normalization> {
        let f = self.tagged("norm")?;
        if f.len() != 2 {
            return Err(self.err("norm line needs mean and std"));
        }
        Ok(Normalization { mean: self.parse("mean", f[0])?, std: self.parse("std", f[1])? })
    }
}

pub fn parse_block(path: &Path, text: &str) -> Result<(RatingMatrix, Normalization)> {
    let mut lines = Lines::new(path, text);
    lines.expect_magic(BLOCK_MAGIC)?;
    let norm = lines.norm()?;
    let row_ids = lines.tagged("rows")?.iter().map(|s| lines.parse("row id", s)).collect::<Result<Vec<u64>>>()?;
    let col_ids = lines.tagged("cols")?.iter().map(|s| lines.parse("column id", s)).collect::<Result<Vec<u64>>>()?;
    let mut ratings = Vec::new();
    while let Some(f) = lines.next_fields() {
        if f.len() != 3 {
            return Err(lines.err(format!("expected 3 fields, found {}", f.len())));
        }
        let r = Rating::new(lines.parse("user id", f[0])?, lines.parse("item id", f[1])?, lines.parse("value", f[2])?);
        if row_ids.binary_search(&r.user).is_err() || col_ids.binary_search(&r.item).is_err() {
            return Err(lines.err(format!("rating ({}, {}) outside the listed ids", r.user, r.item)));
        }
        ratings.push(r);
    }
    Ok((RatingMatrix::from_ratings(&ratings, &row_ids, &col_ids), norm))
}

pub fn read_block(path: &Path) -> Result<(RatingMatrix, Normalization)> {
    parse_block(path, &read_text(path)?)
}

/// A fixed evaluation suite in normalized units.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub normalization: Normalization,
    pub episodes: Vec<Episode>,
}

pub fn render_manifest(manifest: &Manifest) -> String {
    let mut s = String::new();
    writeln!(s, "{MANIFEST_MAGIC}").unwrap();
    writeln!(s, "{}", norm_line(&manifest.normalization)).unwrap();
    for (idx, ep) in manifest.episodes.iter().enumerate() {
        writeln!(s, "episode\t{idx}\t{}\t{}", ep.rows(), ep.cols()).unwrap();
        for (i, j, v, is_test) in ep.cells() {
            writeln!(s, "{i}\t{j}\t{}\t{}", fmt_f64(v), if is_test { "test" } else { "train" }).unwrap();
        }
    }
    s
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    write_text(path, &render_manifest(manifest))
}

type Cells = Vec<(usize, usize, f64)>;

pub fn parse_manifest(path: &Path, text: &str) -> Result<Manifest> {
    let mut lines = Lines::new(path, text);
    lines.expect_magic(MANIFEST_MAGIC)?;
    let normalization = lines.norm()?;
    let mut episodes = Vec::new();
    let mut current: Option<(usize, usize, Cells, Cells, usize)> = None;

    let finish = |cur: Option<(usize, usize, Cells, Cells, usize)>, episodes: &mut Vec<Episode>| -> Result<()> {
        if let Some((rows, cols, train, test, line)) = cur {
            let ep = Episode::from_cells(rows, cols, &train, &test)
                .map_err(|e| Error::Parse { path: path.to_path_buf(), line, message: e.to_string() })?;
            episodes.push(ep);
        }
        Ok(())
    };

    while let Some(f) = lines.next_fields() {
        if f[0] == "episode" {
            if f.len() != 4 {
                return Err(lines.err("episode line needs index, rows and cols"));
            }
            let idx: usize = lines.parse("episode index", f[1])?;
            if idx != episodes.len() + usize::from(current.is_some()) {
                return Err(lines.err(format!("episode {idx} out of order")));
            }
            finish(current.take(), &mut episodes)?;
            current = Some((lines.parse("rows", f[2])?, lines.parse("cols", f[3])?, Vec::new(), Vec::new(), lines.lineno));
            continue;
        }
        let Some((rows, cols, train, test, _)) = current.as_mut() else {
            return Err(lines.err("cell before the first episode line"));
        };
        if f.len() != 4 {
            return Err(lines.err(format!("expected 4 fields, found {}", f.len())));
        }
        let i: usize = lines.parse("row", f[0])?;
        let j: usize = lines.parse("col", f[1])?;
        let v: f64 = lines.parse("value", f[2])?;
        if i >= *rows || j >= *cols {
            return Err(lines.err(format!("cell ({i}, {j}) outside {rows}x{cols}")));
        }
        match f[3] {
            "train" => train.push((i, j, v)),
            "test" => test.push((i, j, v)),
            other => return Err(lines.err(format!("cell role must be train or test, found {other:?}"))),
        }
    }
    finish(current, &mut episodes)?;
    if episodes.is_empty() {
        return Err(Error::Format { path: path.to_path_buf(), message: "manifest holds no episodes".into() });
    }
    Ok(Manifest { normalization, episodes })
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    parse_manifest(path, &read_text(path)?)
}
