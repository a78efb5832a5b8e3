//! Reading and writing responses, item banks, scores, draws and reports.
//!
//! Response CSV: header `person_id,<item id>,...`, one row per person,
//! 0-based category codes, an empty field for a missing response.
//!
//! Binary draws (`.bin`), all integers and floats little-endian:
//!
//! ```text
//! magic        8 bytes  "GRMDRAW1"
//! n_params     u32
//! chains       u32
//! samples      u32      per chain
//! names        n_params × (u32 byte length, UTF-8 bytes)
//! columns      n_params × chains × samples f64, parameter-major, then chain,
//!              then iteration
//! ```

use std::collections::{BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bayes::PosteriorDraws;
use crate::error::{GrmError, Result};
use crate::model::{AbilityEstimate, ItemParameters, ResponseMatrix};
use crate::scoring::Score;

const DRAWS_MAGIC: &[u8; 8] = b"GRMDRAW1";

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> GrmError {
    GrmError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| GrmError::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| GrmError::io(path, e))?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(|e| GrmError::io(path, e))?))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::WriterBuilder::new().from_writer(create(path)?))
}

fn finish<W: Write>(mut w: W, path: &Path) -> Result<()> {
    w.flush().map_err(|e| GrmError::io(path, e))
}

/// Raw response codes as read from disk.
struct RawTable {
    person_ids: Vec<String>,
    item_ids: Vec<String>,
    /// Row-major codes.
    codes: Vec<Option<u32>>,
}

fn read_table(path: &Path) -> Result<RawTable> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .has_headers(true)
        .from_reader(open(path)?);
    let header = reader.headers()?.clone();
    if header.len() < 2 {
        return Err(parse_error(path, 1, "header needs `person_id` and at least one item column"));
    }
    let item_ids: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
    let mut seen = HashSet::new();
    if let Some(dup) = item_ids.iter().find(|id| !seen.insert(id.as_str())) {
        return Err(parse_error(path, 1, format!("duplicate item id `{dup}`")));
    }
    let mut person_ids = Vec::new();
    let mut codes = Vec::new();
    let mut people = HashSet::new();
    for (k, record) in reader.records().enumerate() {
        let record = record?;
        let line = record.position().map_or(k + 2, |p| p.line() as usize);
        if record.len() != header.len() {
            return Err(parse_error(
                path,
                line,
                format!("expected {} fields, found {}", header.len(), record.len()),
            ));
        }
        let id = record[0].trim().to_string();
        if id.is_empty() {
            return Err(parse_error(path, line, "empty person id"));
        }
        if !people.insert(id.clone()) {
            return Err(parse_error(path, line, format!("duplicate person id `{id}`")));
        }
        let start = codes.len();
        for (i, field) in record.iter().skip(1).enumerate() {
            let field = field.trim();
            if field.is_empty() {
                codes.push(None);
            } else {
                let v = field.parse::<u32>().map_err(|_| {
                    parse_error(
                        path,
                        line,
                        format!("item `{}`: `{field}` is not a non-negative integer", item_ids[i]),
                    )
                })?;
                codes.push(Some(v));
            }
        }
        if codes[start..].iter().all(Option::is_none) {
            return Err(parse_error(path, line, format!("person `{id}` has no responses")));
        }
        person_ids.push(id);
    }
    Ok(RawTable {
        person_ids,
        item_ids,
        codes,
    })
}

fn domain_of(path: &Path) -> String {
    path.file_stem().map_or_else(|| "responses".into(), |s| s.to_string_lossy().into_owned())
}

/// Dense re-indexing of one item's observed codes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryMapping {
    pub item_id: String,
    /// `original[k]` is the code on disk that became category `k`.
    pub original: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct LoadedResponses {
    pub matrix: ResponseMatrix,
    /// Items whose observed codes had gaps, with their re-indexing.
    pub mappings: Vec<CategoryMapping>,
}

/// Loads a response CSV for calibration. Each item's observed codes are
/// re-indexed to `0..n` (recorded in `mappings` when that changes anything) and
/// the item's category count is the number of observed codes, at least 2.
pub fn load_responses(path: impl AsRef<Path>) -> Result<LoadedResponses> {
    let path = path.as_ref();
    let table = read_table(path)?;
    let n_items = table.item_ids.len();
    let mut categories = Vec::with_capacity(n_items);
    let mut mappings = Vec::new();
    let mut recode: Vec<Vec<Option<u8>>> = Vec::with_capacity(n_items);
    for i in 0..n_items {
        let observed: BTreeSet<u32> = table.codes.iter().skip(i).step_by(n_items).flatten().copied().collect();
        let original: Vec<u32> = observed.into_iter().collect();
        if original.len() > 256 {
            return Err(GrmError::InvalidResponses(format!(
                "item `{}` has {} distinct codes, at most 256 are supported",
                table.item_ids[i],
                original.len()
            )));
        }
        let max = original.last().copied().unwrap_or(0) as usize;
        let mut map = vec![None; max + 1];
        for (k, &v) in original.iter().enumerate() {
            map[v as usize] = Some(k as u8);
        }
        if original.iter().enumerate().any(|(k, &v)| k as u32 != v) {
            mappings.push(CategoryMapping {
                item_id: table.item_ids[i].clone(),
                original: original.clone(),
            });
        }
        categories.push(original.len().max(2));
        recode.push(map);
    }
    let entries = table
        .codes
        .iter()
        .enumerate()
        .map(|(k, c)| c.and_then(|v| recode[k % n_items][v as usize]))
        .collect();
    let matrix = ResponseMatrix::new(domain_of(path), table.person_ids, table.item_ids, categories, entries)?;
    Ok(LoadedResponses { matrix, mappings })
}

/// Loads a response CSV to be scored against a calibrated bank: codes are
/// taken as they are and columns are aligned to `items` by id.
pub fn load_responses_for(path: impl AsRef<Path>, items: &ItemParameters) -> Result<ResponseMatrix> {
    load_responses_mapped(path, items, &[])
}

/// As [`load_responses_for`], first applying the re-indexing recorded at
/// calibration to the listed items.
pub fn load_responses_mapped(
    path: impl AsRef<Path>,
    items: &ItemParameters,
    mappings: &[CategoryMapping],
) -> Result<ResponseMatrix> {
    let path = path.as_ref();
    let mut table = read_table(path)?;
    let n_items = table.item_ids.len();
    for m in mappings {
        let Some(i) = table.item_ids.iter().position(|id| *id == m.item_id) else {
            continue;
        };
        for c in table.codes.iter_mut().skip(i).step_by(n_items).flatten() {
            *c = m.original.iter().position(|v| v == c).ok_or_else(|| {
                GrmError::InvalidResponses(format!("item `{}`: code {c} was not observed at calibration", m.item_id))
            })? as u32;
        }
    }
    let mut categories = vec![2usize; n_items];
    for (k, c) in table.codes.iter().enumerate() {
        if let Some(v) = c {
            if *v > 255 {
                return Err(GrmError::InvalidResponses(format!(
                    "item `{}`: code {v} is out of range",
                    table.item_ids[k % n_items]
                )));
            }
            categories[k % n_items] = categories[k % n_items].max(*v as usize + 1);
        }
    }
    let entries = table.codes.iter().map(|c| c.map(|v| v as u8)).collect();
    ResponseMatrix::new(domain_of(path), table.person_ids, table.item_ids, categories, entries)?.align_to(items)
}

pub fn save_responses(matrix: &ResponseMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    let mut header = vec!["person_id".to_string()];
    header.extend(matrix.item_ids().iter().cloned());
    w.write_record(&header)?;
    for p in 0..matrix.persons() {
        let mut rec = vec![matrix.person_ids()[p].clone()];
        rec.extend(matrix.row(p).iter().map(|x| x.map_or_else(String::new, |v| v.to_string())));
        w.write_record(&rec)?;
    }
    finish(w.into_inner().map_err(|e| GrmError::io(path, e.into_error()))?, path)
}

pub fn load_items(path: impl AsRef<Path>) -> Result<ItemParameters> {
    load_json(path)
}

pub fn save_items(items: &ItemParameters, path: impl AsRef<Path>) -> Result<()> {
    save_json(items, path)
}

pub fn save_json<T: Serialize + ?Sized>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| GrmError::io(path, e))?;
    finish(w, path)
}

pub fn load_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    Ok(serde_json::from_reader(open(path.as_ref())?)?)
}

/// Reads a TOML file, or JSON when the extension is `.json`.
pub fn load_config<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e == "json") {
        return load_json(path);
    }
    let text = std::fs::read_to_string(path).map_err(|e| GrmError::io(path, e))?;
    Ok(toml::from_str(&text)?)
}

#[derive(Serialize, Deserialize)]
struct AbilityRow {
    person_id: String,
    theta: f64,
    sd: f64,
}

/// Writes `person_id,theta,sd`.
pub fn save_abilities(person_ids: &[String], abilities: &[AbilityEstimate], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    for (id, a) in person_ids.iter().zip(abilities) {
        w.serialize(AbilityRow {
            person_id: id.clone(),
            theta: a.mean,
            sd: a.sd,
        })?;
    }
    finish(w.into_inner().map_err(|e| GrmError::io(path, e.into_error()))?, path)
}

pub fn load_abilities(path: impl AsRef<Path>) -> Result<(Vec<String>, Vec<AbilityEstimate>)> {
    let mut reader = csv::Reader::from_reader(open(path.as_ref())?);
    let mut ids = Vec::new();
    let mut abilities = Vec::new();
    for row in reader.deserialize::<AbilityRow>() {
        let row = row?;
        ids.push(row.person_id);
        abilities.push(AbilityEstimate::new(row.theta, row.sd));
    }
    Ok((ids, abilities))
}

/// Writes `person_id,theta,sd,flag`.
pub fn save_scores(person_ids: &[String], scores: &[Score], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    w.write_record(["person_id", "theta", "sd", "flag"])?;
    for (id, s) in person_ids.iter().zip(scores) {
        w.write_record([
            id.clone(),
            s.estimate.mean.to_string(),
            s.estimate.sd.to_string(),
            s.flag.to_string(),
        ])?;
    }
    finish(w.into_inner().map_err(|e| GrmError::io(path, e.into_error()))?, path)
}

/// Writes one row per retained draw: `chain,iteration,<parameter names>`.
pub fn save_draws_csv(draws: &PosteriorDraws, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    let mut header = vec!["chain".to_string(), "iteration".to_string()];
    header.extend(draws.names.iter().cloned());
    w.write_record(&header)?;
    for c in 0..draws.chains {
        for s in 0..draws.samples_per_chain {
            let mut rec = vec![c.to_string(), s.to_string()];
            rec.extend(draws.draw(c, s).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    finish(w.into_inner().map_err(|e| GrmError::io(path, e.into_error()))?, path)
}

/// Draws as read back from the binary format.
#[derive(Debug, Clone, PartialEq)]
pub struct DrawColumns {
    pub names: Vec<String>,
    pub chains: usize,
    pub samples_per_chain: usize,
    /// One column per parameter, chains concatenated.
    pub columns: Vec<Vec<f64>>,
}

pub fn save_draws_binary(draws: &PosteriorDraws, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    let io = |e| GrmError::io(path, e);
    let u32_of = |v: usize| -> Result<[u8; 4]> {
        u32::try_from(v)
            .map(u32::to_le_bytes)
            .map_err(|_| GrmError::InvalidConfig(format!("{v} does not fit the draws header")))
    };
    w.write_all(DRAWS_MAGIC).map_err(io)?;
    w.write_all(&u32_of(draws.n_params())?).map_err(io)?;
    w.write_all(&u32_of(draws.chains)?).map_err(io)?;
    w.write_all(&u32_of(draws.samples_per_chain)?).map_err(io)?;
    for name in &draws.names {
        w.write_all(&u32_of(name.len())?).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
    }
    for k in 0..draws.n_params() {
        for v in draws.column(k) {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    finish(w, path)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .pos
            .checked_add(n)
            .and_then(|end| self.bytes.get(self.pos..end))
            .ok_or_else(|| parse_error(self.path, 0, "truncated draws file"))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

pub fn load_draws_binary(path: impl AsRef<Path>) -> Result<DrawColumns> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    open(path)?.read_to_end(&mut bytes).map_err(|e| GrmError::io(path, e))?;
    let bad = |m: &str| parse_error(path, 0, m);
    let mut c = Cursor { bytes: &bytes, pos: 0, path };
    if c.take(8)? != DRAWS_MAGIC {
        return Err(bad("not a draws file"));
    }
    let n_params = c.u32()?;
    let chains = c.u32()?;
    let samples_per_chain = c.u32()?;
    let mut names = Vec::with_capacity(n_params.min(1 << 20));
    for _ in 0..n_params {
        let len = c.u32()?;
        let name = std::str::from_utf8(c.take(len)?).map_err(|_| bad("parameter name is not UTF-8"))?;
        names.push(name.to_string());
    }
    let n = chains * samples_per_chain;
    let mut columns = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let raw = c.take(8 * n)?;
        columns.push(raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect());
    }
    if c.pos != bytes.len() {
        return Err(bad("trailing bytes after draws"));
    }
    Ok(DrawColumns {
        names,
        chains,
        samples_per_chain,
        columns,
    })
}

/// Hex SHA-256 of a file's contents.
pub fn file_digest(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let mut hasher = Sha256::new();
    let mut reader = open(path)?;
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = reader.read(&mut buf).map_err(|e| GrmError::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Hex SHA-256 of a value's compact JSON encoding.
pub fn value_digest<T: Serialize>(value: &T) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(value)?)))
}

/// A file written by a run, with its digest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

impl Artifact {
    pub fn of(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let sha256 = file_digest(&path)?;
        Ok(Artifact { path, sha256 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Item;
    use crate::scoring::ScoreFlag;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn loads_small_file_with_missing_cell() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "d.csv", "person_id,a,b\nx,1,\ny,0,1\n");
        let r = load_responses(&p).unwrap();
        assert_eq!((r.matrix.persons(), r.matrix.items()), (2, 2));
        assert_eq!(r.matrix.get(0, 1), None);
        assert_eq!(r.matrix.get(1, 1), Some(0));
        assert_eq!(r.matrix.domain(), "d");
        assert_eq!(r.mappings.len(), 1, "item b only has code 1");
    }

    #[test]
    fn gaps_are_reindexed() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "g.csv", "person_id,a\nx,0\ny,2\nz,2\n");
        let r = load_responses(&p).unwrap();
        assert_eq!(r.matrix.categories(), &[2]);
        assert_eq!(r.matrix.get(1, 0), Some(1));
        assert_eq!(
            r.mappings,
            vec![CategoryMapping {
                item_id: "a".into(),
                original: vec![0, 2]
            }]
        );
    }

    #[test]
    fn mapped_loading_applies_the_recorded_reindexing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        std::fs::write(&path, "person_id,a,b\np1,0,2\np2,2,1\np3,,0\n").unwrap();
        let items = ItemParameters::new(vec![
            Item::new("a", 1.0, vec![0.0]).unwrap(),
            Item::new("b", 1.0, vec![-1.0, 1.0]).unwrap(),
        ])
        .unwrap();
        let mapping = [CategoryMapping {
            item_id: "a".into(),
            original: vec![0, 2],
        }];
        let r = load_responses_mapped(&path, &items, &mapping).unwrap();
        assert_eq!(r.row(0), &[Some(0), Some(2)]);
        assert_eq!(r.row(1), &[Some(1), Some(1)]);
        assert_eq!(r.row(2), &[None, Some(0)]);
        assert!(load_responses_for(&path, &items).is_err());
        std::fs::write(&path, "person_id,a,b\np1,1,0\n").unwrap();
        assert!(load_responses_mapped(&path, &items, &mapping).is_err());
    }

    #[test]
    fn load_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let cases = [
            ("person_id,a,b\nx,1,0\ny,1\n", 3, "expected 3 fields"),
            ("person_id,a\nx,1\ny,1.5\n", 3, "not a non-negative integer"),
            ("person_id,a,b\nx,1,0\ny,,\n", 3, "no responses"),
            ("person_id,a\nx,-1\n", 2, "not a non-negative integer"),
        ];
        for (k, (text, line, msg)) in cases.iter().enumerate() {
            let p = write(dir.path(), &format!("bad{k}.csv"), text);
            match load_responses(&p) {
                Err(GrmError::Parse { line: l, message, .. }) => {
                    assert_eq!(l, *line, "{message}");
                    assert!(message.contains(msg), "{message}");
                }
                other => panic!("case {k}: {other:?}"),
            }
        }
    }

    #[test]
    fn round_trips_are_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let items = ItemParameters::new(vec![
            Item::new("a", 1.234567890123456789, vec![-0.1 / 3.0, 2.0 / 7.0]).unwrap(),
            Item::new("b", 0.7, vec![1e-17]).unwrap(),
        ])
        .unwrap();
        let ip = dir.path().join("items.json");
        save_items(&items, &ip).unwrap();
        assert_eq!(load_items(&ip).unwrap(), items);

        let m = ResponseMatrix::new(
            "m",
            vec!["p1".into(), "p2".into()],
            vec!["a".into(), "b".into()],
            vec![3, 2],
            vec![Some(2), None, Some(0), Some(1)],
        )
        .unwrap();
        let mp = dir.path().join("m.csv");
        save_responses(&m, &mp).unwrap();
        let back = load_responses_for(&mp, &items).unwrap();
        assert_eq!(back, m);

        let ids = vec!["p1".to_string(), "p2".to_string()];
        let ab = vec![AbilityEstimate::new(0.1 + 0.2, 1.0 / 3.0), AbilityEstimate::new(-7e-300, 0.0)];
        let apath = dir.path().join("ab.csv");
        save_abilities(&ids, &ab, &apath).unwrap();
        assert_eq!(load_abilities(&apath).unwrap(), (ids.clone(), ab.clone()));

        let scores: Vec<Score> = ab.iter().map(|&estimate| Score { estimate, flag: ScoreFlag::Clamped }).collect();
        let sp = dir.path().join("s.csv");
        save_scores(&ids, &scores, &sp).unwrap();
        let text = std::fs::read_to_string(&sp).unwrap();
        assert!(text.starts_with("person_id,theta,sd,flag\np1,0.30000000000000004,0.3333333333333333,clamped\n"));
    }

    #[test]
    fn scoring_load_rejects_codes_beyond_bank() {
        let dir = tempfile::tempdir().unwrap();
        let items = ItemParameters::new(vec![Item::new("a", 1.0, vec![0.0]).unwrap()]).unwrap();
        let p = write(dir.path(), "s.csv", "person_id,a\nx,2\n");
        assert!(load_responses_for(&p, &items).is_err());
    }

    #[test]
    fn digest_is_sha256() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "abc.txt", "abc");
        assert_eq!(
            file_digest(&p).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
