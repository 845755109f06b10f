//! Artifact directory: CSV outputs, trajectory dumps and stage manifests
//! cross-referenced by SHA-256.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use sha2::{Digest, Sha256};
use shotcox::shot::{JumpEvent, Sizes, Trajectory};

use crate::failure::{fail, Category};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// A table of string cells with a header row.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn with_header(header: Vec<String>) -> Self {
        Self { header, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    pub fn to_bytes(&self) -> anyhow::Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        Ok(w.into_inner().map_err(|e| anyhow::anyhow!(e.to_string()))?)
    }

    pub fn from_bytes(bytes: &[u8]) -> anyhow::Result<Self> {
        let mut r = csv::Reader::from_reader(bytes);
        let header = r.headers()?.iter().map(String::from).collect();
        let rows = r.records().map(|rec| rec.map(|r| r.iter().map(String::from).collect())).collect::<Result<_, _>>()?;
        Ok(Self { header, rows })
    }

    pub fn column(&self, name: &str) -> anyhow::Result<usize> {
        self.header.iter().position(|h| h == name).ok_or_else(|| fail(Category::Input, format!("missing column {name:?}")))
    }

    pub fn f64_at(&self, row: usize, col: usize) -> anyhow::Result<f64> {
        let s = &self.rows[row][col];
        s.parse().map_err(|_| fail(Category::Input, format!("row {}: {s:?} is not a number", row + 2)))
    }
}

/// Formats a float so that it parses back to the same value.
pub fn num(x: f64) -> String {
    format!("{x}")
}

/// Rows `sample,kind,time,<margins>`: one `initial` row then one `jump` row
/// per shot for each trajectory.
pub fn trajectories_table(trajs: &[Trajectory], margins: &[String]) -> Table {
    let mut header = vec!["sample".to_string(), "kind".into(), "time".into()];
    header.extend(margins.iter().cloned());
    let mut t = Table::with_header(header);
    for (s, traj) in trajs.iter().enumerate() {
        let mut row = vec![s.to_string(), "initial".into(), "0".into()];
        row.extend(traj.initial_values().iter().map(|&v| num(v)));
        t.push(row);
        for j in traj.jumps() {
            let mut row = vec![s.to_string(), "jump".into(), num(j.time)];
            row.extend(j.sizes.iter().map(|&v| num(v)));
            t.push(row);
        }
    }
    t
}

pub fn trajectories_from_table(t: &Table, horizon: f64) -> anyhow::Result<Vec<Trajectory>> {
    let dim = t.header.len().checked_sub(3).filter(|&d| d > 0).ok_or_else(|| fail(Category::Input, "trajectory table has no margins"))?;
    let mut out = Vec::new();
    let mut current: Option<(Sizes, Vec<JumpEvent>)> = None;
    for (i, row) in t.rows.iter().enumerate() {
        let sizes: Sizes = (0..dim).map(|g| t.f64_at(i, 3 + g)).collect::<anyhow::Result<_>>()?;
        match row[1].as_str() {
            "initial" => {
                if let Some((init, jumps)) = current.take() {
                    out.push(Trajectory::new(init, jumps, horizon)?);
                }
                current = Some((sizes, Vec::new()));
            }
            "jump" => {
                let (_, jumps) = current.as_mut().ok_or_else(|| fail(Category::Input, "jump row before any initial row"))?;
                jumps.push(JumpEvent::new(t.f64_at(i, 2)?, sizes)?);
            }
            other => return Err(fail(Category::Input, format!("row {}: unknown kind {other:?}", i + 2))),
        }
    }
    if let Some((init, jumps)) = current {
        out.push(Trajectory::new(init, jumps, horizon)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub stage: String,
    pub version: String,
    pub seed: u64,
    pub config_sha256: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub notes: Vec<String>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "stage={}\nversion={}\nseed={}\nconfig_sha256={}\n",
            self.stage, self.version, self.seed, self.config_sha256
        );
        for (k, v) in &self.inputs {
            s.push_str(&format!("input.{k}={v}\n"));
        }
        for (k, v) in &self.outputs {
            s.push_str(&format!("output.{k}={v}\n"));
        }
        for n in &self.notes {
            s.push_str(&format!("note={}\n", n.replace('\n', " ")));
        }
        s
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let mut m = Manifest::default();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| fail(Category::Dependency, format!("malformed manifest line {line:?}")))?;
            match k {
                "stage" => m.stage = v.into(),
                "version" => m.version = v.into(),
                "seed" => m.seed = v.parse().map_err(|_| fail(Category::Dependency, "bad seed in manifest"))?,
                "config_sha256" => m.config_sha256 = v.into(),
                "note" => m.notes.push(v.into()),
                _ => {
                    if let Some(name) = k.strip_prefix("input.") {
                        m.inputs.insert(name.into(), v.into());
                    } else if let Some(name) = k.strip_prefix("output.") {
                        m.outputs.insert(name.into(), v.into());
                    } else {
                        return Err(fail(Category::Dependency, format!("unknown manifest key {k:?}")));
                    }
                }
            }
        }
        Ok(m)
    }
}

/// Output directory of a pipeline run.
pub struct Store {
    dir: PathBuf,
}

impl Store {
    pub fn open(dir: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn manifest_name(stage: &str) -> String {
        format!("manifest-{stage}.txt")
    }

    /// Writes `bytes` and returns their hash.
    pub fn write(&self, name: &str, bytes: &[u8]) -> anyhow::Result<String> {
        let p = self.path(name);
        fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))?;
        Ok(sha256_hex(bytes))
    }

    pub fn read(&self, name: &str) -> anyhow::Result<Vec<u8>> {
        let p = self.path(name);
        fs::read(&p).with_context(|| format!("reading {}", p.display()))
    }

    /// Loads the manifest of `stage` and checks that its outputs are intact.
    pub fn require(&self, stage: &str, needed_by: &str) -> anyhow::Result<Manifest> {
        let p = self.path(&Self::manifest_name(stage));
        let text = fs::read_to_string(&p)
            .map_err(|_| fail(Category::Dependency, format!("{needed_by} needs the outputs of {stage}; run `{stage}` first")))?;
        let m = Manifest::parse(&text)?;
        for (name, sha) in &m.outputs {
            let bytes = fs::read(self.path(name))
                .map_err(|_| fail(Category::Dependency, format!("{name} listed by the {stage} manifest is missing")))?;
            if &sha256_hex(&bytes) != sha {
                return Err(fail(Category::Dependency, format!("{name} no longer matches the {stage} manifest; rerun `{stage}`")));
            }
        }
        Ok(m)
    }

    pub fn has(&self, stage: &str) -> bool {
        self.path(&Self::manifest_name(stage)).exists()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use smallvec::smallvec;

    #[test]
    fn trajectory_dump_round_trips() {
        let a = Trajectory::new(
            smallvec![1.5, 0.25] as Sizes,
            vec![JumpEvent::new(0.1 + 0.2, smallvec![1.0 / 3.0, 0.0] as Sizes).unwrap()],
            5.0,
        )
        .unwrap();
        let b = Trajectory::new(smallvec![2.0, 3.0] as Sizes, vec![], 5.0).unwrap();
        let t = trajectories_table(&[a.clone(), b.clone()], &["A".into(), "B".into()]);
        let back = Table::from_bytes(&t.to_bytes().unwrap()).unwrap();
        assert_eq!(trajectories_from_table(&back, 5.0).unwrap(), vec![a, b]);
    }

    #[test]
    fn manifest_round_trips() {
        let mut m = Manifest { stage: "filter".into(), version: "1".into(), seed: 3, config_sha256: "ab".into(), ..Default::default() };
        m.inputs.insert("x.csv".into(), "11".into());
        m.outputs.insert("y.csv".into(), "22".into());
        m.notes.push("hello".into());
        assert_eq!(Manifest::parse(&m.to_text()).unwrap(), m);
    }
}
