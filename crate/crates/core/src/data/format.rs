//! Line-delimited text formats for corpora (`.mmcorpus`) and mined
//! multimodal ground-truth indices (`.mmgt`).
//!
//! Corpus header, tab separated:
//! `MMCORPUS  1  fps=<f>  joints=<J>  sequences=<N>  parents=<p0,p1,..>  names=<n0,n1,..>`
//! (root parent written as `-1`). Each following line is one sequence:
//! `<label>  <actor_scale>  <frames>  <x,y,z,x,y,z,...>` with six decimals.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{MotionCorpus, MultimodalGtIndex, SequenceRecord};
use crate::error::{Error, Result};
use crate::kinematics::{PoseSequence, SkeletonTopology};

pub const CORPUS_MAGIC: &str = "MMCORPUS";
pub const INDEX_MAGIC: &str = "MMGT";
const VERSION: &str = "1";

fn malformed(line: usize, reason: impl Into<String>) -> Error {
    Error::MalformedRecord {
        line,
        reason: reason.into(),
    }
}

fn check_magic(header: &str, magic: &str) -> Result<()> {
    let mut it = header.split('\t');
    let found = it.next().unwrap_or("");
    let version = it.next().unwrap_or("");
    if found != magic {
        return Err(Error::VersionMismatch(format!(
            "expected `{magic}` header, found `{found}`"
        )));
    }
    if version != VERSION {
        return Err(Error::VersionMismatch(format!(
            "{magic} version {version} is not supported (expected {VERSION})"
        )));
    }
    Ok(())
}

fn header_fields(header: &str) -> BTreeMap<&str, &str> {
    header
        .split('\t')
        .skip(2)
        .filter_map(|kv| kv.split_once('='))
        .collect()
}

fn field<'a>(fields: &BTreeMap<&str, &'a str>, key: &str) -> Result<&'a str> {
    fields
        .get(key)
        .copied()
        .ok_or_else(|| malformed(1, format!("header lacks `{key}`")))
}

fn parse_num<T: std::str::FromStr>(s: &str, line: usize, what: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| malformed(line, format!("cannot parse {what} from `{s}`")))
}

pub fn corpus_to_string(corpus: &MotionCorpus) -> Result<String> {
    corpus.validate()?;
    let topo = &corpus.topology;
    let fps = corpus.sequences.first().map_or(25.0, |s| s.motion.fps());
    let parents: Vec<String> = topo
        .parents()
        .iter()
        .map(|p| p.map_or("-1".to_string(), |p| p.to_string()))
        .collect();
    for n in topo.names() {
        if n.contains([',', '\t', '\n']) {
            return Err(Error::InvalidConfig(format!("joint name `{n}` contains a separator")));
        }
    }
    let mut out = format!(
        "{CORPUS_MAGIC}\t{VERSION}\tfps={fps}\tjoints={}\tsequences={}\tparents={}\tnames={}\n",
        topo.joint_count(),
        corpus.sequences.len(),
        parents.join(","),
        topo.names().join(",")
    );
    for s in &corpus.sequences {
        if s.label.contains(['\t', '\n']) || s.label.is_empty() {
            return Err(Error::InvalidConfig(format!("invalid label `{}`", s.label)));
        }
        if s.motion.fps() != fps {
            return Err(Error::InvalidConfig("sequences disagree on fps".into()));
        }
        write!(
            out,
            "{}\t{:.6}\t{}\t",
            s.label,
            s.actor_scale,
            s.motion.num_frames()
        )
        .unwrap();
        let mut first = true;
        for v in s.motion.positions().iter().flatten() {
            if !first {
                out.push(',');
            }
            first = false;
            write!(out, "{v:.6}").unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn corpus_from_str(text: &str) -> Result<MotionCorpus> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| malformed(1, "empty file"))?;
    check_magic(header, CORPUS_MAGIC)?;
    let fields = header_fields(header);
    let fps: f64 = parse_num(field(&fields, "fps")?, 1, "fps")?;
    let joints: usize = parse_num(field(&fields, "joints")?, 1, "joint count")?;
    let count: usize = parse_num(field(&fields, "sequences")?, 1, "sequence count")?;
    let parents = field(&fields, "parents")?
        .split(',')
        .map(|p| {
            let v: i64 = parse_num(p, 1, "parent index")?;
            Ok(if v < 0 { None } else { Some(v as usize) })
        })
        .collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = field(&fields, "names")?.split(',').map(String::from).collect();
    if parents.len() != joints {
        return Err(malformed(1, format!("{} parents for {joints} joints", parents.len())));
    }
    let topology = SkeletonTopology::new(parents, names)?;

    let mut sequences = Vec::with_capacity(count);
    for (k, line) in lines.enumerate() {
        let lineno = k + 2;
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(malformed(lineno, format!("expected 4 columns, found {}", cols.len())));
        }
        let actor_scale: f64 = parse_num(cols[1], lineno, "actor scale")?;
        let frames: usize = parse_num(cols[2], lineno, "frame count")?;
        let values = cols[3]
            .split(',')
            .map(|v| parse_num::<f64>(v, lineno, "coordinate"))
            .collect::<Result<Vec<_>>>()?;
        if values.len() != frames * joints * 3 {
            return Err(malformed(
                lineno,
                format!(
                    "expected {} coordinates, found {}",
                    frames * joints * 3,
                    values.len()
                ),
            ));
        }
        sequences.push(SequenceRecord {
            label: cols[0].to_string(),
            actor_scale,
            motion: PoseSequence::from_flat(joints, fps, &values)
                .map_err(|e| malformed(lineno, e.to_string()))?,
        });
    }
    if sequences.len() != count {
        return Err(malformed(
            sequences.len() + 2,
            format!("expected {count} sequence records, found {}", sequences.len()),
        ));
    }
    let corpus = MotionCorpus {
        topology,
        sequences,
    };
    corpus.validate()?;
    Ok(corpus)
}

pub fn save_corpus(corpus: &MotionCorpus, path: &Path) -> Result<()> {
    std::fs::write(path, corpus_to_string(corpus)?).map_err(|e| Error::io(path, e))
}

pub fn load_corpus(path: &Path) -> Result<MotionCorpus> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    corpus_from_str(&text)
}

pub fn index_to_string(index: &MultimodalGtIndex) -> String {
    let mut out = format!(
        "{INDEX_MAGIC}\t{VERSION}\tthreshold={}\tsamples={}\n",
        index.threshold,
        index.len()
    );
    for (id, members) in index.iter() {
        let m: Vec<String> = members.iter().map(|m| m.to_string()).collect();
        writeln!(out, "{id}\t{}", m.join(",")).unwrap();
    }
    out
}

pub fn index_from_str(text: &str) -> Result<MultimodalGtIndex> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| malformed(1, "empty file"))?;
    check_magic(header, INDEX_MAGIC)?;
    let fields = header_fields(header);
    let threshold: f64 = parse_num(field(&fields, "threshold")?, 1, "threshold")?;
    let count: usize = parse_num(field(&fields, "samples")?, 1, "sample count")?;
    let mut members = BTreeMap::new();
    for (k, line) in lines.enumerate() {
        let lineno = k + 2;
        if line.is_empty() {
            continue;
        }
        let (id, list) = line
            .split_once('\t')
            .ok_or_else(|| malformed(lineno, "expected `<id>\\t<members>`"))?;
        let id: usize = parse_num(id, lineno, "sample id")?;
        let list = list
            .split(',')
            .map(|m| parse_num::<usize>(m, lineno, "member id"))
            .collect::<Result<Vec<_>>>()?;
        if !list.contains(&id) {
            return Err(malformed(lineno, format!("sample {id} is not its own member")));
        }
        members.insert(id, list);
    }
    if members.len() != count {
        return Err(malformed(
            members.len() + 2,
            format!("expected {count} index records, found {}", members.len()),
        ));
    }
    Ok(MultimodalGtIndex::from_parts(threshold, members))
}

pub fn save_index(index: &MultimodalGtIndex, path: &Path) -> Result<()> {
    std::fs::write(path, index_to_string(index)).map_err(|e| Error::io(path, e))
}

pub fn load_index(path: &Path) -> Result<MultimodalGtIndex> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    index_from_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generator::{generate_synthetic_corpus, GeneratorConfig};

    fn small() -> MotionCorpus {
        let cfg = GeneratorConfig {
            families: 2,
            sequences_per_family: 2,
            idle_frames: 4,
            idle_jitter: 1,
            action_frames: 6,
            ..GeneratorConfig::default()
        };
        generate_synthetic_corpus(&cfg, 3).unwrap()
    }

    #[test]
    fn roundtrip_is_exact() {
        let corpus = small();
        let text = corpus_to_string(&corpus).unwrap();
        let back = corpus_from_str(&text).unwrap();
        assert_eq!(back, corpus);
        assert_eq!(corpus_to_string(&back).unwrap(), text);
    }

    #[test]
    fn wrong_magic_is_version_mismatch() {
        let text = corpus_to_string(&small()).unwrap().replacen("MMCORPUS", "MMCORPSE", 1);
        assert!(matches!(corpus_from_str(&text), Err(Error::VersionMismatch(_))));
        let text = corpus_to_string(&small()).unwrap().replacen("MMCORPUS\t1", "MMCORPUS\t2", 1);
        assert!(matches!(corpus_from_str(&text), Err(Error::VersionMismatch(_))));
    }

    #[test]
    fn truncation_names_failing_line() {
        let text = corpus_to_string(&small()).unwrap();
        // Cut in the middle of the third record (line 4).
        let lines: Vec<&str> = text.lines().collect();
        let cut = lines[..3].join("\n").len() + 1 + lines[3].len() / 2;
        match corpus_from_str(&text[..cut]) {
            Err(Error::MalformedRecord { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
        // Whole records missing.
        let head = lines[..3].join("\n");
        match corpus_from_str(&head) {
            Err(Error::MalformedRecord { line, reason }) => {
                assert_eq!(line, 4);
                assert!(reason.contains("expected 4"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn index_roundtrip() {
        let mut m = BTreeMap::new();
        m.insert(0, vec![0, 2]);
        m.insert(1, vec![1]);
        m.insert(2, vec![0, 1, 2]);
        let idx = MultimodalGtIndex::from_parts(0.25, m);
        let back = index_from_str(&index_to_string(&idx)).unwrap();
        assert_eq!(back, idx);
        assert!(index_from_str("MMGT\t1\tthreshold=0.5\tsamples=1\n3\t1\n").is_err());
    }
}
