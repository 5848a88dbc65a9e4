//! Line-oriented text checkpoints. Parameters are written with 17 significant
//! decimal digits, which round-trips every finite f64 bit-exactly.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{LabError, Result};
use crate::policy::{init_policy, ArchKind, Init, Policy};
use crate::tasks::{Family, TaskFamilySpec};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub policy: Policy,
    pub task: TaskFamilySpec,
    pub arch: ArchKind,
    pub window: usize,
}

fn ck_err(msg: impl Into<String>) -> LabError {
    LabError::Checkpoint(msg.into())
}

pub fn render_checkpoint(
    policy: &Policy,
    task: &TaskFamilySpec,
    arch: ArchKind,
    window: usize,
) -> String {
    let mut out = String::new();
    let arch_name = match arch {
        ArchKind::Tabular => "tabular",
        ArchKind::Linear => "linear",
    };
    let _ = writeln!(out, "format_version = {FORMAT_VERSION}");
    let _ = writeln!(out, "arch = {arch_name}");
    let _ = writeln!(out, "vocab_size = {}", policy.vocab_size());
    let _ = writeln!(out, "window = {window}");
    let _ = writeln!(out, "task.family = sum_chain");
    let _ = writeln!(out, "task.base = {}", task.base);
    let _ = writeln!(out, "task.chain_length = {}", task.chain_length);
    let _ = writeln!(out, "task.t_max = {}", task.t_max);
    let _ = writeln!(out, "n_params = {}", policy.n_params());
    let _ = writeln!(out, "params");
    for p in &policy.params {
        let _ = writeln!(out, "{p:.16e}");
    }
    out
}

pub fn save_checkpoint(
    policy: &Policy,
    task: &TaskFamilySpec,
    arch: ArchKind,
    window: usize,
    path: &Path,
) -> Result<()> {
    std::fs::write(path, render_checkpoint(policy, task, arch, window))?;
    Ok(())
}

pub fn parse_checkpoint(text: &str, expected_arch: Option<ArchKind>) -> Result<Checkpoint> {
    let mut lines = text.lines();
    let mut header = std::collections::HashMap::new();
    for line in lines.by_ref() {
        let line = line.trim();
        if line == "params" {
            break;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| ck_err(format!("malformed header line '{line}'")))?;
        header.insert(k.trim().to_string(), v.trim().to_string());
    }

    let field = |name: &str| -> Result<&String> {
        header
            .get(name)
            .ok_or_else(|| ck_err(format!("missing field '{name}'")))
    };
    let num_field = |name: &str| -> Result<usize> {
        field(name)?
            .parse()
            .map_err(|_| ck_err(format!("field '{name}' is not an integer")))
    };

    let version: u32 = field("format_version")?
        .parse()
        .map_err(|_| ck_err("field 'format_version' is not an integer"))?;
    if version != FORMAT_VERSION {
        return Err(ck_err(format!(
            "format_version {version} unsupported (expected {FORMAT_VERSION})"
        )));
    }
    let arch = match field("arch")?.as_str() {
        "tabular" => ArchKind::Tabular,
        "linear" => ArchKind::Linear,
        other => return Err(ck_err(format!("unknown arch '{other}'"))),
    };
    if let Some(expected) = expected_arch {
        if expected != arch {
            return Err(ck_err(format!(
                "dimension mismatch: checkpoint arch is {:?} but the run expects {:?}",
                arch, expected
            )));
        }
    }
    if field("task.family")?.as_str() != "sum_chain" {
        return Err(ck_err(format!(
            "unknown task.family '{}'",
            field("task.family")?
        )));
    }
    let task = TaskFamilySpec::new(
        Family::SumChain,
        num_field("task.base")? as u8,
        num_field("task.chain_length")?,
        num_field("task.t_max")?,
    )?;
    let vocab_size = num_field("vocab_size")?;
    let window = num_field("window")?;
    let n_params = num_field("n_params")?;

    let mut params = Vec::with_capacity(n_params);
    for line in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let v: f64 = line
            .parse()
            .map_err(|_| ck_err(format!("malformed parameter value '{line}'")))?;
        params.push(v);
    }
    if params.len() != n_params {
        return Err(ck_err(format!(
            "missing field 'params': expected {n_params} values, found {}",
            params.len()
        )));
    }

    // rebuild the layout from the declared task, then install the parameters
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut policy = init_policy(arch, &task, window, Init::Uniform, &mut rng)?;
    if policy.vocab_size() != vocab_size {
        return Err(ck_err(format!(
            "dimension mismatch: declared vocab_size {vocab_size} but the task implies {}",
            policy.vocab_size()
        )));
    }
    if policy.n_params() != n_params {
        return Err(ck_err(format!(
            "dimension mismatch: {n_params} parameters for an arch expecting {}",
            policy.n_params()
        )));
    }
    policy.params = params;
    Ok(Checkpoint {
        policy,
        task,
        arch,
        window,
    })
}

pub fn load_checkpoint(path: &Path, expected_arch: Option<ArchKind>) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path)?;
    parse_checkpoint(&text, expected_arch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::Init;
    use crate::tasks::Family;

    fn seeded_policy(arch: ArchKind, window: usize) -> (Policy, TaskFamilySpec) {
        let task = TaskFamilySpec::new(Family::SumChain, 2, 1, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let p = init_policy(arch, &task, window, Init::SeededNoise(0.7), &mut rng).unwrap();
        (p, task)
    }

    #[test]
    fn round_trip_is_bit_exact_for_both_archs() {
        for (arch, window) in [(ArchKind::Tabular, 0), (ArchKind::Linear, 3)] {
            let (p, task) = seeded_policy(arch, window);
            let text = render_checkpoint(&p, &task, arch, window);
            let loaded = parse_checkpoint(&text, None).unwrap();
            assert_eq!(loaded.policy.params.len(), p.params.len());
            for (a, b) in p.params.iter().zip(loaded.policy.params.iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
            assert_eq!(loaded.task.base, task.base);
            assert_eq!(loaded.window, window);
        }
    }

    #[test]
    fn truncated_file_names_the_missing_field() {
        let (p, task) = seeded_policy(ArchKind::Tabular, 0);
        let text = render_checkpoint(&p, &task, ArchKind::Tabular, 0);
        // drop the last 10 parameter lines
        let truncated: Vec<&str> = text.lines().collect();
        let cut = truncated[..truncated.len() - 10].join("\n");
        let err = parse_checkpoint(&cut, None).unwrap_err();
        assert!(err.to_string().contains("params"), "{err}");

        // drop a header field entirely
        let no_arch: String = text
            .lines()
            .filter(|l| !l.starts_with("arch"))
            .collect::<Vec<_>>()
            .join("\n");
        let err = parse_checkpoint(&no_arch, None).unwrap_err();
        assert!(err.to_string().contains("missing field 'arch'"), "{err}");
    }

    #[test]
    fn arch_mismatch_is_a_dimension_error() {
        let (p, task) = seeded_policy(ArchKind::Tabular, 0);
        let text = render_checkpoint(&p, &task, ArchKind::Tabular, 0);
        let err = parse_checkpoint(&text, Some(ArchKind::Linear)).unwrap_err();
        assert!(err.to_string().contains("dimension mismatch"), "{err}");
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let (p, task) = seeded_policy(ArchKind::Tabular, 0);
        let text = render_checkpoint(&p, &task, ArchKind::Tabular, 0)
            .replace("format_version = 1", "format_version = 99");
        assert!(parse_checkpoint(&text, None).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.txt");
        let (p, task) = seeded_policy(ArchKind::Linear, 2);
        save_checkpoint(&p, &task, ArchKind::Linear, 2, &path).unwrap();
        let loaded = load_checkpoint(&path, Some(ArchKind::Linear)).unwrap();
        assert_eq!(loaded.policy.params, p.params);
    }
}
