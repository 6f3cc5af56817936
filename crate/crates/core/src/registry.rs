//! Built-in ODE systems plus systems loaded from `*.ode` files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;

use crate::dsl::{parse_system, DslError, SystemSpec};

const BUILTINS: &[(&str, &str, &[&str])] = &[
    ("fitzhugh_nagumo", include_str!("../systems/fitzhugh_nagumo.ode"), &["oscillator", "neuro"]),
    ("harmonic", include_str!("../systems/harmonic.ode"), &["oscillator", "linear"]),
    ("lin", include_str!("../systems/lin.ode"), &["linear", "growth"]),
    ("lorenz", include_str!("../systems/lorenz.ode"), &["chaotic"]),
    ("lorenz96", include_str!("../systems/lorenz96.ode"), &["chaotic"]),
    ("lotka_volterra", include_str!("../systems/lotka_volterra.ode"), &["oscillator", "ecology"]),
    ("sir", include_str!("../systems/sir.ode"), &["epidemic"]),
    ("vanderpol", include_str!("../systems/vanderpol.ode"), &["oscillator", "relaxation"]),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SystemSource {
    Builtin,
    DslFile(PathBuf),
}

impl std::fmt::Display for SystemSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SystemSource::Builtin => f.write_str("builtin"),
            SystemSource::DslFile(p) => write!(f, "dsl_file({})", p.display()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RegistryEntry {
    pub spec: Arc<SystemSpec>,
    pub source: SystemSource,
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemSummary {
    pub name: String,
    pub channels: usize,
    pub constants: usize,
    pub source: SystemSource,
}

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("no system named `{0}`")]
    NotFound(String),
    #[error("a system named `{0}` is already registered")]
    DuplicateName(String),
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: DslError },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Default)]
pub struct Registry {
    entries: BTreeMap<String, RegistryEntry>,
}

impl Registry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Registry holding only the built-in systems.
    pub fn builtin() -> Self {
        let mut reg = Self::empty();
        for (name, source, tags) in BUILTINS {
            let spec = parse_system(source).unwrap_or_else(|e| panic!("builtin `{name}`: {e}"));
            debug_assert_eq!(&spec.name, name);
            reg.register(spec, SystemSource::Builtin, tags.iter().map(|t| t.to_string()).collect())
                .expect("builtin names are unique");
        }
        reg
    }

    /// Built-ins plus every `*.ode` file in `dir`, loaded in file-name order.
    pub fn with_systems_dir(dir: Option<&Path>) -> Result<Self, RegistryError> {
        let mut reg = Self::builtin();
        if let Some(dir) = dir {
            reg.load_dir(dir)?;
        }
        Ok(reg)
    }

    pub fn register(
        &mut self,
        spec: SystemSpec,
        source: SystemSource,
        tags: Vec<String>,
    ) -> Result<Arc<SystemSpec>, RegistryError> {
        if self.entries.contains_key(&spec.name) {
            return Err(RegistryError::DuplicateName(spec.name));
        }
        let spec = Arc::new(spec);
        self.entries.insert(
            spec.name.clone(),
            RegistryEntry { spec: Arc::clone(&spec), source, tags },
        );
        Ok(spec)
    }

    pub fn load_file(&mut self, path: &Path) -> Result<Arc<SystemSpec>, RegistryError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| RegistryError::Io { path: path.to_path_buf(), source })?;
        let spec = parse_system(&text)
            .map_err(|source| RegistryError::Parse { path: path.to_path_buf(), source })?;
        self.register(spec, SystemSource::DslFile(path.to_path_buf()), Vec::new())
    }

    pub fn load_dir(&mut self, dir: &Path) -> Result<usize, RegistryError> {
        let io = |source| RegistryError::Io { path: dir.to_path_buf(), source };
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(io)?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "ode") && p.is_file())
            .collect();
        paths.sort();
        for path in &paths {
            self.load_file(path)?;
        }
        Ok(paths.len())
    }

    /// Summaries in alphabetical order.
    pub fn list(&self) -> Vec<SystemSummary> {
        self.entries
            .values()
            .map(|e| SystemSummary {
                name: e.spec.name.clone(),
                channels: e.spec.channels,
                constants: e.spec.constants.len(),
                source: e.source.clone(),
            })
            .collect()
    }

    pub fn get(&self, name: &str) -> Result<Arc<SystemSpec>, RegistryError> {
        self.entry(name).map(|e| Arc::clone(&e.spec))
    }

    pub fn entry(&self, name: &str) -> Result<&RegistryEntry, RegistryError> {
        self.entries.get(name).ok_or_else(|| RegistryError::NotFound(name.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::{solve_to_matrix, SolverOptions};

    #[test]
    fn builtin_set() {
        let reg = Registry::builtin();
        let names: Vec<String> = reg.list().into_iter().map(|s| s.name).collect();
        for want in ["lin", "harmonic", "lorenz", "lotka_volterra", "vanderpol", "fitzhugh_nagumo", "sir"] {
            assert!(names.iter().any(|n| n == want), "missing {want}");
        }
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
    }

    #[test]
    fn lookups() {
        let reg = Registry::builtin();
        let lorenz = reg.get("lorenz").unwrap();
        assert_eq!(lorenz.constant_values(), vec![28.0, 10.0, 8.0 / 3.0]);
        let lin = reg.get("lin").unwrap();
        assert_eq!(lin.channels, 1);
        assert_eq!(lin.constant_values(), vec![1.0]);
        assert_eq!(lin.initial_values, vec![1.0]);
        assert!(matches!(reg.get("nope"), Err(RegistryError::NotFound(_))));
    }

    #[test]
    fn loading_dsl_files() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("mysys.ode"),
            "system mysys\nchannels 1\nconstants k=0.5\ninit 2\nd0 = -k * x0\n",
        )
        .unwrap();
        std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        let reg = Registry::with_systems_dir(Some(dir.path())).unwrap();
        let summary = reg.list().into_iter().find(|s| s.name == "mysys").unwrap();
        assert!(matches!(summary.source, SystemSource::DslFile(_)));
        assert_eq!(summary.channels, 1);

        let mut reg = reg;
        let dup = dir.path().join("dup.ode");
        std::fs::write(&dup, include_str!("../systems/lorenz.ode")).unwrap();
        assert!(matches!(reg.load_file(&dup), Err(RegistryError::DuplicateName(n)) if n == "lorenz"));

        let broken = dir.path().join("broken.ode");
        std::fs::write(&broken, "system broken\nchannels 1\ninit 1\nd0 = y\n").unwrap();
        assert!(matches!(reg.load_file(&broken), Err(RegistryError::Parse { .. })));
    }

    #[test]
    fn builtins_solve_at_literature_values() {
        let reg = Registry::builtin();
        for summary in reg.list() {
            let spec = reg.get(&summary.name).unwrap();
            let traj = solve_to_matrix(
                &spec,
                &spec.constant_values(),
                &spec.initial_values,
                spec.default_duration,
                100,
                SolverOptions::default(),
            );
            assert!(traj.is_ok(), "{}: {:?}", summary.name, traj.err());
        }
    }
}
