use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use tcgpn::config::RunConfig;
use tcgpn::{Error, Result};

/// Directory holding everything one subcommand invocation produced.
pub struct RunDir {
    pub path: PathBuf,
    inputs: Vec<(String, String)>,
    log: fs::File,
    quiet: bool,
}

impl RunDir {
    /// Creates `out` (or `runs/<timestamp>-s<seed>`), adding a numeric
    /// suffix when the directory already exists, and writes the resolved
    /// config, seed and command line.
    pub fn create(out: Option<&Path>, cfg: &RunConfig, argv: &[String], quiet: bool) -> Result<Self> {
        let base = match out {
            Some(p) => p.to_path_buf(),
            None => {
                let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
                PathBuf::from("runs").join(format!("{stamp}-s{}", cfg.int("seed")))
            }
        };
        let mut path = base.clone();
        let mut n = 1;
        while path.exists() {
            path = PathBuf::from(format!("{}-{n}", base.display()));
            n += 1;
        }
        fs::create_dir_all(&path).map_err(|e| io(&path, e))?;
        write(&path.join("config.toml"), cfg.to_toml().as_bytes())?;
        write(&path.join("seed.txt"), format!("{}\n", cfg.int("seed")).as_bytes())?;
        write(&path.join("command.txt"), format!("{}\n", shell_join(argv)).as_bytes())?;
        let log_path = path.join("log.txt");
        let log = fs::File::create(&log_path).map_err(|e| io(&log_path, e))?;
        Ok(RunDir {
            path,
            inputs: Vec::new(),
            log,
            quiet,
        })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Records the content hash of an input file.
    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| io(path, e))?;
        self.inputs.push((hex(&Sha256::digest(&bytes)), path.display().to_string()));
        self.flush_inputs()
    }

    /// Records a generated input by the hash of its description.
    pub fn add_generated(&mut self, label: &str, description: &str) -> Result<()> {
        self.inputs.push((hex(&Sha256::digest(description.as_bytes())), label.to_string()));
        self.flush_inputs()
    }

    fn flush_inputs(&self) -> Result<()> {
        let mut text = String::new();
        for (h, p) in &self.inputs {
            let _ = writeln!(text, "{h}  {p}");
        }
        write(&self.file("inputs.sha256"), text.as_bytes())
    }

    pub fn log(&mut self, line: &str) {
        let _ = writeln!(self.log, "{line}");
        if !self.quiet {
            eprintln!("{line}");
        }
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<PathBuf> {
        let p = self.file(name);
        write(&p, contents.as_bytes())?;
        Ok(p)
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| io(path, e))
}

fn io(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn shell_join(argv: &[String]) -> String {
    argv.iter()
        .map(|a| {
            if !a.is_empty() && a.chars().all(|c| c.is_ascii_alphanumeric() || "-_./=,:".contains(c)) {
                a.clone()
            } else {
                format!("'{}'", a.replace('\'', "'\\''"))
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}
