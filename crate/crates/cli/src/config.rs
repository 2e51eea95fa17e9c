//! Flat `key = value` configuration: defaults, then a config file, then
//! command-line flags.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::parser::ValueSource;
use clap::{Arg, ArgAction, ArgMatches, Command};

use crate::Failure;

/// One configurable key. The flag is `--<name>`.
pub struct Key {
    pub name: &'static str,
    pub default: Option<&'static str>,
    pub help: &'static str,
    pub switch: bool,
    pub hidden: bool,
}

pub const fn opt(name: &'static str, default: Option<&'static str>, help: &'static str) -> Key {
    Key { name, default, help, switch: false, hidden: false }
}

pub const fn switch(name: &'static str, help: &'static str) -> Key {
    Key { name, default: Some("false"), help, switch: true, hidden: false }
}

pub const fn hidden(name: &'static str, default: Option<&'static str>) -> Key {
    Key { name, default, help: "", switch: false, hidden: true }
}

/// Key that is never written to the snapshot.
pub const OUT: &str = "out";
/// File snapshot of the resolved configuration in every output directory.
pub const SNAPSHOT: &str = "config.txt";

/// Keys of one command, in snapshot order.
pub type Keys = &'static [&'static [Key]];

fn all(keys: Keys) -> impl Iterator<Item = &'static Key> {
    keys.iter().flat_map(|g| g.iter())
}

/// Add `--config` and one flag per key to `cmd`.
pub fn command(cmd: Command, keys: Keys) -> Command {
    let cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .value_parser(clap::value_parser!(PathBuf))
            .help("Read key = value settings from FILE; flags override them"),
    );
    all(keys).fold(cmd, |cmd, k| {
        let mut arg = Arg::new(k.name).long(k.name).help(k.help).hide(k.hidden);
        if k.switch {
            arg = arg.action(ArgAction::SetTrue);
        } else {
            arg = arg.value_name("VALUE");
            if let Some(d) = k.default {
                arg = arg.help(format!("{} [default: {d}]", k.help));
            }
        }
        cmd.arg(arg)
    })
}

/// Fully resolved settings of one command.
pub struct Settings {
    keys: Keys,
    values: BTreeMap<&'static str, String>,
}

impl Settings {
    pub fn resolve(keys: Keys, m: &ArgMatches) -> Result<Self, Failure> {
        let mut values: BTreeMap<&'static str, String> =
            all(keys).filter_map(|k| k.default.map(|d| (k.name, d.to_string()))).collect();
        if let Some(path) = m.get_one::<PathBuf>("config") {
            for (k, v) in read_file(keys, path)? {
                values.insert(k, v);
            }
        }
        for k in all(keys) {
            if m.value_source(k.name) != Some(ValueSource::CommandLine) {
                continue;
            }
            let v =
                if k.switch { "true".to_string() } else { m.get_one::<String>(k.name).expect("value present").clone() };
            values.insert(k.name, v);
        }
        Ok(Self { keys, values })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        debug_assert!(all(self.keys).any(|k| k.name == key), "undeclared key {key}");
        self.values.get(key).map(String::as_str)
    }

    pub fn required(&self, key: &str) -> Result<&str, Failure> {
        self.get(key).ok_or_else(|| Failure::Usage(format!("missing required setting --{key}")))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T, Failure>
    where
        T::Err: std::fmt::Display,
    {
        parse_value(key, self.required(key)?)
    }

    pub fn parse_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>, Failure>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key).map(|v| parse_value(key, v)).transpose()
    }

    pub fn flag(&self, key: &str) -> Result<bool, Failure> {
        self.parse(key)
    }

    /// Comma-separated list; empty items are skipped.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, Failure>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .unwrap_or("")
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| parse_value(key, s))
            .collect()
    }

    /// `key = value` lines in declaration order, without `out`.
    pub fn snapshot(&self) -> String {
        let mut s = String::new();
        for k in all(self.keys).filter(|k| k.name != OUT) {
            if let Some(v) = self.values.get(k.name) {
                writeln!(s, "{} = {v}", k.name).expect("writing to a String");
            }
        }
        s
    }

    /// The output directory: `--out`, else `$TGDPO_LAB_OUT/<command>`, else
    /// `tgdpo-lab-out/<command>`.
    pub fn out_dir(&self, command: &str) -> PathBuf {
        match self.get(OUT) {
            Some(o) => PathBuf::from(o),
            None => std::env::var_os("TGDPO_LAB_OUT")
                .map_or_else(|| PathBuf::from("tgdpo-lab-out"), PathBuf::from)
                .join(command),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T, Failure>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| Failure::Usage(format!("invalid value {v:?} for {key}: {e}")))
}

fn read_file(keys: Keys, path: &Path) -> Result<Vec<(&'static str, String)>, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
    parse_text(keys, &text).map_err(|e| match e {
        Failure::Usage(m) => Failure::Usage(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Parse `key = value` lines; `#` starts a comment.
pub fn parse_text(keys: Keys, text: &str) -> Result<Vec<(&'static str, String)>, Failure> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Failure::Usage(format!("line {}: expected key = value", i + 1)));
        };
        let (k, v) = (k.trim(), v.trim());
        let Some(key) = all(keys).find(|key| key.name == k) else {
            return Err(Failure::Usage(format!("line {}: unknown key {k:?}", i + 1)));
        };
        if seen.insert(key.name, ()).is_some() {
            return Err(Failure::Usage(format!("line {}: duplicate key {k:?}", i + 1)));
        }
        out.push((key.name, v.to_string()));
    }
    Ok(out)
}
