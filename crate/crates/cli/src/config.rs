//! Flat `key = value` experiment configuration.
//!
//! A file is a list of `key = value` lines. Blank lines and lines starting
//! with `#` or `;` are ignored. `[section]` headers group keys for reading;
//! a key placed under a header must belong to that section, and keys before
//! the first header may be any key. List values are comma separated; seed
//! lists also accept inclusive ranges such as `1-10`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dqfleet::algebra::Vec3;
use dqfleet::graph::FleetGraph;
use dqfleet::sim::{Experiment, NoiseSpec, ScenarioConfig, ScenarioKind};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },

    #[error("unknown key `{key}` (nearest valid key: `{nearest}`); valid keys: {valid}")]
    UnknownKey { key: String, nearest: &'static str, valid: String },

    #[error("unknown section `[{section}]` (nearest: `[{nearest}]`)")]
    UnknownSection { section: String, nearest: &'static str },

    #[error("key `{key}` belongs in section [{expected}], found under [{found}]")]
    WrongSection { key: String, expected: &'static str, found: String },

    #[error("key `{key}` is set twice (lines {first} and {second})")]
    Duplicate { key: String, first: usize, second: usize },

    #[error("key `{key}`: cannot parse `{value}` as {expected}")]
    Type { key: String, value: String, expected: &'static str },

    #[error("key `{key}`: {msg}")]
    Invalid { key: String, msg: String },

    #[error(transparent)]
    Sim(#[from] dqfleet::Error),
}

/// A recognised configuration key.
pub struct Key {
    pub name: &'static str,
    pub section: &'static str,
    pub help: &'static str,
}

const fn key(name: &'static str, section: &'static str, help: &'static str) -> Key {
    Key { name, section, help }
}

pub const SECTIONS: [&str; 7] = ["run", "fleet", "noise", "consensus", "dynamics", "asteroid", "metrics"];

pub const KEYS: &[Key] = &[
    key("scenario", "run", "sweep, asteroid, leaders or single-demo; must match the command"),
    key("seeds", "run", "seed list, e.g. `1, 2, 5-8` (default 1)"),
    key("out", "run", "output directory (default `results`)"),
    key("version", "run", "version that wrote a manifest; informational"),
    key("sats", "fleet", "number of satellites (default 10; 1 for single-demo)"),
    key("duration", "fleet", "simulated time in s (default 60; 100 for asteroid)"),
    key("rate", "fleet", "filter and sensor rate in Hz (default 20)"),
    key("edge_probability", "fleet", "edge probability of the random graph (default 0.5)"),
    key("graph", "fleet", "edge-list file with a fixed topology, relative to the config file"),
    key("snr", "noise", "signal-to-noise ratio list (default 1000)"),
    key("position_scale", "noise", "position noise is position_scale / snr, in m (default 10)"),
    key("attitude_var", "noise", "attitude measurement variance; replaces snr (asteroid default 2.79e-7)"),
    key("position_var", "noise", "position measurement variance in m^2 (asteroid default 8.55e-4)"),
    key("bias_attitude_var", "noise", "attitude bias drift variance (asteroid default 1e-6)"),
    key("bias_position_var", "noise", "position bias drift variance (asteroid default 1e-4)"),
    key("noiseless", "noise", "sensors and bias drift are noise free (default false)"),
    key("exact_init", "noise", "filters start at the true state (default false)"),
    key("inflate_relative", "noise", "add linearization noise to relative rows (default true)"),
    key(
        "mode",
        "consensus",
        "consensus mode list: none, soft, hardsoft (default all; hardsoft for asteroid and leaders)",
    ),
    key("leaders", "consensus", "list of leader fractions in (0, 1] (default 1; 0.5 for leaders)"),
    key("stubborn", "consensus", "list of stubborn-leader flags (default false)"),
    key("mass", "dynamics", "satellite mass in kg (default 100)"),
    key("inertia", "dynamics", "principal moments of inertia in kg m^2 (default 10, 10, 10; 10, 12, 14 for asteroid)"),
    key("position_spread", "dynamics", "std of initial positions in m (default 10)"),
    key("velocity_sensing", "dynamics", "satellites measure their velocity (default false; true for asteroid)"),
    key("lattice_radius", "asteroid", "radius of the target sphere in m (default 25)"),
    key("start_distance", "asteroid", "distance of the start plane in m (default 40)"),
    key("grid_spacing", "asteroid", "spacing of the start grid in m (default 5)"),
    key("lqr_state_weight", "asteroid", "LQR state weight (default 0.1)"),
    key("lqr_input_weight", "asteroid", "LQR input weight (default 0.1)"),
    key("edge_window", "metrics", "length of the first and last asteroid windows in s (default 10)"),
    key("steady_state_samples", "metrics", "final samples in the leaders and single-demo metrics (default 600)"),
];

fn lookup(name: &str) -> Option<&'static Key> {
    KEYS.iter().find(|k| k.name == name)
}

fn nearest<'a>(name: &str, candidates: impl Iterator<Item = &'a str>) -> &'a str {
    candidates.min_by_key(|c| strsim::levenshtein(name, c)).unwrap_or_default()
}

fn unknown_key(name: &str) -> ConfigError {
    ConfigError::UnknownKey {
        key: name.to_string(),
        nearest: nearest(name, KEYS.iter().map(|k| k.name)),
        valid: KEYS.iter().map(|k| k.name).collect::<Vec<_>>().join(", "),
    }
}

/// Raw entries of a config file, keyed by name, with their line numbers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Entries(BTreeMap<String, (String, usize)>);

impl Entries {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut out = BTreeMap::new();
        let mut section: Option<String> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| ConfigError::Syntax {
                        line: line_no,
                        msg: format!("unterminated section header `{line}`"),
                    })?
                    .trim();
                if !SECTIONS.contains(&name) {
                    return Err(ConfigError::UnknownSection {
                        section: name.to_string(),
                        nearest: nearest(name, SECTIONS.iter().copied()),
                    });
                }
                section = Some(name.to_string());
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: line_no,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            let k = k.trim();
            let spec = lookup(k).ok_or_else(|| unknown_key(k))?;
            if let Some(s) = &section {
                if s != spec.section {
                    return Err(ConfigError::WrongSection {
                        key: k.to_string(),
                        expected: spec.section,
                        found: s.clone(),
                    });
                }
            }
            if let Some((_, first)) = out.get(k) {
                return Err(ConfigError::Duplicate { key: k.to_string(), first: *first, second: line_no });
            }
            out.insert(k.to_string(), (v.trim().to_string(), line_no));
        }
        Ok(Entries(out))
    }

    /// Set `key` to `value`, replacing any value from the file.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        lookup(key).ok_or_else(|| unknown_key(key))?;
        self.0.insert(key.to_string(), (value.to_string(), 0));
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(|(v, _)| v.as_str())
    }
}

fn scalar<T: FromStr>(key: &str, value: &str, expected: &'static str) -> Result<T, ConfigError> {
    value.trim().parse().map_err(|_| ConfigError::Type { key: key.to_string(), value: value.to_string(), expected })
}

fn list<T: FromStr>(key: &str, value: &str, expected: &'static str) -> Result<Vec<T>, ConfigError> {
    let items: Vec<&str> = value.split(',').map(str::trim).collect();
    if items.iter().any(|s| s.is_empty()) {
        return Err(ConfigError::Type { key: key.to_string(), value: value.to_string(), expected });
    }
    items.into_iter().map(|s| scalar(key, s, expected)).collect()
}

fn seeds(key: &str, value: &str) -> Result<Vec<u64>, ConfigError> {
    const EXPECTED: &str = "a list of seeds or seed ranges";
    let mut out = Vec::new();
    for item in value.split(',').map(str::trim) {
        match item.split_once('-') {
            Some((a, b)) => {
                let (a, b): (u64, u64) = (scalar(key, a, EXPECTED)?, scalar(key, b, EXPECTED)?);
                if b < a {
                    return Err(ConfigError::Invalid {
                        key: key.to_string(),
                        msg: format!("empty seed range `{item}`"),
                    });
                }
                out.extend(a..=b);
            }
            None => out.push(scalar(key, item, EXPECTED)?),
        }
    }
    Ok(out)
}

/// A fully resolved experiment together with where its outputs go.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub out: Option<PathBuf>,
    /// Version recorded in a manifest, if the config came from one.
    pub version: Option<String>,
}

/// Read `path` (if any), apply `overrides` on top and resolve every key
/// against the defaults of `kind`.
pub fn parse_config(
    path: Option<&Path>,
    kind: ScenarioKind,
    overrides: &[(&str, String)],
) -> Result<RunConfig, ConfigError> {
    let mut entries = match path {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).map_err(|source| ConfigError::Io { path: p.to_path_buf(), source })?;
            Entries::parse(&text)?
        }
        None => Entries::default(),
    };
    for (k, v) in overrides {
        entries.set(k, v)?;
    }
    let base_dir = path.and_then(Path::parent).unwrap_or_else(|| Path::new(""));
    resolve(&entries, kind, base_dir)
}

/// Turn parsed entries into a run configuration. Relative graph paths are
/// taken from `base_dir`.
pub fn resolve(entries: &Entries, kind: ScenarioKind, base_dir: &Path) -> Result<RunConfig, ConfigError> {
    if let Some(s) = entries.get("scenario") {
        let named: ScenarioKind = scalar("scenario", s, "a scenario name")?;
        if named != kind {
            return Err(ConfigError::Invalid {
                key: "scenario".into(),
                msg: format!("config is for `{named}` but the command is `{kind}`"),
            });
        }
    }
    let mut cfg = ScenarioConfig::new(kind);
    let f64_key = |k: &str, dst: &mut f64| -> Result<(), ConfigError> {
        if let Some(v) = entries.get(k) {
            *dst = scalar(k, v, "a number")?;
        }
        Ok(())
    };
    let bool_key = |k: &str, dst: &mut bool| -> Result<(), ConfigError> {
        if let Some(v) = entries.get(k) {
            *dst = scalar(k, v, "`true` or `false`")?;
        }
        Ok(())
    };
    if let Some(v) = entries.get("sats") {
        cfg.n_sats = scalar("sats", v, "a non-negative integer")?;
    }
    f64_key("duration", &mut cfg.duration)?;
    f64_key("rate", &mut cfg.rate)?;
    f64_key("edge_probability", &mut cfg.edge_probability)?;
    f64_key("mass", &mut cfg.mass)?;
    f64_key("position_spread", &mut cfg.position_spread)?;
    f64_key("lattice_radius", &mut cfg.lattice_radius)?;
    f64_key("start_distance", &mut cfg.start_distance)?;
    f64_key("grid_spacing", &mut cfg.grid_spacing)?;
    f64_key("lqr_state_weight", &mut cfg.lqr_state_weight)?;
    f64_key("lqr_input_weight", &mut cfg.lqr_input_weight)?;
    f64_key("edge_window", &mut cfg.edge_window)?;
    bool_key("noiseless", &mut cfg.noiseless)?;
    bool_key("exact_init", &mut cfg.exact_init)?;
    bool_key("inflate_relative", &mut cfg.inflate_relative)?;
    bool_key("velocity_sensing", &mut cfg.velocity_sensing)?;
    if let Some(v) = entries.get("steady_state_samples") {
        cfg.steady_state_samples = scalar("steady_state_samples", v, "a non-negative integer")?;
    }
    if let Some(v) = entries.get("inertia") {
        let m: Vec<f64> = list("inertia", v, "three numbers")?;
        if m.len() != 3 {
            return Err(ConfigError::Type { key: "inertia".into(), value: v.into(), expected: "three numbers" });
        }
        cfg.inertia = Vec3::new(m[0], m[1], m[2]);
    }
    if let Some(v) = entries.get("mode") {
        cfg.modes = list("mode", v, "a list of none, soft, hardsoft")?;
        cfg.modes.sort();
        cfg.modes.dedup();
    }
    if let Some(v) = entries.get("graph") {
        let p = base_dir.join(v);
        let text = std::fs::read_to_string(&p).map_err(|source| ConfigError::Io { path: p.clone(), source })?;
        cfg.graph = Some(FleetGraph::parse_edge_list(&text)?);
        if entries.get("sats").is_none() {
            cfg.n_sats = cfg.graph.as_ref().map_or(cfg.n_sats, FleetGraph::n_nodes);
        }
    }

    let var_keys = ["attitude_var", "position_var", "bias_attitude_var", "bias_position_var"];
    let any_var = var_keys.iter().any(|k| entries.get(k).is_some());
    let mut snrs = Vec::new();
    if any_var && entries.get("snr").is_some() {
        return Err(ConfigError::Invalid {
            key: "snr".into(),
            msg: "cannot be combined with the *_var noise keys".into(),
        });
    }
    if any_var || (entries.get("snr").is_none() && matches!(cfg.noise, NoiseSpec::Variances { .. })) {
        let mut v = match ScenarioConfig::new(ScenarioKind::Asteroid).noise {
            NoiseSpec::Variances { attitude, position, bias_attitude, bias_position } => {
                [attitude, position, bias_attitude, bias_position]
            }
            NoiseSpec::Snr { .. } => unreachable!("asteroid noise is given as variances"),
        };
        if let NoiseSpec::Variances { attitude, position, bias_attitude, bias_position } = cfg.noise {
            v = [attitude, position, bias_attitude, bias_position];
        }
        for (k, dst) in var_keys.iter().zip(v.iter_mut()) {
            f64_key(k, dst)?;
        }
        cfg.noise = NoiseSpec::Variances { attitude: v[0], position: v[1], bias_attitude: v[2], bias_position: v[3] };
    } else {
        let mut scale = match cfg.noise {
            NoiseSpec::Snr { position_scale, .. } => position_scale,
            NoiseSpec::Variances { .. } => 10.0,
        };
        f64_key("position_scale", &mut scale)?;
        snrs = match entries.get("snr") {
            Some(v) => list("snr", v, "a list of numbers")?,
            None => cfg.noise.snr().into_iter().collect(),
        };
        cfg.noise = NoiseSpec::Snr { snr: snrs[0], position_scale: scale };
    }

    let leader_fractions = match entries.get("leaders") {
        Some(v) => list("leaders", v, "a list of numbers")?,
        None => vec![cfg.leader_fraction],
    };
    let stubborn = match entries.get("stubborn") {
        Some(v) => list("stubborn", v, "a list of `true` or `false`")?,
        None => vec![cfg.stubborn],
    };
    cfg.leader_fraction = leader_fractions[0];
    cfg.stubborn = stubborn[0];
    let seeds = match entries.get("seeds") {
        Some(v) => seeds("seeds", v)?,
        None => vec![1],
    };

    let experiment = Experiment { base: cfg, snrs, leader_fractions, stubborn, seeds };
    experiment.validate()?;
    Ok(RunConfig {
        experiment,
        out: entries.get("out").map(PathBuf::from),
        version: entries.get("version").map(str::to_string),
    })
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

/// Render a resolved configuration as a config file that reproduces it.
/// A fixed topology is referenced as `graph_file`, which the caller writes
/// next to the manifest.
pub fn manifest_text(run: &RunConfig, out: &Path, graph_file: Option<&str>) -> String {
    let e = &run.experiment;
    let c = &e.base;
    let mut s = String::new();
    let mut put = |section: &str, pairs: Vec<(&str, String)>| {
        let _ = writeln!(s, "[{section}]");
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        let _ = writeln!(s);
    };
    put(
        "run",
        vec![
            ("scenario", c.kind.to_string()),
            ("seeds", join(&e.seeds)),
            ("out", out.display().to_string()),
            ("version", env!("CARGO_PKG_VERSION").to_string()),
        ],
    );
    let mut fleet = vec![
        ("sats", c.n_sats.to_string()),
        ("duration", c.duration.to_string()),
        ("rate", c.rate.to_string()),
        ("edge_probability", c.edge_probability.to_string()),
    ];
    if let Some(g) = graph_file {
        fleet.push(("graph", g.to_string()));
    }
    put("fleet", fleet);
    let mut noise = match c.noise {
        NoiseSpec::Snr { position_scale, .. } => {
            vec![("snr", join(&e.snrs)), ("position_scale", position_scale.to_string())]
        }
        NoiseSpec::Variances { attitude, position, bias_attitude, bias_position } => vec![
            ("attitude_var", attitude.to_string()),
            ("position_var", position.to_string()),
            ("bias_attitude_var", bias_attitude.to_string()),
            ("bias_position_var", bias_position.to_string()),
        ],
    };
    noise.extend([
        ("noiseless", c.noiseless.to_string()),
        ("exact_init", c.exact_init.to_string()),
        ("inflate_relative", c.inflate_relative.to_string()),
    ]);
    put("noise", noise);
    put(
        "consensus",
        vec![
            ("mode", join(&c.modes.iter().map(|m| m.name()).collect::<Vec<_>>())),
            ("leaders", join(&e.leader_fractions)),
            ("stubborn", join(&e.stubborn)),
        ],
    );
    put(
        "dynamics",
        vec![
            ("mass", c.mass.to_string()),
            ("inertia", join(&[c.inertia.x, c.inertia.y, c.inertia.z])),
            ("position_spread", c.position_spread.to_string()),
            ("velocity_sensing", c.velocity_sensing.to_string()),
        ],
    );
    put(
        "asteroid",
        vec![
            ("lattice_radius", c.lattice_radius.to_string()),
            ("start_distance", c.start_distance.to_string()),
            ("grid_spacing", c.grid_spacing.to_string()),
            ("lqr_state_weight", c.lqr_state_weight.to_string()),
            ("lqr_input_weight", c.lqr_input_weight.to_string()),
        ],
    );
    put(
        "metrics",
        vec![("edge_window", c.edge_window.to_string()), ("steady_state_samples", c.steady_state_samples.to_string())],
    );
    s.truncate(s.trim_end().len());
    s.push('\n');
    s
}
