//! The single key namespace shared by config files, `--set` overrides and
//! `--help` listings of the training, sweep and inference commands.

use std::path::Path;

use anyhow::{anyhow, Context, Result};
use polyp_core::backbone::{Architecture, TrainConfig};
use polyp_core::cascade::CascadeConfig;
use polyp_core::config::{apply_kv, KvConfig};
use polyp_core::pipeline::CropPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchKind {
    Linear,
    SmallResNet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub cascade: CascadeConfig,
    pub train: TrainConfig,
    pub arch: ArchKind,
    /// Stage widths; used by `small_resnet` only.
    pub widths: [usize; 2],
    /// Crops sampled per parent when a scale is cut from larger patches;
    /// 0 keeps every tile.
    pub crops_per_parent: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let widths = match Architecture::default() {
            Architecture::SmallResNet { widths } => widths,
            Architecture::Linear => unreachable!("default architecture is a residual network"),
        };
        RunConfig {
            cascade: CascadeConfig::default(),
            train: TrainConfig::default(),
            arch: ArchKind::SmallResNet,
            widths,
            crops_per_parent: 0,
        }
    }
}

impl RunConfig {
    pub fn crops(&self) -> CropPolicy {
        match self.crops_per_parent {
            0 => CropPolicy::All,
            k => CropPolicy::PerParent(k),
        }
    }

    pub fn architecture(&self) -> Architecture {
        match self.arch {
            ArchKind::Linear => Architecture::Linear,
            ArchKind::SmallResNet => Architecture::SmallResNet { widths: self.widths },
        }
    }
}

impl KvConfig for RunConfig {
    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        match key {
            "arch" => {
                self.arch = match value {
                    "linear" => ArchKind::Linear,
                    "small_resnet" => ArchKind::SmallResNet,
                    other => return Err(format!("arch must be `linear` or `small_resnet`, got `{other}`")),
                }
            }
            "widths" => {
                let parsed: Vec<usize> = value
                    .split(',')
                    .map(|w| {
                        w.trim()
                            .parse()
                            .map_err(|_| format!("widths: `{value}` is not two integers"))
                    })
                    .collect::<std::result::Result<_, _>>()?;
                let [a, b] = parsed[..] else {
                    return Err(format!("widths: expected two integers, got `{value}`"));
                };
                self.widths = [a, b];
            }
            "crops_per_parent" => {
                self.crops_per_parent = value
                    .parse()
                    .map_err(|_| format!("crops_per_parent: `{value}` is not a non-negative integer"))?
            }
            _ => {
                let in_train = self.train.entries().iter().any(|(k, _)| *k == key);
                if in_train {
                    self.train.set(key, value)?
                } else {
                    self.cascade
                        .set(key, value)
                        .map_err(|_| format!("unknown config key `{key}`"))?
                }
            }
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let mut out = self.cascade.entries();
        out.extend(self.train.entries());
        let arch = match self.arch {
            ArchKind::Linear => "linear",
            ArchKind::SmallResNet => "small_resnet",
        };
        out.push(("arch", arch.to_string()));
        out.push(("widths", format!("{},{}", self.widths[0], self.widths[1])));
        out.push(("crops_per_parent", self.crops_per_parent.to_string()));
        out
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.widths.contains(&0) {
            return Err("widths must be positive".into());
        }
        self.cascade.validate()?;
        self.train.validate()
    }
}

/// Defaults, then the config file, then each `key=value` override.
pub fn resolve<T: KvConfig + Default>(file: Option<&Path>, overrides: &[String]) -> Result<T> {
    let mut text = match file {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| polyp_core::Error::Io {
                path: p.to_path_buf(),
                source: e,
            })
            .with_context(|| "reading config")?,
        None => String::new(),
    };
    text.push('\n');
    for o in overrides {
        if !o.contains('=') {
            return Err(anyhow!(polyp_core::Error::InvalidArgument(format!(
                "override `{o}` is not key=value"
            ))));
        }
        text.push_str(o);
        text.push('\n');
    }
    let mut cfg = T::default();
    apply_kv(&mut cfg, &text).map_err(polyp_core::Error::InvalidArgument)?;
    Ok(cfg)
}

/// `key = default` lines for `--help`.
pub fn defaults_help<T: KvConfig + Default>(title: &str) -> String {
    let mut s = format!("{title} (config file keys or --set key=value; defaults shown):\n");
    for (k, v) in T::default().entries() {
        s.push_str(&format!("  {k} = {v}\n"));
    }
    s
}
