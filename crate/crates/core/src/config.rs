//! Key=value configuration files mirroring every training hyperparameter.
//!
//! One `key = value` pair per line; `#` starts a comment. Unknown keys are
//! rejected so typos fail loudly. The same serializer feeds the checkpoint
//! config block.

use crate::error::{Error, Result};
use crate::network::{ResNetConfig, UnrollConfig};
use crate::solvers::DCConfig;
use crate::train::{PartitionPolicy, Precision, TrainConfig, TrainMode};
use std::collections::BTreeMap;
use std::fmt::Write as _;

fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Usage(format!("config line {}: expected key = value", lineno + 1))
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn take<T: std::str::FromStr>(
    pairs: &mut BTreeMap<String, String>,
    key: &str,
    default: T,
) -> Result<T> {
    match pairs.remove(key) {
        None => Ok(default),
        Some(raw) => raw
            .parse::<T>()
            .map_err(|_| Error::Usage(format!("config key '{key}': bad value '{raw}'"))),
    }
}

fn take_bool(pairs: &mut BTreeMap<String, String>, key: &str, default: bool) -> Result<bool> {
    match pairs.remove(key) {
        None => Ok(default),
        Some(raw) => match raw.as_str() {
            "true" | "1" => Ok(true),
            "false" | "0" => Ok(false),
            other => Err(Error::Usage(format!("config key '{key}': bad bool '{other}'"))),
        },
    }
}

/// Parse a full training configuration, starting from defaults.
pub fn parse_train_config(text: &str) -> Result<TrainConfig> {
    let mut p = parse_pairs(text)?;
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        learning_rate: take(&mut p, "learning_rate", d.learning_rate)?,
        n_epochs: take(&mut p, "n_epochs", d.n_epochs)?,
        batch_size: take(&mut p, "batch_size", d.batch_size)?,
        adam_beta1: take(&mut p, "adam_beta1", d.adam_beta1)?,
        adam_beta2: take(&mut p, "adam_beta2", d.adam_beta2)?,
        adam_epsilon: take(&mut p, "adam_epsilon", d.adam_epsilon)?,
        precision: take::<Precision>(&mut p, "precision", d.precision)?,
        mode: take::<TrainMode>(&mut p, "mode", d.mode)?,
        partition: PartitionPolicy {
            rho: take(&mut p, "partition.rho", d.partition.rho)?,
            scheme: take(&mut p, "partition.scheme", d.partition.scheme)?,
            gaussian_std_fraction: take(
                &mut p,
                "partition.gaussian_std_fraction",
                d.partition.gaussian_std_fraction,
            )?,
            center_keep: (
                take(&mut p, "partition.center_keep_h", d.partition.center_keep.0)?,
                take(&mut p, "partition.center_keep_w", d.partition.center_keep.1)?,
            ),
            overlap_fraction: take(
                &mut p,
                "partition.overlap_fraction",
                d.partition.overlap_fraction,
            )?,
            per_slice_seed_base: take(
                &mut p,
                "partition.per_slice_seed_base",
                d.partition.per_slice_seed_base,
            )?,
        },
        unroll: UnrollConfig {
            n_unrolls: take(&mut p, "unroll.n_unrolls", d.unroll.n_unrolls)?,
            dc: DCConfig {
                n_cg_iterations: take(
                    &mut p,
                    "unroll.dc.n_cg_iterations",
                    d.unroll.dc.n_cg_iterations,
                )?,
                mu: take(&mut p, "unroll.dc.mu", d.unroll.dc.mu)?,
            },
            weights_shared: take_bool(&mut p, "unroll.weights_shared", d.unroll.weights_shared)?,
        },
        resnet: ResNetConfig {
            n_res_blocks: take(&mut p, "resnet.n_res_blocks", d.resnet.n_res_blocks)?,
            n_channels: take(&mut p, "resnet.n_channels", d.resnet.n_channels)?,
            kernel_size: take(&mut p, "resnet.kernel_size", d.resnet.kernel_size)?,
            scale_c: take(&mut p, "resnet.scale_c", d.resnet.scale_c)?,
            use_bias: take_bool(&mut p, "resnet.use_bias", d.resnet.use_bias)?,
        },
        seed: take(&mut p, "seed", d.seed)?,
        n_val_slices: take(&mut p, "n_val_slices", d.n_val_slices)?,
        freeze_mu: take_bool(&mut p, "freeze_mu", d.freeze_mu)?,
        log_mu_init: take(&mut p, "log_mu_init", d.log_mu_init)?,
        identical_sets: take_bool(&mut p, "identical_sets", d.identical_sets)?,
    };
    if let Some(key) = p.keys().next() {
        return Err(Error::Usage(format!("unknown config key '{key}'")));
    }
    Ok(cfg)
}

/// Serialize a training configuration; inverse of [`parse_train_config`].
pub fn train_config_to_text(cfg: &TrainConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "learning_rate = {}", cfg.learning_rate);
    let _ = writeln!(s, "n_epochs = {}", cfg.n_epochs);
    let _ = writeln!(s, "batch_size = {}", cfg.batch_size);
    let _ = writeln!(s, "adam_beta1 = {}", cfg.adam_beta1);
    let _ = writeln!(s, "adam_beta2 = {}", cfg.adam_beta2);
    let _ = writeln!(s, "adam_epsilon = {}", cfg.adam_epsilon);
    let _ = writeln!(s, "precision = {}", cfg.precision);
    let _ = writeln!(s, "mode = {}", cfg.mode);
    let _ = writeln!(s, "seed = {}", cfg.seed);
    let _ = writeln!(s, "n_val_slices = {}", cfg.n_val_slices);
    let _ = writeln!(s, "freeze_mu = {}", cfg.freeze_mu);
    let _ = writeln!(s, "log_mu_init = {}", cfg.log_mu_init);
    let _ = writeln!(s, "identical_sets = {}", cfg.identical_sets);
    let _ = writeln!(s, "partition.rho = {}", cfg.partition.rho);
    let _ = writeln!(s, "partition.scheme = {}", cfg.partition.scheme);
    let _ = writeln!(
        s,
        "partition.gaussian_std_fraction = {}",
        cfg.partition.gaussian_std_fraction
    );
    let _ = writeln!(s, "partition.center_keep_h = {}", cfg.partition.center_keep.0);
    let _ = writeln!(s, "partition.center_keep_w = {}", cfg.partition.center_keep.1);
    let _ = writeln!(s, "partition.overlap_fraction = {}", cfg.partition.overlap_fraction);
    let _ = writeln!(
        s,
        "partition.per_slice_seed_base = {}",
        cfg.partition.per_slice_seed_base
    );
    s.push_str(&network_config_text(&cfg.resnet, &cfg.unroll));
    s
}

/// The architecture subset of the configuration (checkpoint config block).
pub fn network_config_text(resnet: &ResNetConfig, unroll: &UnrollConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "unroll.n_unrolls = {}", unroll.n_unrolls);
    let _ = writeln!(s, "unroll.dc.n_cg_iterations = {}", unroll.dc.n_cg_iterations);
    let _ = writeln!(s, "unroll.dc.mu = {}", unroll.dc.mu);
    let _ = writeln!(s, "unroll.weights_shared = {}", unroll.weights_shared);
    let _ = writeln!(s, "resnet.n_res_blocks = {}", resnet.n_res_blocks);
    let _ = writeln!(s, "resnet.n_channels = {}", resnet.n_channels);
    let _ = writeln!(s, "resnet.kernel_size = {}", resnet.kernel_size);
    let _ = writeln!(s, "resnet.scale_c = {}", resnet.scale_c);
    let _ = writeln!(s, "resnet.use_bias = {}", resnet.use_bias);
    s
}

/// Parse an architecture block written by [`network_config_text`].
pub fn parse_network_config(text: &str) -> Result<(ResNetConfig, UnrollConfig)> {
    let mut p = parse_pairs(text)?;
    let dr = ResNetConfig::default();
    let du = UnrollConfig::default();
    let unroll = UnrollConfig {
        n_unrolls: take(&mut p, "unroll.n_unrolls", du.n_unrolls)?,
        dc: DCConfig {
            n_cg_iterations: take(&mut p, "unroll.dc.n_cg_iterations", du.dc.n_cg_iterations)?,
            mu: take(&mut p, "unroll.dc.mu", du.dc.mu)?,
        },
        weights_shared: take_bool(&mut p, "unroll.weights_shared", du.weights_shared)?,
    };
    let resnet = ResNetConfig {
        n_res_blocks: take(&mut p, "resnet.n_res_blocks", dr.n_res_blocks)?,
        n_channels: take(&mut p, "resnet.n_channels", dr.n_channels)?,
        kernel_size: take(&mut p, "resnet.kernel_size", dr.kernel_size)?,
        scale_c: take(&mut p, "resnet.scale_c", dr.scale_c)?,
        use_bias: take_bool(&mut p, "resnet.use_bias", dr.use_bias)?,
    };
    if let Some(key) = p.keys().next() {
        return Err(Error::Usage(format!("unknown config key '{key}'")));
    }
    Ok((resnet, unroll))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_defaults_and_overrides() {
        let mut cfg = TrainConfig::default();
        cfg.learning_rate = 5e-4;
        cfg.mode = TrainMode::SupervisedKspace;
        cfg.partition.rho = 0.2;
        cfg.partition.scheme = crate::train::SelectionScheme::Uniform;
        cfg.resnet.n_channels = 8;
        cfg.identical_sets = true;
        let text = train_config_to_text(&cfg);
        let back = parse_train_config(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let cfg = parse_train_config("# comment\n\nseed = 9 # trailing\n").unwrap();
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(parse_train_config("learning_rte = 0.1\n").is_err());
    }

    #[test]
    fn malformed_line_rejected() {
        assert!(parse_train_config("just words\n").is_err());
    }
}
